#pragma once

#include <stdexcept>
#include <string>

namespace rog {

// Invalid input: malformed files, bad arguments, contract violations.
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor or array extents that do not line up.
class ShapeError : public InputError {
public:
    using InputError::InputError;
};

// Non-finite values, failed optimizations, impossible numerical requests.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace rog
