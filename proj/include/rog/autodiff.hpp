#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <new>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include "rog/error.hpp"

// Minimal dense tensors with tape-free reverse-mode differentiation: every
// result node keeps its parents and a closure that pushes its gradient into
// them; backward() walks the graph in reverse topological order.
namespace rog::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t k = 0; k < s.size(); ++k) os << (k ? ", " : "") << s[k];
    os << ']';
    return os.str();
}

inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Over-aligned storage so vectorized kernels see the same alignment on every
// run; Eigen's reductions peel differently for different start addresses,
// which would otherwise make results depend on where malloc placed a buffer.
inline constexpr std::size_t kBufferAlignment = 64;

template <typename T>
struct AlignedAllocator {
    using value_type = T;
    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kBufferAlignment}));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kBufferAlignment}); }
    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct Node {
    Shape shape;
    Buffer<T> value;
    Buffer<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
    std::uint64_t id = 0;

    Buffer<T>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad;
    }
};

inline std::uint64_t next_node_id() {
    thread_local std::uint64_t counter = 0;
    return ++counter;
}

template <typename T>
class Tensor {
public:
    using NodePtr = std::shared_ptr<Node<T>>;

    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor from(Shape shape, std::span<const T> values, bool requires_grad = false) {
        return from(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad);
    }
    static Tensor from(Shape shape, std::initializer_list<T> values, bool requires_grad = false) {
        return from(std::move(shape), Buffer<T>(values), requires_grad);
    }
    static Tensor from(Shape shape, const std::vector<T>& values, bool requires_grad = false) {
        return from(std::move(shape), std::span<const T>(values), requires_grad);
    }
    static Tensor from(Shape shape, Buffer<T> values, bool requires_grad = false) {
        if (numel_of(shape) != values.size())
            throw ShapeError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                             shape_str(shape));
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        n->requires_grad = requires_grad;
        n->id = next_node_id();
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto count = numel_of(shape);
        return from(std::move(shape), Buffer<T>(count, T(0)), requires_grad);
    }

    static Tensor scalar(T v) { return from({}, {v}); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(int axis) const {
        const int r = static_cast<int>(rank());
        return node_->shape[static_cast<std::size_t>(axis < 0 ? axis + r : axis)];
    }
    std::size_t numel() const { return node_->value.size(); }
    std::span<const T> data() const { return node_->value; }
    std::span<T> mutable_data() { return node_->value; }
    std::span<const T> grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_->requires_grad; }
    void zero_grad() { node_->grad.clear(); }
    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }
    std::uint64_t id() const { return node_->id; }
    Node<T>* node() const { return node_.get(); }
    const NodePtr& ptr() const { return node_; }

    // Copy of the values without graph history.
    Tensor detach() const { return from(shape(), node_->value, false); }

private:
    NodePtr node_;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapR = Eigen::Map<const RowMat<T>>;

// dst (+)= a * b.
template <typename Dst, typename A, typename B>
void gemm(Dst&& dst, const A& a, const B& b, bool accumulate) {
    if (accumulate)
        dst.noalias() += a * b;
    else
        dst.noalias() = a * b;
}

// Builds a result node; records parents and the backward closure only when
// recording is on and some parent needs a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, Buffer<T> value, std::initializer_list<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->id = next_node_id();
    if (grad_enabled()) {
        bool any = false;
        for (const auto& p : parents) any = any || p.requires_grad();
        if (any) {
            n->requires_grad = true;
            for (const auto& p : parents) n->parents.push_back(p.ptr());
            n->backward = std::move(backward);
        }
    }
    return Tensor<T>(std::move(n));
}

template <typename T>
Tensor<T> make_result(Shape shape, Buffer<T> value, const std::vector<Tensor<T>>& parents,
                      std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->id = next_node_id();
    if (grad_enabled()) {
        bool any = false;
        for (const auto& p : parents) any = any || p.requires_grad();
        if (any) {
            n->requires_grad = true;
            for (const auto& p : parents) n->parents.push_back(p.ptr());
            n->backward = std::move(backward);
        }
    }
    return Tensor<T>(std::move(n));
}

template <typename T>
bool wants_grad(const Node<T>* n) {
    return n->requires_grad;
}

}  // namespace detail

// Reverse accumulation from a scalar loss.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ShapeError("backward() needs a scalar loss");
    if (!loss.requires_grad()) throw InputError("backward(): loss is detached from every parameter");
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
    seen.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->grad_buffer().assign(1, T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise

// a + b, where b's shape equals a's shape or a trailing suffix of it.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sb.size() > sa.size() || !std::equal(sb.rbegin(), sb.rend(), sa.rbegin()))
        throw ShapeError("add: cannot broadcast " + shape_str(sb) + " onto " + shape_str(sa));
    const std::size_t inner = b.numel();
    Buffer<T> out(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (std::size_t o = 0; o < out.size(); o += inner)
        for (std::size_t k = 0; k < inner; ++k) out[o + k] += bd[k];
    return detail::make_result<T>(sa, std::move(out), {a, b}, [inner](Node<T>& self) {
        Node<T>* pa = self.parents[0].get();
        Node<T>* pb = self.parents[1].get();
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t o = 0; o < self.grad.size(); o += inner)
                for (std::size_t k = 0; k < inner; ++k) g[k] += self.grad[o + k];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Buffer<T> out(a.numel());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = a.data()[k] - b.data()[k];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        Node<T>* pa = self.parents[0].get();
        Node<T>* pb = self.parents[1].get();
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t k = 0; k < g.size(); ++k) g[k] -= self.grad[k];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Buffer<T> out(a.numel());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = a.data()[k] * b.data()[k];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        Node<T>* pa = self.parents[0].get();
        Node<T>* pb = self.parents[1].get();
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k] * pb->value[k];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k] * pa->value[k];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    Buffer<T> out(a.numel());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = a.data()[k] * s;
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [s](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k] * s;
    });
}

// Exact (erf) GELU, evaluated with Eigen's vectorized array kernels.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    using CMapA = Eigen::Map<const Arr>;
    const auto n = static_cast<Eigen::Index>(a.numel());
    constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
    const CMapA x(a.data().data(), n);
    auto cdf = std::make_shared<Arr>(T(0.5) * (T(1) + (x * inv_sqrt2).erf()));
    Buffer<T> out(a.numel());
    Eigen::Map<Arr>(out.data(), n) = x * *cdf;
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [cdf, n](Node<T>& self) {
        Node<T>* p = self.parents[0].get();
        const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        const CMapA x(p->value.data(), n);
        const CMapA g_out(self.grad.data(), n);
        Eigen::Map<Arr> g(p->grad_buffer().data(), n);
        g += g_out * (*cdf + x * inv_sqrt2pi * (T(-0.5) * x.square()).exp());
    });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    Buffer<T> out(a.numel());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = T(1) / (T(1) + std::exp(-a.data()[k]));
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k] * self.value[k] * (T(1) - self.value[k]);
    });
}

// x [B, ...] with every entry of item b multiplied by s[b]; s has B entries.
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& s) {
    if (x.rank() == 0 || s.numel() != x.dim(0))
        throw ShapeError("scale_rows: " + shape_str(s.shape()) + " does not match rows of " + shape_str(x.shape()));
    const std::size_t rows = x.dim(0), inner = x.numel() / std::max<std::size_t>(rows, 1);
    Buffer<T> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < inner; ++k) out[r * inner + k] = x.data()[r * inner + k] * s.data()[r];
    return detail::make_result<T>(x.shape(), std::move(out), {x, s}, [rows, inner](Node<T>& self) {
        Node<T>* px = self.parents[0].get();
        Node<T>* ps = self.parents[1].get();
        if (px->requires_grad) {
            auto& g = px->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t k = 0; k < inner; ++k) g[r * inner + k] += self.grad[r * inner + k] * ps->value[r];
        }
        if (ps->requires_grad) {
            auto& g = ps->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t k = 0; k < inner; ++k) g[r] += self.grad[r * inner + k] * px->value[r * inner + k];
        }
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel_of(shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    Buffer<T> out(a.data().begin(), a.data().end());
    return detail::make_result<T>(std::move(shape), std::move(out), {a}, [](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k];
    });
}

namespace detail {
// Source offset for each output element of a permutation.
inline std::vector<std::size_t> permute_map(const Shape& in_shape, const std::vector<std::size_t>& perm, Shape& out_shape) {
    const std::size_t r = in_shape.size();
    if (perm.size() != r) throw ShapeError("permute: permutation rank mismatch");
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t k = r; k-- > 1;) in_stride[k - 1] = in_stride[k] * in_shape[k];
    out_shape.assign(r, 0);
    std::vector<bool> used(r, false);
    for (std::size_t k = 0; k < r; ++k) {
        if (perm[k] >= r || used[perm[k]]) throw ShapeError("permute: invalid permutation");
        used[perm[k]] = true;
        out_shape[k] = in_shape[perm[k]];
    }
    const std::size_t total = numel_of(in_shape);
    std::vector<std::size_t> map(total);
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < total; ++o) {
        map[o] = src;
        for (std::size_t k = r; k-- > 0;) {
            src += in_stride[perm[k]];
            if (++idx[k] < out_shape[k]) break;
            src -= idx[k] * in_stride[perm[k]];
            idx[k] = 0;
        }
    }
    return map;
}
}  // namespace detail

// Output axis k takes input axis perm[k].
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
    Shape out_shape;
    auto map = std::make_shared<std::vector<std::size_t>>(detail::permute_map(a.shape(), perm, out_shape));
    Buffer<T> out(a.numel());
    const auto x = a.data();
    for (std::size_t o = 0; o < out.size(); ++o) out[o] = x[(*map)[o]];
    return detail::make_result<T>(std::move(out_shape), std::move(out), {a}, [map](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < self.grad.size(); ++o) g[(*map)[o]] += self.grad[o];
    });
}

namespace detail {
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& inner) {
    outer = 1;
    inner = 1;
    for (std::size_t k = 0; k < axis; ++k) outer *= s[k];
    for (std::size_t k = axis + 1; k < s.size(); ++k) inner *= s[k];
}
}  // namespace detail

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of nothing");
    Shape shape = parts[0].shape();
    if (axis >= shape.size()) throw ShapeError("concat: axis out of range");
    std::size_t total_axis = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (s.size() != shape.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t k = 0; k < s.size(); ++k)
            if (k != axis && s[k] != shape[k])
                throw ShapeError("concat: " + shape_str(s) + " vs " + shape_str(shape));
        total_axis += s[axis];
    }
    shape[axis] = total_axis;
    std::size_t outer, inner;
    detail::split_axis(shape, axis, outer, inner);
    Buffer<T> out(numel_of(shape));
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(p.shape()[axis] * inner);
    const std::size_t row = total_axis * inner;
    std::size_t col = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto src = parts[k].data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(src.begin() + o * widths[k], widths[k], out.begin() + o * row + col);
        col += widths[k];
    }
    return detail::make_result<T>(std::move(shape), std::move(out), parts, [outer, row, widths](Node<T>& self) {
        std::size_t col = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            Node<T>* p = self.parents[k].get();
            if (p->requires_grad) {
                auto& g = p->grad_buffer();
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t c = 0; c < widths[k]; ++c) g[o * widths[k] + c] += self.grad[o * row + col + c];
            }
            col += widths[k];
        }
    });
}

// Elements [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
    Shape shape = a.shape();
    if (axis >= shape.size() || begin > end || end > shape[axis])
        throw ShapeError("slice: [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " of " + shape_str(shape));
    std::size_t outer, inner;
    detail::split_axis(shape, axis, outer, inner);
    const std::size_t in_row = shape[axis] * inner;
    const std::size_t width = (end - begin) * inner;
    const std::size_t off = begin * inner;
    shape[axis] = end - begin;
    Buffer<T> out(outer * width);
    const auto x = a.data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.begin() + o * in_row + off, width, out.begin() + o * width);
    return detail::make_result<T>(std::move(shape), std::move(out), {a}, [outer, in_row, width, off](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t c = 0; c < width; ++c) g[o * in_row + off + c] += self.grad[o * width + c];
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

// x [..., K] @ w [K, N] (+ b [N]).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b = nullptr) {
    if (w.rank() != 2 || x.rank() < 1 || x.dim(-1) != w.dim(0))
        throw ShapeError("linear: x " + shape_str(x.shape()) + " vs W " + shape_str(w.shape()));
    const std::size_t K = w.dim(0), N = w.dim(1), M = x.numel() / K;
    if (b && (b->rank() != 1 || b->dim(0) != N)) throw ShapeError("linear: bias shape " + shape_str(b->shape()));
    Shape shape = x.shape();
    shape.back() = N;
    Buffer<T> out(M * N);
    {
        detail::MapR<T> C(out.data(), static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(N));
        detail::CMapR<T> A(x.data().data(), static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(K));
        detail::CMapR<T> B(w.data().data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(N));
        C.noalias() = A * B;
        if (b) {
            Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(b->data().data(), static_cast<Eigen::Index>(N));
            C.rowwise() += bias;
        }
    }
    auto bw = [M, K, N](Node<T>& self) {
        Node<T>* px = self.parents[0].get();
        Node<T>* pw = self.parents[1].get();
        detail::CMapR<T> G(self.grad.data(), static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(N));
        if (px->requires_grad) {
            detail::MapR<T> gx(px->grad_buffer().data(), static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(K));
            detail::CMapR<T> W(pw->value.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(N));
            gx.noalias() += G * W.transpose();
        }
        if (pw->requires_grad) {
            detail::MapR<T> gw(pw->grad_buffer().data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(N));
            detail::CMapR<T> X(px->value.data(), static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(K));
            gw.noalias() += X.transpose() * G;
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(self.parents[2]->grad_buffer().data(),
                                                               static_cast<Eigen::Index>(N));
            gb += G.colwise().sum();
        }
    };
    if (b) return detail::make_result<T>(std::move(shape), std::move(out), {x, w, *b}, bw);
    return detail::make_result<T>(std::move(shape), std::move(out), {x, w}, bw);
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return linear(x, w, &b);
}

// Batched a [B, M, K] @ b [B, K, N], or @ b^T when b is [B, N, K].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
        throw ShapeError("bmm: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2);
    const std::size_t N = transpose_b ? b.dim(1) : b.dim(2);
    if ((transpose_b ? b.dim(2) : b.dim(1)) != K)
        throw ShapeError("bmm: inner extents differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const auto m = static_cast<Eigen::Index>(M), k = static_cast<Eigen::Index>(K), n = static_cast<Eigen::Index>(N);
    Buffer<T> out(B * M * N);
    for (std::size_t s = 0; s < B; ++s) {
        detail::MapR<T> C(out.data() + s * M * N, m, n);
        detail::CMapR<T> A(a.data().data() + s * M * K, m, k);
        if (transpose_b)
            detail::gemm(C, A, detail::CMapR<T>(b.data().data() + s * N * K, n, k).transpose(), false);
        else
            detail::gemm(C, A, detail::CMapR<T>(b.data().data() + s * K * N, k, n), false);
    }
    return detail::make_result<T>({B, M, N}, std::move(out), {a, b}, [B, M, K, N, m, k, n, transpose_b](Node<T>& self) {
        Node<T>* pa = self.parents[0].get();
        Node<T>* pb = self.parents[1].get();
        for (std::size_t s = 0; s < B; ++s) {
            detail::CMapR<T> G(self.grad.data() + s * M * N, m, n);
            if (pa->requires_grad) {
                detail::MapR<T> ga(pa->grad_buffer().data() + s * M * K, m, k);
                if (transpose_b)
                    detail::gemm(ga, G, detail::CMapR<T>(pb->value.data() + s * N * K, n, k), true);
                else
                    detail::gemm(ga, G, detail::CMapR<T>(pb->value.data() + s * K * N, k, n).transpose(), true);
            }
            if (pb->requires_grad) {
                detail::CMapR<T> A(pa->value.data() + s * M * K, m, k);
                if (transpose_b) {
                    detail::MapR<T> gb(pb->grad_buffer().data() + s * N * K, n, k);
                    detail::gemm(gb, G.transpose(), A, true);
                } else {
                    detail::MapR<T> gb(pb->grad_buffer().data() + s * K * N, k, n);
                    detail::gemm(gb, A.transpose(), G, true);
                }
            }
        }
    });
}

// Softmax over the last axis (max-subtracted). `key_mask`, when non-empty,
// has one entry per position of the last axis; zero entries get probability 0.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::span<const std::uint8_t> key_mask = {}) {
    const std::size_t L = a.dim(-1);
    if (!key_mask.empty() && key_mask.size() != L) throw ShapeError("softmax: mask length mismatch");
    const std::size_t rows = a.numel() / L;
    Buffer<T> out(a.numel());
    const auto x = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xi = x.data() + r * L;
        T* yi = out.data() + r * L;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t c = 0; c < L; ++c)
            if (key_mask.empty() || key_mask[c]) mx = std::max(mx, xi[c]);
        T sum = 0;
        for (std::size_t c = 0; c < L; ++c) {
            yi[c] = (key_mask.empty() || key_mask[c]) ? std::exp(xi[c] - mx) : T(0);
            sum += yi[c];
        }
        for (std::size_t c = 0; c < L; ++c) yi[c] /= sum;
    }
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [L, rows](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = self.value.data() + r * L;
            const T* dy = self.grad.data() + r * L;
            T dot = 0;
            for (std::size_t c = 0; c < L; ++c) dot += dy[c] * y[c];
            for (std::size_t c = 0; c < L; ++c) g[r * L + c] += y[c] * (dy[c] - dot);
        }
    });
}

// Normalizes the last axis, then applies gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
    const std::size_t D = x.dim(-1);
    if (gain.numel() != D || bias.numel() != D) throw ShapeError("layer_norm: gain/bias size mismatch");
    const std::size_t rows = x.numel() / D;
    Buffer<T> out(x.numel());
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    const auto xv = x.data();
    const auto gv = gain.data();
    const auto bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xi = xv.data() + r * D;
        T mean = 0;
        for (std::size_t c = 0; c < D; ++c) mean += xi[c];
        mean /= static_cast<T>(D);
        T var = 0;
        for (std::size_t c = 0; c < D; ++c) var += (xi[c] - mean) * (xi[c] - mean);
        var /= static_cast<T>(D);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t c = 0; c < D; ++c) {
            const T h = (xi[c] - mean) * is;
            (*xhat)[r * D + c] = h;
            out[r * D + c] = h * gv[c] + bv[c];
        }
    }
    return detail::make_result<T>(x.shape(), std::move(out), {x, gain, bias}, [D, rows, xhat, inv_std](Node<T>& self) {
        Node<T>* px = self.parents[0].get();
        Node<T>* pg = self.parents[1].get();
        Node<T>* pb = self.parents[2].get();
        if (pg->requires_grad || pb->requires_grad) {
            auto& gg = pg->grad_buffer();
            auto& gb = pb->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < D; ++c) {
                    gg[c] += self.grad[r * D + c] * (*xhat)[r * D + c];
                    gb[c] += self.grad[r * D + c];
                }
        }
        if (px->requires_grad) {
            auto& gx = px->grad_buffer();
            std::vector<T> dh(D);
            for (std::size_t r = 0; r < rows; ++r) {
                T mean_dh = 0, mean_dh_h = 0;
                for (std::size_t c = 0; c < D; ++c) {
                    dh[c] = self.grad[r * D + c] * pg->value[c];
                    mean_dh += dh[c];
                    mean_dh_h += dh[c] * (*xhat)[r * D + c];
                }
                mean_dh /= static_cast<T>(D);
                mean_dh_h /= static_cast<T>(D);
                for (std::size_t c = 0; c < D; ++c)
                    gx[r * D + c] += (*inv_std)[r] * (dh[c] - mean_dh - (*xhat)[r * D + c] * mean_dh_h);
            }
        }
    });
}

// Rows of `table` [V, D] selected by `indices`; result [indices.size(), D].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::size_t>& indices) {
    if (table.rank() != 2) throw ShapeError("embedding: table must be 2-D");
    const std::size_t V = table.dim(0), D = table.dim(1);
    Buffer<T> out(indices.size() * D);
    for (std::size_t r = 0; r < indices.size(); ++r) {
        if (indices[r] >= V)
            throw InputError("embedding: index " + std::to_string(indices[r]) + " outside vocabulary of " +
                             std::to_string(V));
        std::copy_n(table.data().begin() + indices[r] * D, D, out.begin() + r * D);
    }
    return detail::make_result<T>({indices.size(), D}, std::move(out), {table}, [indices, D](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < indices.size(); ++r)
            for (std::size_t c = 0; c < D; ++c) g[indices[r] * D + c] += self.grad[r * D + c];
    });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = 0;
    for (T v : a.data()) acc += v;
    return detail::make_result<T>({}, {acc}, {a}, [](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (auto& v : g) v += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// Mean of squared differences.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("mse: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t n = a.numel();
    T acc = 0;
    for (std::size_t k = 0; k < n; ++k) {
        const T e = a.data()[k] - b.data()[k];
        acc += e * e;
    }
    return detail::make_result<T>({}, {acc / static_cast<T>(n)}, {a, b}, [n](Node<T>& self) {
        Node<T>* pa = self.parents[0].get();
        Node<T>* pb = self.parents[1].get();
        const T s = T(2) * self.grad[0] / static_cast<T>(n);
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t k = 0; k < n; ++k) g[k] += s * (pa->value[k] - pb->value[k]);
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t k = 0; k < n; ++k) g[k] -= s * (pa->value[k] - pb->value[k]);
        }
    });
}

// ---------------------------------------------------------------------------
// Geometry ops used by the interaction losses

// Squared distances between point sets: q [B, P, 3], p [B, Q, 3] -> [B, P, Q].
template <typename T>
Tensor<T> pairwise_sqdist(const Tensor<T>& q, const Tensor<T>& p) {
    if (q.rank() != 3 || p.rank() != 3 || q.dim(2) != 3 || p.dim(2) != 3 || q.dim(0) != p.dim(0))
        throw ShapeError("pairwise_sqdist: " + shape_str(q.shape()) + " vs " + shape_str(p.shape()));
    const std::size_t B = q.dim(0), P = q.dim(1), Q = p.dim(1);
    Buffer<T> out(B * P * Q);
    const auto qv = q.data();
    const auto pv = p.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < P; ++i)
            for (std::size_t j = 0; j < Q; ++j) {
                const T* a = qv.data() + (b * P + i) * 3;
                const T* c = pv.data() + (b * Q + j) * 3;
                const T dx = a[0] - c[0], dy = a[1] - c[1], dz = a[2] - c[2];
                out[(b * P + i) * Q + j] = dx * dx + dy * dy + dz * dz;
            }
    return detail::make_result<T>({B, P, Q}, std::move(out), {q, p}, [B, P, Q](Node<T>& self) {
        Node<T>* pq = self.parents[0].get();
        Node<T>* pp = self.parents[1].get();
        Buffer<T>* gq = pq->requires_grad ? &pq->grad_buffer() : nullptr;
        Buffer<T>* gp = pp->requires_grad ? &pp->grad_buffer() : nullptr;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < P; ++i)
                for (std::size_t j = 0; j < Q; ++j) {
                    const T w = T(2) * self.grad[(b * P + i) * Q + j];
                    const T* a = pq->value.data() + (b * P + i) * 3;
                    const T* c = pp->value.data() + (b * Q + j) * 3;
                    for (int k = 0; k < 3; ++k) {
                        const T d = w * (a[k] - c[k]);
                        if (gq) (*gq)[(b * P + i) * 3 + k] += d;
                        if (gp) (*gp)[(b * Q + j) * 3 + k] -= d;
                    }
                }
    });
}

// Applies per-batch affine maps to fixed points: out[b, k] = rot[b] * pts[k] + trans[b].
// pts [K, 3] (constant), rot [B, 3, 3] row-major, trans [B, 3].
template <typename T>
Tensor<T> transform_points(std::span<const T> pts, const Tensor<T>& rot, const Tensor<T>& trans) {
    if (pts.size() % 3 != 0 || rot.rank() != 3 || rot.dim(1) != 3 || rot.dim(2) != 3 || trans.rank() != 2 ||
        trans.dim(1) != 3 || rot.dim(0) != trans.dim(0))
        throw ShapeError("transform_points: rot " + shape_str(rot.shape()) + ", trans " + shape_str(trans.shape()));
    const std::size_t B = rot.dim(0), K = pts.size() / 3;
    auto local = std::make_shared<std::vector<T>>(pts.begin(), pts.end());
    Buffer<T> out(B * K * 3);
    for (std::size_t b = 0; b < B; ++b) {
        const T* R = rot.data().data() + b * 9;
        const T* t = trans.data().data() + b * 3;
        for (std::size_t k = 0; k < K; ++k)
            for (int r = 0; r < 3; ++r)
                out[(b * K + k) * 3 + r] = R[3 * r] * pts[3 * k] + R[3 * r + 1] * pts[3 * k + 1] +
                                           R[3 * r + 2] * pts[3 * k + 2] + t[r];
    }
    return detail::make_result<T>({B, K, 3}, std::move(out), {rot, trans}, [B, K, local](Node<T>& self) {
        Node<T>* pr = self.parents[0].get();
        Node<T>* pt = self.parents[1].get();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t k = 0; k < K; ++k)
                for (int r = 0; r < 3; ++r) {
                    const T g = self.grad[(b * K + k) * 3 + r];
                    if (pr->requires_grad) {
                        auto& gr = pr->grad_buffer();
                        for (int c = 0; c < 3; ++c) gr[b * 9 + 3 * r + c] += g * (*local)[3 * k + c];
                    }
                    if (pt->requires_grad) pt->grad_buffer()[b * 3 + r] += g;
                }
    });
}

}  // namespace rog::ad
