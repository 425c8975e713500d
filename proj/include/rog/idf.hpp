#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <string>
#include <vector>

#include "rog/error.hpp"
#include "rog/motion.hpp"

namespace rog::idf {

using geometry::Vec3;

inline constexpr std::size_t kRows = motion::kNumJoints;         // human joints
inline constexpr std::size_t kCols = motion::kNumKeypoints;      // object keypoints
inline constexpr std::size_t kCellsPerFrame = kRows * kCols;     // 576

enum class Metric { squared, euclidean };

inline Metric parse_metric(const std::string& s) {
    if (s == "squared") return Metric::squared;
    if (s == "euclidean") return Metric::euclidean;
    throw InputError("unknown idf metric '" + s + "' (expected squared|euclidean)");
}

inline const char* to_string(Metric m) { return m == Metric::squared ? "squared" : "euclidean"; }

// Interactive distance field between 24 joints and 24 keypoints over N frames.
// Logical axes are (joint i, keypoint j, frame n); storage is frame-major so a
// frame's 24x24 block is contiguous.
struct IdfTensor {
    std::size_t frames = 0;
    std::vector<double> values;

    IdfTensor() = default;
    explicit IdfTensor(std::size_t n, double fill = 0.0) : frames(n), values(n * kCellsPerFrame, fill) {}

    double& at(std::size_t i, std::size_t j, std::size_t n) { return values[(n * kRows + i) * kCols + j]; }
    double at(std::size_t i, std::size_t j, std::size_t n) const { return values[(n * kRows + i) * kCols + j]; }
    std::span<const double> frame(std::size_t n) const { return {values.data() + n * kCellsPerFrame, kCellsPerFrame}; }
};

namespace detail {
inline void check_tracks(std::span<const Vec3> joints, std::span<const Vec3> keypoints) {
    if (joints.size() % kRows != 0 || keypoints.size() % kCols != 0)
        throw ShapeError("IDF inputs must hold 24 points per frame");
    if (joints.size() / kRows != keypoints.size() / kCols)
        throw ShapeError("IDF inputs disagree on frame count: " + std::to_string(joints.size() / kRows) + " vs " +
                         std::to_string(keypoints.size() / kCols));
}
inline void check_same(const IdfTensor& a, const IdfTensor& b) {
    if (a.frames != b.frames || a.values.size() != b.values.size())
        throw ShapeError("IDF tensors differ in shape: " + std::to_string(a.frames) + " vs " +
                         std::to_string(b.frames) + " frames");
}
}  // namespace detail

// joints and keypoints are frame-major N*24 point tracks.
inline IdfTensor compute_idf(std::span<const Vec3> joints, std::span<const Vec3> keypoints,
                             Metric metric = Metric::squared) {
    detail::check_tracks(joints, keypoints);
    const std::size_t n_frames = joints.size() / kRows;
    IdfTensor d(n_frames);
    for (std::size_t n = 0; n < n_frames; ++n)
        for (std::size_t i = 0; i < kRows; ++i) {
            const Vec3& q = joints[n * kRows + i];
            for (std::size_t j = 0; j < kCols; ++j) {
                const double sq = (q - keypoints[n * kCols + j]).squaredNorm();
                d.at(i, j, n) = metric == Metric::squared ? sq : std::sqrt(sq);
            }
        }
    return d;
}

inline IdfTensor compute_idf(const motion::MotionSequence& seq, Metric metric = Metric::squared) {
    return compute_idf(seq.joint_track(), seq.keypoint_track(), metric);
}

// Mean of squared differences (training loss).
inline double idf_loss(const IdfTensor& pred, const IdfTensor& gt) {
    detail::check_same(pred, gt);
    if (pred.values.empty()) return 0.0;
    double acc = 0.0;
    for (std::size_t k = 0; k < pred.values.size(); ++k) {
        const double e = pred.values[k] - gt.values[k];
        acc += e * e;
    }
    return acc / static_cast<double>(pred.values.size());
}

// Sum of squared differences (guidance objective).
inline double guidance_loss(const IdfTensor& d, const IdfTensor& refined) {
    detail::check_same(d, refined);
    double acc = 0.0;
    for (std::size_t k = 0; k < d.values.size(); ++k) {
        const double e = d.values[k] - refined.values[k];
        acc += e * e;
    }
    return acc;
}

struct IdfGradient {
    std::vector<Vec3> joints;     // N*24
    std::vector<Vec3> keypoints;  // N*24
};

// Contracts the IDF Jacobian with an upstream cotangent of IDF shape.
inline IdfGradient idf_gradient(std::span<const Vec3> joints, std::span<const Vec3> keypoints,
                                const IdfTensor& upstream, Metric metric = Metric::squared) {
    detail::check_tracks(joints, keypoints);
    const std::size_t n_frames = joints.size() / kRows;
    if (upstream.frames != n_frames) throw ShapeError("idf_gradient: upstream frame count mismatch");
    IdfGradient g{std::vector<Vec3>(joints.size(), Vec3::Zero()), std::vector<Vec3>(keypoints.size(), Vec3::Zero())};
    for (std::size_t n = 0; n < n_frames; ++n)
        for (std::size_t i = 0; i < kRows; ++i) {
            const Vec3& q = joints[n * kRows + i];
            for (std::size_t j = 0; j < kCols; ++j) {
                const double w = upstream.at(i, j, n);
                if (w == 0.0) continue;
                const Vec3 diff = q - keypoints[n * kCols + j];
                Vec3 local;
                if (metric == Metric::squared) {
                    local = 2.0 * w * diff;
                } else {
                    const double len = diff.norm();
                    local = len > 0.0 ? Vec3(w * diff / len) : Vec3::Zero();
                }
                g.joints[n * kRows + i] += local;
                g.keypoints[n * kCols + j] -= local;
            }
        }
    return g;
}

// Little-endian float32 export: u32 shape (24, 24, N), then values in
// (i, j, n) row-major order.
inline void write_idf_binary(std::ostream& out, const IdfTensor& d) {
    motion::detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(kRows));
    motion::detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(kCols));
    motion::detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d.frames));
    for (std::size_t i = 0; i < kRows; ++i)
        for (std::size_t j = 0; j < kCols; ++j)
            for (std::size_t n = 0; n < d.frames; ++n) motion::detail::put_le<float>(out, static_cast<float>(d.at(i, j, n)));
}

inline IdfTensor read_idf_binary(std::istream& in) {
    std::uint32_t rows = 0, cols = 0, n = 0;
    if (!motion::detail::get_le(in, rows) || !motion::detail::get_le(in, cols) || !motion::detail::get_le(in, n))
        throw InputError("IDF file: truncated header");
    if (rows != kRows || cols != kCols) throw ShapeError("IDF file: expected 24x24 fields");
    IdfTensor d(n);
    for (std::size_t i = 0; i < kRows; ++i)
        for (std::size_t j = 0; j < kCols; ++j)
            for (std::size_t t = 0; t < n; ++t) {
                float f;
                if (!motion::detail::get_le(in, f)) throw InputError("IDF file: truncated payload");
                d.at(i, j, t) = f;
            }
    return d;
}

// One frame as a 24x24 CSV grid, rows = joints.
inline void write_idf_csv(std::ostream& out, const IdfTensor& d, std::size_t frame) {
    if (frame >= d.frames) throw InputError("IDF CSV export: frame " + std::to_string(frame) + " out of range");
    out << std::setprecision(9);
    for (std::size_t i = 0; i < kRows; ++i) {
        for (std::size_t j = 0; j < kCols; ++j) out << (j ? "," : "") << d.at(i, j, frame);
        out << '\n';
    }
}

}  // namespace rog::idf
