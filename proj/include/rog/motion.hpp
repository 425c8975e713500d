#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rog/error.hpp"
#include "rog/geometry.hpp"

namespace rog::motion {

using geometry::Mat3;
using geometry::Vec3;

inline constexpr std::size_t kNumJoints = 24;
inline constexpr std::size_t kNumRotJoints = 22;
inline constexpr std::size_t kNumKeypoints = geometry::kNumKeypoints;

// Per-frame layout of the 288-vector.
inline constexpr std::size_t kJointsOffset = 0;
inline constexpr std::size_t kRot6dOffset = kJointsOffset + 3 * kNumJoints;       // 72
inline constexpr std::size_t kObjTransOffset = kRot6dOffset + 6 * kNumRotJoints;  // 204
inline constexpr std::size_t kObjRotOffset = kObjTransOffset + 3;                 // 207
inline constexpr std::size_t kObjKeypointOffset = kObjRotOffset + 9;              // 216
inline constexpr std::size_t kFrameDim = kObjKeypointOffset + 3 * kNumKeypoints;  // 288
inline constexpr std::size_t kHumanDim = kObjTransOffset;                         // 204
inline constexpr std::size_t kObjectDim = kFrameDim - kHumanDim;                  // 84
static_assert(kFrameDim == 288 && kHumanDim == 204 && kObjectDim == 84);

// Skeleton: SMPL-style 22 body joints followed by the two palm centers.
enum Joint : std::size_t {
    kPelvis = 0, kLeftHip, kRightHip, kSpine1, kLeftKnee, kRightKnee, kSpine2, kLeftAnkle, kRightAnkle,
    kSpine3, kLeftFoot, kRightFoot, kNeck, kLeftCollar, kRightCollar, kHead, kLeftShoulder, kRightShoulder,
    kLeftElbow, kRightElbow, kLeftWrist, kRightWrist, kLeftPalm, kRightPalm
};

inline constexpr std::array<int, kNumJoints> kParents = {-1, 0,  0,  0,  1,  2,  3,  4,  5,  6,  7,  8,
                                                         9,  9,  9,  12, 13, 14, 16, 17, 18, 19, 20, 21};
inline constexpr std::array<std::size_t, 2> kHandJoints = {kLeftPalm, kRightPalm};
inline constexpr std::array<std::size_t, 2> kFootJoints = {kLeftFoot, kRightFoot};

// ---------------------------------------------------------------------------
// 6D rotations

struct Rotation6D {
    Vec3 a1 = Vec3::UnitX();
    Vec3 a2 = Vec3::UnitY();

    std::array<double, 6> to_array() const { return {a1.x(), a1.y(), a1.z(), a2.x(), a2.y(), a2.z()}; }
    static Rotation6D from_span(std::span<const double> v) {
        return {Vec3(v[0], v[1], v[2]), Vec3(v[3], v[4], v[5])};
    }
};

inline constexpr double kRot6dDegeneracy = 1e-8;

// Gram-Schmidt decoding: columns [b1 b2 b1xb2].
inline Mat3 rot6d_to_matrix(const Rotation6D& r) {
    const double n1 = r.a1.norm();
    if (!(n1 > kRot6dDegeneracy)) throw NumericalError("rot6d_to_matrix: first column is (near) zero");
    const Vec3 b1 = r.a1 / n1;
    const Vec3 u = r.a2 - b1.dot(r.a2) * b1;
    const double nu = u.norm();
    if (!(nu > kRot6dDegeneracy)) throw NumericalError("rot6d_to_matrix: second column is parallel to the first");
    const Vec3 b2 = u / nu;
    Mat3 m;
    m.col(0) = b1;
    m.col(1) = b2;
    m.col(2) = b1.cross(b2);
    return m;
}

// Pulls a gradient with respect to the decoded matrix back onto the 6D input.
inline Rotation6D rot6d_to_matrix_vjp(const Rotation6D& r, const Mat3& grad_m) {
    const double n1 = r.a1.norm();
    const Vec3 b1 = r.a1 / n1;
    const double proj = b1.dot(r.a2);
    const Vec3 u = r.a2 - proj * b1;
    const double nu = u.norm();
    const Vec3 b2 = u / nu;

    const Vec3 g3 = grad_m.col(2);
    Vec3 g_b1 = grad_m.col(0) + b2.cross(g3);
    const Vec3 g_b2 = grad_m.col(1) + g3.cross(b1);

    const Vec3 g_u = (g_b2 - b2 * b2.dot(g_b2)) / nu;
    const Vec3 g_a2 = g_u - b1 * b1.dot(g_u);
    g_b1 -= proj * g_u + r.a2 * b1.dot(g_u);
    const Vec3 g_a1 = (g_b1 - b1 * b1.dot(g_b1)) / n1;
    return {g_a1, g_a2};
}

// Reads the first two columns without checking orthonormality.
inline Rotation6D rot6d_from_columns(const Mat3& m) { return {m.col(0), m.col(1)}; }

inline Rotation6D matrix_to_rot6d(const Mat3& m) {
    if (!m.allFinite() || ((m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-4) ||
        m.determinant() <= 0.0)
        throw InputError("matrix_to_rot6d: input is not a rotation matrix");
    return rot6d_from_columns(m);
}

// ---------------------------------------------------------------------------
// Poses and frames

struct HumanPose {
    std::array<Vec3, kNumJoints> joints{};
    std::array<std::array<double, 6>, kNumRotJoints> rotations6d{};

    static HumanPose zero() {
        HumanPose h;
        for (auto& j : h.joints) j.setZero();
        for (auto& r : h.rotations6d) r.fill(0.0);
        return h;
    }
    bool operator==(const HumanPose&) const = default;
};

struct ObjectPose {
    Vec3 translation = Vec3::Zero();
    Mat3 rotation = Mat3::Identity();
    std::array<Vec3, kNumKeypoints> keypoints = [] {
        std::array<Vec3, kNumKeypoints> z;
        for (auto& k : z) k.setZero();
        return z;
    }();

    static ObjectPose zero() {
        ObjectPose o;
        o.rotation.setZero();
        for (auto& k : o.keypoints) k.setZero();
        return o;
    }
    bool operator==(const ObjectPose&) const = default;
};

inline std::array<Vec3, kNumKeypoints> object_keypoints_world(std::span<const Vec3> canonical, const Vec3& translation,
                                                              const Mat3& rotation) {
    if (canonical.size() != kNumKeypoints)
        throw ShapeError("object_keypoints_world: expected 24 canonical keypoints, got " +
                         std::to_string(canonical.size()));
    std::array<Vec3, kNumKeypoints> out;
    for (std::size_t j = 0; j < kNumKeypoints; ++j) out[j] = rotation * canonical[j] + translation;
    return out;
}

inline std::array<Vec3, kNumKeypoints> object_keypoints_world(const geometry::KeyPointSet& canonical,
                                                              const Vec3& translation, const Mat3& rotation) {
    return object_keypoints_world(std::span<const Vec3>(canonical.points), translation, rotation);
}

inline void pack_frame(const HumanPose& h, const ObjectPose& o, std::span<double> v) {
    if (v.size() != kFrameDim) throw ShapeError("pack_frame: output must have 288 values");
    for (std::size_t i = 0; i < kNumJoints; ++i)
        for (int a = 0; a < 3; ++a) v[kJointsOffset + 3 * i + a] = h.joints[i][a];
    for (std::size_t i = 0; i < kNumRotJoints; ++i)
        for (int a = 0; a < 6; ++a) v[kRot6dOffset + 6 * i + a] = h.rotations6d[i][a];
    for (int a = 0; a < 3; ++a) v[kObjTransOffset + a] = o.translation[a];
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) v[kObjRotOffset + 3 * r + c] = o.rotation(r, c);
    for (std::size_t j = 0; j < kNumKeypoints; ++j)
        for (int a = 0; a < 3; ++a) v[kObjKeypointOffset + 3 * j + a] = o.keypoints[j][a];
}

inline std::array<double, kFrameDim> pack_frame(const HumanPose& h, const ObjectPose& o) {
    std::array<double, kFrameDim> v{};
    pack_frame(h, o, v);
    return v;
}

inline std::pair<HumanPose, ObjectPose> unpack_frame(std::span<const double> v) {
    if (v.size() != kFrameDim)
        throw ShapeError("unpack_frame: expected 288 values, got " + std::to_string(v.size()));
    HumanPose h;
    ObjectPose o;
    for (std::size_t i = 0; i < kNumJoints; ++i)
        for (int a = 0; a < 3; ++a) h.joints[i][a] = v[kJointsOffset + 3 * i + a];
    for (std::size_t i = 0; i < kNumRotJoints; ++i)
        for (int a = 0; a < 6; ++a) h.rotations6d[i][a] = v[kRot6dOffset + 6 * i + a];
    for (int a = 0; a < 3; ++a) o.translation[a] = v[kObjTransOffset + a];
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) o.rotation(r, c) = v[kObjRotOffset + 3 * r + c];
    for (std::size_t j = 0; j < kNumKeypoints; ++j)
        for (int a = 0; a < 3; ++a) o.keypoints[j][a] = v[kObjKeypointOffset + 3 * j + a];
    return {h, o};
}

struct MotionSequence {
    std::vector<double> frames;  // N x 288, row-major
    double fps = 30.0;
    std::uint32_t action_label = 0;

    MotionSequence() = default;
    MotionSequence(std::size_t n, double fps_, std::uint32_t label)
        : frames(n * kFrameDim, 0.0), fps(fps_), action_label(label) {}

    std::size_t num_frames() const { return frames.size() / kFrameDim; }
    std::span<double> frame(std::size_t n) { return {frames.data() + n * kFrameDim, kFrameDim}; }
    std::span<const double> frame(std::size_t n) const { return {frames.data() + n * kFrameDim, kFrameDim}; }

    Vec3 joint(std::size_t n, std::size_t i) const {
        const double* p = frames.data() + n * kFrameDim + kJointsOffset + 3 * i;
        return {p[0], p[1], p[2]};
    }
    Vec3 object_translation(std::size_t n) const {
        const double* p = frames.data() + n * kFrameDim + kObjTransOffset;
        return {p[0], p[1], p[2]};
    }
    // Stored matrix, as written (may be non-orthonormal for model outputs).
    Mat3 object_rotation_raw(std::size_t n) const {
        const double* p = frames.data() + n * kFrameDim + kObjRotOffset;
        Mat3 m;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) m(r, c) = p[3 * r + c];
        return m;
    }
    // Stored matrix projected onto SO(3) through its first two columns.
    Mat3 object_rotation(std::size_t n) const { return rot6d_to_matrix(rot6d_from_columns(object_rotation_raw(n))); }
    Vec3 object_keypoint(std::size_t n, std::size_t j) const {
        const double* p = frames.data() + n * kFrameDim + kObjKeypointOffset + 3 * j;
        return {p[0], p[1], p[2]};
    }

    // Frame-major N*24 joint positions.
    std::vector<Vec3> joint_track() const {
        std::vector<Vec3> out;
        out.reserve(num_frames() * kNumJoints);
        for (std::size_t n = 0; n < num_frames(); ++n)
            for (std::size_t i = 0; i < kNumJoints; ++i) out.push_back(joint(n, i));
        return out;
    }
    std::vector<Vec3> keypoint_track() const {
        std::vector<Vec3> out;
        out.reserve(num_frames() * kNumKeypoints);
        for (std::size_t n = 0; n < num_frames(); ++n)
            for (std::size_t j = 0; j < kNumKeypoints; ++j) out.push_back(object_keypoint(n, j));
        return out;
    }

    void validate() const {
        if (frames.size() % kFrameDim != 0) throw ShapeError("motion data is not a multiple of 288 values");
        if (num_frames() < 2) throw InputError("motion sequence needs at least 2 frames");
        for (double x : frames)
            if (!std::isfinite(x)) throw NumericalError("motion sequence has non-finite values");
    }
};

// ---------------------------------------------------------------------------
// HOIM container: "HOIM", u32 version=1, u32 N, u32 dim=288, f32 fps,
// u32 action_label, then N*288 f32, all little-endian.

namespace detail {
template <typename U>
void put_le(std::ostream& out, U value) {
    static_assert(sizeof(U) == 4);
    std::uint32_t bits;
    std::memcpy(&bits, &value, 4);
    const unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

template <typename U>
bool get_le(std::istream& in, U& value) {
    static_assert(sizeof(U) == 4);
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) return false;
    const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    std::memcpy(&value, &bits, 4);
    return true;
}
}  // namespace detail

inline constexpr std::uint32_t kHoimVersion = 1;

inline void write_hoim(std::ostream& out, const MotionSequence& seq) {
    out.write("HOIM", 4);
    detail::put_le<std::uint32_t>(out, kHoimVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(seq.num_frames()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(kFrameDim));
    detail::put_le<float>(out, static_cast<float>(seq.fps));
    detail::put_le<std::uint32_t>(out, seq.action_label);
    for (double x : seq.frames) detail::put_le<float>(out, static_cast<float>(x));
}

inline void write_hoim(const std::filesystem::path& path, const MotionSequence& seq) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write HOIM file " + path.string());
    write_hoim(out, seq);
}

inline MotionSequence read_hoim(std::istream& in, const std::string& source = "<stream>") {
    auto fail = [&](const std::string& what) -> MotionSequence { throw InputError(source + ": " + what); };
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "HOIM", 4) != 0) return fail("bad magic (expected HOIM)");
    std::uint32_t version = 0, n = 0, dim = 0, label = 0;
    float fps = 0.0f;
    if (!detail::get_le(in, version) || !detail::get_le(in, n) || !detail::get_le(in, dim) ||
        !detail::get_le(in, fps) || !detail::get_le(in, label))
        return fail("truncated header");
    if (version != kHoimVersion) return fail("unsupported version " + std::to_string(version));
    if (dim != kFrameDim) return fail("frame dimension " + std::to_string(dim) + " is not 288");
    if (n < 2) return fail("sequence has fewer than 2 frames");
    if (!(fps > 0.0f) || !std::isfinite(fps)) return fail("invalid fps");
    MotionSequence seq(n, fps, label);
    for (double& x : seq.frames) {
        float f;
        if (!detail::get_le(in, f)) return fail("truncated payload");
        if (!std::isfinite(f)) return fail("non-finite payload value");
        x = f;
    }
    if (in.peek() != std::char_traits<char>::eof()) return fail("trailing bytes after payload");
    return seq;
}

inline MotionSequence read_hoim(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open HOIM file " + path.string());
    return read_hoim(in, path.string());
}

// ---------------------------------------------------------------------------

// Mean horizontal (xy) drift in cm per frame of each foot over frame pairs
// where the foot is below `height_eps` at both ends, averaged over feet that
// have grounded pairs. Zero when no foot is ever grounded.
inline double foot_sliding_score(const MotionSequence& seq, std::array<std::size_t, 2> foot_joint_ids = kFootJoints,
                                 double height_eps = 0.05) {
    const std::size_t n = seq.num_frames();
    double total = 0.0;
    int feet = 0;
    for (auto foot : foot_joint_ids) {
        double drift = 0.0;
        std::size_t count = 0;
        for (std::size_t t = 1; t < n; ++t) {
            const Vec3 a = seq.joint(t - 1, foot), b = seq.joint(t, foot);
            if (a.z() < height_eps && b.z() < height_eps) {
                drift += (b - a).head<2>().norm();
                ++count;
            }
        }
        if (count > 0) {
            total += drift / static_cast<double>(count);
            ++feet;
        }
    }
    return feet > 0 ? 100.0 * total / feet : 0.0;
}

}  // namespace rog::motion
