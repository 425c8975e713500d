#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rog/error.hpp"
#include "rog/geometry.hpp"
#include "rog/idf.hpp"
#include "rog/motion.hpp"
#include "rog/random.hpp"

namespace rog::synth {

using geometry::Mat3;
using geometry::TriangleMesh;
using geometry::Vec3;

enum class ObjectKind { box, cylinder, icosphere };
enum class Action : std::uint32_t { lift = 0, carry = 1, put_down = 2, pull = 3, kick = 4 };
inline constexpr std::size_t kNumActions = 5;
inline constexpr std::array<const char*, kNumActions> kActionNames = {"lift", "carry", "put_down", "pull", "kick"};

inline const char* to_string(Action a) { return kActionNames.at(static_cast<std::size_t>(a)); }
inline Action action_from_label(std::uint32_t label) {
    if (label >= kNumActions) throw InputError("invalid action id " + std::to_string(label));
    return static_cast<Action>(label);
}
inline Action parse_action(const std::string& s) {
    for (std::size_t k = 0; k < kNumActions; ++k)
        if (s == kActionNames[k]) return static_cast<Action>(k);
    throw InputError("unknown action '" + s + "'");
}

inline const char* to_string(ObjectKind k) {
    switch (k) {
        case ObjectKind::box: return "box";
        case ObjectKind::cylinder: return "cylinder";
        case ObjectKind::icosphere: return "icosphere";
    }
    return "?";
}
inline ObjectKind parse_object_kind(const std::string& s) {
    if (s == "box") return ObjectKind::box;
    if (s == "cylinder") return ObjectKind::cylinder;
    if (s == "icosphere") return ObjectKind::icosphere;
    throw InputError("unknown object kind '" + s + "'");
}

inline constexpr std::size_t kCylinderSegments = 16;
inline constexpr int kIcosphereSubdivisions = 2;
inline constexpr std::size_t kMinFrames = 10;
inline constexpr std::size_t kMaxFrames = 120;

// ---------------------------------------------------------------------------
// Primitive meshes (outward-facing triangles, watertight)

namespace detail {
inline void require_positive(double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v)) throw InputError(std::string(what) + " must be positive and finite");
}

inline TriangleMesh box_mesh(const Vec3& size) {
    TriangleMesh m;
    for (int k = 0; k < 8; ++k)
        m.vertices.emplace_back((k & 4) ? size.x() : 0.0, (k & 2) ? size.y() : 0.0, (k & 1) ? size.z() : 0.0);
    m.faces = {{0, 1, 3}, {0, 3, 2}, {4, 6, 7}, {4, 7, 5}, {0, 4, 5}, {0, 5, 1},
               {2, 3, 7}, {2, 7, 6}, {0, 2, 6}, {0, 6, 4}, {1, 5, 7}, {1, 7, 3}};
    return m;
}

// Axis along z, base at z = 0, centered on the z axis.
inline TriangleMesh cylinder_mesh(double radius, double height) {
    const auto S = static_cast<std::uint32_t>(kCylinderSegments);
    TriangleMesh m;
    for (int ring = 0; ring < 2; ++ring)
        for (std::uint32_t k = 0; k < S; ++k) {
            const double a = 2.0 * std::numbers::pi * k / S;
            m.vertices.emplace_back(radius * std::cos(a), radius * std::sin(a), ring * height);
        }
    const std::uint32_t bottom = 2 * S, top = 2 * S + 1;
    m.vertices.emplace_back(0.0, 0.0, 0.0);
    m.vertices.emplace_back(0.0, 0.0, height);
    for (std::uint32_t k = 0; k < S; ++k) {
        const std::uint32_t k1 = (k + 1) % S;
        m.faces.push_back({k, k1, S + k1});
        m.faces.push_back({k, S + k1, S + k});
        m.faces.push_back({bottom, k1, k});
        m.faces.push_back({top, S + k, S + k1});
    }
    return m;
}

// Subdivided icosahedron centered at the origin.
inline TriangleMesh icosphere_mesh(double radius, int subdivisions) {
    const double t = (1.0 + std::sqrt(5.0)) / 2.0;
    std::vector<Vec3> v = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                           {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
    for (auto& p : v) p.normalize();
    std::vector<geometry::Face> f = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                                     {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                                     {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                                     {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
    for (int level = 0; level < subdivisions; ++level) {
        std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> mid;
        auto midpoint = [&](std::uint32_t a, std::uint32_t b) {
            const auto key = std::minmax(a, b);
            auto it = mid.find(key);
            if (it != mid.end()) return it->second;
            v.push_back((v[a] + v[b]).normalized());
            const auto idx = static_cast<std::uint32_t>(v.size() - 1);
            mid.emplace(key, idx);
            return idx;
        };
        std::vector<geometry::Face> next;
        for (const auto& [a, b, c] : f) {
            const auto ab = midpoint(a, b), bc = midpoint(b, c), ca = midpoint(c, a);
            next.push_back({a, ab, ca});
            next.push_back({b, bc, ab});
            next.push_back({c, ca, bc});
            next.push_back({ab, bc, ca});
        }
        f = std::move(next);
    }
    TriangleMesh m;
    for (const auto& p : v) m.vertices.push_back(radius * p);
    m.faces = std::move(f);
    // Orient every face away from the center.
    for (auto& face : m.faces) {
        const Vec3& a = m.vertices[face[0]];
        const Vec3 n = (m.vertices[face[1]] - a).cross(m.vertices[face[2]] - a);
        if (n.dot(a + m.vertices[face[1]] + m.vertices[face[2]]) < 0.0) std::swap(face[1], face[2]);
    }
    return m;
}
}  // namespace detail

// box: dims = edge lengths, AABB [0, dims]. cylinder: dims = (radius, height),
// base at z = 0. icosphere: dims.x = radius, centered at the origin.
inline TriangleMesh make_primitive_mesh(ObjectKind kind, const Vec3& dims) {
    switch (kind) {
        case ObjectKind::box:
            for (int a = 0; a < 3; ++a) detail::require_positive(dims[a], "box dimensions");
            return detail::box_mesh(dims);
        case ObjectKind::cylinder:
            detail::require_positive(dims.x(), "cylinder radius");
            detail::require_positive(dims.y(), "cylinder height");
            return detail::cylinder_mesh(dims.x(), dims.y());
        case ObjectKind::icosphere:
            detail::require_positive(dims.x(), "icosphere radius");
            return detail::icosphere_mesh(dims.x(), kIcosphereSubdivisions);
    }
    throw InputError("unknown object kind");
}

// Primitive translated so its AABB is centered on the origin; this is the
// object's canonical frame.
inline TriangleMesh canonical_object_mesh(ObjectKind kind, const Vec3& dims) {
    const auto mesh = make_primitive_mesh(kind, dims);
    return geometry::transform(mesh, Mat3::Identity(), -geometry::compute_aabb(mesh).center());
}

// ---------------------------------------------------------------------------
// Skeleton template: z up, facing +y, right side at +x.

inline std::array<Vec3, motion::kNumJoints> rest_pose(double scale = 1.0) {
    using namespace motion;
    std::array<Vec3, kNumJoints> j;
    j[kPelvis] = {0.0, 0.0, 0.92};
    j[kLeftHip] = {-0.09, 0.0, 0.85};
    j[kRightHip] = {0.09, 0.0, 0.85};
    j[kSpine1] = {0.0, 0.0, 1.02};
    j[kLeftKnee] = {-0.10, 0.01, 0.48};
    j[kRightKnee] = {0.10, 0.01, 0.48};
    j[kSpine2] = {0.0, 0.0, 1.15};
    j[kLeftAnkle] = {-0.10, 0.0, 0.08};
    j[kRightAnkle] = {0.10, 0.0, 0.08};
    j[kSpine3] = {0.0, 0.0, 1.22};
    j[kLeftFoot] = {-0.10, 0.12, 0.02};
    j[kRightFoot] = {0.10, 0.12, 0.02};
    j[kNeck] = {0.0, 0.0, 1.45};
    j[kLeftCollar] = {-0.08, 0.0, 1.38};
    j[kRightCollar] = {0.08, 0.0, 1.38};
    j[kHead] = {0.0, 0.02, 1.60};
    j[kLeftShoulder] = {-0.18, 0.0, 1.40};
    j[kRightShoulder] = {0.18, 0.0, 1.40};
    j[kLeftElbow] = {-0.21, 0.02, 1.13};
    j[kRightElbow] = {0.21, 0.02, 1.13};
    j[kLeftWrist] = {-0.23, 0.06, 0.90};
    j[kRightWrist] = {0.23, 0.06, 0.90};
    j[kLeftPalm] = {-0.23, 0.09, 0.84};
    j[kRightPalm] = {0.23, 0.09, 0.84};
    for (auto& p : j) p *= scale;
    return j;
}

// ---------------------------------------------------------------------------
// Scenario

struct ScenarioSpec {
    ObjectKind object = ObjectKind::box;
    Vec3 dims = Vec3(0.3, 0.3, 0.3);
    Action action = Action::lift;
    std::size_t frames = 30;
    double fps = 30.0;
    std::uint64_t seed = 0;
    double jitter = 0.005;  // joint noise std, m

    void validate() const {
        if (frames < kMinFrames || frames > kMaxFrames)
            throw InputError("scenario frame count must be in [10, 120], got " + std::to_string(frames));
        if (!(fps > 0.0)) throw InputError("scenario fps must be positive");
        if (!(jitter >= 0.0)) throw InputError("scenario jitter must be non-negative");
        if (static_cast<std::uint32_t>(action) >= kNumActions) throw InputError("invalid action id");
        make_primitive_mesh(object, dims);
    }
};

inline nlohmann::json to_json(const ScenarioSpec& s) {
    return {{"object", to_string(s.object)}, {"dims", {s.dims.x(), s.dims.y(), s.dims.z()}},
            {"action", to_string(s.action)}, {"frames", s.frames},
            {"fps", s.fps},                  {"seed", s.seed},
            {"jitter", s.jitter}};
}

struct GeneratedSequence {
    motion::MotionSequence motion;
    idf::IdfTensor idf;  // from the clean trajectory
    TriangleMesh mesh;   // canonical object mesh
    geometry::KeyPointSet keypoints;
    std::array<Vec3, motion::kNumJoints> rest{};
};

// Seed used for every asset's keypoints, so a given mesh always has the
// same keypoints regardless of which sequence uses it.
inline constexpr std::uint64_t kKeypointSeed = 0;

namespace detail {

inline double ease(double u) {
    u = std::clamp(u, 0.0, 1.0);
    return u * u * (3.0 - 2.0 * u);
}
inline double phase(double s, double a, double b) { return ease((s - a) / (b - a)); }

inline Mat3 yaw(double angle) { return Eigen::AngleAxisd(angle, Vec3::UnitZ()).toRotationMatrix(); }

// Mesh vertex in the object frame that best serves as a grasp point on the
// side facing `dir` (world), given the object's world rotation.
inline Vec3 grasp_vertex(const TriangleMesh& mesh, const Mat3& rot, const Vec3& dir) {
    double best = -1e300;
    Vec3 pick = mesh.vertices.front();
    for (const auto& v : mesh.vertices) {
        const Vec3 w = rot * v;
        const Vec3 lateral = w - w.dot(dir) * dir;
        const double score = w.dot(dir) - 0.5 * lateral.norm();
        if (score > best + 1e-12) {
            best = score;
            pick = v;
        }
    }
    return pick;
}

// Hands hold 1.5 cm outside a vertex, away from the object center. Before
// grasping they wait at a pre-grasp point outside the contact radius and
// close in within one frame, so no hand-object sliding occurs in contact.
inline constexpr double kGraspOffset = 0.015;
inline constexpr double kPreGraspOffset = 0.095;
inline Vec3 grasp_point(const Vec3& vertex, double offset = kGraspOffset) {
    return vertex + offset * vertex.normalized();
}

// Elbow and wrist placed between the shoulder and a palm target.
inline void place_arm(std::array<Vec3, motion::kNumJoints>& j, std::size_t shoulder, std::size_t elbow,
                      std::size_t wrist, std::size_t palm, const Vec3& palm_pos) {
    j[palm] = palm_pos;
    const Vec3 to_shoulder = j[shoulder] - palm_pos;
    j[wrist] = palm_pos + 0.07 * to_shoulder.normalized();
    j[elbow] = 0.5 * (j[shoulder] + j[wrist]) + Vec3(0.0, -0.04, -0.04);
}

// Minimal rotation taking unit vector a to unit vector b.
inline Mat3 align(const Vec3& a, const Vec3& b) {
    return Eigen::Quaterniond::FromTwoVectors(a, b).toRotationMatrix();
}

// Per-joint global rotation: the minimal rotation carrying the rest bone
// (joint -> first child) onto the current bone. Leaf joints keep identity.
inline std::array<std::array<double, 6>, motion::kNumRotJoints> bone_rotations(
    const std::array<Vec3, motion::kNumJoints>& rest, const std::array<Vec3, motion::kNumJoints>& cur) {
    std::array<std::array<double, 6>, motion::kNumRotJoints> out;
    for (std::size_t j = 0; j < motion::kNumRotJoints; ++j) {
        Mat3 r = Mat3::Identity();
        for (std::size_t c = 0; c < motion::kNumJoints; ++c) {
            if (motion::kParents[c] != static_cast<int>(j)) continue;
            const Vec3 a = rest[c] - rest[j], b = cur[c] - cur[j];
            if (a.norm() > 1e-9 && b.norm() > 1e-9) r = align(a.normalized(), b.normalized());
            break;
        }
        out[j] = motion::rot6d_from_columns(r).to_array();
    }
    return out;
}

inline void translate_all(std::array<Vec3, motion::kNumJoints>& j, const Vec3& d) {
    for (auto& p : j) p += d;
}

}  // namespace detail

inline GeneratedSequence generate_sequence(const ScenarioSpec& spec) {
    using namespace motion;
    spec.validate();
    Rng rng(derive_seed(spec.seed, 11));

    GeneratedSequence out;
    out.mesh = canonical_object_mesh(spec.object, spec.dims);
    out.keypoints = geometry::sample_object_keypoints(out.mesh, kKeypointSeed);
    const double body = rng.uniform(0.95, 1.05);
    out.rest = rest_pose(body);
    const auto& rest = out.rest;

    const geometry::Aabb box = geometry::compute_aabb(out.mesh);
    const Vec3 half = 0.5 * box.extent();
    const double yaw0 = rng.uniform(-0.4, 0.4);
    const double yaw_delta = spec.action == Action::lift ? rng.uniform(-0.3, 0.3) : 0.0;
    const double reach_end = rng.uniform(0.25, 0.35);
    const double amount = [&] {
        switch (spec.action) {
            case Action::lift: return rng.uniform(0.20, 0.35);
            case Action::carry: return rng.uniform(0.6, 1.0);
            case Action::put_down: return rng.uniform(0.20, 0.35);
            case Action::pull: return rng.uniform(0.20, 0.35);
            case Action::kick: return rng.uniform(0.5, 0.9);
        }
        return 0.0;
    }();
    const double radius_xy = std::hypot(half.x(), half.y());

    // Object start pose.
    const bool on_ground = spec.action == Action::kick;
    const Vec3 start = on_ground ? Vec3(rest[kRightFoot].x(), rest[kRightFoot].y() + 0.10 + radius_xy, half.z())
                                 : Vec3(0.0, 0.30 * body + radius_xy + 0.05, 0.85 * body);
    const Mat3 rot0 = detail::yaw(yaw0);
    const Vec3 left_vertex = detail::grasp_vertex(out.mesh, rot0, -Vec3::UnitX());
    const Vec3 right_vertex = detail::grasp_vertex(out.mesh, rot0, Vec3::UnitX());
    const Vec3 left_local = detail::grasp_point(left_vertex), right_local = detail::grasp_point(right_vertex);
    const Vec3 left_pre = detail::grasp_point(left_vertex, detail::kPreGraspOffset);
    const Vec3 right_pre = detail::grasp_point(right_vertex, detail::kPreGraspOffset);
    const Vec3 kick_local = detail::grasp_point(detail::grasp_vertex(out.mesh, rot0, -Vec3::UnitY()));

    const std::size_t N = spec.frames;
    out.motion = MotionSequence(N, spec.fps, static_cast<std::uint32_t>(spec.action));
    std::vector<Vec3> clean_joints, clean_keypoints;
    clean_joints.reserve(N * kNumJoints);
    clean_keypoints.reserve(N * kNumKeypoints);
    for (std::size_t t = 0; t < N; ++t) {
        const double s = static_cast<double>(t) / static_cast<double>(N - 1);
        auto j = rest;
        Vec3 obj = start;
        Mat3 rot = rot0;
        bool attached = false;
        double reach = 0.0;  // 0 = rest hands, 1 = at pre-grasp points

        switch (spec.action) {
            case Action::lift: {
                reach = detail::phase(s, 0.0, reach_end);
                const double up = detail::phase(s, reach_end + 0.05, 1.0);
                attached = s >= reach_end;
                obj.z() += amount * up;
                rot = detail::yaw(yaw0 + yaw_delta * up);
                break;
            }
            case Action::carry: {
                reach = detail::phase(s, 0.0, reach_end);
                attached = s >= reach_end;
                obj.z() += 0.1 * detail::phase(s, reach_end, reach_end + 0.2);
                const double walk = detail::phase(s, reach_end + 0.2, 1.0);
                const Vec3 d(0.0, amount * walk, 0.0);
                detail::translate_all(j, d);
                obj += d;
                // Alternating leg swing while walking.
                if (walk > 0.0 && walk < 1.0) {
                    const double swing = 0.08 * std::sin(2.0 * std::numbers::pi * 3.0 * walk);
                    const double lift = 0.04 * std::max(0.0, std::sin(2.0 * std::numbers::pi * 3.0 * walk));
                    for (auto [knee, ankle, foot, sign] :
                         {std::tuple{kLeftKnee, kLeftAnkle, kLeftFoot, 1.0},
                          std::tuple{kRightKnee, kRightAnkle, kRightFoot, -1.0}}) {
                        const Vec3 off(0.0, sign * swing, sign > 0 ? lift : 0.04 * std::max(0.0, -std::sin(
                                                                                 2.0 * std::numbers::pi * 3.0 * walk)));
                        j[knee] += 0.5 * off;
                        j[ankle] += off;
                        j[foot] += off;
                    }
                }
                break;
            }
            case Action::put_down: {
                obj.z() += amount * (1.0 - detail::phase(s, 0.0, 0.6));
                attached = s <= 0.6;
                reach = 1.0 - detail::phase(s, 0.6, 1.0);
                break;
            }
            case Action::pull: {
                reach = detail::phase(s, 0.0, reach_end);
                attached = s >= reach_end;
                const double pull = detail::phase(s, reach_end + 0.05, 1.0);
                const Vec3 d(0.0, -amount * pull, 0.0);
                obj += d;
                detail::translate_all(j, d);
                break;
            }
            case Action::kick: {
                const double contact_begin = 0.33, contact_end = 0.47;
                const double to_ball = detail::phase(s, 0.0, contact_begin);
                const double back = detail::phase(s, contact_end, 0.75);
                const Vec3 target = rot0 * kick_local + start;
                const Vec3 foot_rest = rest[kRightFoot];
                const Vec3 foot = foot_rest + (to_ball - back) * (target - foot_rest);
                const Vec3 d_foot = foot - foot_rest;
                j[kRightFoot] = foot;
                j[kRightAnkle] += d_foot;
                j[kRightKnee] += 0.5 * d_foot;
                obj.y() += amount * detail::phase(s, contact_end, 1.0);
                break;
            }
        }

        // Hands: attached palms follow the object rigidly; otherwise they
        // blend between the rest pose and the pre-grasp points.
        Vec3 lp, rp;
        if (attached) {
            lp = rot * left_local + obj;
            rp = rot * right_local + obj;
        } else {
            lp = j[kLeftPalm] + reach * (rot * left_pre + obj - j[kLeftPalm]);
            rp = j[kRightPalm] + reach * (rot * right_pre + obj - j[kRightPalm]);
        }
        if (spec.action != Action::kick) {
            detail::place_arm(j, kLeftShoulder, kLeftElbow, kLeftWrist, kLeftPalm, lp);
            detail::place_arm(j, kRightShoulder, kRightElbow, kRightWrist, kRightPalm, rp);
        }

        HumanPose h;
        h.joints = j;
        h.rotations6d = detail::bone_rotations(rest, j);
        ObjectPose o;
        o.translation = obj;
        o.rotation = rot;
        o.keypoints = object_keypoints_world(out.keypoints, obj, rot);
        clean_joints.insert(clean_joints.end(), j.begin(), j.end());
        clean_keypoints.insert(clean_keypoints.end(), o.keypoints.begin(), o.keypoints.end());
        if (spec.jitter > 0.0)
            for (auto& p : h.joints) p += spec.jitter * Vec3(rng.normal(), rng.normal(), rng.normal());
        pack_frame(h, o, out.motion.frame(t));
    }
    out.idf = idf::compute_idf(clean_joints, clean_keypoints);
    return out;
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetConfig {
    std::size_t count = 100;
    std::array<double, kNumActions> mix = {1, 1, 1, 1, 1};  // relative weights per action
    double train_ratio = 0.8;
    std::uint64_t seed = 0;
    std::size_t frames = 30;
    double fps = 30.0;
    double jitter = 0.005;
};

inline nlohmann::json to_json(const DatasetConfig& c) {
    return {{"count", c.count}, {"mix", c.mix},     {"train_ratio", c.train_ratio}, {"seed", c.seed},
            {"frames", c.frames}, {"fps", c.fps}, {"jitter", c.jitter}};
}

// Per-action counts by largest remainder, so the histogram matches the mix
// within rounding and sums to `count`.
inline std::array<std::size_t, kNumActions> label_counts(std::size_t count, const std::array<double, kNumActions>& mix) {
    double total = 0.0;
    for (double w : mix) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw InputError("action mix weights must be non-negative");
        total += w;
    }
    if (!(total > 0.0)) throw InputError("action mix has no positive weight");
    std::array<std::size_t, kNumActions> n{};
    std::array<double, kNumActions> frac{};
    std::size_t assigned = 0;
    for (std::size_t a = 0; a < kNumActions; ++a) {
        const double exact = static_cast<double>(count) * mix[a] / total;
        n[a] = static_cast<std::size_t>(std::floor(exact));
        frac[a] = exact - static_cast<double>(n[a]);
        assigned += n[a];
    }
    std::array<std::size_t, kNumActions> order;
    for (std::size_t a = 0; a < kNumActions; ++a) order[a] = a;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return frac[x] > frac[y]; });
    for (std::size_t k = 0; assigned < count; ++k, ++assigned) ++n[order[k % kNumActions]];
    return n;
}

// Scenario for the k-th item of a dataset: object kind and size per action.
inline ScenarioSpec dataset_scenario(Action action, std::uint64_t item_seed, const DatasetConfig& cfg) {
    Rng rng(derive_seed(item_seed, 7));
    auto mm = [](double v) { return std::round(v * 1000.0) / 1000.0; };
    ScenarioSpec s;
    s.action = action;
    s.frames = cfg.frames;
    s.fps = cfg.fps;
    s.jitter = cfg.jitter;
    s.seed = item_seed;
    const bool round_object = action == Action::kick;
    const bool cylinder = !round_object && action != Action::carry && rng.uniform() < 0.5;
    if (round_object) {
        s.object = ObjectKind::icosphere;
        s.dims = Vec3(mm(rng.uniform(0.10, 0.18)), 0.0, 0.0);
    } else if (cylinder) {
        s.object = ObjectKind::cylinder;
        s.dims = Vec3(mm(rng.uniform(0.08, 0.15)), mm(rng.uniform(0.20, 0.40)), 0.0);
    } else {
        s.object = ObjectKind::box;
        s.dims = Vec3(mm(rng.uniform(0.2, 0.4)), mm(rng.uniform(0.2, 0.4)), mm(rng.uniform(0.2, 0.4)));
    }
    return s;
}

inline std::string asset_name(ObjectKind kind, const Vec3& dims) {
    auto mm = [](double v) { return std::to_string(static_cast<long>(std::lround(v * 1000.0))); };
    std::string name = to_string(kind);
    name += "_" + mm(dims.x());
    if (kind != ObjectKind::icosphere) name += "x" + mm(dims.y());
    if (kind == ObjectKind::box) name += "x" + mm(dims.z());
    return name;
}

inline nlohmann::json points_to_json(std::span<const Vec3> pts) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& p : pts) out.push_back({p.x(), p.y(), p.z()});
    return out;
}

inline std::vector<Vec3> points_from_json(const nlohmann::json& j) {
    std::vector<Vec3> out;
    for (const auto& p : j) out.emplace_back(p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>());
    return out;
}

struct DatasetResult {
    std::filesystem::path train_manifest, test_manifest;
    std::size_t train = 0, test = 0;
};

// Writes HOIM sequences, ground-truth IDFs, OBJ assets with keypoints, and a
// manifest per split. Items are assigned to splits in a seeded shuffle; every
// item has its own seed, so the splits are seed-disjoint.
inline DatasetResult generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir) {
    namespace fs = std::filesystem;
    if (cfg.count < 2) throw InputError("dataset count must be at least 2");
    if (!(cfg.train_ratio >= 0.0 && cfg.train_ratio <= 1.0)) throw InputError("train ratio must be in [0, 1]");
    const auto counts = label_counts(cfg.count, cfg.mix);
    std::vector<Action> labels;
    for (std::size_t a = 0; a < kNumActions; ++a) labels.insert(labels.end(), counts[a], static_cast<Action>(a));
    Rng rng(derive_seed(cfg.seed, 3));
    for (std::size_t k = labels.size(); k > 1; --k) std::swap(labels[k - 1], labels[rng.uniform_index(k)]);

    fs::create_directories(out_dir / "sequences");
    fs::create_directories(out_dir / "assets");
    const auto n_train = static_cast<std::size_t>(std::lround(static_cast<double>(cfg.count) * cfg.train_ratio));
    nlohmann::json splits[2];
    for (int k = 0; k < 2; ++k)
        splits[k] = {{"version", 1},
                     {"split", k == 0 ? "train" : "test"},
                     {"config", to_json(cfg)},
                     {"sequences", nlohmann::json::array()}};
    std::set<std::uint64_t> seeds;
    for (std::size_t i = 0; i < cfg.count; ++i) {
        const std::uint64_t item_seed = derive_seed(cfg.seed, 1000 + i);
        if (!seeds.insert(item_seed).second) throw NumericalError("dataset item seeds collided");
        const auto spec = dataset_scenario(labels[i], item_seed, cfg);
        const auto gen = generate_sequence(spec);

        const std::string asset = asset_name(spec.object, spec.dims);
        const fs::path obj_rel = fs::path("assets") / (asset + ".obj");
        const fs::path kp_rel = fs::path("assets") / (asset + ".keypoints.json");
        if (!fs::exists(out_dir / obj_rel)) {
            geometry::save_obj(out_dir / obj_rel, gen.mesh);
            std::ofstream(out_dir / kp_rel) << geometry::to_json(gen.keypoints).dump(2) << "\n";
        }
        char name[32];
        std::snprintf(name, sizeof(name), "seq_%05zu", i);
        const fs::path hoim_rel = fs::path("sequences") / (std::string(name) + ".hoim");
        const fs::path idf_rel = fs::path("sequences") / (std::string(name) + ".idf");
        motion::write_hoim(out_dir / hoim_rel, gen.motion);
        {
            std::ofstream f(out_dir / idf_rel, std::ios::binary);
            if (!f) throw InputError("cannot write " + (out_dir / idf_rel).string());
            idf::write_idf_binary(f, gen.idf);
        }
        const int split = i < n_train ? 0 : 1;
        splits[split]["sequences"].push_back({{"path", hoim_rel.generic_string()},
                                              {"idf", idf_rel.generic_string()},
                                              {"label", static_cast<std::uint32_t>(spec.action)},
                                              {"action", to_string(spec.action)},
                                              {"object_asset", obj_rel.generic_string()},
                                              {"keypoints", kp_rel.generic_string()},
                                              {"rest_pose", points_to_json(gen.rest)},
                                              {"scenario", to_json(spec)},
                                              {"seed", item_seed},
                                              {"frames", spec.frames}});
    }
    DatasetResult res;
    res.train_manifest = out_dir / "train.json";
    res.test_manifest = out_dir / "test.json";
    res.train = splits[0]["sequences"].size();
    res.test = splits[1]["sequences"].size();
    std::ofstream(res.train_manifest) << splits[0].dump(2) << "\n";
    std::ofstream(res.test_manifest) << splits[1].dump(2) << "\n";
    return res;
}

// One manifest entry with paths resolved against the manifest's directory.
struct DatasetEntry {
    std::filesystem::path hoim, idf, asset, keypoints;
    std::uint32_t label = 0;
    std::uint64_t seed = 0;
    std::array<Vec3, motion::kNumJoints> rest{};
};

// Parses a split manifest. Missing files are collected and reported together.
inline std::vector<DatasetEntry> load_manifest(const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    std::ifstream in(path);
    if (!in) throw InputError("cannot open manifest " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path.string() + ": invalid JSON: " + e.what());
    }
    const fs::path root = path.parent_path();
    std::vector<DatasetEntry> out;
    std::vector<std::string> missing;
    try {
        for (const auto& e : j.at("sequences")) {
            DatasetEntry d;
            d.hoim = root / e.at("path").get<std::string>();
            d.idf = root / e.at("idf").get<std::string>();
            d.asset = root / e.at("object_asset").get<std::string>();
            d.keypoints = root / e.at("keypoints").get<std::string>();
            d.label = e.at("label").get<std::uint32_t>();
            d.seed = e.value("seed", std::uint64_t{0});
            const auto rest = points_from_json(e.at("rest_pose"));
            if (rest.size() != motion::kNumJoints) throw InputError(path.string() + ": rest_pose needs 24 points");
            std::copy(rest.begin(), rest.end(), d.rest.begin());
            for (const auto* p : {&d.hoim, &d.idf, &d.asset, &d.keypoints})
                if (!fs::exists(*p)) missing.push_back(p->string());
            out.push_back(std::move(d));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path.string() + ": malformed manifest: " + e.what());
    }
    if (!missing.empty()) {
        std::string msg = path.string() + ": missing files:";
        for (const auto& m : missing) msg += "\n  " + m;
        throw InputError(msg);
    }
    return out;
}

inline idf::IdfTensor load_idf(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path.string());
    return idf::read_idf_binary(in);
}

}  // namespace rog::synth
