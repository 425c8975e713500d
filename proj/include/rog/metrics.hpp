#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "rog/error.hpp"
#include "rog/geometry.hpp"
#include "rog/motion.hpp"
#include "rog/random.hpp"

namespace rog::metrics {

using geometry::Mat3;
using geometry::Vec3;

inline constexpr double kContactDistance = 0.05;  // m
inline constexpr double kCollisionDepth = 0.04;   // m, counted strictly beyond
inline constexpr double kMdevAlpha = 0.05;        // m

using PointsPerFrame = std::vector<std::vector<Vec3>>;

// Canonical vertices through each frame's object transform.
inline PointsPerFrame object_points_world(const motion::MotionSequence& seq, std::span<const Vec3> canonical) {
    PointsPerFrame out(seq.num_frames());
    for (std::size_t n = 0; n < seq.num_frames(); ++n) {
        const Mat3 r = seq.object_rotation(n);
        const Vec3 t = seq.object_translation(n);
        out[n].reserve(canonical.size());
        for (const auto& v : canonical) out[n].push_back(r * v + t);
    }
    return out;
}

inline PointsPerFrame joint_points(const motion::MotionSequence& seq, std::span<const std::size_t> ids) {
    PointsPerFrame out(seq.num_frames());
    for (std::size_t n = 0; n < seq.num_frames(); ++n)
        for (auto i : ids) out[n].push_back(seq.joint(n, i));
    return out;
}

namespace detail {
inline void check_frames(const PointsPerFrame& a, const PointsPerFrame& b, const char* what) {
    if (a.empty()) throw InputError(std::string(what) + ": empty sequence");
    if (a.size() != b.size()) throw ShapeError(std::string(what) + ": frame counts differ");
}
inline double min_distance(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& p : a)
        for (const auto& q : b) best = std::min(best, (p - q).squaredNorm());
    return std::sqrt(best);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Contact

// Fraction of frames where some hand point is within `threshold` of some
// object point.
inline double contact_percentage(const PointsPerFrame& hands, const PointsPerFrame& object,
                                 double threshold = kContactDistance) {
    detail::check_frames(hands, object, "contact_percentage");
    std::size_t hits = 0;
    for (std::size_t n = 0; n < hands.size(); ++n)
        if (detail::min_distance(hands[n], object[n]) < threshold) ++hits;
    return static_cast<double>(hits) / static_cast<double>(hands.size());
}

inline double contact_percentage(const motion::MotionSequence& seq, std::span<const Vec3> canonical_vertices,
                                 double threshold = kContactDistance) {
    return contact_percentage(joint_points(seq, motion::kHandJoints), object_points_world(seq, canonical_vertices),
                              threshold);
}

// ---------------------------------------------------------------------------
// Collision

// Proxy for the body surface: the 24 joints plus evenly spaced interior
// points along every bone.
struct ProxyConfig {
    std::size_t points_per_bone = 6;
};

inline std::vector<Vec3> proxy_points(std::span<const Vec3> joints, const ProxyConfig& cfg = {}) {
    if (joints.size() != motion::kNumJoints) throw ShapeError("proxy_points needs 24 joints");
    std::vector<Vec3> out(joints.begin(), joints.end());
    for (std::size_t c = 0; c < motion::kNumJoints; ++c) {
        const int p = motion::kParents[c];
        if (p < 0) continue;
        for (std::size_t k = 1; k <= cfg.points_per_bone; ++k) {
            const double u = static_cast<double>(k) / static_cast<double>(cfg.points_per_bone + 1);
            out.push_back(joints[static_cast<std::size_t>(p)] + u * (joints[c] - joints[static_cast<std::size_t>(p)]));
        }
    }
    return out;
}

// Signed distance in the object's canonical frame; negative inside.
using Sdf = std::function<double(const Vec3&)>;

// Fraction of frames where some proxy point, mapped into the object frame,
// lies deeper than `depth` inside the object.
inline double collision_percentage(const motion::MotionSequence& seq, const Sdf& sdf, const ProxyConfig& proxy = {},
                                   double depth = kCollisionDepth) {
    if (!sdf) throw InputError("collision_percentage: missing SDF");
    const std::size_t n_frames = seq.num_frames();
    if (n_frames == 0) throw InputError("collision_percentage: empty sequence");
    std::size_t hits = 0;
    std::array<Vec3, motion::kNumJoints> joints;
    for (std::size_t n = 0; n < n_frames; ++n) {
        for (std::size_t i = 0; i < motion::kNumJoints; ++i) joints[i] = seq.joint(n, i);
        const Mat3 rt = seq.object_rotation(n).transpose();
        const Vec3 t = seq.object_translation(n);
        for (const auto& p : proxy_points(joints, proxy))
            if (sdf(rt * (p - t)) < -depth) {
                ++hits;
                break;
            }
    }
    return static_cast<double>(hits) / static_cast<double>(n_frames);
}

inline double collision_percentage(const motion::MotionSequence& seq, const geometry::SignedDistanceGrid& grid,
                                   const ProxyConfig& proxy = {}, double depth = kCollisionDepth) {
    if (grid.values.empty()) throw InputError("collision_percentage: missing SDF");
    return collision_percentage(seq, [&grid](const Vec3& p) { return grid.query(p); }, proxy, depth);
}

// ---------------------------------------------------------------------------
// Motion deviation

struct MdevResult {
    double mm = 0.0;          // mean over windows
    std::size_t windows = 0;  // contact windows of at least 2 frames
    double sum_m = 0.0;       // sum of per-window values, m (for pooling)
};

// For every (hand point, object point) pair, finds maximal runs of frames
// within `alpha` and averages the relative displacement over each run.
inline MdevResult mdev(const PointsPerFrame& hands, const PointsPerFrame& object, double alpha = kMdevAlpha) {
    if (hands.size() != object.size()) throw ShapeError("mdev: frame counts differ");
    MdevResult r;
    const std::size_t N = hands.size();
    if (N < 2) return r;
    const std::size_t H = hands[0].size(), O = object[0].size();
    for (std::size_t n = 0; n < N; ++n)
        if (hands[n].size() != H || object[n].size() != O) throw ShapeError("mdev: point counts vary across frames");
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < O; ++j) {
            std::size_t n = 0;
            while (n < N) {
                if ((hands[n][i] - object[n][j]).norm() > alpha) {
                    ++n;
                    continue;
                }
                const std::size_t m = n;
                while (n + 1 < N && (hands[n + 1][i] - object[n + 1][j]).norm() <= alpha) ++n;
                if (n > m) {
                    double s = 0.0;
                    for (std::size_t t = m + 1; t <= n; ++t)
                        s += ((hands[t][i] - hands[t - 1][i]) - (object[t][j] - object[t - 1][j])).norm();
                    r.sum_m += s / static_cast<double>(n - m);
                    ++r.windows;
                }
                ++n;
            }
        }
    r.mm = r.windows > 0 ? 1000.0 * r.sum_m / static_cast<double>(r.windows) : 0.0;
    return r;
}

inline MdevResult mdev(const motion::MotionSequence& seq, std::span<const Vec3> canonical_vertices,
                       double alpha = kMdevAlpha) {
    return mdev(joint_points(seq, motion::kHandJoints), object_points_world(seq, canonical_vertices), alpha);
}

// ---------------------------------------------------------------------------
// Distribution metrics. Feature sets are matrices with one sample per row.

inline constexpr double kCovarianceShrinkage = 1e-6;
inline constexpr double kNegativeEigenTolerance = 1e-8;

namespace detail {
inline void check_finite(const Eigen::MatrixXd& m, const char* what) {
    if (!m.allFinite()) throw NumericalError(std::string(what) + ": non-finite features");
}

inline Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& s) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
    if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
    Eigen::VectorXd ev = es.eigenvalues();
    for (Eigen::Index k = 0; k < ev.size(); ++k) {
        if (ev[k] < -kNegativeEigenTolerance * std::max(1.0, ev.cwiseAbs().maxCoeff()))
            throw NumericalError("covariance has a significantly negative eigenvalue");
        ev[k] = std::sqrt(std::max(ev[k], 0.0));
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}
}  // namespace detail

// Tr((A^1/2 B A^1/2)^1/2). When B is positive definite, B = L L' and the
// eigenvalues of A^1/2 B A^1/2 are the squared singular values of L' A^1/2,
// which keeps near-zero eigenvalues accurate. Otherwise the symmetric
// eigendecomposition is used directly.
inline double trace_sqrt_product(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    const Eigen::MatrixXd sa = detail::symmetric_sqrt(a);
    Eigen::LLT<Eigen::MatrixXd> llt(b);
    if (llt.info() == Eigen::Success) {
        const Eigen::MatrixXd c = Eigen::MatrixXd(llt.matrixL()).transpose() * sa;
        return Eigen::BDCSVD<Eigen::MatrixXd>(c).singularValues().sum();
    }
    const Eigen::MatrixXd m = sa * b * sa;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
    const Eigen::VectorXd ev = es.eigenvalues();
    double s = 0.0;
    for (Eigen::Index k = 0; k < ev.size(); ++k) {
        if (ev[k] < -kNegativeEigenTolerance * std::max(1.0, ev.cwiseAbs().maxCoeff()))
            throw NumericalError("matrix square root: significantly negative eigenvalue");
        s += std::sqrt(std::max(ev[k], 0.0));
    }
    return s;
}

inline double frechet_distance(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a, const Eigen::VectorXd& mu_b,
                               const Eigen::MatrixXd& cov_b) {
    const auto d = mu_a.size();
    if (mu_b.size() != d || cov_a.rows() != d || cov_a.cols() != d || cov_b.rows() != d || cov_b.cols() != d)
        throw ShapeError("frechet_distance: dimension mismatch");
    const double fd =
        (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt_product(cov_a, cov_b);
    return std::max(fd, 0.0);
}

struct Moments {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

// Sample mean and unbiased covariance, shrunk by 1e-6 I when rank deficient.
inline Moments moments(const Eigen::MatrixXd& x) {
    if (x.rows() < 2) throw InputError("need at least 2 feature vectors");
    detail::check_finite(x, "moments");
    Moments m;
    m.mean = x.colwise().mean().transpose();
    const Eigen::MatrixXd c = x.rowwise() - m.mean.transpose();
    m.cov = c.transpose() * c / static_cast<double>(x.rows() - 1);
    if (x.rows() < x.cols() + 1) m.cov += kCovarianceShrinkage * Eigen::MatrixXd::Identity(x.cols(), x.cols());
    return m;
}

inline double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.cols() != b.cols()) throw ShapeError("frechet_distance: dimension mismatch");
    const auto ma = moments(a), mb = moments(b);
    return frechet_distance(ma.mean, ma.cov, mb.mean, mb.cov);
}

// Mean distance over `pairs` disjoint index pairs. Pairs come from rounds of
// seeded permutations; within a round no index repeats.
inline double diversity(const Eigen::MatrixXd& x, std::size_t pairs, std::uint64_t seed) {
    const auto n = static_cast<std::size_t>(x.rows());
    if (n < 2) throw InputError("diversity needs at least 2 feature vectors");
    if (pairs == 0) throw InputError("diversity needs at least one pair");
    detail::check_finite(x, "diversity");
    Rng rng(seed);
    std::vector<std::size_t> perm(n);
    double total = 0.0;
    std::size_t done = 0;
    while (done < pairs) {
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        for (std::size_t k = n; k > 1; --k) std::swap(perm[k - 1], perm[rng.uniform_index(k)]);
        for (std::size_t k = 0; k + 1 < n && done < pairs; k += 2, ++done)
            total += (x.row(static_cast<Eigen::Index>(perm[k])) - x.row(static_cast<Eigen::Index>(perm[k + 1]))).norm();
    }
    return total / static_cast<double>(pairs);
}

// ---------------------------------------------------------------------------
// Feature map: joints and object translation, linearly resampled to a fixed
// frame count and flattened.

inline constexpr std::size_t kFeatureFrames = 8;
inline constexpr std::size_t kFeaturesPerFrame = 3 * motion::kNumJoints + 3;

inline Eigen::VectorXd motion_features(const motion::MotionSequence& seq, std::size_t frames = kFeatureFrames) {
    const std::size_t n = seq.num_frames();
    if (n == 0) throw InputError("motion_features: empty sequence");
    Eigen::VectorXd f(static_cast<Eigen::Index>(frames * kFeaturesPerFrame));
    auto sample = [&](std::size_t t, std::size_t k) {
        return k < motion::kHumanDim ? seq.frame(t)[k] : seq.frame(t)[motion::kObjTransOffset + k - motion::kHumanDim];
    };
    for (std::size_t k = 0; k < frames; ++k) {
        const double pos = frames > 1 && n > 1 ? static_cast<double>(k) * (n - 1) / (frames - 1) : 0.0;
        const auto t0 = std::min(static_cast<std::size_t>(std::floor(pos)), n - 1);
        const auto t1 = std::min(t0 + 1, n - 1);
        const double w = pos - static_cast<double>(t0);
        for (std::size_t c = 0; c < kFeaturesPerFrame; ++c) {
            const std::size_t src = c < 3 * motion::kNumJoints ? c : motion::kHumanDim + (c - 3 * motion::kNumJoints);
            f[static_cast<Eigen::Index>(k * kFeaturesPerFrame + c)] = (1.0 - w) * sample(t0, src) + w * sample(t1, src);
        }
    }
    return f;
}

inline Eigen::MatrixXd feature_matrix(std::span<const motion::MotionSequence> seqs, std::size_t frames = kFeatureFrames) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(seqs.size()), static_cast<Eigen::Index>(frames * kFeaturesPerFrame));
    for (std::size_t k = 0; k < seqs.size(); ++k) m.row(static_cast<Eigen::Index>(k)) = motion_features(seqs[k], frames);
    return m;
}

// Per-dimension standardization fitted on a reference set.
struct Standardizer {
    Eigen::RowVectorXd mean, scale;

    static Standardizer fit(const Eigen::MatrixXd& ref) {
        if (ref.rows() < 2) throw InputError("standardizer needs at least 2 reference samples");
        Standardizer s;
        s.mean = ref.colwise().mean();
        const Eigen::MatrixXd c = ref.rowwise() - s.mean;
        s.scale = (c.colwise().squaredNorm() / static_cast<double>(ref.rows() - 1)).cwiseSqrt();
        for (auto& v : s.scale) v = v > 1e-8 ? v : 1.0;
        return s;
    }
    Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
        if (x.cols() != mean.cols()) throw ShapeError("standardizer: dimension mismatch");
        return (x.rowwise() - mean).array().rowwise() / scale.array();
    }
};

// ---------------------------------------------------------------------------
// Aggregate report

struct SequenceMetrics {
    std::string name;
    double contact = 0.0;
    double collision = 0.0;
    double mdev_mm = 0.0;
    std::size_t mdev_windows = 0;
    double foot_sliding = 0.0;  // cm/frame
};

struct MetricsReport {
    static constexpr int kVersion = 1;
    std::string label;
    double contact_pct = 0.0;
    double collision_pct = 0.0;
    double mdev = 0.0;  // mm, pooled over all windows
    double fs = 0.0;    // cm/frame
    double fid = 0.0;
    double diversity = 0.0;
    std::size_t sequences_count = 0;
    std::vector<SequenceMetrics> sequences;
};

struct EvalConfig {
    double contact_distance = kContactDistance;
    double collision_depth = kCollisionDepth;
    double mdev_alpha = kMdevAlpha;
    ProxyConfig proxy;
    std::size_t feature_frames = kFeatureFrames;
    std::size_t diversity_pairs = 200;
    std::uint64_t seed = 0;
};

// A sequence together with its object's canonical vertices and SDF.
struct EvalItem {
    std::string name;
    const motion::MotionSequence* motion = nullptr;
    const std::vector<Vec3>* vertices = nullptr;
    const geometry::SignedDistanceGrid* sdf = nullptr;
};

// `reference` supplies the real-motion distribution for FID and the
// feature standardization.
inline MetricsReport evaluate(std::span<const EvalItem> items, std::span<const motion::MotionSequence> reference,
                              const EvalConfig& cfg = {}, const std::string& label = "") {
    if (items.empty()) throw InputError("evaluate: no sequences");
    std::vector<std::string> missing;
    for (const auto& it : items) {
        if (!it.motion) missing.push_back(it.name + ": motion");
        if (!it.vertices || it.vertices->empty()) missing.push_back(it.name + ": object vertices");
        if (!it.sdf || it.sdf->values.empty()) missing.push_back(it.name + ": object SDF");
    }
    if (!missing.empty()) {
        std::string msg = "evaluate: missing inputs:";
        for (const auto& m : missing) msg += "\n  " + m;
        throw InputError(msg);
    }
    MetricsReport r;
    r.label = label;
    r.sequences_count = items.size();
    double mdev_sum = 0.0;
    std::size_t windows = 0;
    std::vector<motion::MotionSequence> generated;
    generated.reserve(items.size());
    for (const auto& it : items) {
        const auto& seq = *it.motion;
        SequenceMetrics s;
        s.name = it.name;
        s.contact = contact_percentage(seq, *it.vertices, cfg.contact_distance);
        s.collision = collision_percentage(seq, *it.sdf, cfg.proxy, cfg.collision_depth);
        const auto md = mdev(seq, *it.vertices, cfg.mdev_alpha);
        s.mdev_mm = md.mm;
        s.mdev_windows = md.windows;
        s.foot_sliding = motion::foot_sliding_score(seq);
        mdev_sum += md.sum_m;
        windows += md.windows;
        r.contact_pct += s.contact;
        r.collision_pct += s.collision;
        r.fs += s.foot_sliding;
        r.sequences.push_back(s);
        generated.push_back(seq);
    }
    const double n = static_cast<double>(items.size());
    r.contact_pct /= n;
    r.collision_pct /= n;
    r.fs /= n;
    r.mdev = windows > 0 ? 1000.0 * mdev_sum / static_cast<double>(windows) : 0.0;

    const Eigen::MatrixXd ref = feature_matrix(reference, cfg.feature_frames);
    const auto standardizer = Standardizer::fit(ref);
    const Eigen::MatrixXd gen = standardizer.apply(feature_matrix(generated, cfg.feature_frames));
    r.fid = frechet_distance(standardizer.apply(ref), gen);
    r.diversity = diversity(gen, cfg.diversity_pairs, cfg.seed);
    return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json seqs = nlohmann::json::array();
    for (const auto& s : r.sequences)
        seqs.push_back({{"name", s.name},
                        {"contact", s.contact},
                        {"collision", s.collision},
                        {"mdev_mm", s.mdev_mm},
                        {"mdev_windows", s.mdev_windows},
                        {"foot_sliding", s.foot_sliding}});
    return {{"version", MetricsReport::kVersion},
            {"label", r.label},
            {"contact_pct", r.contact_pct},
            {"collision_pct", r.collision_pct},
            {"mdev_mm", r.mdev},
            {"fs_cm_per_frame", r.fs},
            {"fid", r.fid},
            {"diversity", r.diversity},
            {"count", r.sequences_count},
            {"sequences", seqs}};
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
    try {
        if (j.at("version").get<int>() != MetricsReport::kVersion) throw InputError("unsupported report version");
        MetricsReport r;
        r.label = j.at("label").get<std::string>();
        r.contact_pct = j.at("contact_pct").get<double>();
        r.collision_pct = j.at("collision_pct").get<double>();
        r.mdev = j.at("mdev_mm").get<double>();
        r.fs = j.at("fs_cm_per_frame").get<double>();
        r.fid = j.at("fid").get<double>();
        r.diversity = j.at("diversity").get<double>();
        r.sequences_count = j.at("count").get<std::size_t>();
        for (const auto& s : j.at("sequences"))
            r.sequences.push_back({s.at("name").get<std::string>(), s.at("contact").get<double>(),
                                   s.at("collision").get<double>(), s.at("mdev_mm").get<double>(),
                                   s.at("mdev_windows").get<std::size_t>(), s.at("foot_sliding").get<double>()});
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed metrics report: ") + e.what());
    }
}

// One row per sequence, then the aggregate row.
inline void write_csv(std::ostream& out, const MetricsReport& r) {
    out << "name,contact_pct,collision_pct,mdev_mm,fs_cm_per_frame\n";
    out.precision(17);
    for (const auto& s : r.sequences)
        out << s.name << ',' << s.contact << ',' << s.collision << ',' << s.mdev_mm << ',' << s.foot_sliding << '\n';
    out << "ALL," << r.contact_pct << ',' << r.collision_pct << ',' << r.mdev << ',' << r.fs << '\n';
}

// Per-metric values of two reports and their difference (b - a).
inline nlohmann::json report_deltas(const MetricsReport& a, const MetricsReport& b) {
    nlohmann::json out = nlohmann::json::object();
    auto add = [&](const char* key, double x, double y) { out[key] = {{"a", x}, {"b", y}, {"delta", y - x}}; };
    add("contact_pct", a.contact_pct, b.contact_pct);
    add("collision_pct", a.collision_pct, b.collision_pct);
    add("mdev_mm", a.mdev, b.mdev);
    add("fs_cm_per_frame", a.fs, b.fs);
    add("fid", a.fid, b.fid);
    add("diversity", a.diversity, b.diversity);
    return {{"a", a.label}, {"b", b.label}, {"metrics", out}};
}

}  // namespace rog::metrics
