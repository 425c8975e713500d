#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rog/diffusion.hpp"
#include "rog/error.hpp"
#include "rog/idf.hpp"
#include "rog/lbfgs.hpp"
#include "rog/models.hpp"
#include "rog/motion.hpp"
#include "rog/random.hpp"

namespace rog::guidance {

using geometry::Mat3;
using geometry::Vec3;
using models::Condition;

struct GuidanceConfig {
    double window_fraction = 0.01;  // guided when t <= floor(fraction * T)
    std::size_t k = 10;             // L-BFGS iterations per guided step
    std::size_t history = 10;
    double grad_tol = 1e-8;
    idf::Metric metric = idf::Metric::squared;

    void validate() const {
        if (!(window_fraction >= 0.0 && window_fraction <= 1.0))
            throw InputError("guidance window fraction must be in [0, 1]");
        if (k < 1) throw InputError("guidance needs at least one L-BFGS iteration per step");
        if (history < 1) throw InputError("L-BFGS history must be positive");
        if (!(grad_tol > 0.0)) throw InputError("L-BFGS gradient tolerance must be positive");
    }
};

inline nlohmann::json to_json(const GuidanceConfig& c) {
    return {{"window_fraction", c.window_fraction},
            {"k", c.k},
            {"history", c.history},
            {"grad_tol", c.grad_tol},
            {"idf_metric", idf::to_string(c.metric)}};
}

// Number of guided steps, counted from t = 1 upward.
inline int guided_step_count(const GuidanceConfig& c, int total_steps) {
    return std::min(total_steps, static_cast<int>(std::floor(c.window_fraction * total_steps + 1e-9)));
}

// ---------------------------------------------------------------------------
// Objective over per-frame (joints, object translation, object rotation 6D).

inline constexpr std::size_t kVarsPerFrame = 3 * motion::kNumJoints + 3 + 6;  // 81
inline constexpr std::size_t kVarTrans = 3 * motion::kNumJoints;
inline constexpr std::size_t kVarRot = kVarTrans + 3;

inline std::size_t frame_count(std::span<const double> frames) {
    if (frames.empty() || frames.size() % motion::kFrameDim != 0) throw ShapeError("motion buffer is not N x 288");
    return frames.size() / motion::kFrameDim;
}

inline std::vector<double> extract_variables(std::span<const double> frames) {
    const std::size_t n = frame_count(frames);
    std::vector<double> x(n * kVarsPerFrame);
    for (std::size_t f = 0; f < n; ++f) {
        const double* src = frames.data() + f * motion::kFrameDim;
        double* dst = x.data() + f * kVarsPerFrame;
        std::copy_n(src + motion::kJointsOffset, kVarTrans, dst);
        std::copy_n(src + motion::kObjTransOffset, 3, dst + kVarTrans);
        // First two columns of the stored row-major matrix.
        const double* r = src + motion::kObjRotOffset;
        const double six[6] = {r[0], r[3], r[6], r[1], r[4], r[7]};
        std::copy_n(six, 6, dst + kVarRot);
    }
    return x;
}

namespace detail {
inline motion::Rotation6D rot6d_at(std::span<const double> x, std::size_t f) {
    const double* p = x.data() + f * kVarsPerFrame + kVarRot;
    return {Vec3(p[0], p[1], p[2]), Vec3(p[3], p[4], p[5])};
}

// Joint and keypoint tracks implied by the variables.
inline void tracks(std::span<const double> x, std::span<const Vec3> canonical, std::vector<Vec3>& joints,
                   std::vector<Vec3>& keypoints, std::vector<Mat3>& rotations) {
    const std::size_t n = x.size() / kVarsPerFrame;
    joints.resize(n * motion::kNumJoints);
    keypoints.resize(n * motion::kNumKeypoints);
    rotations.resize(n);
    for (std::size_t f = 0; f < n; ++f) {
        const double* p = x.data() + f * kVarsPerFrame;
        for (std::size_t i = 0; i < motion::kNumJoints; ++i)
            joints[f * motion::kNumJoints + i] = Vec3(p[3 * i], p[3 * i + 1], p[3 * i + 2]);
        rotations[f] = motion::rot6d_to_matrix(rot6d_at(x, f));
        const Vec3 t(p[kVarTrans], p[kVarTrans + 1], p[kVarTrans + 2]);
        for (std::size_t j = 0; j < motion::kNumKeypoints; ++j)
            keypoints[f * motion::kNumKeypoints + j] = rotations[f] * canonical[j] + t;
    }
}
}  // namespace detail

// IDF of the motion described by the variables.
inline idf::IdfTensor variables_idf(std::span<const double> x, std::span<const Vec3> canonical,
                                    idf::Metric metric = idf::Metric::squared) {
    std::vector<Vec3> joints, keypoints;
    std::vector<Mat3> rotations;
    detail::tracks(x, canonical, joints, keypoints, rotations);
    return idf::compute_idf(joints, keypoints, metric);
}

// guidance_loss(IDF(x), target) and its gradient with respect to x.
inline double guidance_objective(std::span<const double> x, const idf::IdfTensor& target,
                                 std::span<const Vec3> canonical, idf::Metric metric, std::span<double> grad) {
    if (x.size() % kVarsPerFrame != 0 || x.size() / kVarsPerFrame != target.frames)
        throw ShapeError("guidance objective: variable count does not match the target IDF");
    if (canonical.size() != motion::kNumKeypoints) throw ShapeError("guidance objective needs 24 canonical keypoints");
    std::vector<Vec3> joints, keypoints;
    std::vector<Mat3> rotations;
    detail::tracks(x, canonical, joints, keypoints, rotations);
    const auto d = idf::compute_idf(joints, keypoints, metric);
    idf::IdfTensor upstream(d.frames);
    double loss = 0.0;
    for (std::size_t k = 0; k < d.values.size(); ++k) {
        const double e = d.values[k] - target.values[k];
        loss += e * e;
        upstream.values[k] = 2.0 * e;
    }
    if (grad.empty()) return loss;
    const auto g = idf::idf_gradient(joints, keypoints, upstream, metric);
    const std::size_t n = d.frames;
    for (std::size_t f = 0; f < n; ++f) {
        double* out = grad.data() + f * kVarsPerFrame;
        for (std::size_t i = 0; i < motion::kNumJoints; ++i)
            for (int a = 0; a < 3; ++a) out[3 * i + a] = g.joints[f * motion::kNumJoints + i][a];
        // Keypoints are R c + t: dt = sum g, dR = sum g c'.
        Vec3 dt = Vec3::Zero();
        Mat3 dr = Mat3::Zero();
        for (std::size_t j = 0; j < motion::kNumKeypoints; ++j) {
            const Vec3& gk = g.keypoints[f * motion::kNumKeypoints + j];
            dt += gk;
            dr += gk * canonical[j].transpose();
        }
        for (int a = 0; a < 3; ++a) out[kVarTrans + a] = dt[a];
        const auto g6 = motion::rot6d_to_matrix_vjp(detail::rot6d_at(x, f), dr);
        for (int a = 0; a < 3; ++a) {
            out[kVarRot + a] = g6.a1[a];
            out[kVarRot + 3 + a] = g6.a2[a];
        }
    }
    return loss;
}

// Writes refined variables back: joints, translation, the decoded
// orthonormal rotation, and keypoints recomputed from the transform. Human
// 6D rotations are left untouched.
inline void write_variables(std::span<const double> x, std::span<const Vec3> canonical, std::span<double> frames) {
    std::vector<Vec3> joints, keypoints;
    std::vector<Mat3> rotations;
    detail::tracks(x, canonical, joints, keypoints, rotations);
    const std::size_t n = frame_count(frames);
    for (std::size_t f = 0; f < n; ++f) {
        double* dst = frames.data() + f * motion::kFrameDim;
        const double* src = x.data() + f * kVarsPerFrame;
        std::copy_n(src, kVarTrans, dst + motion::kJointsOffset);
        std::copy_n(src + kVarTrans, 3, dst + motion::kObjTransOffset);
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) dst[motion::kObjRotOffset + 3 * r + c] = rotations[f](r, c);
        for (std::size_t j = 0; j < motion::kNumKeypoints; ++j)
            for (int a = 0; a < 3; ++a) dst[motion::kObjKeypointOffset + 3 * j + a] = keypoints[f * motion::kNumKeypoints + j][a];
    }
}

struct RefineResult {
    double loss_before = 0.0;
    double loss_after = 0.0;
    std::size_t iterations = 0;
    bool fallback = false;  // refinement failed; input kept
    std::string message;
};

// Runs k L-BFGS iterations on `frames` (N x 288, in place) toward `target`.
// With no accepted iteration, or on failure, the frames are left untouched.
inline RefineResult refine_prediction(std::span<double> frames, const idf::IdfTensor& target,
                                      std::span<const Vec3> canonical, const GuidanceConfig& cfg) {
    RefineResult r;
    const auto x0 = extract_variables(frames);
    opt::LbfgsConfig lc;
    lc.history = cfg.history;
    lc.max_iters = cfg.k;
    lc.grad_tol = cfg.grad_tol;
    // Degenerate trial rotations score +inf so the line search backs off.
    const opt::Objective f = [&](std::span<const double> x, std::span<double> g) {
        try {
            return guidance_objective(x, target, canonical, cfg.metric, g);
        } catch (const NumericalError&) {
            return std::numeric_limits<double>::infinity();
        }
    };
    try {
        const auto res = opt::lbfgs_minimize(f, x0, lc);
        r.loss_before = res.f_initial;
        r.loss_after = res.f;
        r.iterations = res.iterations;
        if (res.iterations == 0) {
            if (res.line_search_failed) {
                r.fallback = true;
                r.message = "line search failed on the first iteration";
            }
            return r;
        }
        write_variables(res.x, canonical, frames);
    } catch (const NumericalError& e) {
        r.fallback = true;
        r.message = e.what();
        r.iterations = 0;
        r.loss_after = r.loss_before;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Sampling

// Batched model adapters over float64 buffers: x is [B, N, 288] for the
// generator and [B, N, 576] for the relation model; both return clean
// predictions of the same shape.
using GenFn = std::function<std::vector<double>(std::span<const double> x, std::size_t batch, std::size_t frames,
                                                int t, std::span<const Condition> conds)>;
using RelFn = GenFn;

template <typename T>
GenFn gen_adapter(const models::MotionGenModel<T>& model) {
    return [&model](std::span<const double> x, std::size_t B, std::size_t N, int t, std::span<const Condition> conds) {
        ad::NoGradGuard guard;
        auto in = ad::Tensor<T>::from({B, N, motion::kFrameDim}, std::vector<T>(x.begin(), x.end()));
        const std::vector<int> steps(B, t);
        const auto out = model.forward(in, steps, conds);
        return std::vector<double>(out.data().begin(), out.data().end());
    };
}

template <typename T>
RelFn rel_adapter(const models::RelationModel<T>& model) {
    return [&model](std::span<const double> d, std::size_t B, std::size_t N, int t, std::span<const Condition> conds) {
        ad::NoGradGuard guard;
        auto in = ad::Tensor<T>::from({B, N, idf::kCellsPerFrame}, std::vector<T>(d.begin(), d.end()));
        const std::vector<int> steps(B, t);
        const auto out = model.forward(in, steps, conds);
        return std::vector<double>(out.data().begin(), out.data().end());
    };
}

struct TraceEntry {
    std::size_t sequence = 0;
    int t = 0;
    double loss_before = 0.0;
    double loss_after = 0.0;
    std::size_t lbfgs_iters = 0;
    bool fallback = false;
};

inline nlohmann::json to_json(const TraceEntry& e) {
    return {{"sequence", e.sequence},       {"t", e.t},
            {"loss_before", e.loss_before}, {"loss_after", e.loss_after},
            {"lbfgs_iters", e.lbfgs_iters}, {"fallback", e.fallback}};
}

// A batch of reverse chains. Each sequence owns its noise stream, drawn the
// same way whether or not a step is guided, so guided and unguided chains
// from one seed agree until the first guided step.
struct ChainState {
    std::size_t batch = 0, frames = 0;
    std::vector<double> x;  // [B, N, 288]
    std::vector<Rng> rngs;
    int t = 0;  // next step to run; 0 once finished
};

inline ChainState init_chain(std::size_t batch, std::size_t frames, std::uint64_t seed, int total_steps) {
    if (batch == 0 || frames == 0) throw InputError("sampling needs a positive batch and frame count");
    ChainState s;
    s.batch = batch;
    s.frames = frames;
    s.t = total_steps;
    s.x.resize(batch * frames * motion::kFrameDim);
    const std::size_t per = frames * motion::kFrameDim;
    for (std::size_t b = 0; b < batch; ++b) {
        s.rngs.emplace_back(derive_seed(seed, b));
        for (std::size_t k = 0; k < per; ++k) s.x[b * per + k] = s.rngs[b].normal();
    }
    return s;
}

struct SampleHooks {
    std::function<void(const TraceEntry&)> trace;
    std::function<void(const std::string&)> warn;
    std::function<void(int t, std::span<const double> x)> after_step;  // state x_{t-1}
};

// Runs steps state.t, state.t - 1, ..., stop (inclusive). `rel` may be empty
// when no step in the range is guided.
inline void run_chain(ChainState& state, int stop, const GenFn& gen, const RelFn& rel,
                      const diffusion::NoiseSchedule& sched, const GuidanceConfig& cfg,
                      std::span<const Condition> conds, const SampleHooks& hooks = {}) {
    cfg.validate();
    if (conds.size() != state.batch) throw ShapeError("one condition per sequence is required");
    if (stop < 1) throw InputError("chain stop step must be >= 1");
    const int guided = guided_step_count(cfg, sched.steps());
    const std::size_t B = state.batch, N = state.frames, per = N * motion::kFrameDim;
    std::vector<double> noise(per), next(state.x.size());
    for (int t = state.t; t >= stop; --t) {
        auto x0 = gen(state.x, B, N, t, conds);
        if (x0.size() != state.x.size()) throw ShapeError("generator output has the wrong size");
        if (t <= guided) {
            if (!rel) throw InputError("guided step requested without a relation model");
            std::vector<double> d(B * N * idf::kCellsPerFrame);
            std::vector<bool> usable(B, true);
            for (std::size_t b = 0; b < B; ++b) {
                try {
                    const auto db = variables_idf(
                        extract_variables(std::span<const double>(x0.data() + b * per, per)),
                        conds[b].object_canonical, cfg.metric);
                    std::copy(db.values.begin(), db.values.end(), d.begin() + b * N * idf::kCellsPerFrame);
                } catch (const NumericalError& e) {
                    usable[b] = false;  // degenerate rotation; this item stays unguided
                    if (hooks.warn) hooks.warn("sequence " + std::to_string(b) + ": " + e.what());
                }
            }
            const auto refined = rel(d, B, N, t, conds);
            if (refined.size() != d.size()) throw ShapeError("relation model output has the wrong size");
            for (std::size_t b = 0; b < B; ++b) {
                TraceEntry e{b, t, 0.0, 0.0, 0, true};
                if (usable[b]) {
                    idf::IdfTensor target(N);
                    std::copy_n(refined.begin() + static_cast<std::ptrdiff_t>(b * N * idf::kCellsPerFrame),
                                N * idf::kCellsPerFrame, target.values.begin());
                    const auto r = refine_prediction(std::span<double>(x0.data() + b * per, per), target,
                                                     conds[b].object_canonical, cfg);
                    e = {b, t, r.loss_before, r.loss_after, r.iterations, r.fallback};
                    if (r.fallback && hooks.warn)
                        hooks.warn("sequence " + std::to_string(b) + " t=" + std::to_string(t) +
                                   ": guidance fell back to the unrefined prediction (" + r.message + ")");
                }
                if (hooks.trace) hooks.trace(e);
            }
        }
        for (std::size_t b = 0; b < B; ++b) {
            if (t > 1)
                for (auto& v : noise) v = state.rngs[b].normal();
            const std::span<const double> xt(state.x.data() + b * per, per), xh(x0.data() + b * per, per);
            diffusion::ddpm_reverse_step<double>(xt, xh, t, sched, noise, std::span<double>(next.data() + b * per, per));
        }
        state.x.swap(next);
        state.t = t - 1;
        for (double v : state.x)
            if (!std::isfinite(v)) throw NumericalError("sampling produced non-finite values at t=" + std::to_string(t));
        if (hooks.after_step) hooks.after_step(t, state.x);
    }
}

inline std::vector<motion::MotionSequence> chain_sequences(const ChainState& state, std::span<const Condition> conds,
                                                           double fps) {
    if (state.t != 0) throw InputError("sampling chain has not finished");
    std::vector<motion::MotionSequence> out;
    const std::size_t per = state.frames * motion::kFrameDim;
    for (std::size_t b = 0; b < state.batch; ++b) {
        motion::MotionSequence m(state.frames, fps, conds[b].action_label);
        std::copy_n(state.x.begin() + static_cast<std::ptrdiff_t>(b * per), per, m.frames.begin());
        out.push_back(std::move(m));
    }
    return out;
}

// Full chain from x_T ~ N(0, I) down to t = 1.
inline std::vector<motion::MotionSequence> sample(std::size_t frames, std::span<const Condition> conds,
                                                  const GenFn& gen, const RelFn& rel,
                                                  const diffusion::NoiseSchedule& sched, const GuidanceConfig& cfg,
                                                  std::uint64_t seed, double fps = 30.0, const SampleHooks& hooks = {}) {
    auto state = init_chain(conds.size(), frames, seed, sched.steps());
    run_chain(state, 1, gen, rel, sched, cfg, conds, hooks);
    return chain_sequences(state, conds, fps);
}

// One result set per configuration, all from the same seed. Chains agree
// until their first guided step, so the unguided prefix runs once and each
// configuration branches from it; results equal independent `sample` calls.
inline std::vector<std::vector<motion::MotionSequence>> sample_sweep(
    std::size_t frames, std::span<const Condition> conds, const GenFn& gen, const RelFn& rel,
    const diffusion::NoiseSchedule& sched, std::span<const GuidanceConfig> cfgs, std::uint64_t seed, double fps = 30.0,
    std::span<const SampleHooks> hooks = {}) {
    if (!hooks.empty() && hooks.size() != cfgs.size()) throw InputError("sample_sweep: one hook set per configuration");
    for (const auto& c : cfgs) c.validate();
    std::vector<std::size_t> order(cfgs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return guided_step_count(cfgs[a], sched.steps()) > guided_step_count(cfgs[b], sched.steps());
    });
    GuidanceConfig plain;
    plain.window_fraction = 0.0;
    auto state = init_chain(conds.size(), frames, seed, sched.steps());
    std::vector<std::vector<motion::MotionSequence>> out(cfgs.size());
    for (auto idx : order) {
        const int g = guided_step_count(cfgs[idx], sched.steps());
        if (g < state.t) run_chain(state, g + 1, gen, {}, sched, plain, conds);
        auto branch = state;
        run_chain(branch, 1, gen, rel, sched, cfgs[idx], conds, hooks.empty() ? SampleHooks{} : hooks[idx]);
        out[idx] = chain_sequences(branch, conds, fps);
    }
    return out;
}

}  // namespace rog::guidance
