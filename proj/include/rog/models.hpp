#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rog/autodiff.hpp"
#include "rog/diffusion.hpp"
#include "rog/error.hpp"
#include "rog/idf.hpp"
#include "rog/motion.hpp"
#include "rog/nn.hpp"
#include "rog/random.hpp"

namespace rog::models {

using ad::Tensor;
using geometry::Vec3;
using nn::ParamStore;

inline constexpr std::size_t kTextWidth = 512;
inline constexpr std::size_t kConditionTokens = 4;  // time, text, rest pose, object keypoints
inline constexpr std::size_t kSpatialTokens = 16;   // 4 x 4 grid
inline constexpr std::size_t kPointsFlat = 3 * motion::kNumJoints;

// Conditioning for one sequence. The label indexes a learned 512-wide
// embedding table standing in for a text encoder.
struct Condition {
    std::uint32_t action_label = 0;
    std::array<Vec3, motion::kNumJoints> human_rest{};          // default pose joints
    std::array<Vec3, motion::kNumKeypoints> object_canonical{};  // canonical object keypoints
};

template <typename T>
std::vector<T> flatten_points(std::span<const Vec3> pts) {
    std::vector<T> out;
    out.reserve(3 * pts.size());
    for (const auto& p : pts)
        for (int a = 0; a < 3; ++a) out.push_back(static_cast<T>(p[a]));
    return out;
}

template <typename T>
struct ConditionEncoder {
    Tensor<T> label_table;  // [vocab, 512]
    nn::Linear<T> text_proj, rest_proj, object_proj, time_proj;
    std::size_t width = 0;
    std::size_t vocab = 0;

    ConditionEncoder() = default;
    ConditionEncoder(ParamStore<T>& ps, const std::string& name, std::size_t vocab_, std::size_t width_, Rng& rng)
        : width(width_), vocab(vocab_) {
        label_table = ps.add_uniform(name + ".label_table", {vocab, kTextWidth}, 1, rng);
        text_proj = nn::Linear<T>(ps, name + ".text_proj", kTextWidth, width, rng);
        rest_proj = nn::Linear<T>(ps, name + ".rest_proj", kPointsFlat, width, rng);
        object_proj = nn::Linear<T>(ps, name + ".object_proj", kPointsFlat, width, rng);
        time_proj = nn::Linear<T>(ps, name + ".time_proj", width, width, rng);
    }

    void check_labels(std::span<const Condition> conds) const {
        for (const auto& c : conds)
            if (c.action_label >= vocab)
                throw InputError("unknown action label " + std::to_string(c.action_label) + " (vocabulary size " +
                                 std::to_string(vocab) + ")");
    }

    // [B, 512] learned text embeddings.
    Tensor<T> text_embed(std::span<const Condition> conds) const {
        check_labels(conds);
        std::vector<std::size_t> idx;
        for (const auto& c : conds) idx.push_back(c.action_label);
        return ad::embedding(label_table, idx);
    }

    // [B, 4, d] condition tokens.
    Tensor<T> tokens(std::span<const int> steps, std::span<const Condition> conds) const {
        const std::size_t B = conds.size();
        if (steps.size() != B) throw ShapeError("condition tokens: one diffusion step per batch item required");
        std::vector<T> time_feat, rest, object;
        for (std::size_t b = 0; b < B; ++b) {
            auto e = nn::sinusoidal_embed<T>(steps[b], width);
            time_feat.insert(time_feat.end(), e.begin(), e.end());
            auto q = flatten_points<T>(conds[b].human_rest);
            rest.insert(rest.end(), q.begin(), q.end());
            auto p = flatten_points<T>(conds[b].object_canonical);
            object.insert(object.end(), p.begin(), p.end());
        }
        auto t_tok = time_proj(Tensor<T>::from({B, width}, std::move(time_feat)));
        auto x_tok = text_proj(text_embed(conds));
        auto q_tok = rest_proj(Tensor<T>::from({B, kPointsFlat}, std::move(rest)));
        auto p_tok = object_proj(Tensor<T>::from({B, kPointsFlat}, std::move(object)));
        std::vector<Tensor<T>> parts;
        for (auto* t : {&t_tok, &x_tok, &q_tok, &p_tok}) parts.push_back(ad::reshape(*t, {B, 1, width}));
        return ad::concat(parts, 1);
    }
};

// ---------------------------------------------------------------------------
// Motion generation model

struct GenConfig {
    std::size_t layers = 4;
    std::size_t width = 128;
    std::size_t heads = 4;
    std::size_t vocab = 5;

    static GenConfig full_size() { return {8, 384, 4, 5}; }
};

inline nlohmann::json to_json(const GenConfig& c) {
    return {{"layers", c.layers}, {"width", c.width}, {"heads", c.heads}, {"vocab", c.vocab}};
}
inline GenConfig gen_config_from_json(const nlohmann::json& j) {
    return {j.at("layers").get<std::size_t>(), j.at("width").get<std::size_t>(), j.at("heads").get<std::size_t>(),
            j.at("vocab").get<std::size_t>()};
}

// Transformer encoder over [condition tokens ; motion frames] predicting the
// clean motion from a noisy one (x0 parameterization).
template <typename T>
class MotionGenModel {
public:
    MotionGenModel(const GenConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        Rng rng(derive_seed(seed, 101));
        cond_ = ConditionEncoder<T>(params_, "gen.cond", cfg.vocab, cfg.width, rng);
        in_proj_ = nn::Linear<T>(params_, "gen.in_proj", motion::kFrameDim, cfg.width, rng);
        for (std::size_t l = 0; l < cfg.layers; ++l)
            layers_.emplace_back(params_, "gen.layer" + std::to_string(l), cfg.width, cfg.heads, rng);
        final_ln_ = nn::LayerNorm<T>(params_, "gen.final_ln", cfg.width);
        out_proj_ = nn::Linear<T>(params_, "gen.out_proj", cfg.width, motion::kFrameDim, rng, /*zero_init=*/true);
    }

    const GenConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }
    const ConditionEncoder<T>& condition_encoder() const { return cond_; }

    // x [B, N, 288] -> predicted clean motion [B, N, 288].
    Tensor<T> forward(const Tensor<T>& x, std::span<const int> steps, std::span<const Condition> conds) const {
        if (x.rank() != 3 || x.dim(2) != motion::kFrameDim || x.dim(0) != conds.size())
            throw ShapeError("gen_forward: expected [B, N, 288] with B conditions, got " + ad::shape_str(x.shape()));
        const std::size_t B = x.dim(0), N = x.dim(1), d = cfg_.width;
        auto pos = Tensor<T>::from({N, d}, nn::sinusoidal_table<T>(N, d));
        auto frames = ad::add(in_proj_(x), pos);
        auto h = ad::concat<T>({cond_.tokens(steps, conds), frames}, 1);
        for (const auto& layer : layers_) h = layer(h);
        h = ad::slice(final_ln_(h), 1, kConditionTokens, kConditionTokens + N);
        return ad::reshape(out_proj_(h), {B, N, motion::kFrameDim});
    }

private:
    GenConfig cfg_;
    ParamStore<T> params_;
    ConditionEncoder<T> cond_;
    nn::Linear<T> in_proj_;
    std::vector<nn::EncoderLayer<T>> layers_;
    nn::LayerNorm<T> final_ln_;
    nn::Linear<T> out_proj_;
};

// ---------------------------------------------------------------------------
// Relation model

struct RelConfig {
    std::size_t blocks = 4;
    std::size_t width = 128;
    std::size_t heads = 4;
    std::size_t vocab = 5;
    bool temporal_pos = true;

    static RelConfig full_size() { return {8, 384, 4, 5, true}; }
};

inline nlohmann::json to_json(const RelConfig& c) {
    return {{"blocks", c.blocks}, {"width", c.width}, {"heads", c.heads}, {"vocab", c.vocab},
            {"temporal_pos", c.temporal_pos}};
}
inline RelConfig rel_config_from_json(const nlohmann::json& j) {
    return {j.at("blocks").get<std::size_t>(), j.at("width").get<std::size_t>(), j.at("heads").get<std::size_t>(),
            j.at("vocab").get<std::size_t>(), j.at("temporal_pos").get<bool>()};
}

template <typename T>
struct SpaceTimeBlock {
    nn::LayerNorm<T> ln_space, ln_time, ln_ffn;
    nn::SelfAttention<T> attn_space, attn_time;
    nn::FeedForward<T> ffn;

    SpaceTimeBlock() = default;
    SpaceTimeBlock(ParamStore<T>& ps, const std::string& name, std::size_t d, std::size_t heads, Rng& rng)
        : ln_space(ps, name + ".ln_space", d), ln_time(ps, name + ".ln_time", d), ln_ffn(ps, name + ".ln_ffn", d),
          attn_space(ps, name + ".attn_space", d, heads, rng), attn_time(ps, name + ".attn_time", d, heads, rng),
          ffn(ps, name + ".ffn", d, rng) {}
};

// Denoiser over IDF tensors: each frame's 24x24 field is linearly reduced to a
// 4x4 grid of tokens, blocks alternate attention across the 16 spatial tokens
// of a frame and across frames for each spatial token, and a per-frame linear
// map restores the 24x24 field.
template <typename T>
class RelationModel {
public:
    RelationModel(const RelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        Rng rng(derive_seed(seed, 202));
        cond_ = ConditionEncoder<T>(params_, "rel.cond", cfg.vocab, cfg.width, rng);
        down_ = nn::Linear<T>(params_, "rel.down", idf::kCellsPerFrame, kSpatialTokens * cfg.width, rng);
        spatial_pos_ = params_.add_uniform("rel.spatial_pos", {kSpatialTokens, cfg.width}, cfg.width, rng);
        for (std::size_t b = 0; b < cfg.blocks; ++b)
            blocks_.emplace_back(params_, "rel.block" + std::to_string(b), cfg.width, cfg.heads, rng);
        final_ln_ = nn::LayerNorm<T>(params_, "rel.final_ln", cfg.width);
        up_ = nn::Linear<T>(params_, "rel.up", kSpatialTokens * cfg.width, idf::kCellsPerFrame, rng);
        skip_ = nn::Linear<T>(params_, "rel.skip", cfg.width, 1, rng);
    }

    const RelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    // d [B, N, 576] (frame-major IDF cells) -> [B, N, 576].
    Tensor<T> forward(const Tensor<T>& d, std::span<const int> steps, std::span<const Condition> conds) const {
        if (d.rank() != 3 || d.dim(2) != idf::kCellsPerFrame || d.dim(0) != conds.size())
            throw ShapeError("rel_forward: expected [B, N, 576] with B conditions, got " + ad::shape_str(d.shape()));
        const std::size_t B = d.dim(0), N = d.dim(1), w = cfg_.width, S = kSpatialTokens;

        // Each frame's 576 cells map to a 4 x 4 grid of width-w tokens.
        auto x = ad::reshape(down_(d), {B, N, S, w});
        x = ad::add(x, spatial_pos_);
        if (cfg_.temporal_pos) {
            std::vector<T> table;
            table.reserve(N * S * w);
            for (std::size_t n = 0; n < N; ++n) {
                auto row = nn::sinusoidal_embed<T>(static_cast<double>(n), w);
                for (std::size_t s = 0; s < S; ++s) table.insert(table.end(), row.begin(), row.end());
            }
            x = ad::add(x, Tensor<T>::from({N, S, w}, std::move(table)));
        }

        // One condition token per batch item, repeated for each spatial column.
        auto cond_tokens = cond_.tokens(steps, conds);  // [B, 4, w]
        auto cond_rows = ad::reshape(cond_tokens, {B, kConditionTokens * w});
        auto cond_sum = ad::slice(cond_rows, 1, 0, w);
        for (std::size_t k = 1; k < kConditionTokens; ++k)
            cond_sum = ad::add(cond_sum, ad::slice(cond_rows, 1, k * w, (k + 1) * w));
        std::vector<std::size_t> rep;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t s = 0; s < S; ++s) rep.push_back(b);
        auto cond_col = ad::reshape(ad::embedding(cond_sum, rep), {B * S, 1, w});

        for (const auto& blk : blocks_) {
            auto xs = ad::reshape(x, {B * N, S, w});
            xs = ad::add(xs, blk.attn_space(blk.ln_space(xs)));
            auto xt = ad::reshape(ad::permute(ad::reshape(xs, {B, N, S, w}), {0, 2, 1, 3}), {B * S, N, w});
            auto with_cond = ad::concat<T>({cond_col, xt}, 1);
            auto attended = ad::slice(blk.attn_time(blk.ln_time(with_cond)), 1, 1, N + 1);
            xt = ad::add(xt, attended);
            x = ad::permute(ad::reshape(xt, {B, S, N, w}), {0, 2, 1, 3});  // [B, N, S, w]
            x = ad::add(x, blk.ffn(blk.ln_ffn(x)));
        }
        // A step-dependent gate blends the input into the output, so nearly
        // clean inputs need no reconstruction through the token grid.
        auto gate = ad::reshape(ad::sigmoid(skip_(ad::slice(cond_rows, 1, 0, w))), {B});
        auto f = up_(ad::reshape(final_ln_(x), {B, N, S * w}));
        return ad::add(f, ad::scale_rows(ad::sub(d, f), gate));
    }

private:
    RelConfig cfg_;
    ParamStore<T> params_;
    ConditionEncoder<T> cond_;
    nn::Linear<T> down_;
    Tensor<T> spatial_pos_;
    std::vector<SpaceTimeBlock<T>> blocks_;
    nn::LayerNorm<T> final_ln_;
    nn::Linear<T> up_, skip_;
};

// ---------------------------------------------------------------------------
// Losses

// Euclidean distances from squared ones; gradient guarded at zero.
template <typename T>
Tensor<T> sqrt_op(const Tensor<T>& a) {
    ad::Buffer<T> out(a.numel());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::sqrt(std::max(a.data()[k], T(0)));
    return ad::detail::make_result<T>(a.shape(), std::move(out), {a}, [](ad::Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t k = 0; k < g.size(); ++k)
            g[k] += self.grad[k] * T(0.5) / std::max(self.value[k], T(1e-12));
    });
}

// Rotation decoded from the first two columns of each raw 3x3 [M, 3, 3] by
// Gram-Schmidt, as evaluation reads it. Degenerate matrices pass through
// unchanged.
template <typename T>
Tensor<T> orthonormalize_op(const Tensor<T>& m) {
    if (m.rank() != 3 || m.dim(1) != 3 || m.dim(2) != 3)
        throw ShapeError("orthonormalize: expected [M, 3, 3], got " + ad::shape_str(m.shape()));
    const std::size_t count = m.dim(0);
    auto raw = [](const T* p) {
        geometry::Mat3 r;
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) r(a, b) = static_cast<double>(p[3 * a + b]);
        return r;
    };
    auto decoded = std::make_shared<std::vector<bool>>(count, false);
    ad::Buffer<T> out(m.data().begin(), m.data().end());
    for (std::size_t k = 0; k < count; ++k) {
        try {
            const auto r = motion::rot6d_to_matrix(motion::rot6d_from_columns(raw(m.data().data() + 9 * k)));
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) out[9 * k + 3 * a + b] = static_cast<T>(r(a, b));
            (*decoded)[k] = true;
        } catch (const NumericalError&) {
        }
    }
    return ad::detail::make_result<T>(m.shape(), std::move(out), {m}, [decoded, count, raw](ad::Node<T>& self) {
        const auto& in = self.parents[0]->value;
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t k = 0; k < count; ++k) {
            const T* up = self.grad.data() + 9 * k;
            if (!(*decoded)[k]) {
                for (int e = 0; e < 9; ++e) g[9 * k + e] += up[e];
                continue;
            }
            geometry::Mat3 gm;
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) gm(a, b) = static_cast<double>(up[3 * a + b]);
            const auto g6 = motion::rot6d_to_matrix_vjp(motion::rot6d_from_columns(raw(in.data() + 9 * k)), gm);
            for (int a = 0; a < 3; ++a) {
                g[9 * k + 3 * a] += static_cast<T>(g6.a1[a]);
                g[9 * k + 3 * a + 1] += static_cast<T>(g6.a2[a]);
            }
        }
    });
}

// Predicted IDF [B*N, 24, 24] from a predicted motion batch [B, N, 288]. The
// object keypoints come from the predicted transform applied to each item's
// canonical keypoints.
template <typename T>
Tensor<T> idf_from_motion(const Tensor<T>& motion_batch, std::span<const Condition> conds,
                          idf::Metric metric = idf::Metric::squared) {
    const std::size_t B = motion_batch.dim(0), N = motion_batch.dim(1);
    auto flat = ad::reshape(motion_batch, {B * N, motion::kFrameDim});
    auto joints = ad::reshape(ad::slice(flat, 1, motion::kJointsOffset, motion::kJointsOffset + 3 * motion::kNumJoints),
                              {B * N, motion::kNumJoints, 3});
    auto trans = ad::slice(flat, 1, motion::kObjTransOffset, motion::kObjTransOffset + 3);
    auto rot = orthonormalize_op(
        ad::reshape(ad::slice(flat, 1, motion::kObjRotOffset, motion::kObjRotOffset + 9), {B * N, 3, 3}));
    std::vector<Tensor<T>> kps;
    for (std::size_t b = 0; b < B; ++b) {
        const auto canon = flatten_points<T>(conds[b].object_canonical);
        kps.push_back(ad::transform_points<T>(canon, ad::slice(rot, 0, b * N, (b + 1) * N),
                                              ad::slice(trans, 0, b * N, (b + 1) * N)));
    }
    auto keypoints = B == 1 ? kps[0] : ad::concat(kps, 0);
    auto sq = ad::pairwise_sqdist(joints, keypoints);
    return metric == idf::Metric::squared ? sq : sqrt_op(sq);
}

struct GenLossParts {
    double total = 0.0;
    double rec = 0.0;
    double idf = 0.0;
};

// L_rec + lambda * L_IDF. `gt_idf` is [B*N, 24, 24] (frame-major).
template <typename T>
Tensor<T> gen_loss(const Tensor<T>& m0, const Tensor<T>& pred, const Tensor<T>& gt_idf,
                   std::span<const Condition> conds, double lambda_idf, GenLossParts* parts = nullptr,
                   idf::Metric metric = idf::Metric::squared) {
    if (m0.shape() != pred.shape()) throw ShapeError("gen_loss: target and prediction shapes differ");
    auto rec = ad::mse(pred, m0);
    Tensor<T> total = rec;
    double idf_value = 0.0;
    if (lambda_idf != 0.0) {
        auto pred_idf = idf_from_motion(pred, conds, metric);
        if (pred_idf.shape() != gt_idf.shape())
            throw ShapeError("gen_loss: ground-truth IDF shape " + ad::shape_str(gt_idf.shape()) + " vs " +
                             ad::shape_str(pred_idf.shape()));
        auto l_idf = ad::mse(pred_idf, gt_idf);
        idf_value = l_idf.item();
        total = ad::add(rec, ad::scale(l_idf, static_cast<T>(lambda_idf)));
    }
    if (parts) *parts = {static_cast<double>(total.item()), static_cast<double>(rec.item()), idf_value};
    return total;
}

template <typename T>
Tensor<T> rel_loss(const Tensor<T>& d0, const Tensor<T>& pred) {
    return ad::mse(pred, d0);
}

// ---------------------------------------------------------------------------
// Training

struct TrainingSample {
    motion::MotionSequence motion;
    idf::IdfTensor idf;  // ground truth from the clean trajectory
    Condition condition;
};

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch = 8;
    nn::AdamWConfig adam{};
    double lambda_idf = 5.0;
    std::uint64_t seed = 0;
    idf::Metric metric = idf::Metric::squared;
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"steps", c.steps},
            {"batch", c.batch},
            {"lr", c.adam.lr},
            {"beta1", c.adam.beta1},
            {"beta2", c.adam.beta2},
            {"eps", c.adam.eps},
            {"weight_decay", c.adam.weight_decay},
            {"lambda_idf", c.lambda_idf},
            {"seed", c.seed},
            {"idf_metric", idf::to_string(c.metric)}};
}

struct TrainResult {
    std::vector<double> losses;  // one entry per step
};

namespace detail {

template <typename T>
std::vector<T> to_scalar(std::span<const double> v) {
    return std::vector<T>(v.begin(), v.end());
}

// Groups the sampled indices by frame count so each group stacks into a batch.
inline std::map<std::size_t, std::vector<std::size_t>> group_by_length(std::span<const TrainingSample> data,
                                                                       const std::vector<std::size_t>& picks) {
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (auto i : picks) groups[data[i].motion.num_frames()].push_back(i);
    return groups;
}

// Shared step driver: samples items, runs `loss_fn` per equal-length group,
// accumulates gradients weighted by group size, then applies AdamW.
template <typename T, typename LossFn>
TrainResult run_training(ParamStore<T>& params, std::span<const TrainingSample> data,
                         const diffusion::NoiseSchedule& sched, const TrainConfig& cfg, LossFn&& loss_fn,
                         const std::function<void(std::size_t, double)>& on_step) {
    if (data.empty()) throw InputError("training dataset is empty");
    if (cfg.batch == 0) throw InputError("training batch size must be positive");
    Rng rng(derive_seed(cfg.seed, 303));
    TrainResult result;
    result.losses.reserve(cfg.steps);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<std::size_t> picks(cfg.batch);
        for (auto& p : picks) p = rng.uniform_index(data.size());
        double step_loss = 0.0;
        for (const auto& [len, items] : group_by_length(data, picks)) {
            std::vector<int> steps(items.size());
            for (auto& t : steps) t = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(sched.steps())));
            const double weight = static_cast<double>(items.size()) / static_cast<double>(cfg.batch);
            auto loss = loss_fn(items, steps, rng);
            const double value = static_cast<double>(loss.item());
            if (!std::isfinite(value))
                throw NumericalError("training loss became non-finite at step " + std::to_string(step));
            step_loss += weight * value;
            ad::backward(weight == 1.0 ? loss : ad::scale(loss, static_cast<T>(weight)));
        }
        nn::adamw_step(params, cfg.adam);
        params.zero_grad();
        result.losses.push_back(step_loss);
        if (on_step) on_step(step, step_loss);
    }
    return result;
}

}  // namespace detail

template <typename T>
TrainResult train_generation(MotionGenModel<T>& model, std::span<const TrainingSample> data,
                             const diffusion::NoiseSchedule& sched, const TrainConfig& cfg,
                             const std::function<void(std::size_t, double)>& on_step = {}) {
    auto loss_fn = [&](const std::vector<std::size_t>& items, const std::vector<int>& steps, Rng& rng) {
        const std::size_t B = items.size(), N = data[items[0]].motion.num_frames();
        const std::size_t per = N * motion::kFrameDim;
        std::vector<T> clean(B * per), noisy(B * per), gt_idf;
        std::vector<Condition> conds;
        for (std::size_t b = 0; b < B; ++b) {
            const auto& s = data[items[b]];
            std::vector<T> x0 = detail::to_scalar<T>(s.motion.frames);
            std::vector<T> noise(per);
            for (auto& v : noise) v = static_cast<T>(rng.normal());
            diffusion::q_sample<T>(x0, steps[b], noise, sched, std::span<T>(noisy.data() + b * per, per));
            std::copy(x0.begin(), x0.end(), clean.begin() + b * per);
            gt_idf.insert(gt_idf.end(), s.idf.values.begin(), s.idf.values.end());
            conds.push_back(s.condition);
        }
        auto m0 = Tensor<T>::from({B, N, motion::kFrameDim}, std::move(clean));
        auto xt = Tensor<T>::from({B, N, motion::kFrameDim}, std::move(noisy));
        auto target_idf = Tensor<T>::from({B * N, idf::kRows, idf::kCols}, std::move(gt_idf));
        auto pred = model.forward(xt, steps, conds);
        return gen_loss(m0, pred, target_idf, conds, cfg.lambda_idf, nullptr, cfg.metric);
    };
    return detail::run_training(model.params(), data, sched, cfg, loss_fn, on_step);
}

template <typename T>
TrainResult train_relation(RelationModel<T>& model, std::span<const TrainingSample> data,
                           const diffusion::NoiseSchedule& sched, const TrainConfig& cfg,
                           const std::function<void(std::size_t, double)>& on_step = {}) {
    auto loss_fn = [&](const std::vector<std::size_t>& items, const std::vector<int>& steps, Rng& rng) {
        const std::size_t B = items.size(), N = data[items[0]].motion.num_frames();
        const std::size_t per = N * idf::kCellsPerFrame;
        std::vector<T> clean(B * per), noisy(B * per);
        std::vector<Condition> conds;
        for (std::size_t b = 0; b < B; ++b) {
            const auto& s = data[items[b]];
            std::vector<T> d0 = detail::to_scalar<T>(s.idf.values);
            std::vector<T> noise(per);
            for (auto& v : noise) v = static_cast<T>(rng.normal());
            diffusion::q_sample<T>(d0, steps[b], noise, sched, std::span<T>(noisy.data() + b * per, per));
            std::copy(d0.begin(), d0.end(), clean.begin() + b * per);
            conds.push_back(s.condition);
        }
        auto target = Tensor<T>::from({B, N, idf::kCellsPerFrame}, std::move(clean));
        auto dt = Tensor<T>::from({B, N, idf::kCellsPerFrame}, std::move(noisy));
        return rel_loss(target, model.forward(dt, steps, conds));
    };
    return detail::run_training(model.params(), data, sched, cfg, loss_fn, on_step);
}

// ---------------------------------------------------------------------------
// Checkpoints

template <typename Model>
void save_model(const std::filesystem::path& path, const Model& model, const nlohmann::json& manifest) {
    nn::save_checkpoint(path, model.params(), manifest);
}

template <typename T>
std::unique_ptr<MotionGenModel<T>> load_gen_model(const std::filesystem::path& path, nlohmann::json* manifest = nullptr) {
    const auto data = nn::read_checkpoint(path);
    if (data.manifest.value("kind", "") != "gen") throw InputError(path.string() + ": not a generation-model checkpoint");
    auto model = std::make_unique<MotionGenModel<T>>(gen_config_from_json(data.manifest.at("model")), 0);
    nn::load_parameters(model->params(), data);
    if (manifest) *manifest = data.manifest;
    return model;
}

template <typename T>
std::unique_ptr<RelationModel<T>> load_rel_model(const std::filesystem::path& path, nlohmann::json* manifest = nullptr) {
    const auto data = nn::read_checkpoint(path);
    if (data.manifest.value("kind", "") != "rel") throw InputError(path.string() + ": not a relation-model checkpoint");
    auto model = std::make_unique<RelationModel<T>>(rel_config_from_json(data.manifest.at("model")), 0);
    nn::load_parameters(model->params(), data);
    if (manifest) *manifest = data.manifest;
    return model;
}

}  // namespace rog::models
