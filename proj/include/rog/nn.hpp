#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rog/autodiff.hpp"
#include "rog/error.hpp"
#include "rog/random.hpp"

namespace rog::nn {

using ad::Shape;
using ad::Tensor;

// Named trainable tensors plus AdamW moments.
template <typename T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor<T> tensor;
        std::vector<T> m;
        std::vector<T> v;
        bool decay = true;
    };

    Tensor<T> add(const std::string& name, Shape shape, std::vector<T> values, bool decay = true) {
        if (index_.count(name)) throw InputError("duplicate parameter name '" + name + "'");
        auto t = Tensor<T>::from(std::move(shape), std::move(values), true);
        index_[name] = entries_.size();
        entries_.push_back({name, t, std::vector<T>(t.numel(), T(0)), std::vector<T>(t.numel(), T(0)), decay});
        return t;
    }

    // U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Tensor<T> add_uniform(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
        std::vector<T> values(ad::numel_of(shape));
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (auto& x : values) x = static_cast<T>(rng.uniform(-bound, bound));
        return add(name, std::move(shape), std::move(values));
    }

    Tensor<T> add_constant(const std::string& name, Shape shape, T value, bool decay = false) {
        std::vector<T> values(ad::numel_of(shape), value);
        return add(name, std::move(shape), std::move(values), decay);
    }

    const Tensor<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw InputError("unknown parameter '" + name + "'");
        return entries_[it->second].tensor;
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }
    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    std::int64_t step_count() const { return step_; }
    void set_step_count(std::int64_t s) { step_ = s; }
    std::int64_t advance_step() { return ++step_; }

    std::size_t total_values() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.tensor.numel();
        return n;
    }

    void zero_grad() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
    std::int64_t step_ = 0;
};

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Decoupled weight decay: p <- p (1 - lr wd) - lr mhat / (sqrt(vhat) + eps).
template <typename T>
void adamw_step(ParamStore<T>& params, const AdamWConfig& cfg) {
    for (const auto& e : params.entries())
        if (!e.tensor.has_grad()) throw InputError("adamw_step: parameter '" + e.name + "' has no gradient");
    const std::int64_t step = params.advance_step();
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (auto& e : params.entries()) {
        auto p = e.tensor.mutable_data();
        const auto g = e.tensor.grad();
        const double decay = e.decay ? 1.0 - cfg.lr * cfg.weight_decay : 1.0;
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double gk = g[k];
            e.m[k] = static_cast<T>(cfg.beta1 * e.m[k] + (1.0 - cfg.beta1) * gk);
            e.v[k] = static_cast<T>(cfg.beta2 * e.v[k] + (1.0 - cfg.beta2) * gk * gk);
            const double mhat = e.m[k] / bc1;
            const double vhat = e.v[k] / bc2;
            p[k] = static_cast<T>(p[k] * decay - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
struct Linear {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]

    Linear() = default;
    Linear(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
           bool zero_init = false) {
        if (zero_init)
            weight = ps.add_constant(name + ".weight", {in, out}, T(0), true);
        else
            weight = ps.add_uniform(name + ".weight", {in, out}, in, rng);
        bias = ps.add_constant(name + ".bias", {out}, T(0));
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return ad::linear(x, weight, bias); }
};

template <typename T>
struct LayerNorm {
    Tensor<T> gain, bias;
    T eps = T(1e-5);

    LayerNorm() = default;
    LayerNorm(ParamStore<T>& ps, const std::string& name, std::size_t dim) {
        gain = ps.add_constant(name + ".gain", {dim}, T(1));
        bias = ps.add_constant(name + ".bias", {dim}, T(0));
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return ad::layer_norm(x, gain, bias, eps); }
};

// Scaled dot-product attention over q, k, v [B, L, dh]. Returns [B, L, dh];
// the attention probabilities [B, L, L] are written to `probs` when given.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::span<const std::uint8_t> key_mask = {}, Tensor<T>* probs = nullptr) {
    const T scale = T(1) / std::sqrt(static_cast<T>(q.dim(-1)));
    auto scores = ad::scale(ad::bmm(q, k, /*transpose_b=*/true), scale);
    auto p = ad::softmax(scores, key_mask);
    if (probs) *probs = p;
    return ad::bmm(p, v);
}

// x [B, L, d] -> [B, L, d] multi-head self-attention.
template <typename T>
Tensor<T> mhsa(const Tensor<T>& x, const Linear<T>& qkv, const Linear<T>& out, std::size_t heads,
               std::span<const std::uint8_t> key_mask = {}, Tensor<T>* probs = nullptr) {
    if (x.rank() != 3) throw ShapeError("mhsa: input must be [B, L, d], got " + ad::shape_str(x.shape()));
    const std::size_t B = x.dim(0), L = x.dim(1), d = x.dim(2);
    if (heads == 0 || d % heads != 0)
        throw ShapeError("mhsa: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
    const std::size_t dh = d / heads;
    auto proj = qkv(x);                                                 // [B, L, 3d]
    auto split = ad::permute(ad::reshape(proj, {B, L, 3, heads, dh}), {2, 0, 3, 1, 4});  // [3, B, h, L, dh]
    auto q = ad::reshape(ad::slice(split, 0, 0, 1), {B * heads, L, dh});
    auto k = ad::reshape(ad::slice(split, 0, 1, 2), {B * heads, L, dh});
    auto v = ad::reshape(ad::slice(split, 0, 2, 3), {B * heads, L, dh});
    auto o = attention(q, k, v, key_mask, probs);                       // [B*h, L, dh]
    auto merged = ad::reshape(ad::permute(ad::reshape(o, {B, heads, L, dh}), {0, 2, 1, 3}), {B, L, d});
    return out(merged);
}

template <typename T>
struct SelfAttention {
    Linear<T> qkv, out;
    std::size_t heads = 1;

    SelfAttention() = default;
    SelfAttention(ParamStore<T>& ps, const std::string& name, std::size_t dim, std::size_t heads_, Rng& rng)
        : qkv(ps, name + ".qkv", dim, 3 * dim, rng), out(ps, name + ".out", dim, dim, rng), heads(heads_) {
        if (heads == 0 || dim % heads != 0)
            throw ShapeError("attention width " + std::to_string(dim) + " not divisible by " + std::to_string(heads_));
    }

    Tensor<T> operator()(const Tensor<T>& x, std::span<const std::uint8_t> key_mask = {},
                         Tensor<T>* probs = nullptr) const {
        return mhsa(x, qkv, out, heads, key_mask, probs);
    }
};

// Two-layer GELU MLP with a 4x hidden width.
template <typename T>
struct FeedForward {
    Linear<T> up, down;

    FeedForward() = default;
    FeedForward(ParamStore<T>& ps, const std::string& name, std::size_t dim, Rng& rng)
        : up(ps, name + ".up", dim, 4 * dim, rng), down(ps, name + ".down", 4 * dim, dim, rng) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return down(ad::gelu(up(x))); }
};

// Pre-norm encoder layer: x + attn(ln(x)), then x + ffn(ln(x)).
template <typename T>
struct EncoderLayer {
    LayerNorm<T> ln1, ln2;
    SelfAttention<T> attn;
    FeedForward<T> ffn;

    EncoderLayer() = default;
    EncoderLayer(ParamStore<T>& ps, const std::string& name, std::size_t dim, std::size_t heads, Rng& rng)
        : ln1(ps, name + ".ln1", dim), ln2(ps, name + ".ln2", dim), attn(ps, name + ".attn", dim, heads, rng),
          ffn(ps, name + ".ffn", dim, rng) {}

    Tensor<T> operator()(const Tensor<T>& x) const {
        auto h = ad::add(x, attn(ln1(x)));
        return ad::add(h, ffn(ln2(h)));
    }
};

// Transformer sinusoidal features of a scalar position: [sin(p w_k), cos(p w_k)]
// with w_k = 10000^(-2k/d).
template <typename T>
std::vector<T> sinusoidal_embed(double position, std::size_t dim) {
    std::vector<T> out(dim, T(0));
    const std::size_t half = dim / 2;
    for (std::size_t k = 0; k < half; ++k) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(dim));
        out[k] = static_cast<T>(std::sin(position * freq));
        out[half + k] = static_cast<T>(std::cos(position * freq));
    }
    return out;
}

// [count, dim] table of sinusoidal_embed(0..count-1).
template <typename T>
std::vector<T> sinusoidal_table(std::size_t count, std::size_t dim) {
    std::vector<T> out;
    out.reserve(count * dim);
    for (std::size_t p = 0; p < count; ++p) {
        auto row = sinusoidal_embed<T>(static_cast<double>(p), dim);
        out.insert(out.end(), row.begin(), row.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint container: "ROGC", u32 version, u64 index length, JSON index
// {"tensors": [{name, shape, offset}], "manifest": ...}, then float32 payload
// (little-endian). Offsets count bytes from the start of the payload.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
inline void put_u32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw InputError("checkpoint: truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
}  // namespace detail

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& params, const nlohmann::json& manifest) {
    nlohmann::json index;
    index["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& e : params.entries()) {
        index["tensors"].push_back({{"name", e.name}, {"shape", e.tensor.shape()}, {"offset", offset}});
        offset += 4 * e.tensor.numel();
    }
    index["manifest"] = manifest;
    const std::string text = index.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write checkpoint " + path.string());
    out.write("ROGC", 4);
    detail::put_u32(out, kCheckpointVersion);
    const std::uint64_t len = text.size();
    detail::put_u32(out, static_cast<std::uint32_t>(len & 0xffffffffu));
    detail::put_u32(out, static_cast<std::uint32_t>(len >> 32));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : params.entries())
        for (T x : e.tensor.data()) {
            const float f = static_cast<float>(x);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            detail::put_u32(out, bits);
        }
}

struct CheckpointData {
    nlohmann::json manifest;
    std::map<std::string, std::pair<Shape, std::vector<float>>> tensors;
};

inline CheckpointData read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open checkpoint " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "ROGC", 4) != 0)
        throw InputError(path.string() + ": not a checkpoint (bad magic)");
    if (detail::get_u32(in) != kCheckpointVersion) throw InputError(path.string() + ": unsupported checkpoint version");
    const std::uint64_t lo = detail::get_u32(in), hi = detail::get_u32(in);
    const std::uint64_t len = lo | (hi << 32);
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw InputError(path.string() + ": truncated index");
    const auto index = nlohmann::json::parse(text);
    CheckpointData data;
    data.manifest = index.at("manifest");
    for (const auto& t : index.at("tensors")) {
        Shape shape = t.at("shape").get<Shape>();
        std::vector<float> values(ad::numel_of(shape));
        for (auto& v : values) {
            const std::uint32_t bits = detail::get_u32(in);
            std::memcpy(&v, &bits, 4);
        }
        data.tensors[t.at("name").get<std::string>()] = {std::move(shape), std::move(values)};
    }
    return data;
}

// Copies stored values into an already-constructed parameter set.
template <typename T>
void load_parameters(ParamStore<T>& params, const CheckpointData& data) {
    for (auto& e : params.entries()) {
        auto it = data.tensors.find(e.name);
        if (it == data.tensors.end()) throw InputError("checkpoint lacks parameter '" + e.name + "'");
        if (it->second.first != e.tensor.shape())
            throw ShapeError("checkpoint parameter '" + e.name + "' has shape " + ad::shape_str(it->second.first) +
                             ", model expects " + ad::shape_str(e.tensor.shape()));
        auto dst = e.tensor.mutable_data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(it->second.second[k]);
    }
    if (data.tensors.size() != params.size()) throw InputError("checkpoint has parameters the model does not define");
}

}  // namespace rog::nn
