#pragma once
// Run configuration: a flat map of dotted keys with typed defaults. Values
// are layered file < environment (ROG_*) < command-line overrides, unknown
// keys are rejected at every layer, and the resolved map is always written
// out in full.

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rog/diffusion.hpp"
#include "rog/error.hpp"
#include "rog/guidance.hpp"
#include "rog/idf.hpp"
#include "rog/metrics.hpp"
#include "rog/models.hpp"
#include "rog/synth.hpp"

namespace rog::config {

using nlohmann::json;

inline json default_values() {
    const synth::DatasetConfig data;
    const models::GenConfig gen;
    const models::RelConfig rel;
    const models::TrainConfig train;
    const guidance::GuidanceConfig guide;
    const metrics::EvalConfig eval;
    return {
        {"seed", 0},
        {"data.count", data.count},
        {"data.mix", data.mix},
        {"data.train_ratio", data.train_ratio},
        {"data.frames", data.frames},
        {"data.fps", data.fps},
        {"data.jitter", data.jitter},
        {"diffusion.steps", 50},
        {"diffusion.beta_start", diffusion::kDefaultBetaStart},
        {"diffusion.beta_end", diffusion::kDefaultBetaEnd},
        {"gen.layers", gen.layers},
        {"gen.width", gen.width},
        {"gen.heads", gen.heads},
        {"rel.blocks", rel.blocks},
        {"rel.width", rel.width},
        {"rel.heads", rel.heads},
        {"rel.temporal_pos", rel.temporal_pos},
        {"train.steps", train.steps},
        {"train.batch", train.batch},
        {"train.lr", train.adam.lr},
        {"train.beta1", train.adam.beta1},
        {"train.beta2", train.adam.beta2},
        {"train.eps", train.adam.eps},
        {"train.weight_decay", train.adam.weight_decay},
        {"train.lambda_idf", train.lambda_idf},
        {"idf.metric", idf::to_string(train.metric)},
        {"guidance.window_fraction", guide.window_fraction},
        {"guidance.k", guide.k},
        {"guidance.history", guide.history},
        {"guidance.grad_tol", guide.grad_tol},
        {"sample.frames", data.frames},
        {"sample.count", 1},
        {"sample.fps", data.fps},
        {"eval.contact_distance", eval.contact_distance},
        {"eval.collision_depth", eval.collision_depth},
        {"eval.mdev_alpha", eval.mdev_alpha},
        {"eval.proxy_points", eval.proxy.points_per_bone},
        {"eval.feature_frames", eval.feature_frames},
        {"eval.diversity_pairs", eval.diversity_pairs},
    };
}

// "train.lambda_idf" -> "ROG_TRAIN_LAMBDA_IDF".
inline std::string env_name(const std::string& key) {
    std::string out = "ROG_";
    for (char c : key) out += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

inline double parse_number(const std::string& key, const std::string& text) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(text, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != text.size()) throw InputError("config key '" + key + "': '" + text + "' is not a number");
    return v;
}

// Coerces `value` to the JSON type of `proto`.
inline json coerce(const std::string& key, const json& proto, const json& value) {
    auto bad = [&]() -> json {
        throw InputError("config key '" + key + "': expected " + proto.type_name() + ", got " + value.dump());
    };
    if (value.is_string() && !proto.is_string()) {
        const std::string text = trim(value.get<std::string>());
        if (proto.is_boolean()) {
            if (text == "true" || text == "1") return true;
            if (text == "false" || text == "0") return false;
            return bad();
        }
        if (proto.is_array()) {
            json arr = json::array();
            std::size_t start = 0;
            while (start <= text.size()) {
                const auto comma = text.find(',', start);
                const auto item = trim(text.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
                arr.push_back(item);
                if (comma == std::string::npos) break;
                start = comma + 1;
            }
            return coerce(key, proto, arr);
        }
        return coerce(key, proto, json(parse_number(key, text)));
    }
    if (proto.is_boolean()) return value.is_boolean() ? value : bad();
    if (proto.is_string()) return value.is_string() ? value : bad();
    if (proto.is_array()) {
        if (!value.is_array() || value.size() != proto.size()) return bad();
        json arr = json::array();
        for (std::size_t k = 0; k < value.size(); ++k) arr.push_back(coerce(key, proto[k], value[k]));
        return arr;
    }
    if (!value.is_number()) return bad();
    if (proto.is_number_unsigned() || proto.is_number_integer()) {
        const double d = value.get<double>();
        if (d < 0.0 || d != std::floor(d)) throw InputError("config key '" + key + "': expected a non-negative integer");
        return static_cast<std::uint64_t>(d);
    }
    return value.get<double>();
}

// Nested objects flatten to dotted keys.
inline void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
    for (const auto& [k, v] : j.items()) {
        const std::string key = prefix.empty() ? k : prefix + "." + k;
        if (v.is_object())
            flatten(v, key, out);
        else
            out.emplace_back(key, v);
    }
}

}  // namespace detail

class RunConfig {
public:
    RunConfig() : values_(default_values()) {}

    void set(const std::string& key, const json& value) {
        const auto it = values_.find(key);
        if (it == values_.end()) throw InputError("unknown config key '" + key + "'");
        *it = detail::coerce(key, *it, value);
    }

    // "key=value" as given on the command line.
    void set_assignment(const std::string& text) {
        const auto eq = text.find('=');
        if (eq == std::string::npos || eq == 0) throw InputError("expected key=value, got '" + text + "'");
        set(detail::trim(text.substr(0, eq)), json(text.substr(eq + 1)));
    }

    void merge_json(const json& j, const std::string& source) {
        if (!j.is_object()) throw InputError(source + ": config must be a JSON object");
        std::vector<std::pair<std::string, json>> flat;
        detail::flatten(j, "", flat);
        for (const auto& [k, v] : flat) {
            try {
                set(k, v);
            } catch (const InputError& e) {
                throw InputError(source + ": " + e.what());
            }
        }
    }

    void merge_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw InputError("cannot open config " + path.string());
        json j;
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            throw InputError(path.string() + ": invalid JSON: " + e.what());
        }
        merge_json(j, path.string());
    }

    // `env` lists NAME=VALUE strings; any ROG_ variable must name a key.
    void merge_env(char** env) {
        std::map<std::string, std::string> by_env;
        for (const auto& [k, v] : values_.items()) by_env[env_name(k)] = k;
        for (char** e = env; e && *e; ++e) {
            const std::string entry = *e;
            if (entry.rfind("ROG_", 0) != 0) continue;
            const auto eq = entry.find('=');
            const std::string name = entry.substr(0, eq);
            const auto it = by_env.find(name);
            if (it == by_env.end()) throw InputError("unknown config variable " + name);
            try {
                set(it->second, json(eq == std::string::npos ? "" : entry.substr(eq + 1)));
            } catch (const InputError& err) {
                throw InputError(name + ": " + err.what());
            }
        }
    }

    const json& values() const { return values_; }
    const json& at(const std::string& key) const { return values_.at(key); }
    template <typename T>
    T get(const std::string& key) const {
        return values_.at(key).get<T>();
    }

    std::uint64_t seed() const { return get<std::uint64_t>("seed"); }

    synth::DatasetConfig dataset() const {
        synth::DatasetConfig c;
        c.count = get<std::size_t>("data.count");
        c.mix = get<std::array<double, synth::kNumActions>>("data.mix");
        c.train_ratio = get<double>("data.train_ratio");
        c.seed = seed();
        c.frames = get<std::size_t>("data.frames");
        c.fps = get<double>("data.fps");
        c.jitter = get<double>("data.jitter");
        return c;
    }

    diffusion::NoiseSchedule schedule() const {
        return diffusion::make_linear_schedule(get<int>("diffusion.steps"), get<double>("diffusion.beta_start"),
                                               get<double>("diffusion.beta_end"));
    }

    models::GenConfig gen() const {
        return {get<std::size_t>("gen.layers"), get<std::size_t>("gen.width"), get<std::size_t>("gen.heads"),
                synth::kNumActions};
    }

    models::RelConfig rel() const {
        return {get<std::size_t>("rel.blocks"), get<std::size_t>("rel.width"), get<std::size_t>("rel.heads"),
                synth::kNumActions, get<bool>("rel.temporal_pos")};
    }

    idf::Metric metric() const { return idf::parse_metric(get<std::string>("idf.metric")); }

    models::TrainConfig train() const {
        models::TrainConfig c;
        c.steps = get<std::size_t>("train.steps");
        c.batch = get<std::size_t>("train.batch");
        c.adam.lr = get<double>("train.lr");
        c.adam.beta1 = get<double>("train.beta1");
        c.adam.beta2 = get<double>("train.beta2");
        c.adam.eps = get<double>("train.eps");
        c.adam.weight_decay = get<double>("train.weight_decay");
        c.lambda_idf = get<double>("train.lambda_idf");
        c.seed = seed();
        c.metric = metric();
        return c;
    }

    guidance::GuidanceConfig guide() const {
        guidance::GuidanceConfig c;
        c.window_fraction = get<double>("guidance.window_fraction");
        c.k = get<std::size_t>("guidance.k");
        c.history = get<std::size_t>("guidance.history");
        c.grad_tol = get<double>("guidance.grad_tol");
        c.metric = metric();
        c.validate();
        return c;
    }

    metrics::EvalConfig eval() const {
        metrics::EvalConfig c;
        c.contact_distance = get<double>("eval.contact_distance");
        c.collision_depth = get<double>("eval.collision_depth");
        c.mdev_alpha = get<double>("eval.mdev_alpha");
        c.proxy.points_per_bone = get<std::size_t>("eval.proxy_points");
        c.feature_frames = get<std::size_t>("eval.feature_frames");
        c.diversity_pairs = get<std::size_t>("eval.diversity_pairs");
        c.seed = seed();
        return c;
    }

private:
    json values_;
};

}  // namespace rog::config
