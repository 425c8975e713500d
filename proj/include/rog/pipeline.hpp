#pragma once
// Glue between dataset manifests and the models, sampler and metrics.

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rog/error.hpp"
#include "rog/geometry.hpp"
#include "rog/metrics.hpp"
#include "rog/models.hpp"
#include "rog/motion.hpp"
#include "rog/synth.hpp"

namespace rog::pipeline {

using geometry::Vec3;
using models::Condition;

inline constexpr int kSdfResolution = 32;
inline constexpr double kSdfPadding = 0.15;  // m; covers the collision depth with margin

inline geometry::KeyPointSet load_keypoints(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path.string());
    try {
        return geometry::keypoints_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path.string() + ": " + e.what());
    }
}

inline Condition make_condition(std::uint32_t label, const std::array<Vec3, motion::kNumJoints>& rest,
                                const geometry::KeyPointSet& keypoints) {
    if (label >= synth::kNumActions) throw InputError("unknown action label " + std::to_string(label));
    Condition c;
    c.action_label = label;
    c.human_rest = rest;
    c.object_canonical = keypoints.points;
    return c;
}

// Object data shared by every sequence that uses one asset. The SDF grid is
// built on first use since only evaluation needs it.
struct ObjectAsset {
    geometry::TriangleMesh mesh;
    geometry::KeyPointSet keypoints;
    std::vector<Vec3> vertices;

    const geometry::SignedDistanceGrid& sdf() const {
        if (sdf_.values.empty()) sdf_ = geometry::build_sdf_grid(mesh, kSdfResolution, kSdfPadding);
        return sdf_;
    }

private:
    mutable geometry::SignedDistanceGrid sdf_;
};

class AssetCache {
public:
    const ObjectAsset& get(const std::filesystem::path& obj, const std::filesystem::path& keypoints) {
        const auto key = obj.lexically_normal().string();
        auto it = assets_.find(key);
        if (it != assets_.end()) return *it->second;
        auto a = std::make_unique<ObjectAsset>();
        a->mesh = geometry::load_obj(obj);
        a->keypoints = load_keypoints(keypoints);
        a->vertices = a->mesh.vertices;
        return *assets_.emplace(key, std::move(a)).first->second;
    }

private:
    std::map<std::string, std::unique_ptr<ObjectAsset>> assets_;
};

// A manifest entry with its files read.
struct LoadedItem {
    synth::DatasetEntry entry;
    motion::MotionSequence motion;
    idf::IdfTensor idf;
    const ObjectAsset* asset = nullptr;
    Condition condition;
};

inline std::vector<LoadedItem> load_items(const std::filesystem::path& manifest, AssetCache& cache) {
    std::vector<LoadedItem> out;
    for (auto& e : synth::load_manifest(manifest)) {
        LoadedItem it;
        it.motion = motion::read_hoim(e.hoim);
        it.idf = synth::load_idf(e.idf);
        if (it.idf.frames != it.motion.num_frames())
            throw InputError(e.idf.string() + ": IDF frame count does not match " + e.hoim.string());
        it.asset = &cache.get(e.asset, e.keypoints);
        it.condition = make_condition(e.label, e.rest, it.asset->keypoints);
        it.entry = std::move(e);
        out.push_back(std::move(it));
    }
    if (out.empty()) throw InputError(manifest.string() + ": manifest lists no sequences");
    return out;
}

inline std::vector<models::TrainingSample> training_samples(const std::vector<LoadedItem>& items) {
    std::vector<models::TrainingSample> out;
    out.reserve(items.size());
    for (const auto& it : items) out.push_back({it.motion, it.idf, it.condition});
    return out;
}

inline std::vector<motion::MotionSequence> motions(const std::vector<LoadedItem>& items) {
    std::vector<motion::MotionSequence> out;
    out.reserve(items.size());
    for (const auto& it : items) out.push_back(it.motion);
    return out;
}

// Evaluation items for `seqs[k]` paired with the object of `items[k]`.
inline std::vector<metrics::EvalItem> eval_items(const std::vector<motion::MotionSequence>& seqs,
                                                 const std::vector<LoadedItem>& items) {
    if (seqs.size() != items.size()) throw ShapeError("one sequence per manifest entry is required");
    std::vector<metrics::EvalItem> out;
    for (std::size_t k = 0; k < seqs.size(); ++k)
        out.push_back({items[k].entry.hoim.filename().string(), &seqs[k], &items[k].asset->vertices,
                       &items[k].asset->sdf()});
    return out;
}

// Mean per-sequence IDF error of generated motions against the items'
// ground-truth IDFs, with object keypoints placed by each motion's
// orthonormalized object rotation.
inline double mean_idf_error(const std::vector<motion::MotionSequence>& seqs, const std::vector<LoadedItem>& items) {
    if (seqs.size() != items.size()) throw ShapeError("one sequence per manifest entry is required");
    double sum = 0.0;
    for (std::size_t k = 0; k < seqs.size(); ++k) {
        const auto kp = metrics::object_points_world(seqs[k], items[k].condition.object_canonical);
        std::vector<Vec3> keypoints;
        for (const auto& frame : kp) keypoints.insert(keypoints.end(), frame.begin(), frame.end());
        sum += idf::idf_loss(idf::compute_idf(seqs[k].joint_track(), keypoints), items[k].idf);
    }
    return sum / static_cast<double>(seqs.size());
}

}  // namespace rog::pipeline
