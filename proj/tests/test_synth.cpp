#include <cstring>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "rog/metrics.hpp"
#include "rog/synth.hpp"

using namespace rog::synth;
using rog::geometry::Mat3;
using rog::geometry::Vec3;
namespace fs = std::filesystem;

namespace {

// Signed volume by the divergence theorem; positive for outward faces.
double signed_volume(const rog::geometry::TriangleMesh& m) {
    double v = 0.0;
    for (const auto& f : m.faces) v += m.vertices[f[0]].dot(m.vertices[f[1]].cross(m.vertices[f[2]])) / 6.0;
    return v;
}

// Euler characteristic V - E + F, counting undirected edges.
long euler_characteristic(const rog::geometry::TriangleMesh& m) {
    std::set<std::pair<std::uint32_t, std::uint32_t>> edges;
    for (const auto& f : m.faces)
        for (int k = 0; k < 3; ++k) edges.insert(std::minmax(f[k], f[(k + 1) % 3]));
    return static_cast<long>(m.vertices.size()) - static_cast<long>(edges.size()) + static_cast<long>(m.faces.size());
}

ScenarioSpec spec_for(Action a, std::uint64_t seed, std::size_t frames = 30, double jitter = 0.0) {
    ScenarioSpec s;
    s.action = a;
    s.seed = seed;
    s.frames = frames;
    s.jitter = jitter;
    if (a == Action::kick) {
        s.object = ObjectKind::icosphere;
        s.dims = Vec3(0.14, 0, 0);
    } else {
        s.object = ObjectKind::box;
        s.dims = Vec3(0.3, 0.25, 0.35);
    }
    return s;
}

fs::path temp_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("rog_synth_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST(Primitives, UnitBox) {
    const auto m = make_primitive_mesh(ObjectKind::box, Vec3(1, 1, 1));
    EXPECT_EQ(m.vertices.size(), 8u);
    EXPECT_EQ(m.faces.size(), 12u);
    const auto box = rog::geometry::compute_aabb(m);
    EXPECT_EQ(box.min_corner, Vec3(0, 0, 0));
    EXPECT_EQ(box.max_corner, Vec3(1, 1, 1));
    EXPECT_FALSE(rog::geometry::find_open_edge(m).has_value());
    EXPECT_NEAR(signed_volume(m), 1.0, 1e-12);
}

TEST(Primitives, CylinderIsWatertight) {
    const auto m = make_primitive_mesh(ObjectKind::cylinder, Vec3(0.2, 1.0, 0));
    EXPECT_FALSE(rog::geometry::find_open_edge(m).has_value());
    EXPECT_EQ(m.vertices.size(), 2 * kCylinderSegments + 2);
    EXPECT_EQ(m.faces.size(), 4 * kCylinderSegments);
    EXPECT_EQ(euler_characteristic(m), 2);
    // Inscribed 16-gon prism volume.
    const double area = 0.5 * 16 * 0.2 * 0.2 * std::sin(2 * std::numbers::pi / 16);
    EXPECT_NEAR(signed_volume(m), area * 1.0, 1e-12);
}

TEST(Primitives, IcosphereVertexCount) {
    const auto m = make_primitive_mesh(ObjectKind::icosphere, Vec3(0.5, 0, 0));
    EXPECT_EQ(m.vertices.size(), 10u * 4u * 4u + 2u);
    EXPECT_EQ(m.faces.size(), 20u * 16u);
    EXPECT_FALSE(rog::geometry::find_open_edge(m).has_value());
    EXPECT_EQ(euler_characteristic(m), 2);
    for (const auto& v : m.vertices) EXPECT_NEAR(v.norm(), 0.5, 1e-12);
    EXPECT_GT(signed_volume(m), 0.0);
    EXPECT_LT(signed_volume(m), 4.0 / 3.0 * std::numbers::pi * 0.125);
}

TEST(Primitives, InvalidDimsThrow) {
    EXPECT_THROW(make_primitive_mesh(ObjectKind::box, Vec3(1, 0, 1)), rog::InputError);
    EXPECT_THROW(make_primitive_mesh(ObjectKind::cylinder, Vec3(-0.1, 1, 0)), rog::InputError);
    EXPECT_THROW(make_primitive_mesh(ObjectKind::icosphere, Vec3(0, 0, 0)), rog::InputError);
    EXPECT_THROW(make_primitive_mesh(ObjectKind::box, Vec3(1, std::nan(""), 1)), rog::InputError);
}

TEST(Primitives, CanonicalMeshIsCentered) {
    for (auto kind : {ObjectKind::box, ObjectKind::cylinder, ObjectKind::icosphere}) {
        const auto m = canonical_object_mesh(kind, Vec3(0.3, 0.2, 0.4));
        EXPECT_LT(rog::geometry::compute_aabb(m).center().norm(), 1e-12);
    }
}

TEST(Scenario, Validation) {
    auto s = spec_for(Action::lift, 0);
    s.frames = 9;
    EXPECT_THROW(generate_sequence(s), rog::InputError);
    s.frames = 121;
    EXPECT_THROW(generate_sequence(s), rog::InputError);
    s.frames = 30;
    s.dims = Vec3(0.3, -1, 0.3);
    EXPECT_THROW(generate_sequence(s), rog::InputError);
    EXPECT_THROW(action_from_label(5), rog::InputError);
    EXPECT_THROW(parse_action("throw"), rog::InputError);
    EXPECT_EQ(parse_action("put_down"), Action::put_down);
}

TEST(Scenario, LiftHasContactAndLowMdev) {
    for (std::uint64_t seed = 0; seed < 10; ++seed)
        for (std::size_t n : {10, 30, 120})
            for (auto kind : {ObjectKind::box, ObjectKind::cylinder}) {
                auto s = spec_for(Action::lift, seed, n);
                s.object = kind;
                if (kind == ObjectKind::cylinder) s.dims = Vec3(0.12, 0.3, 0);
                const auto g = generate_sequence(s);
                EXPECT_GT(rog::metrics::contact_percentage(g.motion, g.mesh.vertices), 0.5) << seed << " " << n;
                EXPECT_LT(rog::metrics::mdev(g.motion, g.mesh.vertices).mm, 1.0) << seed << " " << n;
            }
}

TEST(Scenario, SameSeedIsBitIdentical) {
    for (std::size_t a = 0; a < kNumActions; ++a) {
        const auto s = spec_for(static_cast<Action>(a), 42, 30, 0.005);
        const auto g1 = generate_sequence(s), g2 = generate_sequence(s);
        ASSERT_EQ(g1.motion.frames.size(), g2.motion.frames.size());
        EXPECT_EQ(std::memcmp(g1.motion.frames.data(), g2.motion.frames.data(), g1.motion.frames.size() * 8), 0);
        EXPECT_EQ(g1.idf.values, g2.idf.values);
        auto s3 = s;
        s3.seed = 43;
        EXPECT_NE(generate_sequence(s3).motion.frames, g1.motion.frames);
    }
}

TEST(Scenario, KickTouchesWithFootOnly) {
    for (std::uint64_t seed = 0; seed < 10; ++seed)
        for (std::size_t n : {10, 11, 30, 120}) {
            const auto g = generate_sequence(spec_for(Action::kick, seed, n, 0.005));
            const auto verts = rog::metrics::object_points_world(g.motion, g.mesh.vertices);
            double best = 1e9;
            for (std::size_t t = 0; t < n; ++t)
                for (auto foot : rog::motion::kFootJoints)
                    for (const auto& v : verts[t]) best = std::min(best, (g.motion.joint(t, foot) - v).norm());
            EXPECT_LT(best, 0.05) << seed << " " << n;
            EXPECT_EQ(rog::metrics::contact_percentage(g.motion, g.mesh.vertices), 0.0);
            // The object ends up displaced.
            EXPECT_GT((g.motion.object_translation(n - 1) - g.motion.object_translation(0)).norm(), 0.3);
        }
}

TEST(Scenario, EveryActionIsValidAndIdfMatchesCleanTrajectory) {
    for (std::size_t a = 0; a < kNumActions; ++a)
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            const auto g = generate_sequence(spec_for(static_cast<Action>(a), seed, 25, 0.0));
            g.motion.validate();
            EXPECT_EQ(g.motion.action_label, a);
            const auto idf = rog::idf::compute_idf(g.motion);
            double worst = 0.0;
            for (std::size_t k = 0; k < idf.values.size(); ++k)
                worst = std::max(worst, std::abs(idf.values[k] - g.idf.values[k]));
            EXPECT_LT(worst, 1e-9);
            for (double v : g.idf.values) ASSERT_TRUE(std::isfinite(v));
        }
}

TEST(Scenario, JitterOnlyTouchesJoints) {
    const auto clean = generate_sequence(spec_for(Action::carry, 5, 30, 0.0));
    const auto noisy = generate_sequence(spec_for(Action::carry, 5, 30, 0.005));
    EXPECT_EQ(clean.idf.values, noisy.idf.values);
    double sq = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 0; t < 30; ++t) {
        const auto a = clean.motion.frame(t), b = noisy.motion.frame(t);
        for (std::size_t k = 0; k < 72; ++k, ++count) sq += (a[k] - b[k]) * (a[k] - b[k]);
        for (std::size_t k = 72; k < rog::motion::kFrameDim; ++k) EXPECT_EQ(a[k], b[k]);
    }
    EXPECT_NEAR(std::sqrt(sq / count), 0.005, 0.0005);
}

TEST(Scenario, AttachedPhaseIsRigid) {
    // While attached, the palm expressed in the object frame does not move.
    for (auto a : {Action::lift, Action::carry, Action::put_down, Action::pull}) {
        const auto g = generate_sequence(spec_for(a, 7, 40, 0.0));
        const auto& m = g.motion;
        std::size_t rigid_pairs = 0;
        for (std::size_t t = 1; t < 40; ++t) {
            for (auto hand : rog::motion::kHandJoints) {
                const Vec3 p0 = m.object_rotation(t - 1).transpose() * (m.joint(t - 1, hand) - m.object_translation(t - 1));
                const Vec3 p1 = m.object_rotation(t).transpose() * (m.joint(t, hand) - m.object_translation(t));
                const double dist = rog::geometry::surface_distance(g.mesh, p1);
                if (dist < 0.02 && rog::geometry::surface_distance(g.mesh, p0) < 0.02) {
                    EXPECT_LT((p1 - p0).norm(), 1e-6) << to_string(a) << " t=" << t;
                    ++rigid_pairs;
                }
            }
        }
        EXPECT_GT(rigid_pairs, 10u) << to_string(a);
    }
}

TEST(Scenario, ObjectMotionIsSmooth) {
    // C1 templates: no velocity jumps, so per-frame velocity changes stay
    // well below a typical per-frame velocity at 120 frames.
    for (std::size_t a = 0; a < kNumActions; ++a) {
        const auto g = generate_sequence(spec_for(static_cast<Action>(a), 3, 120, 0.0));
        double worst = 0.0;
        for (std::size_t t = 2; t < 120; ++t) {
            const Vec3 v0 = g.motion.object_translation(t - 1) - g.motion.object_translation(t - 2);
            const Vec3 v1 = g.motion.object_translation(t) - g.motion.object_translation(t - 1);
            worst = std::max(worst, (v1 - v0).norm());
        }
        EXPECT_LT(worst, 0.004) << to_string(static_cast<Action>(a));
    }
}

TEST(Dataset, LabelCountsByLargestRemainder) {
    EXPECT_EQ(label_counts(10, {1, 1, 1, 1, 1}), (std::array<std::size_t, 5>{2, 2, 2, 2, 2}));
    EXPECT_EQ(label_counts(7, {1, 1, 1, 1, 1}), (std::array<std::size_t, 5>{2, 2, 1, 1, 1}));
    EXPECT_EQ(label_counts(10, {3, 1, 0, 0, 0}), (std::array<std::size_t, 5>{8, 2, 0, 0, 0}));
    EXPECT_EQ(label_counts(9, {0.5, 0.25, 0.25, 0, 0}), (std::array<std::size_t, 5>{5, 2, 2, 0, 0}));
    EXPECT_THROW(label_counts(4, {0, 0, 0, 0, 0}), rog::InputError);
    EXPECT_THROW(label_counts(4, {1, -1, 0, 0, 0}), rog::InputError);
}

TEST(Dataset, SplitManifestsAndFiles) {
    const auto dir = temp_dir("split");
    DatasetConfig cfg;
    cfg.count = 10;
    cfg.train_ratio = 0.8;
    cfg.seed = 3;
    cfg.frames = 12;
    const auto res = generate_dataset(cfg, dir);
    EXPECT_EQ(res.train, 8u);
    EXPECT_EQ(res.test, 2u);

    std::array<std::size_t, kNumActions> hist{};
    std::set<std::uint64_t> seeds;
    for (const auto& manifest : {res.train_manifest, res.test_manifest}) {
        const auto entries = load_manifest(manifest);  // throws on missing files
        for (const auto& e : entries) {
            EXPECT_TRUE(fs::exists(e.hoim));
            EXPECT_TRUE(fs::exists(e.asset));
            ++hist[e.label];
            EXPECT_TRUE(seeds.insert(e.seed).second);
            const auto seq = rog::motion::read_hoim(e.hoim);
            EXPECT_EQ(seq.num_frames(), 12u);
            EXPECT_EQ(seq.action_label, e.label);
            EXPECT_EQ(load_idf(e.idf).frames, 12u);
            EXPECT_FALSE(rog::geometry::find_open_edge(rog::geometry::load_obj(e.asset)).has_value());
        }
    }
    EXPECT_EQ(hist, label_counts(10, cfg.mix));
    fs::remove_all(dir);
}

TEST(Dataset, HistogramMatchesMix) {
    const auto dir = temp_dir("mix");
    DatasetConfig cfg;
    cfg.count = 13;
    cfg.mix = {4, 0, 1, 0, 2};
    cfg.frames = 10;
    const auto res = generate_dataset(cfg, dir);
    std::array<std::size_t, kNumActions> hist{};
    for (const auto& m : {res.train_manifest, res.test_manifest})
        for (const auto& e : load_manifest(m)) ++hist[e.label];
    const auto expect = label_counts(13, cfg.mix);
    EXPECT_EQ(hist, expect);
    for (std::size_t a = 0; a < kNumActions; ++a)
        EXPECT_LE(std::abs(static_cast<double>(hist[a]) - 13.0 * cfg.mix[a] / 7.0), 1.0);
    fs::remove_all(dir);
}

TEST(Dataset, DeterministicAndValidated) {
    const auto d1 = temp_dir("det1"), d2 = temp_dir("det2");
    DatasetConfig cfg;
    cfg.count = 4;
    cfg.frames = 10;
    generate_dataset(cfg, d1);
    generate_dataset(cfg, d2);
    for (const auto& name : {"train.json", "sequences/seq_00002.hoim", "sequences/seq_00003.idf"}) {
        std::ifstream a(d1 / name, std::ios::binary), b(d2 / name, std::ios::binary);
        const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
        EXPECT_FALSE(sa.empty());
        EXPECT_EQ(sa, sb) << name;
    }
    fs::remove(d1 / "sequences/seq_00000.hoim");
    try {
        load_manifest(d1 / "train.json");
        load_manifest(d1 / "test.json");
        FAIL() << "missing file not reported";
    } catch (const rog::InputError& e) {
        EXPECT_NE(std::string(e.what()).find("seq_00000.hoim"), std::string::npos);
    }
    cfg.count = 1;
    EXPECT_THROW(generate_dataset(cfg, d1), rog::InputError);
    fs::remove_all(d1);
    fs::remove_all(d2);
}
