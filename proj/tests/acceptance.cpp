// Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails. Criteria 6-8 train models from scratch and take
// about an hour on one core.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "cli_runner.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "rog/diffusion.hpp"
#include "rog/geometry.hpp"
#include "rog/guidance.hpp"
#include "rog/lbfgs.hpp"
#include "rog/metrics.hpp"
#include "rog/models.hpp"
#include "rog/pipeline.hpp"
#include "rog/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rog;
using geometry::Mat3;
using geometry::Vec3;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

std::string fmt(double v, int precision = 4) {
    std::ostringstream s;
    s.precision(precision);
    s << v;
    return s.str();
}

struct Outcome {
    bool pass = false;
    std::string detail;
    double seconds = 0.0;
};

// Collects failed checks as text; passes when nothing failed.
struct Checks {
    std::vector<std::string> failures;
    void require(bool ok, const std::string& what) {
        if (!ok) failures.push_back(what);
    }
    std::string summary(const std::string& on_pass) const {
        if (failures.empty()) return on_pass;
        std::string s = failures.front();
        if (failures.size() > 1) s += " (+" + std::to_string(failures.size() - 1) + " more)";
        return s;
    }
};

// ---------------------------------------------------------------------------
// 1. Gradient oracle

Outcome gradient_oracle() {
    const auto start = Clock::now();
    auto cases = gradcheck::autodiff_cases();
    for (auto& c : gradcheck::pipeline_cases()) cases.push_back(std::move(c));
    Checks checks;
    double worst = 0.0;
    std::string worst_name;
    for (const auto& c : cases)
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
            const double err = c.run(seed);
            if (!(err <= worst)) worst = err, worst_name = c.name;
            checks.require(err < 1e-4, c.name + " seed " + std::to_string(seed) + " rel err " + fmt(err));
        }
    const double secs = seconds_since(start);
    checks.require(secs < 120.0, "runtime " + fmt(secs) + " s exceeds 120 s");
    return {checks.failures.empty(),
            checks.summary(std::to_string(cases.size()) + " cases x 50 seeds, max rel err " + fmt(worst, 3) + " (" +
                           worst_name + ")"),
            secs};
}

// ---------------------------------------------------------------------------
// 2. Geometry oracles

double box_sdf(const Vec3& p, const Vec3& lo, const Vec3& hi) {
    const Vec3 c = 0.5 * (lo + hi), h = 0.5 * (hi - lo);
    const Vec3 q = (p - c).cwiseAbs() - h;
    return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
}

Outcome geometry_oracles() {
    const auto start = Clock::now();
    Checks checks;
    const auto cube = geometry::load_obj(oracle::data_path("unit_cube.obj"));
    const auto ico = geometry::load_obj(oracle::data_path("icosphere.obj"));

    // Corner-nearest vertices against a brute-force scan that skips vertices
    // already taken by earlier corners.
    for (const auto* m : {&cube, &ico}) {
        const auto box = geometry::compute_aabb(*m);
        const auto idx = geometry::corner_nearest_vertices(*m, box);
        const auto corners = box.corners();
        std::set<std::size_t> used;
        for (int c = 0; c < 8; ++c) {
            std::size_t best = 0;
            double bd = 1e300;
            for (std::size_t v = 0; v < m->vertices.size(); ++v) {
                if (used.count(v)) continue;
                const double d = (m->vertices[v] - corners[c]).norm();
                if (d < bd) bd = d, best = v;
            }
            used.insert(best);
            checks.require(idx[c] == best, "corner " + std::to_string(c) + " picks vertex " + std::to_string(idx[c]) +
                                               ", brute force " + std::to_string(best));
        }
    }

    // Poisson-disk spacing over 100 seeded runs per fixture.
    std::size_t pairs = 0;
    for (const auto* m : {&cube, &ico})
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            const auto kp = geometry::sample_object_keypoints(*m, seed);
            for (std::size_t i = 0; i < kp.points.size(); ++i)
                for (std::size_t j = i + 1; j < kp.points.size(); ++j) {
                    if (kp.provenance[i] == geometry::KeypointSource::corner_nearest &&
                        kp.provenance[j] == geometry::KeypointSource::corner_nearest)
                        continue;
                    ++pairs;
                    const double d = (kp.points[i] - kp.points[j]).norm();
                    checks.require(d >= kp.poisson_radius, "seed " + std::to_string(seed) + " pair spacing " + fmt(d) +
                                                               " < r " + fmt(kp.poisson_radius));
                }
        }

    // Grid SDF against the analytic cube and a finely subdivided sphere.
    Rng rng(11);
    double worst_ratio = 0.0;
    {
        const auto grid = geometry::build_sdf_grid(cube, 32, 0.3);
        for (int k = 0; k < 2000; ++k) {
            const Vec3 p(rng.uniform(-0.3, 1.3), rng.uniform(-0.3, 1.3), rng.uniform(-0.3, 1.3));
            const double err = std::abs(grid.query(p) - box_sdf(p, Vec3::Zero(), Vec3::Ones()));
            worst_ratio = std::max(worst_ratio, err / grid.cell_size);
            checks.require(err <= grid.cell_size, "cube SDF error " + fmt(err) + " > cell " + fmt(grid.cell_size));
        }
    }
    {
        const auto sphere = synth::detail::icosphere_mesh(1.0, 4);
        const auto grid = geometry::build_sdf_grid(sphere, 32, 0.3);
        for (int k = 0; k < 2000; ++k) {
            const Vec3 p(rng.uniform(-1.3, 1.3), rng.uniform(-1.3, 1.3), rng.uniform(-1.3, 1.3));
            const double err = std::abs(grid.query(p) - (p.norm() - 1.0));
            worst_ratio = std::max(worst_ratio, err / grid.cell_size);
            checks.require(err <= grid.cell_size, "sphere SDF error " + fmt(err) + " > cell " + fmt(grid.cell_size));
        }
    }
    const double secs = seconds_since(start);
    checks.require(secs < 60.0, "runtime " + fmt(secs) + " s exceeds 60 s");
    return {checks.failures.empty(),
            checks.summary("corners exact on 2 fixtures, " + std::to_string(pairs) +
                           " PDS pairs spaced, worst SDF error " + fmt(worst_ratio, 3) + " cells"),
            secs};
}

// ---------------------------------------------------------------------------
// 3. Diffusion marginals and cheating-predictor reconstruction

Outcome diffusion_oracles() {
    const auto start = Clock::now();
    Checks checks;
    const auto s = diffusion::make_linear_schedule(1000);
    const double x0 = 0.7;
    double worst_z = 0.0;
    for (int t : {1, 500, 1000}) {
        Rng rng(static_cast<std::uint64_t>(t) + 100);
        const std::size_t n = 100000;
        std::vector<double> x(n, x0), noise(n);
        for (auto& e : noise) e = rng.normal();
        const auto xt = diffusion::q_sample<double>(x, t, noise, s);
        double mean = 0.0;
        for (double v : xt) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : xt) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n - 1);
        const double true_var = 1.0 - s.alpha_bar(t);
        const double z_mean = std::abs(mean - std::sqrt(s.alpha_bar(t)) * x0) / std::sqrt(true_var / n);
        const double z_var = std::abs(var - true_var) / (true_var * std::sqrt(2.0 / (n - 1)));
        worst_z = std::max({worst_z, z_mean, z_var});
        checks.require(z_mean < 3.0, "t=" + std::to_string(t) + " mean off by " + fmt(z_mean) + " SE");
        checks.require(z_var < 3.0, "t=" + std::to_string(t) + " variance off by " + fmt(z_var) + " SE");
    }

    const auto s50 = diffusion::make_linear_schedule(50);
    double worst_rms = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        std::vector<double> clean(motion::kFrameDim * 24), x(clean.size()), noise(clean.size());
        for (auto& v : clean) v = rng.normal();
        for (auto& v : x) v = rng.normal();
        for (int t = 50; t >= 1; --t) {
            for (auto& v : noise) v = rng.normal();
            x = diffusion::ddpm_reverse_step<double>(x, clean, t, s50, noise);
        }
        double se = 0.0;
        for (std::size_t k = 0; k < x.size(); ++k) se += (x[k] - clean[k]) * (x[k] - clean[k]);
        const double rms = std::sqrt(se / static_cast<double>(x.size()));
        worst_rms = std::max(worst_rms, rms);
        checks.require(rms < 1e-3, "cheating predictor seed " + std::to_string(seed) + " RMS " + fmt(rms));
    }
    return {checks.failures.empty(),
            checks.summary("worst marginal deviation " + fmt(worst_z, 3) + " SE, worst reconstruction RMS " +
                           fmt(worst_rms, 3)),
            seconds_since(start)};
}

// ---------------------------------------------------------------------------
// 4. L-BFGS

Outcome lbfgs_oracles() {
    const auto start = Clock::now();
    Checks checks;
    Rng rng(4);
    const int n = 50;
    Eigen::MatrixXd m(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) m(i, j) = rng.normal();
    const Eigen::MatrixXd a = m.transpose() * m / n + 0.5 * Eigen::MatrixXd::Identity(n, n);
    Eigen::VectorXd b(n);
    for (int i = 0; i < n; ++i) b[i] = rng.normal();
    const Eigen::VectorXd exact = a.ldlt().solve(b);
    auto quad = [&](std::span<const double> x, std::span<double> g) {
        const Eigen::Map<const Eigen::VectorXd> xv(x.data(), n);
        const Eigen::VectorXd ax = a * xv;
        Eigen::Map<Eigen::VectorXd>(g.data(), n) = ax - b;
        return 0.5 * xv.dot(ax) - b.dot(xv);
    };
    opt::LbfgsConfig cfg;
    cfg.max_iters = 100;
    cfg.grad_tol = 1e-8;
    const auto r = opt::lbfgs_minimize(quad, std::vector<double>(n, 0.0), cfg);
    std::vector<double> g(n);
    quad(r.x, g);
    double gmax = 0.0, xerr = 0.0;
    for (int i = 0; i < n; ++i) {
        gmax = std::max(gmax, std::abs(g[i]));
        xerr = std::max(xerr, std::abs(r.x[i] - exact[i]));
    }
    checks.require(gmax < 1e-8, "quadratic gradient " + fmt(gmax));
    checks.require(r.iterations <= 100, "quadratic took " + std::to_string(r.iterations) + " iterations");
    checks.require(xerr < 1e-6, "quadratic solution off by " + fmt(xerr));

    auto rosen = [](std::span<const double> x, std::span<double> gr) {
        const double u = 1 - x[0], v = x[1] - x[0] * x[0];
        gr[0] = -2 * u - 400 * x[0] * v;
        gr[1] = 200 * v;
        return u * u + 100 * v * v;
    };
    opt::LbfgsConfig rcfg;
    rcfg.max_iters = 1000;
    rcfg.grad_tol = 1e-10;
    const auto rr = opt::lbfgs_minimize(rosen, {-1.2, 1.0}, rcfg);
    const double rerr = std::max(std::abs(rr.x[0] - 1.0), std::abs(rr.x[1] - 1.0));
    checks.require(rerr < 1e-5, "Rosenbrock off by " + fmt(rerr));
    return {checks.failures.empty(),
            checks.summary("quadratic: " + std::to_string(r.iterations) + " iters, |g| " + fmt(gmax, 2) + ", |x-x*| " +
                           fmt(xerr, 2) + "; Rosenbrock: " + std::to_string(rr.iterations) + " iters, off by " +
                           fmt(rerr, 2)),
            seconds_since(start)};
}

// ---------------------------------------------------------------------------
// 5. Metric oracles

motion::MotionSequence still_sequence(std::size_t n, const Vec3& joint_pos) {
    motion::MotionSequence seq(n, 30.0, 0);
    for (std::size_t t = 0; t < n; ++t) {
        motion::HumanPose h;
        for (auto& j : h.joints) j = joint_pos;
        motion::ObjectPose o;
        o.translation = Vec3::Zero();
        o.rotation = Mat3::Identity();
        motion::pack_frame(h, o, seq.frame(t));
    }
    return seq;
}

void set_joint(motion::MotionSequence& seq, std::size_t t, std::size_t i, const Vec3& p) {
    auto f = seq.frame(t);
    for (int a = 0; a < 3; ++a) f[motion::kJointsOffset + 3 * i + a] = p[a];
}

Outcome metric_oracles() {
    const auto start = Clock::now();
    Checks checks;
    Rng rng(1);

    // MDev: an offset pair sharing random translations, and a coincident
    // pair under random rotations.
    metrics::PointsPerFrame h, o;
    const Vec3 local_h(0.02, 0, 0), local_o(0, 0.01, 0);
    const Mat3 r0 = oracle::random_rotation(rng);
    for (int t = 0; t < 20; ++t) {
        const Mat3 r = oracle::random_rotation(rng);
        const Vec3 tr(rng.normal(), rng.normal(), rng.normal());
        h.push_back({r0 * local_h + tr, r * local_o + tr + Vec3(100, 0, 0)});
        o.push_back({r0 * local_o + tr, r * local_o + tr + Vec3(100, 0, 0)});
    }
    const auto rigid = metrics::mdev(h, o);
    checks.require(rigid.windows == 2 && rigid.mm < 1e-9, "rigid MDev " + fmt(rigid.mm) + " mm");

    // MDev: hand sliding 10 mm per frame past a static object point.
    h.clear();
    o.clear();
    for (int t = 0; t < 6; ++t) {
        h.push_back({Vec3(-0.025 + 0.01 * t, 0, 0)});
        o.push_back({Vec3::Zero()});
    }
    const auto slide = metrics::mdev(h, o);
    checks.require(slide.windows == 1 && std::abs(slide.mm - 10.0) < 1e-9, "sliding MDev " + fmt(slide.mm, 12) + " mm");

    // Contact: palm within 5 cm on exactly frames 2, 5 and 7 of 10.
    auto seq = still_sequence(10, Vec3(10, 10, 10));
    const std::vector<Vec3> verts = {Vec3::Zero()};
    for (std::size_t t = 0; t < 10; ++t)
        set_joint(seq, t, motion::kLeftPalm, Vec3(t == 2 || t == 5 || t == 7 ? 0.04 : 0.06, 0, 0));
    const double contact = metrics::contact_percentage(seq, verts);
    checks.require(contact == 0.3, "contact " + fmt(contact) + ", expected 0.3");

    // Collision: one joint 5 cm deep on frames 1 and 3 of 4.
    auto cube_sdf = [](const Vec3& p) { return box_sdf(p, Vec3::Constant(-0.5), Vec3::Constant(0.5)); };
    auto cseq = still_sequence(4, Vec3(2, 0, 0));
    set_joint(cseq, 1, motion::kHead, Vec3(0.45, 0, 0));
    set_joint(cseq, 3, motion::kHead, Vec3(0, -0.45, 0));
    const double coll = metrics::collision_percentage(cseq, cube_sdf, metrics::ProxyConfig{0});
    checks.require(coll == 0.5, "collision " + fmt(coll) + ", expected 0.5");

    // Frechet distance: identical sets, then a pure mean shift.
    Eigen::MatrixXd a(200, 5);
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = rng.normal();
    const double self = metrics::frechet_distance(a, a);
    checks.require(self < 1e-6, "frechet(a, a) = " + fmt(self));
    Eigen::MatrixXd c(4, 4);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) c(i, j) = rng.normal();
    const Eigen::MatrixXd cov = c * c.transpose() + 0.1 * Eigen::MatrixXd::Identity(4, 4);
    Eigen::VectorXd mu(4), v(4);
    mu << 1, 2, 3, 4;
    v << 0.5, -1, 2, 0.25;
    const double shift = metrics::frechet_distance(mu, cov, mu + v, cov);
    checks.require(std::abs(shift - v.squaredNorm()) < 1e-9,
                   "mean shift " + fmt(shift, 12) + ", expected " + fmt(v.squaredNorm(), 12));
    return {checks.failures.empty(),
            checks.summary("MDev rigid " + fmt(rigid.mm, 2) + " mm, sliding " + fmt(slide.mm, 12) + " mm; contact " +
                           fmt(contact) + "; collision " + fmt(coll) + "; frechet self " + fmt(self, 2) +
                           ", shift error " + fmt(std::abs(shift - v.squaredNorm()), 2)),
            seconds_since(start)};
}

// ---------------------------------------------------------------------------
// 6-8. Trained models on synthetic data

constexpr std::size_t kSeeds = 3;
constexpr std::size_t kTrainSteps = 5000;
constexpr double kLambda = 5.0;
const std::vector<double> kAblationWindows = {0.001, 0.01, 0.1, 1.0};

const models::GenConfig kGen{2, 64, 4, synth::kNumActions};
const models::RelConfig kRel{1, 32, 4, synth::kNumActions, true};

models::TrainConfig train_config(std::uint64_t seed, double lambda) {
    models::TrainConfig c;
    c.steps = kTrainSteps;
    c.batch = 8;
    c.adam.lr = 1e-3;
    c.seed = seed;
    c.lambda_idf = lambda;
    return c;
}

struct SetScore {
    double idf_error = 0.0;
    double mdev = 0.0;
    double contact = 0.0;
};

struct GuidedStats {
    std::size_t entries = 0, increases = 0, fallbacks = 0;
    double worst_increase = 0.0;
};

struct SeedRun {
    SetScore unguided, guided, no_idf_loss;
    std::map<double, SetScore> ablation;
    GuidedStats stats;
    double guidance_seconds = 0.0;  // criterion 6 share: G, R and both sample sets
    double total_seconds = 0.0;
};

class Experiment {
public:
    Experiment(fs::path work, fs::path cache) : work_(std::move(work)), cache_(std::move(cache)) {}

    void prepare() {
        synth::DatasetConfig dc;
        dc.count = 320;
        dc.frames = 24;
        dc.seed = 1;
        const auto dir = work_ / "data";
        fs::remove_all(dir);
        synth::generate_dataset(dc, dir);
        train_ = pipeline::load_items(dir / "train.json", cache_assets_);
        test_ = pipeline::load_items(dir / "test.json", cache_assets_);
        samples_ = pipeline::training_samples(train_);
        reference_ = pipeline::motions(train_);
        for (const auto& it : test_) conds_.push_back(it.condition);
        frames_ = test_.front().motion.num_frames();
        for (const auto& it : test_)
            if (it.motion.num_frames() != frames_) throw InputError("test sequences differ in length");
    }

    std::size_t test_count() const { return test_.size(); }

    SeedRun run_seed(std::uint64_t seed) {
        const auto start = Clock::now();
        SeedRun out;
        const auto sched = diffusion::make_linear_schedule(1000);

        auto g = gen_model(seed, kLambda, sched);
        auto r = rel_model(seed, sched);
        const auto gen = guidance::gen_adapter(*g);
        const auto rel = guidance::rel_adapter(*r);

        // Criterion 6: unguided against the default guided configuration.
        guidance::GuidanceConfig off, on;
        off.window_fraction = 0.0;
        on.window_fraction = 0.01;
        on.k = 10;
        const std::vector<guidance::GuidanceConfig> pair = {off, on};
        std::vector<guidance::SampleHooks> hooks(2);
        hooks[1].trace = [&](const guidance::TraceEntry& e) {
            ++out.stats.entries;
            if (e.fallback) ++out.stats.fallbacks;
            if (e.loss_after > e.loss_before) {
                ++out.stats.increases;
                out.stats.worst_increase = std::max(out.stats.worst_increase, e.loss_after - e.loss_before);
            }
        };
        const auto pair_out = guidance::sample_sweep(frames_, conds_, gen, rel, sched, pair, seed, 30.0, hooks);
        out.unguided = score(pair_out[0]);
        out.guided = score(pair_out[1]);
        out.guidance_seconds = seconds_since(start);

        // Criterion 7: the remaining window fractions share one sweep.
        std::vector<guidance::GuidanceConfig> sweep;
        for (double w : kAblationWindows)
            if (w != on.window_fraction) {
                auto c = on;
                c.window_fraction = w;
                sweep.push_back(c);
            }
        const auto sweep_out = guidance::sample_sweep(frames_, conds_, gen, rel, sched, sweep, seed);
        for (std::size_t k = 0; k < sweep.size(); ++k) out.ablation[sweep[k].window_fraction] = score(sweep_out[k]);
        out.ablation[on.window_fraction] = out.guided;

        // Criterion 8: the same recipe without the IDF loss, sampled unguided.
        auto g0 = gen_model(seed, 0.0, sched);
        out.no_idf_loss = score(guidance::sample(frames_, conds_, guidance::gen_adapter(*g0), {}, sched, off, seed));
        out.total_seconds = seconds_since(start);
        return out;
    }

private:
    SetScore score(const std::vector<motion::MotionSequence>& seqs) const {
        const auto items = pipeline::eval_items(seqs, test_);
        const auto rep = metrics::evaluate(items, reference_, {}, "acceptance");
        return {pipeline::mean_idf_error(seqs, test_), rep.mdev, rep.contact_pct};
    }

    // Checkpoints are reused from the cache directory when one is given.
    template <typename Model, typename Train, typename Load>
    std::unique_ptr<Model> cached(const std::string& name, Train train, Load load) {
        const fs::path path = cache_.empty() ? fs::path() : cache_ / (name + ".ckpt");
        if (!path.empty() && fs::exists(path)) return load(path);
        auto m = train();
        if (!path.empty()) {
            fs::create_directories(cache_);
            models::save_model(path, *m, {{"kind", name.substr(0, 3)}, {"model", models::to_json(m->config())}});
        }
        return m;
    }

    std::unique_ptr<models::MotionGenModel<float>> gen_model(std::uint64_t seed, double lambda,
                                                             const diffusion::NoiseSchedule& sched) {
        const std::string name = "gen_L" + std::to_string(kGen.layers) + "_W" + std::to_string(kGen.width) + "_lam" +
                                 fmt(lambda) + "_seed" + std::to_string(seed);
        return cached<models::MotionGenModel<float>>(
            name,
            [&] {
                auto m = std::make_unique<models::MotionGenModel<float>>(kGen, seed);
                models::train_generation(*m, samples_, sched, train_config(seed, lambda));
                return m;
            },
            [](const fs::path& p) { return models::load_gen_model<float>(p); });
    }

    std::unique_ptr<models::RelationModel<float>> rel_model(std::uint64_t seed, const diffusion::NoiseSchedule& sched) {
        const std::string name = "rel_B" + std::to_string(kRel.blocks) + "_W" + std::to_string(kRel.width) + "_seed" +
                                 std::to_string(seed);
        return cached<models::RelationModel<float>>(
            name,
            [&] {
                auto m = std::make_unique<models::RelationModel<float>>(kRel, seed);
                models::train_relation(*m, samples_, sched, train_config(seed, kLambda));
                return m;
            },
            [](const fs::path& p) { return models::load_rel_model<float>(p); });
    }

    fs::path work_, cache_;
    pipeline::AssetCache cache_assets_;
    std::vector<pipeline::LoadedItem> train_, test_;
    std::vector<models::TrainingSample> samples_;
    std::vector<motion::MotionSequence> reference_;
    std::vector<models::Condition> conds_;
    std::size_t frames_ = 0;
};

Outcome guidance_efficacy(const std::vector<SeedRun>& runs, std::size_t test_count) {
    Checks checks;
    std::size_t wins = 0;
    std::ostringstream per_seed;
    GuidedStats total;
    double secs = 0.0;
    for (std::size_t s = 0; s < runs.size(); ++s) {
        const auto& r = runs[s];
        const bool win = r.guided.idf_error < r.unguided.idf_error && r.guided.mdev < r.unguided.mdev;
        wins += win;
        per_seed << (s ? "; " : "") << "seed " << s << " IDF " << fmt(r.unguided.idf_error) << "->"
                 << fmt(r.guided.idf_error) << " MDev " << fmt(r.unguided.mdev) << "->" << fmt(r.guided.mdev)
                 << (win ? " better" : " not better");
        total.entries += r.stats.entries;
        total.increases += r.stats.increases;
        total.fallbacks += r.stats.fallbacks;
        total.worst_increase = std::max(total.worst_increase, r.stats.worst_increase);
        secs += r.guidance_seconds;
    }
    checks.require(test_count >= 64, "only " + std::to_string(test_count) + " test sequences");
    checks.require(wins >= 2, "guided better on " + std::to_string(wins) + " of " + std::to_string(runs.size()) +
                                  " seeds");
    checks.require(total.entries > 0, "no guided steps ran");
    checks.require(total.increases == 0, std::to_string(total.increases) + " guided steps raised the loss (worst +" +
                                             fmt(total.worst_increase) + ")");
    checks.require(secs < 1800.0, "runtime " + fmt(secs) + " s exceeds 1800 s");
    const std::string steps = std::to_string(total.entries) + " guided steps, " + std::to_string(total.increases) +
                              " loss increases, " + std::to_string(total.fallbacks) + " fallbacks";
    return {checks.failures.empty(), checks.summary(std::to_string(wins) + "/3 seeds better") + "; " + per_seed.str() +
                                         "; " + steps,
            secs};
}

Outcome window_ablation(const std::vector<SeedRun>& runs) {
    std::map<double, double> mean;
    for (const auto& r : runs)
        for (const auto& [w, s] : r.ablation) mean[w] += s.idf_error / static_cast<double>(runs.size());
    std::ostringstream d;
    for (const auto& [w, m] : mean) d << (d.tellp() ? ", " : "") << "w=" << w << " " << fmt(m);
    const bool pass = mean.at(0.01) <= mean.at(1.0);
    return {pass, std::string(pass ? "" : "window 0.01 worse than 1.0; ") + "mean IDF error " + d.str(), 0.0};
}

Outcome lambda_ablation(const std::vector<SeedRun>& runs) {
    double c5 = 0, c0 = 0, m5 = 0, m0 = 0;
    const double n = static_cast<double>(runs.size());
    for (const auto& r : runs) {
        c5 += r.unguided.contact / n;
        c0 += r.no_idf_loss.contact / n;
        m5 += r.unguided.mdev / n;
        m0 += r.no_idf_loss.mdev / n;
    }
    Checks checks;
    checks.require(c5 >= c0, "contact fell with the IDF loss");
    checks.require(m5 <= m0, "MDev rose with the IDF loss");
    const std::string d = "contact " + fmt(c0) + " -> " + fmt(c5) + ", MDev " + fmt(m0) + " -> " + fmt(m5) + " mm";
    return {checks.failures.empty(), checks.failures.empty() ? d : checks.summary("") + "; " + d, 0.0};
}

// ---------------------------------------------------------------------------
// 9. CLI determinism

Outcome cli_determinism(const fs::path& work) {
    const auto start = Clock::now();
    Checks checks;
    fs::remove_all(work);
    fs::create_directories(work);
    const fs::path bin = ROG_CLI;
    std::ofstream(work / "tiny.json") << R"({
  "data": {"count": 20, "frames": 10},
  "gen": {"layers": 1, "width": 16, "heads": 2},
  "rel": {"blocks": 1, "width": 16, "heads": 2},
  "train": {"steps": 50, "lr": 0.003},
  "diffusion": {"steps": 200},
  "sample": {"frames": 10}
})";
    {
        std::ofstream cube(work / "cube.obj");
        geometry::write_obj(cube, synth::make_primitive_mesh(synth::ObjectKind::box, {1, 1, 1}));
    }
    auto setup = [&](const std::string& args) {
        const auto r = clirun::run(bin, work, args);
        if (r.code != 0) throw InputError("setup command failed: " + args + "\n" + r.err);
    };
    setup("gen-data --config tiny.json --seed 3 --out ds");
    setup("train gen --config tiny.json --seed 1 --data ds/train.json --out gen");
    setup("train rel --config tiny.json --seed 1 --data ds/train.json --out rel");
    const auto manifest = json::parse(clirun::slurp(work / "ds/train.json"));
    const std::string kp = manifest["sequences"][0]["keypoints"].get<std::string>();
    const std::vector<std::string> cmds = {
        "keypoints cube.obj --seed 2",
        "gen-data --config tiny.json --seed 9",
        "train gen --config tiny.json --seed 2 --data ds/train.json",
        "train rel --config tiny.json --seed 2 --data ds/train.json",
        "sample --config tiny.json --seed 2 --gen gen/model.ckpt --rel rel/model.ckpt --guided --data ds/test.json",
        "sample --config tiny.json --seed 2 --gen gen/model.ckpt --object cube.obj --label kick --set sample.count=2",
        "evaluate --manifest ds/test.json --compare ds/train.json --seed 2",
        "ablate --config tiny.json --seed 2 --gen gen/model.ckpt --rel rel/model.ckpt --data ds/test.json "
        "--windows 0,0.01,1 --ks 1,3",
        "idf-export --hoim ds/sequences/seq_00000.hoim --keypoints ds/" + kp,
    };
    std::size_t files = 0;
    for (std::size_t k = 0; k < cmds.size(); ++k) {
        const std::string name = cmds[k].substr(0, cmds[k].find(' '));
        const std::string a = "det/" + std::to_string(k) + "a", b = "det/" + std::to_string(k) + "b";
        const auto ra = clirun::run(bin, work, cmds[k] + " --out " + a);
        const auto rb = clirun::run(bin, work, cmds[k] + " --out " + b);
        if (ra.code != 0 || rb.code != 0) {
            checks.require(false, name + " exited with " + std::to_string(ra.code) + "/" + std::to_string(rb.code));
            continue;
        }
        const auto ta = clirun::tree(work / a), tb = clirun::tree(work / b);
        checks.require(!ta.empty(), name + " wrote nothing");
        checks.require(ta.size() == tb.size(), name + " wrote different file sets");
        for (const auto& [file, bytes] : ta) {
            ++files;
            checks.require(tb.count(file) && tb.at(file) == bytes, name + ": " + file + " differs");
        }
    }
    return {checks.failures.empty(),
            checks.summary(std::to_string(cmds.size()) + " commands, " + std::to_string(files) +
                           " output files byte-identical across reruns"),
            seconds_since(start)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance gate"};
    std::vector<int> only;
    std::string work = ROG_ACCEPT_WORK, cache;
    app.add_option("--only", only, "run only these criteria")->delimiter(',');
    app.add_option("--work", work, "scratch directory");
    app.add_option("--cache", cache, "reuse trained checkpoints from this directory");
    CLI11_PARSE(app, argc, argv);
    auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

    std::cout << std::unitbuf;
    json summary = json::object();
    bool all = true;
    auto report = [&](int id, const std::string& name, const Outcome& o) {
        all = all && o.pass;
        std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << "  " << name << ": " << o.detail;
        if (o.seconds > 0) std::cout << " [" << fmt(o.seconds, 3) << " s]";
        std::cout << "\n";
        summary[std::to_string(id)] = {{"name", name}, {"pass", o.pass}, {"detail", o.detail}, {"seconds", o.seconds}};
    };
    auto guarded = [](const std::function<Outcome()>& f) {
        try {
            return f();
        } catch (const std::exception& e) {
            return Outcome{false, std::string("error: ") + e.what(), 0.0};
        }
    };

    fs::create_directories(work);
    if (wanted(1)) report(1, "gradient oracle", guarded(gradient_oracle));
    if (wanted(2)) report(2, "geometry oracles", guarded(geometry_oracles));
    if (wanted(3)) report(3, "diffusion marginals", guarded(diffusion_oracles));
    if (wanted(4)) report(4, "L-BFGS", guarded(lbfgs_oracles));
    if (wanted(5)) report(5, "metric oracles", guarded(metric_oracles));

    if (wanted(6) || wanted(7) || wanted(8)) {
        std::vector<SeedRun> runs;
        std::size_t test_count = 0;
        std::string error;
        try {
            Experiment exp(fs::path(work) / "experiment", cache);
            exp.prepare();
            test_count = exp.test_count();
            for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
                runs.push_back(exp.run_seed(seed));
                const auto& r = runs.back();
                std::cerr << "seed " << seed << ": IDF " << fmt(r.unguided.idf_error) << " / " << fmt(r.guided.idf_error)
                          << ", MDev " << fmt(r.unguided.mdev) << " / " << fmt(r.guided.mdev) << " (unguided / guided); "
                          << fmt(r.total_seconds, 4) << " s\n";
            }
        } catch (const std::exception& e) {
            error = std::string("error: ") + e.what();
        }
        auto or_error = [&](const std::function<Outcome()>& f) {
            return error.empty() ? guarded(f) : Outcome{false, error, 0.0};
        };
        if (wanted(6)) report(6, "guidance efficacy", or_error([&] { return guidance_efficacy(runs, test_count); }));
        if (wanted(7)) report(7, "window ablation", or_error([&] { return window_ablation(runs); }));
        if (wanted(8)) report(8, "IDF loss ablation", or_error([&] { return lambda_ablation(runs); }));
    }
    if (wanted(9)) report(9, "CLI determinism", guarded([&] { return cli_determinism(fs::path(work) / "cli"); }));

    std::ofstream(fs::path(work) / "acceptance.json") << summary.dump(2) << "\n";
    std::cout << (all ? "ALL PASS" : "SOME CRITERIA FAILED") << "\n";
    return all ? 0 : 1;
}
