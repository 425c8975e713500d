// Command-line front end: asset prep, data generation, training, sampling,
// evaluation and the guidance ablation grid. Every command writes its
// artifacts plus a run.json manifest under --out.
//
// Exit codes: 0 success, 2 usage or input error, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "rog/config.hpp"
#include "rog/guidance.hpp"
#include "rog/pipeline.hpp"

extern char** environ;

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rog;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitNumerical = 3;

std::string hex(const unsigned char* p, unsigned n) {
    std::ostringstream s;
    for (unsigned k = 0; k < n; ++k) s << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(p[k]);
    return s.str();
}

std::string sha256(const std::string& bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    if (!EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr))
        throw std::runtime_error("SHA-256 failed");
    return hex(md, len);
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw InputError("cannot open " + p.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::string sha256_file(const fs::path& p) { return sha256(read_file(p)); }

void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw InputError("cannot write " + p.string());
    out << text;
}

// Options shared by every command.
struct Common {
    std::string config_file;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::string out;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_file, "JSON config file")->check(CLI::ExistingFile);
        cmd->add_option("--set", overrides, "config override key=value (repeatable)");
        cmd->add_option("--seed", seed, "random seed");
        cmd->add_option("--out", out, "output directory")->required();
    }

    // File < environment < flags.
    config::RunConfig resolve() const {
        config::RunConfig cfg;
        if (!config_file.empty()) cfg.merge_file(config_file);
        cfg.merge_env(environ);
        for (const auto& o : overrides) cfg.set_assignment(o);
        if (seed) cfg.set("seed", *seed);
        return cfg;
    }
};

// Accumulates the run manifest: command, resolved config, input hashes and
// the artifacts written.
class RunRecord {
public:
    RunRecord(std::string command, const config::RunConfig& cfg, fs::path out) : out_(std::move(out)) {
        j_ = {{"version", 1}, {"command", std::move(command)}, {"config", cfg.values()},
              {"inputs", json::object()}, {"outputs", json::array()}};
        fs::create_directories(out_);
    }
    void input(const fs::path& p) { j_["inputs"][p.generic_string()] = sha256_file(p); }
    void output(const fs::path& rel) { j_["outputs"].push_back(rel.generic_string()); }
    json& extra() { return j_; }
    const fs::path& dir() const { return out_; }
    std::string input_hash(const fs::path& p) const { return j_["inputs"].at(p.generic_string()); }
    void write() {
        auto& outs = j_["outputs"];
        std::sort(outs.begin(), outs.end());
        write_text(out_ / "run.json", j_.dump(2) + "\n");
    }

private:
    fs::path out_;
    json j_;
};

std::string relative_to(const fs::path& target, const fs::path& base) {
    return fs::relative(fs::absolute(target), fs::absolute(base)).generic_string();
}

std::uint32_t parse_label(const std::string& s) {
    return static_cast<std::uint32_t>(synth::parse_action(s));
}

// ---------------------------------------------------------------------------

int cmd_keypoints(const Common& c, const std::string& obj) {
    const auto cfg = c.resolve();
    RunRecord run("keypoints", cfg, c.out);
    run.input(obj);
    const auto mesh = geometry::load_obj(obj);
    const auto kp = geometry::sample_object_keypoints(mesh, cfg.seed());
    write_text(run.dir() / "keypoints.json", geometry::to_json(kp).dump(2) + "\n");
    run.output("keypoints.json");
    run.write();
    return kExitOk;
}

int cmd_gen_data(const Common& c) {
    const auto cfg = c.resolve();
    RunRecord run("gen-data", cfg, c.out);
    const auto res = synth::generate_dataset(cfg.dataset(), run.dir());
    for (const auto& e : fs::recursive_directory_iterator(run.dir()))
        if (e.is_regular_file() && e.path().filename() != "run.json") run.output(relative_to(e.path(), run.dir()));
    run.extra()["counts"] = {{"train", res.train}, {"test", res.test}};
    run.write();
    std::cerr << "wrote " << res.train << " train and " << res.test << " test sequences to " << c.out << "\n";
    return kExitOk;
}

int cmd_train(const Common& c, const std::string& kind, const std::string& data) {
    const auto cfg = c.resolve();
    RunRecord run("train " + kind, cfg, c.out);
    run.input(data);
    pipeline::AssetCache cache;
    const auto items = pipeline::load_items(data, cache);
    const auto samples = pipeline::training_samples(items);
    const auto sched = cfg.schedule();
    const auto tc = cfg.train();
    auto progress = [&](std::size_t step, double loss) {
        if ((step + 1) % 100 == 0 || step + 1 == tc.steps)
            std::cerr << kind << " step " << step + 1 << "/" << tc.steps << " loss " << loss << "\n";
    };
    json manifest = {{"kind", kind},
                     {"seed", cfg.seed()},
                     {"T", sched.steps()},
                     {"schedule", diffusion::to_json(sched)},
                     {"lambda_idf", tc.lambda_idf},
                     {"train", models::to_json(tc)},
                     {"dataset_hash", run.input_hash(data)},
                     {"config", cfg.values()}};
    models::TrainResult result;
    if (kind == "gen") {
        models::MotionGenModel<float> model(cfg.gen(), cfg.seed());
        result = models::train_generation(model, samples, sched, tc, progress);
        manifest["model"] = models::to_json(model.config());
        models::save_model(run.dir() / "model.ckpt", model, manifest);
    } else {
        models::RelationModel<float> model(cfg.rel(), cfg.seed());
        result = models::train_relation(model, samples, sched, tc, progress);
        manifest["model"] = models::to_json(model.config());
        models::save_model(run.dir() / "model.ckpt", model, manifest);
    }
    std::ostringstream csv;
    csv << "step,loss\n" << std::setprecision(9);
    for (std::size_t k = 0; k < result.losses.size(); ++k) csv << k + 1 << "," << result.losses[k] << "\n";
    write_text(run.dir() / "loss.csv", csv.str());
    run.output("model.ckpt");
    run.output("loss.csv");
    run.write();
    return kExitOk;
}

// Loaded checkpoints with their shared schedule.
struct Models {
    std::unique_ptr<models::MotionGenModel<float>> gen;
    std::unique_ptr<models::RelationModel<float>> rel;
    diffusion::NoiseSchedule sched = diffusion::make_linear_schedule(50);
};

Models load_models(RunRecord& run, const std::string& gen_path, const std::string& rel_path) {
    Models m;
    json gm;
    run.input(gen_path);
    m.gen = models::load_gen_model<float>(gen_path, &gm);
    m.sched = diffusion::schedule_from_json(gm.at("schedule"));
    if (!rel_path.empty()) {
        json rm;
        run.input(rel_path);
        m.rel = models::load_rel_model<float>(rel_path, &rm);
        if (rm.at("schedule") != gm.at("schedule"))
            throw InputError("generation and relation checkpoints use different noise schedules");
    }
    return m;
}

// What to condition on: manifest entries, or one object asset and label.
struct Conditioning {
    std::vector<models::Condition> conds;
    std::vector<std::size_t> frames;
    std::vector<json> entries;  // manifest fields per sample, paths relative to the output dir
};

Conditioning conditioning_from_data(RunRecord& run, const std::string& data, const std::optional<std::string>& label,
                                    pipeline::AssetCache& cache) {
    run.input(data);
    const auto items = pipeline::load_items(data, cache);
    std::optional<std::uint32_t> want;
    if (label) want = parse_label(*label);
    Conditioning out;
    for (const auto& it : items) {
        if (want && it.condition.action_label != *want) continue;
        out.conds.push_back(it.condition);
        out.frames.push_back(it.motion.num_frames());
        out.entries.push_back({{"object_asset", relative_to(it.entry.asset, run.dir())},
                               {"keypoints", relative_to(it.entry.keypoints, run.dir())},
                               {"rest_pose", synth::points_to_json(it.entry.rest)},
                               {"source", relative_to(it.entry.hoim, run.dir())}});
    }
    if (out.conds.empty()) throw InputError(data + ": no entries match the requested label");
    return out;
}

Conditioning conditioning_from_object(RunRecord& run, const std::string& obj, const std::string& label,
                                      const config::RunConfig& cfg) {
    run.input(obj);
    const auto mesh = geometry::load_obj(obj);
    const auto kp = geometry::sample_object_keypoints(mesh, synth::kKeypointSeed);
    const fs::path kp_rel = "object.keypoints.json";
    write_text(run.dir() / kp_rel, geometry::to_json(kp).dump(2) + "\n");
    run.output(kp_rel);
    const auto rest = synth::rest_pose();
    Conditioning out;
    const auto count = cfg.get<std::size_t>("sample.count");
    if (count == 0) throw InputError("sample.count must be positive");
    for (std::size_t k = 0; k < count; ++k) {
        out.conds.push_back(pipeline::make_condition(parse_label(label), rest, kp));
        out.frames.push_back(cfg.get<std::size_t>("sample.frames"));
        out.entries.push_back({{"object_asset", relative_to(obj, run.dir())},
                               {"keypoints", kp_rel.generic_string()},
                               {"rest_pose", synth::points_to_json(rest)}});
    }
    return out;
}

// Samples every conditioning group (equal frame counts batch together).
// Group seeds derive from the run seed and the frame count.
std::vector<motion::MotionSequence> run_sampling(const Conditioning& cond, const Models& m,
                                                 const guidance::GuidanceConfig& gcfg, bool guided,
                                                 std::uint64_t seed, double fps, std::ostream* trace) {
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t k = 0; k < cond.conds.size(); ++k) groups[cond.frames[k]].push_back(k);
    const auto gen = guidance::gen_adapter(*m.gen);
    const guidance::RelFn rel = m.rel ? guidance::rel_adapter(*m.rel) : guidance::RelFn{};
    guidance::GuidanceConfig cfg = gcfg;
    if (!guided) cfg.window_fraction = 0.0;
    std::vector<motion::MotionSequence> out(cond.conds.size());
    for (const auto& [frames, idx] : groups) {
        std::vector<models::Condition> conds;
        for (auto k : idx) conds.push_back(cond.conds[k]);
        guidance::SampleHooks hooks;
        hooks.warn = [](const std::string& w) { std::cerr << "warning: " << w << "\n"; };
        if (trace)
            hooks.trace = [&, idx = idx](const guidance::TraceEntry& e) {
                auto j = guidance::to_json(e);
                j["sequence"] = idx[e.sequence];
                *trace << j.dump() << "\n";
            };
        auto seqs = guidance::sample(frames, conds, gen, rel, m.sched, cfg, derive_seed(seed, frames), fps, hooks);
        for (std::size_t k = 0; k < idx.size(); ++k) out[idx[k]] = std::move(seqs[k]);
    }
    return out;
}

// Writes HOIM + IDF per sequence and a manifest that `evaluate` accepts.
void write_samples(RunRecord& run, const Conditioning& cond, const std::vector<motion::MotionSequence>& seqs,
                   std::uint64_t seed) {
    json manifest = {{"version", 1}, {"split", "samples"}, {"sequences", json::array()}};
    for (std::size_t k = 0; k < seqs.size(); ++k) {
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%05zu", k);
        const fs::path hoim_rel = fs::path("samples") / (std::string(name) + ".hoim");
        const fs::path idf_rel = fs::path("samples") / (std::string(name) + ".idf");
        fs::create_directories(run.dir() / "samples");
        motion::write_hoim(run.dir() / hoim_rel, seqs[k]);
        const auto kp = metrics::object_points_world(seqs[k], cond.conds[k].object_canonical);
        std::vector<geometry::Vec3> flat;
        for (const auto& f : kp) flat.insert(flat.end(), f.begin(), f.end());
        {
            std::ofstream f(run.dir() / idf_rel, std::ios::binary);
            idf::write_idf_binary(f, idf::compute_idf(seqs[k].joint_track(), flat));
        }
        json e = cond.entries[k];
        e["path"] = hoim_rel.generic_string();
        e["idf"] = idf_rel.generic_string();
        e["label"] = cond.conds[k].action_label;
        e["action"] = synth::to_string(synth::action_from_label(cond.conds[k].action_label));
        e["seed"] = seed;
        e["frames"] = seqs[k].num_frames();
        manifest["sequences"].push_back(e);
        run.output(hoim_rel);
        run.output(idf_rel);
    }
    write_text(run.dir() / "samples.json", manifest.dump(2) + "\n");
    run.output("samples.json");
}

int cmd_sample(const Common& c, const std::string& gen, const std::string& rel, bool guided,
               const std::optional<std::string>& data, const std::optional<std::string>& obj,
               const std::optional<std::string>& label) {
    const auto cfg = c.resolve();
    RunRecord run("sample", cfg, c.out);
    if (guided && rel.empty()) throw InputError("--guided needs a relation checkpoint (--rel)");
    if (data.has_value() == obj.has_value()) throw InputError("give exactly one of --data or --object");
    if (obj && !label) throw InputError("--object needs --label");
    const auto m = load_models(run, gen, guided ? rel : "");
    pipeline::AssetCache cache;
    const auto cond = data ? conditioning_from_data(run, *data, label, cache)
                           : conditioning_from_object(run, *obj, *label, cfg);
    const auto gcfg = cfg.guide();
    std::ostringstream trace;
    const auto seqs =
        run_sampling(cond, m, gcfg, guided, cfg.seed(), cfg.get<double>("sample.fps"), guided ? &trace : nullptr);
    write_samples(run, cond, seqs, cfg.seed());
    if (guided) {
        write_text(run.dir() / "trace.jsonl", trace.str());
        run.output("trace.jsonl");
    }
    run.extra()["guided"] = guided;
    run.extra()["guided_steps"] = guided ? guidance::guided_step_count(gcfg, m.sched.steps()) : 0;
    run.write();
    return kExitOk;
}

// Loads a manifest (dataset split or sample set) for evaluation.
struct EvalSet {
    std::vector<pipeline::LoadedItem> items;
    std::vector<motion::MotionSequence> seqs;
};

EvalSet load_eval_set(RunRecord& run, const std::string& manifest, pipeline::AssetCache& cache) {
    run.input(manifest);
    EvalSet s;
    s.items = pipeline::load_items(manifest, cache);
    s.seqs = pipeline::motions(s.items);
    return s;
}

void write_report(RunRecord& run, const metrics::MetricsReport& r, const std::string& stem) {
    write_text(run.dir() / (stem + ".json"), metrics::to_json(r).dump(2) + "\n");
    std::ostringstream csv;
    metrics::write_csv(csv, r);
    write_text(run.dir() / (stem + ".csv"), csv.str());
    run.output(stem + ".json");
    run.output(stem + ".csv");
}

int cmd_evaluate(const Common& c, const std::string& set, const std::optional<std::string>& compare,
                 const std::optional<std::string>& reference) {
    const auto cfg = c.resolve();
    RunRecord run("evaluate", cfg, c.out);
    pipeline::AssetCache cache;
    const auto a = load_eval_set(run, set, cache);
    const auto ref = reference ? load_eval_set(run, *reference, cache).seqs : a.seqs;
    const auto ecfg = cfg.eval();
    const auto ra = metrics::evaluate(pipeline::eval_items(a.seqs, a.items), ref, ecfg, fs::path(set).stem().string());
    write_report(run, ra, "report");
    if (compare) {
        const auto b = load_eval_set(run, *compare, cache);
        const auto rb =
            metrics::evaluate(pipeline::eval_items(b.seqs, b.items), ref, ecfg, fs::path(*compare).stem().string());
        write_report(run, rb, "report_compare");
        const auto d = metrics::report_deltas(ra, rb);
        write_text(run.dir() / "deltas.json", d.dump(2) + "\n");
        std::ostringstream csv;
        csv << "metric,a,b,delta\n" << std::setprecision(9);
        for (const auto& [k, v] : d.at("metrics").items())
            csv << k << "," << v.at("a").get<double>() << "," << v.at("b").get<double>() << ","
                << v.at("delta").get<double>() << "\n";
        write_text(run.dir() / "deltas.csv", csv.str());
        run.output("deltas.json");
        run.output("deltas.csv");
    }
    run.write();
    return kExitOk;
}

// ---------------------------------------------------------------------------
// Ablation grid

struct Cell {
    double window = 0.0;
    std::size_t k = 0;
    std::string hash;
    json result;
};

std::string svg_plot(const std::vector<double>& windows, const std::vector<std::size_t>& ks,
                     const std::vector<Cell>& cells) {
    const double w = 640, h = 400, left = 70, right = 120, top = 30, bottom = 60;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& c : cells) {
        const double v = c.result.at("idf_error").get<double>();
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (!(hi > lo)) hi = lo + 1.0;
    auto x_of = [&](std::size_t i) {
        return left + (windows.size() > 1 ? (w - left - right) * static_cast<double>(i) / (windows.size() - 1) : 0.0);
    };
    auto y_of = [&](double v) { return top + (h - top - bottom) * (1.0 - (v - lo) / (hi - lo)); };
    const char* colors[] = {"#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"};
    std::ostringstream s;
    s << std::setprecision(6);
    s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
      << " " << h << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom
      << "\" stroke=\"black\"/>\n";
    for (std::size_t i = 0; i < windows.size(); ++i)
        s << "<text x=\"" << x_of(i) << "\" y=\"" << h - bottom + 18 << "\" font-size=\"11\" text-anchor=\"middle\">"
          << windows[i] << "</text>\n";
    s << "<text x=\"" << (left + w - right) / 2 << "\" y=\"" << h - 15
      << "\" font-size=\"12\" text-anchor=\"middle\">guidance window fraction</text>\n"
      << "<text x=\"15\" y=\"" << (top + h - bottom) / 2 << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 15 "
      << (top + h - bottom) / 2 << ")\">mean IDF error</text>\n"
      << "<text x=\"" << left - 5 << "\" y=\"" << y_of(hi) + 4 << "\" font-size=\"10\" text-anchor=\"end\">" << hi
      << "</text>\n"
      << "<text x=\"" << left - 5 << "\" y=\"" << y_of(lo) + 4 << "\" font-size=\"10\" text-anchor=\"end\">" << lo
      << "</text>\n";
    for (std::size_t ki = 0; ki < ks.size(); ++ki) {
        const char* color = colors[ki % 6];
        s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (std::size_t wi = 0; wi < windows.size(); ++wi) {
            const auto& c = cells[wi * ks.size() + ki];
            s << (wi ? " " : "") << x_of(wi) << "," << y_of(c.result.at("idf_error").get<double>());
        }
        s << "\"/>\n"
          << "<text x=\"" << w - right + 10 << "\" y=\"" << top + 16 * (ki + 1) << "\" font-size=\"11\" fill=\"" << color
          << "\">k = " << ks[ki] << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

int cmd_ablate(const Common& c, const std::string& gen, const std::string& rel, const std::string& data,
               const std::optional<std::string>& reference, std::vector<double> windows, std::vector<std::size_t> ks) {
    const auto cfg = c.resolve();
    RunRecord run("ablate", cfg, c.out);
    if (windows.empty() || ks.empty()) throw InputError("ablation needs at least one window and one k");
    const auto m = load_models(run, gen, rel);
    pipeline::AssetCache cache;
    const auto set = load_eval_set(run, data, cache);
    const auto ref = reference ? load_eval_set(run, *reference, cache).seqs : set.seqs;
    const auto base = cfg.guide();
    const auto ecfg = cfg.eval();

    // A cell's identity: its grid point, the resolved config and the inputs.
    std::vector<Cell> cells;
    for (double w : windows)
        for (auto k : ks) {
            Cell cell{w, k, "", json()};
            const json id = {{"window", w}, {"k", k}, {"config", cfg.values()}, {"inputs", run.extra()["inputs"]}};
            cell.hash = sha256(id.dump()).substr(0, 16);
            cells.push_back(cell);
        }
    const fs::path cell_dir = run.dir() / "cells";
    fs::create_directories(cell_dir);
    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto p = cell_dir / (cells[i].hash + ".json");
        if (fs::exists(p))
            cells[i].result = json::parse(read_file(p));
        else
            todo.push_back(i);
    }
    std::cerr << "ablation: " << cells.size() - todo.size() << " cells cached, " << todo.size() << " to run\n";

    if (!todo.empty()) {
        std::map<std::size_t, std::vector<std::size_t>> groups;
        for (std::size_t k = 0; k < set.items.size(); ++k) groups[set.items[k].motion.num_frames()].push_back(k);
        std::vector<guidance::GuidanceConfig> cfgs;
        for (auto i : todo) {
            auto g = base;
            g.window_fraction = cells[i].window;
            g.k = cells[i].k;
            g.validate();
            cfgs.push_back(g);
        }
        std::vector<std::vector<motion::MotionSequence>> results(todo.size(),
                                                                 std::vector<motion::MotionSequence>(set.items.size()));
        std::vector<std::size_t> nonincreasing(todo.size(), 0), entries(todo.size(), 0);
        const auto genfn = guidance::gen_adapter(*m.gen);
        const auto relfn = guidance::rel_adapter(*m.rel);
        for (const auto& [frames, idx] : groups) {
            std::vector<models::Condition> conds;
            for (auto k : idx) conds.push_back(set.items[k].condition);
            std::vector<guidance::SampleHooks> hooks(todo.size());
            for (std::size_t t = 0; t < todo.size(); ++t)
                hooks[t].trace = [&, t](const guidance::TraceEntry& e) {
                    ++entries[t];
                    if (e.loss_after <= e.loss_before) ++nonincreasing[t];
                };
            const auto swept = guidance::sample_sweep(frames, conds, genfn, relfn, m.sched, cfgs,
                                                      derive_seed(cfg.seed(), frames), cfg.get<double>("sample.fps"),
                                                      hooks);
            for (std::size_t t = 0; t < todo.size(); ++t)
                for (std::size_t k = 0; k < idx.size(); ++k) results[t][idx[k]] = swept[t][k];
        }
        for (std::size_t t = 0; t < todo.size(); ++t) {
            auto& cell = cells[todo[t]];
            const auto rep = metrics::evaluate(pipeline::eval_items(results[t], set.items), ref, ecfg);
            cell.result = {{"window", cell.window},
                           {"k", cell.k},
                           {"guided_steps", guidance::guided_step_count(cfgs[t], m.sched.steps())},
                           {"idf_error", pipeline::mean_idf_error(results[t], set.items)},
                           {"contact_pct", rep.contact_pct},
                           {"collision_pct", rep.collision_pct},
                           {"mdev_mm", rep.mdev},
                           {"fid", rep.fid},
                           {"diversity", rep.diversity},
                           {"trace_entries", entries[t]},
                           {"nonincreasing_entries", nonincreasing[t]}};
            write_text(cell_dir / (cell.hash + ".json"), cell.result.dump(2) + "\n");
        }
    }

    std::ostringstream csv;
    csv << "window,k,guided_steps,idf_error,contact_pct,collision_pct,mdev_mm,fid,diversity\n" << std::setprecision(9);
    for (const auto& cell : cells) {
        const auto& r = cell.result;
        csv << cell.window << "," << cell.k << "," << r.at("guided_steps") << "," << r.at("idf_error").get<double>()
            << "," << r.at("contact_pct").get<double>() << "," << r.at("collision_pct").get<double>() << ","
            << r.at("mdev_mm").get<double>() << "," << r.at("fid").get<double>() << ","
            << r.at("diversity").get<double>() << "\n";
        run.output(fs::path("cells") / (cell.hash + ".json"));
    }
    write_text(run.dir() / "ablation.csv", csv.str());
    write_text(run.dir() / "ablation.svg", svg_plot(windows, ks, cells));
    run.output("ablation.csv");
    run.output("ablation.svg");
    run.write();
    return kExitOk;
}

int cmd_idf_export(const Common& c, const std::string& hoim, const std::string& keypoints, std::size_t frame) {
    const auto cfg = c.resolve();
    RunRecord run("idf-export", cfg, c.out);
    run.input(hoim);
    run.input(keypoints);
    const auto seq = motion::read_hoim(hoim);
    const auto kp = pipeline::load_keypoints(keypoints);
    if (frame >= seq.num_frames())
        throw InputError("frame " + std::to_string(frame) + " is out of range for " + std::to_string(seq.num_frames()) +
                         " frames");
    const auto world = metrics::object_points_world(seq, kp.points);
    std::vector<geometry::Vec3> flat;
    for (const auto& f : world) flat.insert(flat.end(), f.begin(), f.end());
    const auto d = idf::compute_idf(seq.joint_track(), flat, cfg.metric());
    {
        std::ofstream f(run.dir() / "idf.bin", std::ios::binary);
        if (!f) throw InputError("cannot write idf.bin");
        idf::write_idf_binary(f, d);
    }
    std::ostringstream csv;
    idf::write_idf_csv(csv, d, frame);
    const std::string name = "idf_frame_" + std::to_string(frame) + ".csv";
    write_text(run.dir() / name, csv.str());
    run.output("idf.bin");
    run.output(name);
    run.write();
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Human-object interaction synthesis with distance-field guidance"};
    app.require_subcommand(1);
    int code = kExitOk;

    Common common;
    std::string obj, kind, data, gen, rel, set, hoim, keypoints;
    std::optional<std::string> data_opt, obj_opt, label, compare, reference;
    bool guided = false;
    std::size_t frame = 0;
    std::vector<double> windows = {0.0, 0.001, 0.01, 0.1, 0.5, 1.0};
    std::vector<std::size_t> ks = {1, 5, 10};

    auto* kp_cmd = app.add_subcommand("keypoints", "sample 24 object key points from an OBJ mesh");
    common.attach(kp_cmd);
    kp_cmd->add_option("obj", obj, "OBJ mesh")->required();

    auto* data_cmd = app.add_subcommand("gen-data", "generate a synthetic interaction dataset");
    common.attach(data_cmd);

    auto* train_cmd = app.add_subcommand("train", "train the generation (gen) or relation (rel) model");
    common.attach(train_cmd);
    train_cmd->add_option("kind", kind, "gen or rel")->required()->check(CLI::IsMember({"gen", "rel"}));
    train_cmd->add_option("--data", data, "training manifest")->required();

    auto* sample_cmd = app.add_subcommand("sample", "sample motions, optionally with guidance");
    common.attach(sample_cmd);
    sample_cmd->add_option("--gen", gen, "generation checkpoint")->required();
    sample_cmd->add_option("--rel", rel, "relation checkpoint");
    sample_cmd->add_flag("--guided,!--no-guided", guided, "apply distance-field guidance");
    sample_cmd->add_option("--data", data_opt, "condition on the entries of this manifest");
    sample_cmd->add_option("--object", obj_opt, "condition on this OBJ asset");
    sample_cmd->add_option("--label", label, "action label (filters --data entries)");

    auto* eval_cmd = app.add_subcommand("evaluate", "compute the metric report of a sequence set");
    common.attach(eval_cmd);
    eval_cmd->add_option("--manifest", set, "manifest of the sequences to evaluate")->required();
    eval_cmd->add_option("--compare", compare, "second manifest; adds a delta table");
    eval_cmd->add_option("--reference", reference, "real-motion manifest for FID (default: --manifest)");

    auto* ablate_cmd = app.add_subcommand("ablate", "guidance window x L-BFGS iteration grid");
    common.attach(ablate_cmd);
    ablate_cmd->add_option("--gen", gen, "generation checkpoint")->required();
    ablate_cmd->add_option("--rel", rel, "relation checkpoint")->required();
    ablate_cmd->add_option("--data", data, "evaluation manifest with ground-truth IDFs")->required();
    ablate_cmd->add_option("--reference", reference, "real-motion manifest for FID (default: --data)");
    ablate_cmd->add_option("--windows", windows, "window fractions")->delimiter(',');
    ablate_cmd->add_option("--ks", ks, "L-BFGS iterations per guided step")->delimiter(',');

    auto* idf_cmd = app.add_subcommand("idf-export", "export a sequence's distance field (binary + CSV slice)");
    common.attach(idf_cmd);
    idf_cmd->add_option("--hoim", hoim, "motion file")->required();
    idf_cmd->add_option("--keypoints", keypoints, "canonical key point JSON")->required();
    idf_cmd->add_option("--frame", frame, "frame for the CSV slice");

    try {
        app.parse(argc, argv);
        if (*kp_cmd)
            code = cmd_keypoints(common, obj);
        else if (*data_cmd)
            code = cmd_gen_data(common);
        else if (*train_cmd)
            code = cmd_train(common, kind, data);
        else if (*sample_cmd)
            code = cmd_sample(common, gen, rel, guided, data_opt, obj_opt, label);
        else if (*eval_cmd)
            code = cmd_evaluate(common, set, compare, reference);
        else if (*ablate_cmd)
            code = cmd_ablate(common, gen, rel, data, reference, windows, ks);
        else if (*idf_cmd)
            code = cmd_idf_export(common, hoim, keypoints, frame);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitInput;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: malformed JSON input: " << e.what() << "\n";
        return kExitInput;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    }
    return code;
}
