#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "proreflow/flowcore.hpp"
#include "proreflow/harness/config.hpp"
#include "proreflow/harness/csv.hpp"
#include "proreflow/metrics.hpp"
#include "proreflow/numcore.hpp"
#include "proreflow/sampler.hpp"

namespace proreflow::harness {

inline constexpr const char* kToolName = "proreflow";
inline constexpr const char* kToolVersion = "0.1.0";

inline std::string file_digest(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot read " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 14];
    while (is.read(buf, sizeof buf) || is.gcount() > 0) {
        for (std::streamsize i = 0; i < is.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

// Output directory of one command plus the record of what it produced.
class Run {
public:
    Run(std::string command, RunConfig config, std::filesystem::path out, bool overwrite)
        : command_(std::move(command)), config_(std::move(config)), out_(std::move(out)),
          start_(std::chrono::steady_clock::now()) {
        namespace fs = std::filesystem;
        if (fs::exists(out_)) {
            if (!fs::is_directory(out_)) throw Error("output path " + out_.string() + " is not a directory");
            if (!fs::is_empty(out_) && !overwrite)
                throw Error("output directory " + out_.string() + " already exists and is not empty; pass --overwrite");
        }
        fs::create_directories(out_);
    }

    const RunConfig& config() const noexcept { return config_; }

    // Path for a new artifact; the file is hashed into the manifest on finish().
    std::filesystem::path artifact(const std::string& name) {
        artifacts_.push_back(name);
        return out_ / name;
    }

    void input(const std::string& role, const std::string& path) {
        inputs_[role] = {path, file_digest(path)};
    }

    // Times fn() under `label` in the manifest.
    template <class Fn>
    auto timed(const std::string& label, Fn&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        if constexpr (std::is_void_v<decltype(fn())>) {
            fn();
            timings_[label] += seconds_since(t0);
        } else {
            auto r = fn();
            timings_[label] += seconds_since(t0);
            return r;
        }
    }

    nlohmann::json finish() {
        nlohmann::json arts = nlohmann::json::array();
        for (const auto& a : artifacts_) {
            const auto p = out_ / a;
            arts.push_back({{"path", a}, {"fnv1a64", file_digest(p)}, {"bytes", std::filesystem::file_size(p)}});
        }
        nlohmann::json ins = nlohmann::json::object();
        for (const auto& [role, v] : inputs_) ins[role] = {{"path", v.first}, {"fnv1a64", v.second}};
        timings_["total"] = seconds_since(start_);
        nlohmann::json m = {
            {"tool", kToolName}, {"version", kToolVersion}, {"command", command_}, {"config", to_json(config_)},
            {"inputs", ins},     {"artifacts", arts},       {"timings_seconds", timings_},
        };
        std::ofstream os(out_ / "manifest.json");
        os << m.dump(2) << '\n';
        if (!os) throw Error("cannot write manifest in " + out_.string());
        return m;
    }

private:
    static double seconds_since(std::chrono::steady_clock::time_point t0) {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }

    std::string command_;
    RunConfig config_;
    std::filesystem::path out_;
    std::chrono::steady_clock::time_point start_;
    std::vector<std::string> artifacts_;
    std::map<std::string, std::pair<std::string, std::string>> inputs_;
    std::map<std::string, double> timings_;
};

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& trace) {
    CsvWriter w(path, {"iter", "loss", "mse_term", "cos_term"});
    for (const auto& r : trace)
        w.row({std::to_string(r.iter), fmt_double(r.loss), fmt_double(r.mse_term), fmt_double(r.cos_term)});
}

inline VelocityModel load_input(Run& run, const std::string& role, const std::string& path) {
    if (path.empty()) throw Error("missing input: " + role + " checkpoint path is not set");
    if (!std::filesystem::exists(path)) throw Error("missing " + role + " checkpoint: " + path);
    run.input(role, path);
    return load_checkpoint(path);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalRow {
    std::string label;
    std::size_t steps = 0;
    std::uint64_t seed = 0;
    double sliced_w2 = 0.0;
    double energy_distance = 0.0;
    double straightness = 0.0;
};

// Fixed reference set and starting noise for one evaluation seed, shared by
// every model scored under that seed.
struct EvalContext {
    std::uint64_t seed;
    Tensor2 reference;
    Tensor2 z0;

    EvalContext(const RunConfig& cfg, std::uint64_t eval_seed) : seed(eval_seed) {
        DatasetSpec ref = cfg.dataset;
        ref.seed = derive_seed(eval_seed, "reference");
        reference = sample_data(ref, cfg.eval.n_samples);
        z0 = sample_noise(cfg.eval.n_samples, cfg.dataset.dim, derive_seed(eval_seed, "z0"));
    }

    template <VelocityField F>
    double quality(const F& field, std::size_t steps, std::size_t n_projections) const {
        return sliced_w2(euler_sample(field, steps, z0).samples, reference, n_projections, derive_seed(seed, "sw2"));
    }
};

template <VelocityField F>
std::vector<EvalRow> evaluate_model(const F& field, const std::string& label, std::span<const std::size_t> steps,
                                    const RunConfig& cfg, const EvalContext& ctx) {
    const double straight = straightness(field, cfg.dataset.dim, cfg.eval.straightness_trajectories,
                                         cfg.eval.straightness_steps, derive_seed(ctx.seed, "straightness"));
    std::vector<EvalRow> rows;
    for (std::size_t s : steps) {
        const Tensor2 x = euler_sample(field, s, ctx.z0).samples;
        EvalRow r{label, s, ctx.seed};
        r.sliced_w2 = sliced_w2(x, ctx.reference, cfg.eval.n_projections, derive_seed(ctx.seed, "sw2"));
        r.energy_distance = energy_distance(x, ctx.reference, cfg.eval.energy_max_points, derive_seed(ctx.seed, "energy"));
        r.straightness = straight;
        rows.push_back(std::move(r));
    }
    return rows;
}

inline void write_eval_csv(const std::filesystem::path& path, const std::vector<EvalRow>& rows) {
    CsvWriter w(path, {"checkpoint", "steps", "sliced_w2", "energy_distance", "straightness"});
    for (const auto& r : rows)
        w.row({r.label, std::to_string(r.steps), fmt_double(r.sliced_w2), fmt_double(r.energy_distance),
               fmt_double(r.straightness)});
}

// ---------------------------------------------------------------------------
// Commands. Each writes its artifacts and manifest.json into `out`.
// ---------------------------------------------------------------------------

inline nlohmann::json cmd_gen_data(const RunConfig& cfg, const std::filesystem::path& out, bool overwrite) {
    Run run("gen-data", cfg, out, overwrite);
    const Tensor2 x = sample_data(cfg.training_setup().dataset, cfg.gen_data_n);
    write_samples_csv(run.artifact("data.csv"), x);
    return run.finish();
}

inline VelocityModel initial_model(const RunConfig& cfg) {
    ModelArch arch = cfg.model;
    arch.data_dim = cfg.dataset.dim;
    return VelocityModel::random(arch, derive_seed(cfg.seed, "init"));
}

// Trains the toy teacher flow with independent (noise, data) pairs.
inline StageResult train_teacher(const RunConfig& cfg) {
    return train_flow_matching(initial_model(cfg), cfg.teacher.iterations, cfg.teacher.batch_size,
                               cfg.training_setup(), derive_seed(cfg.seed, "teacher"));
}

inline nlohmann::json cmd_train_teacher(const RunConfig& cfg, const std::filesystem::path& out, bool overwrite) {
    Run run("train-teacher", cfg, out, overwrite);
    const StageResult r = run.timed("train", [&] { return train_teacher(cfg); });
    save_checkpoint(run.artifact("teacher.ckpt"), r.model);
    write_loss_csv(run.artifact("teacher_loss.csv"), r.trace);
    return run.finish();
}

inline std::string stage_checkpoint_name(std::size_t K) { return "stage_K" + std::to_string(K) + ".ckpt"; }

// Progressive reflow from inputs.teacher, then evaluation of every stage.
inline nlohmann::json cmd_reflow(const RunConfig& cfg, const std::filesystem::path& out, bool overwrite) {
    Run run("reflow", cfg, out, overwrite);
    const VelocityModel teacher = load_input(run, "teacher", cfg.inputs.teacher);
    std::vector<StageCheckpoint> stages;
    run.timed("train", [&] {
        stages = progressive_train(teacher, cfg.plan, cfg.loss, cfg.training_setup(), derive_seed(cfg.seed, "reflow"),
                                   [&](const StageCheckpoint& st) {
                                       save_checkpoint(run.artifact(stage_checkpoint_name(st.windows)), st.model);
                                       write_loss_csv(run.artifact("loss_K" + std::to_string(st.windows) + ".csv"),
                                                      st.trace);
                                   });
    });
    run.timed("eval", [&] {
        const EvalContext ctx(cfg, cfg.seed);
        std::vector<EvalRow> rows;
        for (const auto& st : stages) {
            auto r = evaluate_model(st.model, stage_checkpoint_name(st.windows), cfg.eval.steps, cfg, ctx);
            rows.insert(rows.end(), r.begin(), r.end());
        }
        write_eval_csv(run.artifact("eval.csv"), rows);
    });
    return run.finish();
}

inline nlohmann::json cmd_sample(const RunConfig& cfg, const std::filesystem::path& out, bool overwrite) {
    Run run("sample", cfg, out, overwrite);
    const VelocityModel model = load_input(run, "checkpoint", cfg.inputs.checkpoint);
    const Tensor2 z0 = sample_noise(cfg.sample.n, model.data_dim(), derive_seed(cfg.seed, "sample"));
    const auto& s = cfg.sample;
    if (!s.record_trajectories && s.windows > 0) {
        write_samples_csv(run.artifact("samples.csv"),
                          piecewise_sample(model, WindowSchedule::uniform(s.windows), s.steps / s.windows, z0));
        return run.finish();
    }
    // A uniform window schedule walks the same grid as plain Euler.
    const SampleResult res = euler_sample(model, s.steps, z0, s.record_trajectories);
    write_samples_csv(run.artifact("samples.csv"), res.samples);
    if (res.trajectory) {
        const auto& rec = *res.trajectory;
        std::vector<std::string> header{"step", "t", "sample_id"};
        for (std::size_t c = 0; c < model.data_dim(); ++c) header.push_back("x" + std::to_string(c));
        CsvWriter w(run.artifact("trajectories.csv"), header);
        std::vector<std::string> cells(header.size());
        for (std::size_t k = 0; k < rec.states.size(); ++k) {
            cells[0] = std::to_string(k);
            cells[1] = fmt_double(rec.times[k]);
            for (std::size_t r = 0; r < rec.states[k].rows(); ++r) {
                cells[2] = std::to_string(r);
                for (std::size_t c = 0; c < model.data_dim(); ++c) cells[3 + c] = fmt_double(rec.states[k](r, c));
                w.row(cells);
            }
        }
    }
    return run.finish();
}

inline std::vector<ModelInput> eval_inputs(const RunConfig& cfg) {
    std::vector<ModelInput> models = cfg.inputs.models;
    if (!cfg.inputs.checkpoint.empty())
        models.insert(models.begin(),
                      {std::filesystem::path(cfg.inputs.checkpoint).filename().string(), cfg.inputs.checkpoint});
    return models;
}

inline void require_inputs_exist(const std::vector<ModelInput>& models) {
    std::vector<std::string> missing;
    for (const auto& m : models)
        if (!std::filesystem::exists(m.path)) missing.push_back(m.label + " (" + m.path + ")");
    if (missing.empty()) return;
    std::string msg = "missing checkpoint";
    msg += missing.size() > 1 ? "s: " : ": ";
    for (std::size_t i = 0; i < missing.size(); ++i) msg += (i ? ", " : "") + missing[i];
    throw Error(msg);
}

inline nlohmann::json cmd_eval(const RunConfig& cfg, const std::filesystem::path& out, bool overwrite) {
    const auto models = eval_inputs(cfg);
    require_inputs_exist(models);
    Run run("eval", cfg, out, overwrite);
    const EvalContext ctx(cfg, cfg.seed);
    std::vector<EvalRow> rows;
    for (const auto& m : models) {
        const VelocityModel model = load_input(run, m.label, m.path);
        auto r = evaluate_model(model, m.label, cfg.eval.steps, cfg, ctx);
        rows.insert(rows.end(), r.begin(), r.end());
    }
    write_eval_csv(run.artifact("eval.csv"), rows);
    return run.finish();
}

inline nlohmann::json cmd_velocity_gap(const RunConfig& cfg, const std::filesystem::path& out, bool overwrite) {
    Run run("velocity-gap", cfg, out, overwrite);
    const VelocityModel model = load_input(run, "checkpoint", cfg.inputs.checkpoint);
    const VelocityGapReport rep = velocity_gap_matrix(model, model.data_dim(), cfg.velocity_gap.T,
                                                      cfg.velocity_gap.n_samples, derive_seed(cfg.seed, "velocity_gap"));
    write_matrix_csv(run.artifact("velocity_gap_l2.csv"), rep.l2_matrix);
    write_matrix_csv(run.artifact("velocity_gap_cos.csv"), rep.cos_matrix);
    return run.finish();
}

inline NoiseAblationConfig ablation_config(const RunConfig& cfg) {
    NoiseAblationConfig nc;
    nc.reference = cfg.dataset;
    nc.steps = cfg.noise_ablation.steps;
    nc.n_samples = cfg.noise_ablation.n_samples;
    nc.n_projections = cfg.eval.n_projections;
    nc.probe_samples = cfg.noise_ablation.probe_samples;
    nc.match_tolerance = cfg.noise_ablation.match_tolerance;
    return nc;
}

inline nlohmann::json cmd_noise_ablation(const RunConfig& cfg, const std::filesystem::path& out, bool overwrite) {
    Run run("noise-ablation", cfg, out, overwrite);
    const VelocityModel model = load_input(run, "checkpoint", cfg.inputs.checkpoint);
    const NoiseAblationReport rep =
        noise_ablation(model, cfg.noise_ablation.scales, ablation_config(cfg), derive_seed(cfg.seed, "noise_ablation"));
    CsvWriter w(run.artifact("noise_ablation.csv"), {"scale", "matched_l2", "base", "magnitude_q", "direction_q"});
    for (std::size_t i = 0; i < rep.noise_scales.size(); ++i)
        w.row({fmt_double(rep.noise_scales[i]), fmt_double(rep.matched_l2[i]), fmt_double(rep.base_quality),
               fmt_double(rep.magnitude_quality[i]), fmt_double(rep.direction_quality[i])});
    return run.finish();
}

struct AlphaSweepRow {
    double alpha = 0.0;
    std::size_t windows = 0;
    std::size_t steps = 0;
    std::uint64_t seed = 0;
    double sliced_w2 = 0.0;
    double energy_distance = 0.0;
};

// One fixed-window stage per alpha from the same teacher and stage seed, so
// every row sees identical couplings and differs only through the loss.
inline std::vector<AlphaSweepRow> alpha_sweep(const VelocityModel& teacher, const RunConfig& cfg) {
    const std::size_t K = cfg.sweep.windows;
    StagePlan plan = cfg.plan;
    plan.window_counts = {K};
    const EvalContext ctx(cfg, cfg.seed);
    std::vector<AlphaSweepRow> rows;
    for (double a : cfg.sweep.alphas) {
        LossConfig loss = cfg.loss;
        loss.alpha = a;
        const auto stages = progressive_train(teacher, plan, loss, cfg.training_setup(), derive_seed(cfg.seed, "reflow"));
        const auto ev = evaluate_model(stages.back().model, "", std::vector<std::size_t>{K}, cfg, ctx);
        rows.push_back({a, K, K, cfg.seed, ev[0].sliced_w2, ev[0].energy_distance});
    }
    return rows;
}

inline nlohmann::json cmd_alpha_sweep(const RunConfig& cfg, const std::filesystem::path& out, bool overwrite) {
    Run run("alpha-sweep", cfg, out, overwrite);
    const VelocityModel teacher = load_input(run, "teacher", cfg.inputs.teacher);
    const auto rows = run.timed("sweep", [&] { return alpha_sweep(teacher, cfg); });
    CsvWriter w(run.artifact("alpha_sweep.csv"), {"alpha", "windows", "steps", "seed", "sliced_w2", "energy_distance"});
    for (const auto& r : rows)
        w.row({fmt_double(r.alpha), std::to_string(r.windows), std::to_string(r.steps), std::to_string(r.seed),
               fmt_double(r.sliced_w2), fmt_double(r.energy_distance)});
    return run.finish();
}

inline constexpr const char* kTeacherLabel = "teacher";

// Scores every listed model at eval.steps under each eval seed. The model
// labelled "teacher" is also scored at plan.teacher_total_steps as the
// quality reference.
inline std::vector<EvalRow> compare_baselines(const std::vector<std::pair<std::string, VelocityModel>>& models,
                                              const RunConfig& cfg) {
    std::vector<EvalRow> rows;
    for (std::uint64_t seed : cfg.eval_seeds()) {
        const EvalContext ctx(cfg, seed);
        for (const auto& [label, model] : models) {
            std::vector<std::size_t> steps = cfg.eval.steps;
            if (label == kTeacherLabel &&
                std::find(steps.begin(), steps.end(), cfg.plan.teacher_total_steps) == steps.end())
                steps.push_back(cfg.plan.teacher_total_steps);
            auto r = evaluate_model(model, label, steps, cfg, ctx);
            rows.insert(rows.end(), r.begin(), r.end());
        }
    }
    return rows;
}

inline nlohmann::json cmd_compare(const RunConfig& cfg, const std::filesystem::path& out, bool overwrite) {
    require_inputs_exist(cfg.inputs.models);
    Run run("compare", cfg, out, overwrite);
    std::vector<std::pair<std::string, VelocityModel>> models;
    for (const auto& m : cfg.inputs.models) models.emplace_back(m.label, load_input(run, m.label, m.path));
    const auto rows = run.timed("eval", [&] { return compare_baselines(models, cfg); });
    CsvWriter w(run.artifact("compare.csv"),
                {"model", "steps", "seed", "sliced_w2", "energy_distance", "straightness"});
    for (const auto& r : rows)
        w.row({r.label, std::to_string(r.steps), std::to_string(r.seed), fmt_double(r.sliced_w2),
               fmt_double(r.energy_distance), fmt_double(r.straightness)});
    return run.finish();
}

using CommandFn = nlohmann::json (*)(const RunConfig&, const std::filesystem::path&, bool);

inline const std::vector<std::pair<std::string, CommandFn>>& commands() {
    static const std::vector<std::pair<std::string, CommandFn>> table{
        {"gen-data", cmd_gen_data},         {"train-teacher", cmd_train_teacher}, {"reflow", cmd_reflow},
        {"sample", cmd_sample},             {"eval", cmd_eval},                   {"velocity-gap", cmd_velocity_gap},
        {"noise-ablation", cmd_noise_ablation}, {"alpha-sweep", cmd_alpha_sweep}, {"compare", cmd_compare},
    };
    return table;
}

inline nlohmann::json run_command(const std::string& name, const RunConfig& cfg, const std::filesystem::path& out,
                                  bool overwrite) {
    for (const auto& [n, fn] : commands())
        if (n == name) return fn(cfg, out, overwrite);
    throw Error("unknown command " + name);
}

// Reruns the manifest's command and config into `out` and lists every artifact
// whose digest differs from the manifest.
inline std::vector<std::string> reproduce_manifest(const std::filesystem::path& manifest_path,
                                                   const std::filesystem::path& out) {
    std::ifstream is(manifest_path);
    if (!is) throw Error("cannot open manifest " + manifest_path.string());
    const nlohmann::json m = nlohmann::json::parse(is);
    const RunConfig cfg = from_json(m);
    const nlohmann::json again = run_command(m.at("command").get<std::string>(), cfg, out, false);
    std::map<std::string, std::string> digests;
    for (const auto& a : again.at("artifacts")) digests[a.at("path")] = a.at("fnv1a64");
    std::vector<std::string> mismatched;
    for (const auto& a : m.at("artifacts")) {
        auto it = digests.find(a.at("path").get<std::string>());
        if (it == digests.end() || it->second != a.at("fnv1a64").get<std::string>())
            mismatched.push_back(a.at("path").get<std::string>());
    }
    if (digests.size() != m.at("artifacts").size()) mismatched.emplace_back("<artifact list differs>");
    return mismatched;
}

} // namespace proreflow::harness
