// Command-line front end: one subcommand per experiment, all driven by a
// single JSON config. Flags given on the command line override the config.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "proreflow/harness/commands.hpp"

namespace fs = std::filesystem;
using namespace proreflow;
using namespace proreflow::harness;

namespace {

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> n, steps, windows, iterations, T;
    std::optional<double> alpha;
    std::string teacher, checkpoint;
    std::vector<std::string> checkpoints, models;
    std::vector<std::size_t> window_counts, eval_steps;
    std::vector<double> alphas, scales;
    std::vector<std::uint64_t> seeds;
    bool record = false;
};

void apply(const std::string& cmd, const Overrides& o, RunConfig& c) {
    if (o.seed) c.seed = *o.seed;
    if (!o.teacher.empty()) c.inputs.teacher = o.teacher;
    if (!o.checkpoint.empty()) c.inputs.checkpoint = o.checkpoint;
    if (!o.eval_steps.empty()) c.eval.steps = o.eval_steps;
    if (!o.seeds.empty()) c.eval.seeds = o.seeds;
    if (cmd == "gen-data" && o.n) c.gen_data_n = *o.n;
    if (cmd == "train-teacher" && o.iterations) c.teacher.iterations = *o.iterations;
    if (cmd == "reflow") {
        if (!o.window_counts.empty()) c.plan.window_counts = o.window_counts;
        if (o.iterations) c.plan.iterations_per_stage = *o.iterations;
        if (o.alpha) c.loss.alpha = *o.alpha;
    }
    if (cmd == "sample") {
        if (o.n) c.sample.n = *o.n;
        if (o.steps) c.sample.steps = *o.steps;
        if (o.windows) c.sample.windows = *o.windows;
        if (o.record) c.sample.record_trajectories = true;
    }
    if (cmd == "eval")
        for (const auto& p : o.checkpoints) c.inputs.models.push_back({fs::path(p).filename().string(), p});
    if (cmd == "velocity-gap" && o.T) c.velocity_gap.T = *o.T;
    if (cmd == "noise-ablation" && !o.scales.empty()) c.noise_ablation.scales = o.scales;
    if (cmd == "alpha-sweep") {
        if (!o.alphas.empty()) c.sweep.alphas = o.alphas;
        if (o.windows) c.sweep.windows = *o.windows;
        if (o.iterations) c.plan.iterations_per_stage = *o.iterations;
    }
    if (cmd == "compare")
        for (const auto& spec : o.models) {
            const auto eq = spec.find('=');
            if (eq == std::string::npos) throw Error("--model expects label=path, got '" + spec + "'");
            c.inputs.models.push_back({spec.substr(0, eq), spec.substr(eq + 1)});
        }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Progressive reflow and aligned v-prediction on 2-D toy flows"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, out;
    bool overwrite = false;
    Overrides o;
    app.add_option("--config", config_path, "JSON config or a manifest.json to rerun");
    app.add_option("--seed", o.seed, "Run seed");
    app.add_option("--out", out, "Output directory (default runs/<command>)");
    app.add_flag("--overwrite", overwrite, "Allow writing into a non-empty output directory");

    auto* gen = app.add_subcommand("gen-data", "Write target samples as CSV");
    gen->add_option("--n", o.n, "Number of samples");

    auto* teach = app.add_subcommand("train-teacher", "Train the teacher flow");
    teach->add_option("--iterations", o.iterations);

    auto* reflow = app.add_subcommand("reflow", "Progressive reflow from a teacher checkpoint");
    reflow->add_option("--teacher", o.teacher, "Teacher checkpoint");
    reflow->add_option("--windows", o.window_counts, "Window counts per stage, e.g. 8 4 2");
    reflow->add_option("--iterations", o.iterations, "Iterations per stage");
    reflow->add_option("--alpha", o.alpha, "Direction loss weight");

    auto* sample = app.add_subcommand("sample", "Sample a checkpoint");
    sample->add_option("--checkpoint", o.checkpoint)->required();
    sample->add_option("--n", o.n);
    sample->add_option("--steps", o.steps);
    sample->add_option("--windows", o.windows, "Integrate window by window (steps must be a multiple)");
    sample->add_flag("--record-trajectories", o.record, "Also write every Euler state");

    auto* eval = app.add_subcommand("eval", "Score checkpoints");
    eval->add_option("--checkpoint", o.checkpoints, "Checkpoint(s) to score");
    eval->add_option("--steps", o.eval_steps, "Sampling step counts");

    auto* gap = app.add_subcommand("velocity-gap", "Pairwise velocity L2/cosine matrices");
    gap->add_option("--checkpoint", o.checkpoint);
    gap->add_option("--T", o.T, "Number of timesteps");

    auto* abl = app.add_subcommand("noise-ablation", "Direction vs magnitude noise at matched L2");
    abl->add_option("--checkpoint", o.checkpoint);
    abl->add_option("--scales", o.scales, "Magnitude noise scales");

    auto* sweep = app.add_subcommand("alpha-sweep", "One fixed-window stage per alpha");
    sweep->add_option("--teacher", o.teacher);
    sweep->add_option("--alphas", o.alphas);
    sweep->add_option("--windows", o.windows);
    sweep->add_option("--iterations", o.iterations);

    auto* cmp = app.add_subcommand("compare", "Score named checkpoints across steps and seeds");
    cmp->add_option("--model", o.models, "label=path (repeatable)");
    cmp->add_option("--seeds", o.seeds, "Evaluation seeds");
    cmp->add_option("--steps", o.eval_steps);

    CLI11_PARSE(app, argc, argv);

    const std::string cmd = app.get_subcommands().front()->get_name();
    try {
        RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
        apply(cmd, o, cfg);
        validate(cfg);
        const fs::path out_dir = out.empty() ? fs::path("runs") / cmd : fs::path(out);
        const auto manifest = run_command(cmd, cfg, out_dir, overwrite);
        std::cout << "wrote " << manifest.at("artifacts").size() << " artifact(s) to " << out_dir.string() << '\n';
        for (const auto& a : manifest.at("artifacts")) std::cout << "  " << a.at("path").get<std::string>() << '\n';
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
