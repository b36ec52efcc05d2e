// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "oracles.hpp"
#include "proreflow/harness/commands.hpp"

using namespace proreflow;
using namespace proreflow::harness;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Budget of the experiment criteria (4-9).
struct Budget {
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::size_t stage_iterations = 10000;
    // SW2 between two 8192-point gauss8 clouds moves by ~0.1 with the
    // evaluation seed, as much as the gaps being compared.
    std::size_t eval_samples = 65536;
    std::size_t straightness_trajectories = 4096;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

std::string list(const std::vector<double>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt(v[i]);
    return s + "]";
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const Outcome& o, double secs, double limit = 0.0) {
    const bool in_time = limit <= 0.0 || secs < limit;
    const bool pass = o.pass && in_time;
    if (!pass) ++failures;
    std::ostringstream line;
    line << (pass ? "PASS" : "FAIL") << "  C" << id << " " << name << ": " << o.detail << " (" << fmt(secs) << " s";
    if (limit > 0.0) line << ", limit " << fmt(limit) << " s";
    line << ")";
    std::cout << line.str() << std::endl;
}

template <class Fn>
void criterion(int id, const std::string& name, double limit, Fn&& fn) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
        o = fn();
    } catch (const std::exception& e) {
        o = {false, std::string("error: ") + e.what()};
    }
    report(id, name, o, seconds_since(t0), limit);
}

// ---------------------------------------------------------------------------
// Analytic criteria
// ---------------------------------------------------------------------------

Outcome gradient_oracle() {
    std::size_t coords = 0;
    double worst = 0.0;
    for (int which = 0; which < 3; ++which) {
        for (std::uint64_t ms = 0; ms < 5; ++ms) {
            const auto m = VelocityModel::random(ModelArch{}, derive_seed(ms, "model"));
            const Tensor2 z = sample_noise(8, 2, derive_seed(ms, "z"));
            const Tensor2 target = sample_noise(8, 2, derive_seed(ms, "target"));
            std::vector<double> t(8);
            Rng rt(derive_seed(ms, "t"));
            for (double& x : t) x = rt.uniform();
            auto loss = [&](const Tensor2& p) {
                switch (which) {
                case 0: return mse_loss(p, target);
                case 1: return cosine_loss(p, target, 1e-8);
                default: return aligned_loss(p, target, LossConfig{0.1, 1e-8});
                }
            };
            const auto g = loss_gradients(m, z, t, loss);
            auto value = [&](const VelocityModel& mm) { return loss(forward(mm, z, t)).value; };
            Rng pick(derive_seed(ms, "coords", which));
            for (int i = 0; i < 40; ++i) {
                const std::size_t layer = pick.below(m.layers.size());
                const std::size_t n = m.layers[layer].weight.size() + m.layers[layer].bias.size();
                const std::size_t idx = pick.below(n);
                const double fd = oracle::central_difference(m, layer, idx, 1e-5, value);
                worst = std::max(worst, oracle::relative_error(oracle::gradient_at(g.grads, layer, idx), fd));
                ++coords;
            }
        }
    }
    return {worst < 1e-4 && coords >= 100,
            "worst relative error " + fmt(worst) + " over " + std::to_string(coords) + " coordinates, 5 models x 3 losses"};
}

Outcome loss_degeneration() {
    double worst = 0.0;
    bool exact_zero = true;
    for (std::uint64_t s = 0; s < 200; ++s) {
        const auto p = sample_noise(16, 2, derive_seed(s, "p"));
        const auto v = sample_noise(16, 2, derive_seed(s, "v"));
        worst = std::max(worst, std::abs(aligned_loss(p, v, LossConfig{0.0, 1e-8}).value - oracle::mse(p, v)));
        for (double a : {0.0, 0.05, 0.1, 0.5, 1.0}) exact_zero &= aligned_loss(p, p, LossConfig{a, 1e-8}).value == 0.0;
    }
    exact_zero &= aligned_loss(Tensor2(4, 2), Tensor2(4, 2), LossConfig{}).value == 0.0;
    return {worst <= 1e-12 && exact_zero,
            "max |L(alpha=0) - MSE| = " + fmt(worst) + ", L(p, p) == 0 for all alpha: " + (exact_zero ? "yes" : "no")};
}

Outcome law_of_cosines() {
    double min_y = 1e300, worst_ratio = 0.0, worst_trig = 0.0;
    for (int i = 0; i < 100; ++i) {
        const double v = 70.0 + 50.0 * i / 99.0;
        for (int j = 1; j <= 100; ++j) {
            const double e = 0.1 * j / 100.0;
            const auto g = direction_error_gap(v, e);
            // Extended precision keeps 1 - cos(eps) accurate at eps = 1e-3.
            const long double lv = v, le = e;
            const double r1 = double(2.0L * lv * lv * (1.0L - std::cos(le)));
            worst_trig = std::max(worst_trig, std::abs(g.r1 - r1) / r1);
            min_y = std::min(min_y, g.y);
            worst_ratio = std::max(worst_ratio, std::abs(g.y - (v * v - 1.0) * e * e) / (v * v * e * e * e * e / 12.0));
        }
    }
    const auto ex = direction_error_gap(100.0, 0.01);
    const bool example = std::abs(ex.r1 - 0.999992) < 1e-6 && ex.r2 == 1e-4 && std::abs(ex.y - 0.99989) < 1e-5;
    return {min_y > 0.0 && worst_ratio <= 1.0 + 1e-9 && worst_trig < 1e-12 && example,
            "min y " + fmt(min_y) + ", max remainder / (v^2 eps^4 / 12) " + fmt(worst_ratio) +
                ", max trig rel err " + fmt(worst_trig) + ", v=100 eps=0.01 example " + (example ? "ok" : "off")};
}

struct TimeField {
    Tensor2 operator()(const Tensor2& z, std::span<const double> t) const {
        Tensor2 v(z.rows(), z.cols());
        for (std::size_t r = 0; r < z.rows(); ++r)
            for (std::size_t c = 0; c < z.cols(); ++c) v(r, c) = std::sin(3.0 * t[r]) * (1.0 + z(r, c));
        return v;
    }
};

Outcome sampler_identities() {
    const auto z = sample_noise(16, 2, 1);
    const auto m = VelocityModel::random(ModelArch{}, 2);
    std::size_t checks = 0, bad = 0;
    auto expect = [&](bool ok) { ++checks, bad += !ok; };
    for (std::size_t K = 1; K <= 8; ++K)
        for (std::size_t spw = 1; spw <= 4; ++spw) {
            expect(piecewise_sample(m, WindowSchedule::uniform(K), spw, z) == euler_sample(m, K * spw, z).samples);
            expect(piecewise_sample(TimeField{}, WindowSchedule::uniform(K), spw, z) ==
                   euler_sample(TimeField{}, K * spw, z).samples);
        }
    for (std::size_t n : {2, 4, 8, 16, 32}) {
        expect(teacher_solve(m, teacher_solve(m, z, 0.0, 0.5, n / 2), 0.5, 1.0, n / 2) == teacher_solve(m, z, 0.0, 1.0, n));
        expect(teacher_solve(m, z, 0.0, 1.0, n) == euler_sample(m, n, z).samples);
    }
    for (std::size_t K : {2, 4, 8, 16, 32}) {
        const auto h = halve_schedule(WindowSchedule::uniform(K));
        expect(h == WindowSchedule::uniform(K / 2));
        expect(h.endpoints().front() == 0.0 && h.endpoints().back() == 1.0 && h.windows() * 2 == K);
    }
    bool odd_rejected = false;
    try {
        halve_schedule(WindowSchedule::uniform(3));
    } catch (const Error&) {
        odd_rejected = true;
    }
    expect(odd_rejected);
    return {bad == 0, std::to_string(checks - bad) + "/" + std::to_string(checks) + " identities hold bitwise"};
}

Outcome metric_oracle() {
    const auto x = sample_noise(8192, 2, 3);
    Tensor2 y = x;
    for (std::size_t r = 0; r < y.rows(); ++r) y(r, 0) += 1.0;
    const double d = sliced_w2(x, y, 128, 4);
    const double rel = std::abs(d - std::sqrt(0.5)) / std::sqrt(0.5);
    const double self = sliced_w2(x, x, 128, 4);
    return {rel < 0.03 && self == 0.0,
            "translated cloud " + fmt(d) + " vs sqrt(1/2) (rel err " + fmt(rel) + "), identical clouds " + fmt(self)};
}

// ---------------------------------------------------------------------------
// Experiment criteria
// ---------------------------------------------------------------------------

RunConfig experiment_config(std::uint64_t seed, const Budget& b) {
    RunConfig c;
    c.seed = seed;
    c.plan.iterations_per_stage = b.stage_iterations;
    c.eval.n_samples = b.eval_samples;
    c.eval.straightness_trajectories = b.straightness_trajectories;
    c.noise_ablation.n_samples = b.eval_samples;
    return c;
}

struct SeedRun {
    RunConfig cfg;
    VelocityModel teacher;
    std::vector<StageCheckpoint> progressive;    // [8, 4, 2], alpha 0.1
    std::vector<StageCheckpoint> progressive_a0; // [8, 4], alpha 0
    VelocityModel direct4, direct2;
};

VelocityModel direct_model(const SeedRun& s, std::size_t K, std::size_t stages_matched) {
    StagePlan plan = s.cfg.plan;
    plan.window_counts = {K};
    plan.iterations_per_stage = stages_matched * s.cfg.plan.iterations_per_stage;
    return progressive_train(s.teacher, plan, s.cfg.loss, s.cfg.training_setup(), derive_seed(s.cfg.seed, "reflow"))
        .back()
        .model;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"proreflow acceptance run"};
    std::string workdir = "acceptance_runs";
    Budget budget;
    app.add_option("--workdir", workdir, "scratch directory for run artifacts");
    app.add_option("--stage-iterations", budget.stage_iterations, "reflow iterations per stage");
    CLI11_PARSE(app, argc, argv);

    std::cout << "acceptance: seeds " << budget.seeds.size() << ", " << budget.stage_iterations
              << " iterations per reflow stage, " << budget.eval_samples << " eval samples" << std::endl;

    criterion(1, "gradient oracle", 10.0, gradient_oracle);
    criterion(2, "loss degeneration", 0.0, loss_degeneration);
    criterion(3, "law of cosines", 1.0, law_of_cosines);

    // Shared teacher fixture: default teacher config, one teacher per seed.
    std::vector<SeedRun> runs;
    {
        const auto t0 = Clock::now();
        for (auto s : budget.seeds) {
            SeedRun r{experiment_config(s, budget), VelocityModel{}, {}, {}, VelocityModel{}, VelocityModel{}};
            r.teacher = train_teacher(r.cfg).model;
            runs.push_back(std::move(r));
        }
        std::cout << "      teacher fixture: " << runs.size() << " teachers in " << fmt(seconds_since(t0)) << " s"
                  << std::endl;
    }

    criterion(4, "velocity gap trend", 120.0, [&] {
        std::vector<double> adj, far, diff;
        for (const auto& r : runs) {
            const auto rep = velocity_gap_matrix(r.teacher, 2, 32, r.cfg.velocity_gap.n_samples,
                                                 derive_seed(r.cfg.seed, "velocity_gap"));
            adj.push_back(rep.mean_cos(1, 1));
            far.push_back(rep.mean_cos(16, 31));
            diff.push_back(adj.back() - far.back());
        }
        return Outcome{median(diff) > 0.0, "adjacent cos " + list(adj) + " vs far cos " + list(far) +
                                               ", median gap " + fmt(median(diff))};
    });

    criterion(5, "direction vs magnitude noise", 300.0, [&] {
        const std::vector<double> scales = runs[0].cfg.noise_ablation.scales;
        std::vector<std::vector<double>> excess(scales.size());
        double worst_match = 0.0;
        for (const auto& r : runs) {
            const auto rep = noise_ablation(r.teacher, scales, ablation_config(r.cfg),
                                            derive_seed(r.cfg.seed, "noise_ablation"));
            for (std::size_t i = 0; i < scales.size(); ++i) {
                excess[i].push_back(rep.direction_quality[i] - rep.magnitude_quality[i]);
                worst_match = std::max(worst_match, std::abs(rep.matched_l2[i] - rep.magnitude_l2[i]) / rep.magnitude_l2[i]);
            }
        }
        bool ok = worst_match <= 0.01;
        std::string d;
        for (std::size_t i = 0; i < scales.size(); ++i) {
            const double m = median(excess[i]);
            ok &= m >= 0.0;
            d += (i ? ", " : "") + std::string("scale ") + fmt(scales[i]) + ": " + fmt(m);
        }
        return Outcome{ok, "median (direction - magnitude) SW2 degradation " + d + "; worst L2 match " + fmt(worst_match)};
    });

    // C6 trains every reflow arm used by criteria 6-9, so its runtime covers all of them.
    criterion(6, "progressive vs direct", 1800.0, [&] {
        std::vector<double> p4, d4, p2, d2;
        for (auto& r : runs) {
            r.progressive = progressive_train(r.teacher, r.cfg.plan, r.cfg.loss, r.cfg.training_setup(),
                                              derive_seed(r.cfg.seed, "reflow"));
            r.direct4 = direct_model(r, 4, 2);
            r.direct2 = direct_model(r, 2, 3);
            const EvalContext ctx(r.cfg, r.cfg.seed);
            const std::size_t np = r.cfg.eval.n_projections;
            p4.push_back(ctx.quality(r.progressive[1].model, 4, np));
            d4.push_back(ctx.quality(r.direct4, 4, np));
            p2.push_back(ctx.quality(r.progressive[2].model, 2, np));
            d2.push_back(ctx.quality(r.direct2, 2, np));
        }
        return Outcome{median(p4) <= median(d4) && median(p2) <= median(d2),
                       "SW2 at K steps, K=4: progressive " + list(p4) + " vs direct " + list(d4) +
                           "; K=2: progressive " + list(p2) + " vs direct " + list(d2)};
    });

    criterion(7, "aligned v-prediction", 0.0, [&] {
        std::vector<double> a1, a0;
        for (auto& r : runs) {
            StagePlan plan = r.cfg.plan;
            plan.window_counts = {8, 4};
            LossConfig mse_only = r.cfg.loss;
            mse_only.alpha = 0.0;
            r.progressive_a0 =
                progressive_train(r.teacher, plan, mse_only, r.cfg.training_setup(), derive_seed(r.cfg.seed, "reflow"));
            const EvalContext ctx(r.cfg, r.cfg.seed);
            a1.push_back(ctx.quality(r.progressive[1].model, 4, r.cfg.eval.n_projections));
            a0.push_back(ctx.quality(r.progressive_a0[1].model, 4, r.cfg.eval.n_projections));
        }
        return Outcome{median(a1) <= median(a0),
                       "[8,4] at 4 steps: alpha=0.1 " + list(a1) + " vs alpha=0 " + list(a0)};
    });

    criterion(8, "step scalability", 0.0, [&] {
        std::vector<double> s2, s4;
        for (const auto& r : runs) {
            const EvalContext ctx(r.cfg, r.cfg.seed);
            s2.push_back(ctx.quality(r.progressive[2].model, 2, r.cfg.eval.n_projections));
            s4.push_back(ctx.quality(r.progressive[2].model, 4, r.cfg.eval.n_projections));
        }
        return Outcome{median(s4) <= median(s2), "final K=2 model: 4 steps " + list(s4) + " vs 2 steps " + list(s2)};
    });

    criterion(9, "straightness monotonicity", 0.0, [&] {
        const std::size_t n_stages = runs[0].progressive.size();
        std::vector<double> teacher_s;
        std::vector<std::vector<double>> stage_s(n_stages);
        for (const auto& r : runs) {
            const auto& e = r.cfg.eval;
            const auto seed = derive_seed(r.cfg.seed, "straightness");
            teacher_s.push_back(straightness(r.teacher, 2, e.straightness_trajectories, e.straightness_steps, seed));
            for (std::size_t s = 0; s < n_stages; ++s)
                stage_s[s].push_back(
                    straightness(r.progressive[s].model, 2, e.straightness_trajectories, e.straightness_steps, seed));
        }
        bool ok = true;
        std::string d = "teacher " + fmt(median(teacher_s));
        for (std::size_t s = 0; s < n_stages; ++s) {
            ok &= median(stage_s[s]) < median(teacher_s);
            d += ", K=" + std::to_string(runs[0].progressive[s].windows) + " " + fmt(median(stage_s[s]));
        }
        return Outcome{ok, "median straightness " + d};
    });

    criterion(10, "sampler and schedule identities", 1.0, sampler_identities);
    criterion(11, "sliced W2 oracle", 0.0, metric_oracle);

    criterion(12, "manifest reproducibility", 0.0, [&] {
        const fs::path root = fs::path(workdir) / "reproducibility";
        fs::remove_all(root);
        RunConfig c;
        c.seed = 11;
        c.model.hidden_dims = {16, 16};
        c.teacher.iterations = 200;
        c.teacher.batch_size = 64;
        c.plan.iterations_per_stage = 20;
        c.plan.batch_size = 32;
        c.eval.n_samples = 512;
        c.eval.straightness_trajectories = 64;
        c.eval.energy_max_points = 256;
        c.sweep.alphas = {0.0, 0.1};
        c.sweep.windows = 2;
        c.velocity_gap.n_samples = 32;
        c.noise_ablation.scales = {0.5, 1.0};
        c.noise_ablation.n_samples = 512;
        c.noise_ablation.probe_samples = 256;
        c.sample.n = 128;
        c.sample.record_trajectories = true;
        c.gen_data_n = 256;
        run_command("train-teacher", c, root / "train-teacher", false);
        c.inputs.teacher = (root / "train-teacher" / "teacher.ckpt").string();
        run_command("reflow", c, root / "reflow", false);
        c.inputs.checkpoint = (root / "reflow" / "stage_K2.ckpt").string();
        c.inputs.models = {{"teacher", c.inputs.teacher}, {"progressive_K2", c.inputs.checkpoint}};
        for (const char* cmd : {"gen-data", "sample", "eval", "velocity-gap", "noise-ablation", "alpha-sweep", "compare"})
            run_command(cmd, c, root / cmd, false);

        std::size_t artifacts = 0;
        std::vector<std::string> bad;
        for (const auto& [name, fn] : commands()) {
            const fs::path dir = root / name;
            const fs::path again = root / (name + "_rerun");
            std::ifstream is(dir / "manifest.json");
            artifacts += nlohmann::json::parse(is).at("artifacts").size();
            for (const auto& m : reproduce_manifest(dir / "manifest.json", again)) bad.push_back(name + "/" + m);
        }
        std::string d = std::to_string(commands().size()) + " commands, " + std::to_string(artifacts) +
                        " artifacts re-run from manifests";
        if (!bad.empty()) {
            d += "; mismatched:";
            for (const auto& b : bad) d += " " + b;
        }
        return Outcome{bad.empty(), d};
    });

    std::cout << (failures ? "acceptance: " + std::to_string(failures) + " criterion check(s) failed"
                           : std::string("acceptance: all criteria passed"))
              << std::endl;
    return failures ? 1 : 0;
}
