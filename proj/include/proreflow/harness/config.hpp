#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "proreflow/flowcore.hpp"
#include "proreflow/metrics.hpp"

namespace proreflow::harness {

using nlohmann::json;

struct ConfigError : Error {
    explicit ConfigError(std::vector<std::string> problems)
        : Error(format(problems)), problems(std::move(problems)) {}

    std::vector<std::string> problems;

private:
    static std::string format(const std::vector<std::string>& problems) {
        std::string s = "invalid configuration (" + std::to_string(problems.size()) + " problem" +
                        (problems.size() == 1 ? "" : "s") + "):";
        for (const auto& p : problems) s += "\n  - " + p;
        return s;
    }
};

struct TeacherSettings {
    std::size_t iterations = 20000;
    std::size_t batch_size = 256;
};

struct EvalSettings {
    std::size_t n_samples = 8192;
    std::size_t n_projections = 128;
    std::vector<std::size_t> steps{1, 2, 4, 8};
    std::size_t straightness_trajectories = 1024;
    std::size_t straightness_steps = 32;
    std::size_t energy_max_points = 2048;
    std::vector<std::uint64_t> seeds; // empty: the run seed only
};

struct SweepSettings {
    std::vector<double> alphas{0.0, 0.05, 0.1, 0.2, 0.5};
    std::size_t windows = 4;
};

struct VelocityGapSettings {
    std::size_t T = 32;
    std::size_t n_samples = 256;
};

struct AblationSettings {
    std::vector<double> scales{0.25, 0.5, 1.0, 2.0};
    std::size_t steps = 10;
    std::size_t n_samples = 8192;
    std::size_t probe_samples = 4096;
    double match_tolerance = 0.01;
};

struct SampleSettings {
    std::size_t n = 8192;
    std::size_t steps = 4;
    std::size_t windows = 0; // 0: uniform Euler grid; otherwise steps must be a multiple
    bool record_trajectories = false;
};

struct ModelInput {
    std::string label;
    std::string path;

    friend bool operator==(const ModelInput&, const ModelInput&) = default;
};

struct Inputs {
    std::string teacher;
    std::string checkpoint;
    std::vector<ModelInput> models;
};

struct RunConfig {
    std::uint64_t seed = 0;
    DatasetSpec dataset;     // dataset.seed is derived from `seed`
    ModelArch model;
    AdamConfig optimizer;
    TeacherSettings teacher;
    StagePlan plan;
    LossConfig loss;
    EvalSettings eval;
    SweepSettings sweep;
    VelocityGapSettings velocity_gap;
    AblationSettings noise_ablation;
    SampleSettings sample;
    std::size_t gen_data_n = 8192;
    Inputs inputs;

    std::vector<std::uint64_t> eval_seeds() const { return eval.seeds.empty() ? std::vector{seed} : eval.seeds; }

    TrainingSetup training_setup() const {
        TrainingSetup s;
        s.dataset = dataset;
        s.dataset.seed = derive_seed(seed, "data");
        s.optimizer = optimizer;
        return s;
    }
};

// ---------------------------------------------------------------------------
// JSON mapping
// ---------------------------------------------------------------------------

inline json to_json(const RunConfig& c) {
    json models = json::array();
    for (const auto& m : c.inputs.models) models.push_back({{"label", m.label}, {"path", m.path}});
    return {
        {"seed", c.seed},
        {"dataset", {{"name", std::string(to_string(c.dataset.name))}, {"scale", c.dataset.scale}}},
        {"model", {{"hidden_dims", c.model.hidden_dims}, {"time_features", c.model.time_features}}},
        {"optimizer",
         {{"lr", c.optimizer.lr}, {"beta1", c.optimizer.beta1}, {"beta2", c.optimizer.beta2}, {"eps", c.optimizer.eps}}},
        {"teacher", {{"iterations", c.teacher.iterations}, {"batch_size", c.teacher.batch_size}}},
        {"plan",
         {{"window_counts", c.plan.window_counts},
          {"iterations_per_stage", c.plan.iterations_per_stage},
          {"batch_size", c.plan.batch_size},
          {"teacher_total_steps", c.plan.teacher_total_steps}}},
        {"loss", {{"alpha", c.loss.alpha}, {"cosine_epsilon", c.loss.cosine_epsilon}}},
        {"eval",
         {{"n_samples", c.eval.n_samples},
          {"n_projections", c.eval.n_projections},
          {"steps", c.eval.steps},
          {"straightness_trajectories", c.eval.straightness_trajectories},
          {"straightness_steps", c.eval.straightness_steps},
          {"energy_max_points", c.eval.energy_max_points},
          {"seeds", c.eval.seeds}}},
        {"sweep", {{"alphas", c.sweep.alphas}, {"windows", c.sweep.windows}}},
        {"velocity_gap", {{"T", c.velocity_gap.T}, {"n_samples", c.velocity_gap.n_samples}}},
        {"noise_ablation",
         {{"scales", c.noise_ablation.scales},
          {"steps", c.noise_ablation.steps},
          {"n_samples", c.noise_ablation.n_samples},
          {"probe_samples", c.noise_ablation.probe_samples},
          {"match_tolerance", c.noise_ablation.match_tolerance}}},
        {"sample",
         {{"n", c.sample.n},
          {"steps", c.sample.steps},
          {"windows", c.sample.windows},
          {"record_trajectories", c.sample.record_trajectories}}},
        {"gen_data", {{"n", c.gen_data_n}}},
        {"inputs", {{"teacher", c.inputs.teacher}, {"checkpoint", c.inputs.checkpoint}, {"models", models}}},
    };
}

namespace detail {

// Reads fields from a JSON object, recording every problem instead of throwing.
class Reader {
public:
    Reader(const json& j, std::string path, std::vector<std::string>& problems)
        : j_(j), path_(std::move(path)), problems_(problems) {
        if (!j_.is_object()) problems_.push_back(where() + " must be an object");
    }

    ~Reader() {
        if (!j_.is_object()) return;
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) problems_.push_back("unknown key " + join(k));
    }

    Reader child(const std::string& key) {
        seen_.insert(key);
        static const json empty = json::object();
        if (!j_.is_object() || !j_.contains(key)) return Reader(empty, join(key), problems_);
        return Reader(j_.at(key), join(key), problems_);
    }

    template <class T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        if (!j_.is_object() || !j_.contains(key)) return;
        const json& v = j_.at(key);
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw std::runtime_error("expected a boolean");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw std::runtime_error("expected a string");
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!v.is_number()) throw std::runtime_error("expected a number");
            } else if constexpr (std::is_integral_v<T>) {
                if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
                    throw std::runtime_error("expected a non-negative integer");
            }
            out = v.get<T>();
        } catch (const std::exception& e) {
            problems_.push_back(join(key) + ": " + e.what());
        }
    }

    std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    std::string where() const { return path_.empty() ? "config" : path_; }
    const json& raw() const { return j_; }
    void mark(const std::string& key) { seen_.insert(key); }

private:
    const json& j_;
    std::string path_;
    std::vector<std::string>& problems_;
    std::set<std::string> seen_;
};

} // namespace detail

// Every problem in the configuration, in one pass.
inline std::vector<std::string> config_problems(const RunConfig& c) {
    std::vector<std::string> p;
    if (!(c.dataset.scale > 0.0)) p.emplace_back("dataset.scale must be positive");
    if (c.model.time_features % 2 != 0) p.emplace_back("model.time_features must be even");
    for (std::size_t i = 0; i < c.model.hidden_dims.size(); ++i)
        if (c.model.hidden_dims[i] == 0) p.emplace_back("model.hidden_dims[" + std::to_string(i) + "] must be positive");
    if (!(c.optimizer.lr > 0.0)) p.emplace_back("optimizer.lr must be positive");
    if (!(c.optimizer.beta1 >= 0.0 && c.optimizer.beta1 < 1.0)) p.emplace_back("optimizer.beta1 must lie in [0, 1)");
    if (!(c.optimizer.beta2 >= 0.0 && c.optimizer.beta2 < 1.0)) p.emplace_back("optimizer.beta2 must lie in [0, 1)");
    if (!(c.optimizer.eps > 0.0)) p.emplace_back("optimizer.eps must be positive");
    if (c.teacher.iterations == 0) p.emplace_back("teacher.iterations must be positive");
    if (c.teacher.batch_size == 0) p.emplace_back("teacher.batch_size must be positive");
    for (auto& s : plan_problems(c.plan)) p.push_back(std::move(s));
    if (!(c.loss.alpha >= 0.0 && c.loss.alpha <= 1.0)) p.emplace_back("loss.alpha must lie in [0, 1]");
    if (!(c.loss.cosine_epsilon > 0.0)) p.emplace_back("loss.cosine_epsilon must be positive");
    if (c.eval.n_samples == 0) p.emplace_back("eval.n_samples must be positive");
    if (c.eval.n_projections == 0) p.emplace_back("eval.n_projections must be positive");
    for (auto s : c.eval.steps)
        if (s == 0) p.emplace_back("eval.steps entries must be positive");
    if (c.eval.straightness_steps < 2) p.emplace_back("eval.straightness_steps must be at least 2");
    if (c.eval.straightness_trajectories == 0) p.emplace_back("eval.straightness_trajectories must be positive");
    if (c.eval.energy_max_points == 0) p.emplace_back("eval.energy_max_points must be positive");
    for (double a : c.sweep.alphas)
        if (!(a >= 0.0 && a <= 1.0)) p.emplace_back("sweep.alphas entries must lie in [0, 1]");
    if (c.sweep.windows == 0) p.emplace_back("sweep.windows must be positive");
    else if (c.plan.teacher_total_steps % c.sweep.windows != 0)
        p.emplace_back("sweep.windows must divide plan.teacher_total_steps");
    if (c.velocity_gap.T < 2) p.emplace_back("velocity_gap.T must be at least 2");
    if (c.velocity_gap.n_samples == 0) p.emplace_back("velocity_gap.n_samples must be positive");
    for (double s : c.noise_ablation.scales)
        if (!(s >= 0.0)) p.emplace_back("noise_ablation.scales entries must be non-negative");
    if (c.noise_ablation.steps == 0) p.emplace_back("noise_ablation.steps must be positive");
    if (c.noise_ablation.n_samples == 0) p.emplace_back("noise_ablation.n_samples must be positive");
    if (c.noise_ablation.probe_samples == 0) p.emplace_back("noise_ablation.probe_samples must be positive");
    if (!(c.noise_ablation.match_tolerance > 0.0)) p.emplace_back("noise_ablation.match_tolerance must be positive");
    if (c.sample.n == 0) p.emplace_back("sample.n must be positive");
    if (c.sample.steps == 0) p.emplace_back("sample.steps must be positive");
    if (c.sample.windows != 0 && c.sample.steps % c.sample.windows != 0)
        p.emplace_back("sample.steps must be a multiple of sample.windows");
    if (c.gen_data_n == 0) p.emplace_back("gen_data.n must be positive");
    std::set<std::string> labels;
    for (const auto& m : c.inputs.models) {
        if (m.label.empty()) p.emplace_back("inputs.models entries need a label");
        if (!labels.insert(m.label).second) p.emplace_back("inputs.models label '" + m.label + "' is repeated");
    }
    return p;
}

inline void validate(const RunConfig& c) {
    auto p = config_problems(c);
    if (!p.empty()) throw ConfigError(std::move(p));
}

// Parses a configuration. A manifest is accepted too; its config snapshot is used.
inline RunConfig from_json(const json& input) {
    const json& j = (input.is_object() && input.contains("config") && input.contains("artifacts")) ? input.at("config")
                                                                                                   : input;
    RunConfig c;
    std::vector<std::string> problems;
    {
        detail::Reader r(j, "", problems);
        r.get("seed", c.seed);
        {
            auto d = r.child("dataset");
            std::string name(to_string(c.dataset.name));
            d.get("name", name);
            if (auto n = parse_dataset_name(name)) c.dataset.name = *n;
            else problems.push_back("dataset.name: unknown dataset '" + name + "'");
            d.get("scale", c.dataset.scale);
        }
        {
            auto m = r.child("model");
            m.get("hidden_dims", c.model.hidden_dims);
            m.get("time_features", c.model.time_features);
        }
        {
            auto o = r.child("optimizer");
            o.get("lr", c.optimizer.lr);
            o.get("beta1", c.optimizer.beta1);
            o.get("beta2", c.optimizer.beta2);
            o.get("eps", c.optimizer.eps);
        }
        {
            auto t = r.child("teacher");
            t.get("iterations", c.teacher.iterations);
            t.get("batch_size", c.teacher.batch_size);
        }
        {
            auto p = r.child("plan");
            p.get("window_counts", c.plan.window_counts);
            p.get("iterations_per_stage", c.plan.iterations_per_stage);
            p.get("batch_size", c.plan.batch_size);
            p.get("teacher_total_steps", c.plan.teacher_total_steps);
        }
        {
            auto l = r.child("loss");
            l.get("alpha", c.loss.alpha);
            l.get("cosine_epsilon", c.loss.cosine_epsilon);
        }
        {
            auto e = r.child("eval");
            e.get("n_samples", c.eval.n_samples);
            e.get("n_projections", c.eval.n_projections);
            e.get("steps", c.eval.steps);
            e.get("straightness_trajectories", c.eval.straightness_trajectories);
            e.get("straightness_steps", c.eval.straightness_steps);
            e.get("energy_max_points", c.eval.energy_max_points);
            e.get("seeds", c.eval.seeds);
        }
        {
            auto s = r.child("sweep");
            s.get("alphas", c.sweep.alphas);
            s.get("windows", c.sweep.windows);
        }
        {
            auto v = r.child("velocity_gap");
            v.get("T", c.velocity_gap.T);
            v.get("n_samples", c.velocity_gap.n_samples);
        }
        {
            auto a = r.child("noise_ablation");
            a.get("scales", c.noise_ablation.scales);
            a.get("steps", c.noise_ablation.steps);
            a.get("n_samples", c.noise_ablation.n_samples);
            a.get("probe_samples", c.noise_ablation.probe_samples);
            a.get("match_tolerance", c.noise_ablation.match_tolerance);
        }
        {
            auto s = r.child("sample");
            s.get("n", c.sample.n);
            s.get("steps", c.sample.steps);
            s.get("windows", c.sample.windows);
            s.get("record_trajectories", c.sample.record_trajectories);
        }
        {
            auto g = r.child("gen_data");
            g.get("n", c.gen_data_n);
        }
        {
            auto in = r.child("inputs");
            in.get("teacher", c.inputs.teacher);
            in.get("checkpoint", c.inputs.checkpoint);
            in.mark("models");
            if (in.raw().is_object() && in.raw().contains("models")) {
                const json& ms = in.raw().at("models");
                if (!ms.is_array()) problems.emplace_back("inputs.models must be an array");
                else
                    for (std::size_t i = 0; i < ms.size(); ++i) {
                        detail::Reader mr(ms[i], "inputs.models[" + std::to_string(i) + "]", problems);
                        ModelInput mi;
                        mr.get("label", mi.label);
                        mr.get("path", mi.path);
                        c.inputs.models.push_back(std::move(mi));
                    }
            }
        }
    }
    for (auto& s : config_problems(c)) problems.push_back(std::move(s));
    if (!problems.empty()) throw ConfigError(std::move(problems));
    return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw ConfigError({path.string() + ": " + e.what()});
    }
    return from_json(j);
}

} // namespace proreflow::harness
