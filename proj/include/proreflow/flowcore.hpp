#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "proreflow/numcore.hpp"
#include "proreflow/sampler.hpp"
#include "proreflow/schedule.hpp"
#include "proreflow/toydata.hpp"

namespace proreflow {

struct LossConfig {
    double alpha = 0.1;
    double cosine_epsilon = 1e-8;

    friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

inline void validate(const LossConfig& cfg) {
    if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw Error("LossConfig: alpha must lie in [0, 1]");
    if (!(cfg.cosine_epsilon > 0.0)) throw Error("LossConfig: cosine_epsilon must be positive");
}

// Window endpoint pairs for a batch. Row i moves from z_start[i] at t_start[i]
// to z_end[i] at t_end[i] inside schedule window window_index[i].
struct CouplingBatch {
    Tensor2 z_start;
    std::vector<double> t_start;
    Tensor2 z_end;
    std::vector<double> t_end;
    std::vector<std::size_t> window_index;

    std::size_t size() const noexcept { return t_start.size(); }
};

struct StagePlan {
    std::vector<std::size_t> window_counts{8, 4, 2};
    std::size_t iterations_per_stage = 10000;
    std::size_t batch_size = 256;
    std::size_t teacher_total_steps = 32;

    friend bool operator==(const StagePlan&, const StagePlan&) = default;
};

// Collects every problem with the plan rather than stopping at the first.
inline std::vector<std::string> plan_problems(const StagePlan& plan) {
    std::vector<std::string> out;
    if (plan.window_counts.empty()) out.emplace_back("plan.window_counts must not be empty");
    for (std::size_t i = 0; i < plan.window_counts.size(); ++i) {
        const std::size_t k = plan.window_counts[i];
        if (k == 0) {
            out.emplace_back("plan.window_counts[" + std::to_string(i) + "] must be positive");
            continue;
        }
        if (i > 0 && plan.window_counts[i - 1] != 2 * k)
            out.emplace_back("plan.window_counts must halve at each stage (" +
                             std::to_string(plan.window_counts[i - 1]) + " -> " + std::to_string(k) + ")");
        if (plan.teacher_total_steps % k != 0)
            out.emplace_back("plan.teacher_total_steps (" + std::to_string(plan.teacher_total_steps) +
                             ") is not divisible by window count " + std::to_string(k));
    }
    if (plan.iterations_per_stage == 0) out.emplace_back("plan.iterations_per_stage must be positive");
    if (plan.batch_size == 0) out.emplace_back("plan.batch_size must be positive");
    if (plan.teacher_total_steps == 0) out.emplace_back("plan.teacher_total_steps must be positive");
    return out;
}

inline void validate(const StagePlan& plan) {
    const auto problems = plan_problems(plan);
    if (problems.empty()) return;
    std::string msg = "invalid StagePlan:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw Error(msg);
}

// ---------------------------------------------------------------------------
// Interpolation paths and targets
// ---------------------------------------------------------------------------

// Row-wise t * z1 + (1 - t) * z0.
inline Tensor2 interpolate(const Tensor2& z0, const Tensor2& z1, std::span<const double> t) {
    require_same_shape(z0, z1, "interpolate");
    if (t.size() != z0.rows()) throw ShapeError("interpolate: time vector length does not match batch");
    Tensor2 out(z0.rows(), z0.cols());
    for (std::size_t r = 0; r < z0.rows(); ++r) {
        if (!(t[r] >= 0.0 && t[r] <= 1.0))
            throw Error("interpolate: t[" + std::to_string(r) + "] outside [0, 1]");
        for (std::size_t c = 0; c < z0.cols(); ++c) out(r, c) = t[r] * z1(r, c) + (1.0 - t[r]) * z0(r, c);
    }
    return out;
}

namespace detail {

inline void require_coupling_shapes(const CouplingBatch& b, const char* where) {
    require_same_shape(b.z_start, b.z_end, where);
    if (b.t_start.size() != b.z_start.rows() || b.t_end.size() != b.z_start.rows())
        throw ShapeError(std::string(where) + ": time vectors do not match batch size");
}

} // namespace detail

// Linear path inside each sample's window: alpha = (t - t_start) / (t_end - t_start).
inline Tensor2 window_interpolate(const CouplingBatch& batch, std::span<const double> t) {
    detail::require_coupling_shapes(batch, "window_interpolate");
    if (t.size() != batch.size()) throw ShapeError("window_interpolate: time vector length does not match batch");
    Tensor2 out(batch.z_start.rows(), batch.z_start.cols());
    for (std::size_t r = 0; r < batch.size(); ++r) {
        const double ts = batch.t_start[r], te = batch.t_end[r];
        if (!(t[r] >= ts && t[r] <= te))
            throw Error("window_interpolate: sample " + std::to_string(r) + " has t=" + std::to_string(t[r]) +
                        " outside its window [" + std::to_string(ts) + ", " + std::to_string(te) + "]");
        const double a = (t[r] - ts) / (te - ts);
        for (std::size_t c = 0; c < out.cols(); ++c)
            out(r, c) = a * batch.z_end(r, c) + (1.0 - a) * batch.z_start(r, c);
    }
    return out;
}

// Per-sample chord slope (z_end - z_start) / (t_end - t_start).
inline Tensor2 window_target_velocity(const CouplingBatch& batch) {
    detail::require_coupling_shapes(batch, "window_target_velocity");
    Tensor2 out(batch.z_start.rows(), batch.z_start.cols());
    for (std::size_t r = 0; r < batch.size(); ++r) {
        const double width = batch.t_end[r] - batch.t_start[r];
        if (!(width > 0.0))
            throw Error("window_target_velocity: sample " + std::to_string(r) + " has a zero-width window");
        for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) = (batch.z_end(r, c) - batch.z_start(r, c)) / width;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses. Each returns the value and its gradient with respect to pred.
// ---------------------------------------------------------------------------

// Mean over all elements of (pred - target)^2.
inline LossValue mse_loss(const Tensor2& pred, const Tensor2& target) {
    require_same_shape(pred, target, "mse_loss");
    LossValue out;
    out.grad = Tensor2(pred.rows(), pred.cols());
    const auto p = pred.flat(), v = target.flat();
    auto g = out.grad.flat();
    const double n = double(p.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = p[i] - v[i];
        sum += d * d;
        g[i] = 2.0 * d / n;
    }
    out.value = out.mse_term = sum / n;
    return out;
}

// 1 - mean over samples of cos(pred_i, target_i). Norms are floored at eps.
// Samples whose target norm is below eps carry no direction and contribute
// a cosine of exactly 1 with zero gradient.
inline LossValue cosine_loss(const Tensor2& pred, const Tensor2& target, double eps) {
    require_same_shape(pred, target, "cosine_loss");
    LossValue out;
    out.grad = Tensor2(pred.rows(), pred.cols());
    const std::size_t B = pred.rows();
    double cos_sum = 0.0;
    for (std::size_t r = 0; r < B; ++r) {
        const auto p = pred.row(r), v = target.row(r);
        double pp = 0.0, vv = 0.0, pv = 0.0;
        for (std::size_t c = 0; c < p.size(); ++c) {
            pp += p[c] * p[c];
            vv += v[c] * v[c];
            pv += p[c] * v[c];
        }
        const double np = std::sqrt(pp), nv = std::sqrt(vv);
        if (nv < eps) {
            cos_sum += 1.0;
            continue;
        }
        auto g = out.grad.row(r);
        const double scale = -1.0 / double(B);
        if (np >= eps) {
            // sqrt(pp * vv) keeps cos(p, p) == 1 bitwise.
            const double denom = std::sqrt(pp * vv);
            const double cosv = pv / denom;
            cos_sum += cosv;
            for (std::size_t c = 0; c < p.size(); ++c) g[c] = scale * (v[c] / denom - cosv * p[c] / pp);
        } else {
            const double denom = eps * nv;
            cos_sum += pv / denom;
            for (std::size_t c = 0; c < p.size(); ++c) g[c] = scale * v[c] / denom;
        }
    }
    out.value = out.cos_term = 1.0 - cos_sum / double(B);
    return out;
}

// (1 - alpha) * MSE + alpha * (1 - mean cosine).
inline LossValue aligned_loss(const Tensor2& pred, const Tensor2& target, const LossConfig& cfg) {
    LossValue mse = mse_loss(pred, target);
    const LossValue cos = cosine_loss(pred, target, cfg.cosine_epsilon);
    const double wm = 1.0 - cfg.alpha, wc = cfg.alpha;
    auto g = mse.grad.flat();
    const auto gc = cos.grad.flat();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = wm * g[i] + wc * gc[i];
    mse.value = wm * mse.mse_term + wc * cos.cos_term;
    mse.cos_term = cos.cos_term;
    return mse;
}

// ---------------------------------------------------------------------------
// Coupling construction
// ---------------------------------------------------------------------------

// Starts each sample at the noised data point on the near-noise end of a
// randomly chosen window and integrates the teacher to the far end.
template <VelocityField F>
CouplingBatch build_window_targets(const F& teacher, const WindowSchedule& schedule, const Tensor2& data,
                                   const Tensor2& noise, std::size_t steps_per_window, std::uint64_t seed) {
    require_same_shape(data, noise, "build_window_targets");
    if (steps_per_window == 0) throw Error("build_window_targets: steps_per_window must be at least 1");
    const std::size_t B = data.rows();
    CouplingBatch batch;
    batch.t_start.resize(B);
    batch.t_end.resize(B);
    batch.window_index.resize(B);
    Rng rng(seed);
    std::vector<std::vector<std::size_t>> members(schedule.windows());
    for (std::size_t i = 0; i < B; ++i) {
        const std::size_t k = schedule.locate(rng.uniform());
        batch.window_index[i] = k;
        batch.t_start[i] = schedule.start(k);
        batch.t_end[i] = schedule.end(k);
        members[k].push_back(i);
    }
    batch.z_start = interpolate(noise, data, batch.t_start);
    batch.z_end = Tensor2(B, data.cols());
    for (std::size_t k = 0; k < schedule.windows(); ++k) {
        if (members[k].empty()) continue;
        const Tensor2 z1 = gather_rows(batch.z_start, members[k]);
        Tensor2 z2;
        try {
            z2 = teacher_solve(teacher, z1, schedule.start(k), schedule.end(k), steps_per_window);
        } catch (const NonFiniteError& e) {
            throw NonFiniteError("build_window_targets: teacher diverged in window " + std::to_string(k) + " [" +
                                 std::to_string(schedule.start(k)) + ", " + std::to_string(schedule.end(k)) +
                                 "]: " + e.what());
        }
        scatter_rows(z2, members[k], batch.z_end);
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainingDiverged : Error {
    using Error::Error;
};

struct LossRecord {
    std::size_t iter = 0;
    double loss = 0.0;
    double mse_term = 0.0;
    double cos_term = 0.0;

    friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

// Where training data comes from and how parameters are updated.
struct TrainingSetup {
    DatasetSpec dataset;
    AdamConfig optimizer;
};

inline constexpr double kDivergenceLoss = 1e6;

// One regression batch: the student is asked for `target` at (z_t, t).
struct StageBatch {
    CouplingBatch coupling;
    std::vector<double> t;
    Tensor2 z_t;
    Tensor2 target;
};

namespace detail {

inline DatasetSpec batch_dataset(const DatasetSpec& base, std::uint64_t seed, std::size_t iter) {
    DatasetSpec spec = base;
    spec.seed = derive_seed(derive_seed(base.seed, "stream", seed), "batch", iter);
    return spec;
}

} // namespace detail

// Batch `iter` of a reflow stage. Depends only on the teacher, the schedule,
// the data stream, and the seed; never on the loss or the student.
template <VelocityField F>
StageBatch stage_batch(const F& teacher, const WindowSchedule& schedule, std::size_t steps_per_window,
                       std::size_t batch_size, const DatasetSpec& dataset, std::uint64_t seed, std::size_t iter) {
    const Tensor2 data = sample_data(detail::batch_dataset(dataset, seed, iter), batch_size);
    const Tensor2 noise = sample_noise(batch_size, data.cols(), derive_seed(seed, "noise", iter));
    StageBatch b;
    b.coupling = build_window_targets(teacher, schedule, data, noise, steps_per_window,
                                      derive_seed(seed, "window", iter));
    Rng rng(derive_seed(seed, "time", iter));
    b.t.resize(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) {
        const double ts = b.coupling.t_start[i], te = b.coupling.t_end[i];
        b.t[i] = std::min(ts + (te - ts) * rng.uniform(), te);
    }
    b.z_t = window_interpolate(b.coupling, b.t);
    b.target = window_target_velocity(b.coupling);
    return b;
}

struct StageResult {
    VelocityModel model;
    std::vector<LossRecord> trace;
};

namespace detail {

inline void check_divergence(const LossValue& loss, std::size_t iter, const std::string& stage) {
    if (!std::isfinite(loss.value) || loss.value > kDivergenceLoss)
        throw TrainingDiverged(stage + ": diverged at iteration " + std::to_string(iter) + " (loss " +
                               std::to_string(loss.value) + ", mse " + std::to_string(loss.mse_term) + ", cos " +
                               std::to_string(loss.cos_term) + ")");
}

inline LossRecord fit_step(VelocityModel& model, OptimizerState& opt, const Tensor2& z_t,
                           std::span<const double> t, const Tensor2& target, const LossConfig& cfg,
                           std::size_t iter, const std::string& stage) {
    GradientResult r;
    try {
        r = loss_gradients(model, z_t, t, [&](const Tensor2& pred) { return aligned_loss(pred, target, cfg); },
                           long(iter));
    } catch (const NonFiniteError& e) {
        throw TrainingDiverged(stage + ": " + e.what());
    }
    check_divergence(r.loss, iter, stage);
    optimizer_step(opt, model, r.grads);
    return {iter, r.loss.value, r.loss.mse_term, r.loss.cos_term};
}

} // namespace detail

// Regresses the student onto window chord velocities generated by `teacher`
// for plan.iterations_per_stage Adam steps.
template <VelocityField F>
StageResult train_stage(VelocityModel student, const F& teacher, const WindowSchedule& schedule,
                        const StagePlan& plan, const LossConfig& cfg, const TrainingSetup& setup,
                        std::uint64_t seed) {
    validate(cfg);
    const std::size_t K = schedule.windows();
    if (plan.teacher_total_steps % K != 0)
        throw Error("train_stage: teacher_total_steps " + std::to_string(plan.teacher_total_steps) +
                    " not divisible by " + std::to_string(K) + " windows");
    const std::size_t steps_per_window = plan.teacher_total_steps / K;
    const std::string stage = "stage K=" + std::to_string(K);
    OptimizerState opt = OptimizerState::fresh(student, setup.optimizer);
    StageResult out;
    out.trace.reserve(plan.iterations_per_stage);
    for (std::size_t it = 0; it < plan.iterations_per_stage; ++it) {
        const StageBatch b =
            stage_batch(teacher, schedule, steps_per_window, plan.batch_size, setup.dataset, seed, it);
        out.trace.push_back(detail::fit_step(student, opt, b.z_t, b.t, b.target, cfg, it, stage));
    }
    out.model = std::move(student);
    return out;
}

struct StageCheckpoint {
    std::size_t windows = 0;
    VelocityModel model;
    std::vector<LossRecord> trace;
};

inline std::uint64_t stage_seed(std::uint64_t seed, std::size_t stage_index) {
    return derive_seed(seed, "stage", stage_index);
}

// Progressive reflow: one stage per window count, each initialised from and
// taking couplings from the previous stage's student.
inline std::vector<StageCheckpoint> progressive_train(
    const VelocityModel& teacher, const StagePlan& plan, const LossConfig& cfg, const TrainingSetup& setup,
    std::uint64_t seed, const std::function<void(const StageCheckpoint&)>& on_stage = {}) {
    validate(plan);
    validate(cfg);
    std::vector<StageCheckpoint> out;
    VelocityModel student = teacher;
    VelocityModel coupling_teacher = teacher;
    for (std::size_t s = 0; s < plan.window_counts.size(); ++s) {
        const std::size_t K = plan.window_counts[s];
        StageResult r = train_stage(std::move(student), coupling_teacher, WindowSchedule::uniform(K), plan, cfg,
                                    setup, stage_seed(seed, s));
        student = r.model;
        coupling_teacher = r.model;
        out.push_back({K, std::move(r.model), std::move(r.trace)});
        if (on_stage) on_stage(out.back());
    }
    return out;
}

// Plain flow matching with independent (noise, data) pairs: regress
// v(t x + (1 - t) eps, t) onto x - eps. Used to build the toy teacher.
inline StageResult train_flow_matching(VelocityModel model, std::size_t iterations, std::size_t batch_size,
                                       const TrainingSetup& setup, std::uint64_t seed) {
    if (iterations == 0 || batch_size == 0) throw Error("train_flow_matching: iterations and batch size must be positive");
    const LossConfig mse_only{0.0, 1e-8};
    OptimizerState opt = OptimizerState::fresh(model, setup.optimizer);
    StageResult out;
    out.trace.reserve(iterations);
    for (std::size_t it = 0; it < iterations; ++it) {
        const Tensor2 x = sample_data(detail::batch_dataset(setup.dataset, seed, it), batch_size);
        const Tensor2 eps = sample_noise(batch_size, x.cols(), derive_seed(seed, "noise", it));
        Rng rng(derive_seed(seed, "time", it));
        std::vector<double> t(batch_size);
        for (double& ti : t) ti = rng.uniform();
        const Tensor2 z_t = interpolate(eps, x, t);
        Tensor2 target(batch_size, x.cols());
        for (std::size_t i = 0; i < target.size(); ++i) target.flat()[i] = x.flat()[i] - eps.flat()[i];
        out.trace.push_back(detail::fit_step(model, opt, z_t, t, target, mse_only, it, "teacher"));
    }
    out.model = std::move(model);
    return out;
}

} // namespace proreflow
