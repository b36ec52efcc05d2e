#pragma once

#include <concepts>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "proreflow/numcore/tensor.hpp"
#include "proreflow/schedule.hpp"

namespace proreflow {

// Anything mapping (z [B x D], t [B]) to a velocity [B x D].
template <class F>
concept VelocityField = requires(const F& f, const Tensor2& z, std::span<const double> t) {
    { f(z, t) } -> std::convertible_to<Tensor2>;
};

// Every Euler step: times[0..n], states[0..n], velocities[0..n-1].
struct TrajectoryRecord {
    std::vector<double> times;
    std::vector<Tensor2> states;
    std::vector<Tensor2> velocities;
};

struct SampleResult {
    Tensor2 samples;
    std::optional<TrajectoryRecord> trajectory;
};

namespace detail {

// Explicit Euler over the given time grid. Step i uses dt = grid[i+1] - grid[i],
// so two callers that produce the same grid points get bitwise-equal results.
template <VelocityField F>
Tensor2 euler_integrate(const F& field, Tensor2 z, std::span<const double> grid, TrajectoryRecord* rec) {
    std::vector<double> tv(z.rows());
    for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
        const double t = grid[i], dt = grid[i + 1] - grid[i];
        std::fill(tv.begin(), tv.end(), t);
        Tensor2 v = field(z, std::span<const double>(tv));
        require_same_shape(v, z, "euler step");
        auto zf = z.flat();
        auto vf = v.flat();
        for (std::size_t j = 0; j < zf.size(); ++j) zf[j] += dt * vf[j];
        if (!z.all_finite())
            throw NonFiniteError("euler: non-finite state at step " + std::to_string(i) + " (t=" + std::to_string(t) +
                                 ")");
        if (rec) {
            rec->velocities.push_back(std::move(v));
            rec->times.push_back(grid[i + 1]);
            rec->states.push_back(z);
        }
    }
    return z;
}

// n uniform steps on [t_a, t_b]: t_a + (t_b - t_a) * i / n, with t_b exact at the end.
inline std::vector<double> uniform_grid(double t_a, double t_b, std::size_t n) {
    std::vector<double> g(n + 1);
    for (std::size_t i = 0; i < n; ++i) g[i] = t_a + (t_b - t_a) * double(i) / double(n);
    g[n] = t_b;
    return g;
}

// Steps first..last of the global grid j / n.
inline std::vector<double> global_grid(std::size_t first, std::size_t last, std::size_t n) {
    std::vector<double> g;
    g.reserve(last - first + 1);
    for (std::size_t j = first; j <= last; ++j) g.push_back(double(j) / double(n));
    return g;
}

} // namespace detail

// Integrates dz/dt = v(z, t) from t_a to t_b with n_steps uniform Euler steps.
template <VelocityField F>
Tensor2 teacher_solve(const F& field, const Tensor2& z_a, double t_a, double t_b, std::size_t n_steps) {
    if (!(t_a >= 0.0 && t_a < t_b && t_b <= 1.0))
        throw Error("teacher_solve: need 0 <= t_a < t_b <= 1, got [" + std::to_string(t_a) + ", " +
                    std::to_string(t_b) + "]");
    if (n_steps == 0) throw Error("teacher_solve: n_steps must be at least 1");
    return detail::euler_integrate(field, z_a, detail::uniform_grid(t_a, t_b, n_steps), nullptr);
}

// Euler sampling from t=0 to t=1 with uniform steps.
template <VelocityField F>
SampleResult euler_sample(const F& field, std::size_t n_steps, const Tensor2& z0, bool record = false) {
    if (n_steps == 0) throw Error("euler_sample: n_steps must be at least 1");
    SampleResult out;
    const auto grid = detail::global_grid(0, n_steps, n_steps);
    if (!record) {
        out.samples = detail::euler_integrate(field, z0, grid, nullptr);
        return out;
    }
    TrajectoryRecord rec;
    rec.times.push_back(0.0);
    rec.states.push_back(z0);
    out.samples = detail::euler_integrate(field, z0, grid, &rec);
    out.trajectory = std::move(rec);
    return out;
}

// Integrates window by window with steps_per_window Euler steps in each. A
// uniform schedule walks the same grid as euler_sample(K * steps_per_window).
template <VelocityField F>
Tensor2 piecewise_sample(const F& field, const WindowSchedule& schedule, std::size_t steps_per_window,
                         const Tensor2& z0) {
    if (steps_per_window == 0) throw Error("piecewise_sample: steps_per_window must be at least 1");
    const std::size_t K = schedule.windows();
    const bool uniform = schedule == WindowSchedule::uniform(K);
    Tensor2 z = z0;
    for (std::size_t k = 0; k < K; ++k) {
        const auto grid = uniform ? detail::global_grid(k * steps_per_window, (k + 1) * steps_per_window,
                                                        K * steps_per_window)
                                  : detail::uniform_grid(schedule.start(k), schedule.end(k), steps_per_window);
        z = detail::euler_integrate(field, std::move(z), grid, nullptr);
    }
    return z;
}

} // namespace proreflow
