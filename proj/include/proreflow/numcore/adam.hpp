#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>

#include "proreflow/numcore/mlp.hpp"

namespace proreflow {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

// Adam moment accumulators. Shapes mirror the model parameters.
struct OptimizerState {
    AdamConfig config;
    std::vector<Layer> first_moment;
    std::vector<Layer> second_moment;
    std::uint64_t step = 0;

    static OptimizerState fresh(const VelocityModel& model, AdamConfig config = {}) {
        VelocityModel zero = VelocityModel::zeros(model.arch());
        return {config, zero.layers, std::move(zero.layers), 0};
    }

    friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

namespace detail {

inline void require_block_shapes(const std::vector<Layer>& a, const std::vector<Layer>& b, const char* what) {
    bool ok = a.size() == b.size();
    for (std::size_t i = 0; ok && i < a.size(); ++i) {
        ok = a[i].weight.rows() == b[i].weight.rows() && a[i].weight.cols() == b[i].weight.cols() &&
             a[i].bias.size() == b[i].bias.size();
    }
    if (!ok) throw ShapeError(std::string("optimizer_step: ") + what + " shapes do not match model parameters");
}

inline void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                        std::span<double> v, const AdamConfig& cfg, double bc1, double bc2) {
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        param[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
}

} // namespace detail

// One bias-corrected Adam update of the model parameters, in place.
inline void optimizer_step(OptimizerState& state, VelocityModel& model, const Gradients& grads) {
    detail::require_block_shapes(model.layers, grads, "gradient");
    detail::require_block_shapes(model.layers, state.first_moment, "first moment");
    detail::require_block_shapes(model.layers, state.second_moment, "second moment");
    for (const auto& g : grads) {
        if (!g.weight.all_finite()) throw NonFiniteError("optimizer_step: non-finite gradient");
        for (double b : g.bias)
            if (!std::isfinite(b)) throw NonFiniteError("optimizer_step: non-finite gradient");
    }

    ++state.step;
    const auto& cfg = state.config;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
    for (std::size_t k = 0; k < model.layers.size(); ++k) {
        auto& p = model.layers[k];
        auto& m = state.first_moment[k];
        auto& v = state.second_moment[k];
        detail::adam_update(p.weight.flat(), grads[k].weight.flat(), m.weight.flat(), v.weight.flat(), cfg, bc1, bc2);
        detail::adam_update(p.bias, grads[k].bias, m.bias, v.bias, cfg, bc1, bc2);
    }
    if (!model.all_finite()) throw NonFiniteError("optimizer_step: parameters became non-finite");
}

} // namespace proreflow
