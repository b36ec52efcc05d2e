#pragma once

#include <cmath>
#include <cstring>
#if defined(__AVX2__) || defined(__AVX512F__)
#include <immintrin.h>
#endif
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "proreflow/numcore/random.hpp"
#include "proreflow/numcore/tensor.hpp"

namespace proreflow {

struct ModelArch {
    std::size_t data_dim = 2;
    std::size_t time_features = 8;
    std::vector<std::size_t> hidden_dims{64, 64, 64};

    std::size_t input_dim() const { return data_dim + time_features; }
    std::size_t output_dim() const { return data_dim; }

    friend bool operator==(const ModelArch&, const ModelArch&) = default;
};

// Affine layer y = x W + b with W stored [in x out].
struct Layer {
    Tensor2 weight;
    std::vector<double> bias;

    friend bool operator==(const Layer&, const Layer&) = default;
};

using Gradients = std::vector<Layer>;

// Elementwise on whole activations so Eigen can vectorise exp.
inline RowMajorMatrix silu(const RowMajorMatrix& x) { return x.array() / (1.0 + (-x.array()).exp()); }

inline RowMajorMatrix silu_grad(const RowMajorMatrix& x) {
    const Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> s = 1.0 / (1.0 + (-x.array()).exp());
    return (s * (1.0 + x.array() * (1.0 - s))).matrix();
}

// Sinusoidal features of t: sin/cos pairs at frequencies pi * 2^j.
inline void time_embedding(double t, std::size_t n_features, std::span<double> out) {
    for (std::size_t j = 0; j < n_features / 2; ++j) {
        const double w = std::numbers::pi * double(std::uint64_t{1} << j);
        out[2 * j] = std::sin(w * t);
        out[2 * j + 1] = std::cos(w * t);
    }
}

// Feed-forward velocity field v(z, t): SiLU hidden layers, linear head.
class VelocityModel {
public:
    VelocityModel() = default;

    // All parameters zero.
    static VelocityModel zeros(ModelArch arch) {
        validate_arch(arch);
        VelocityModel m;
        m.arch_ = std::move(arch);
        std::size_t in = m.arch_.input_dim();
        auto add = [&](std::size_t out) {
            m.layers.push_back(Layer{Tensor2(in, out), std::vector<double>(out, 0.0)});
            in = out;
        };
        for (std::size_t h : m.arch_.hidden_dims) add(h);
        add(m.arch_.output_dim());
        return m;
    }

    // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    static VelocityModel random(ModelArch arch, std::uint64_t seed) {
        VelocityModel m = zeros(std::move(arch));
        Rng rng(seed);
        for (auto& layer : m.layers) {
            const double bound = 1.0 / std::sqrt(double(layer.weight.rows()));
            for (double& w : layer.weight.flat()) w = rng.uniform(-bound, bound);
            for (double& b : layer.bias) b = rng.uniform(-bound, bound);
        }
        return m;
    }

    const ModelArch& arch() const noexcept { return arch_; }
    std::size_t data_dim() const noexcept { return arch_.data_dim; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weight.size() + l.bias.size();
        return n;
    }

    bool all_finite() const {
        for (const auto& l : layers) {
            if (!l.weight.all_finite()) return false;
            for (double b : l.bias)
                if (!std::isfinite(b)) return false;
        }
        return true;
    }

    // Checks that layer shapes chain from input_dim to output_dim.
    void validate() const {
        validate_arch(arch_);
        if (layers.size() != arch_.hidden_dims.size() + 1)
            throw ShapeError("VelocityModel: layer count does not match architecture");
        std::size_t in = arch_.input_dim();
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::size_t out = i < arch_.hidden_dims.size() ? arch_.hidden_dims[i] : arch_.output_dim();
            const auto& l = layers[i];
            if (l.weight.rows() != in || l.weight.cols() != out || l.bias.size() != out)
                throw ShapeError("VelocityModel: layer " + std::to_string(i) + " has shape " + l.weight.shape() +
                                 ", expected " + detail::shape_str(in, out));
            in = out;
        }
    }

    Tensor2 operator()(const Tensor2& z, std::span<const double> t) const;

    std::vector<Layer> layers;

    friend bool operator==(const VelocityModel&, const VelocityModel&) = default;

private:
    static void validate_arch(const ModelArch& arch) {
        if (arch.data_dim == 0) throw ShapeError("ModelArch: data_dim must be positive");
        if (arch.time_features % 2 != 0) throw ShapeError("ModelArch: time_features must be even");
        if (arch.time_features / 2 > 52) throw ShapeError("ModelArch: too many time features");
        for (std::size_t h : arch.hidden_dims)
            if (h == 0) throw ShapeError("ModelArch: hidden layer width must be positive");
    }

    ModelArch arch_;
};

// Intermediate values kept by a forward pass for the backward pass.
struct ForwardCache {
    std::vector<RowMajorMatrix> inputs; // input to each layer
    std::vector<RowMajorMatrix> pre;    // pre-activation of each hidden layer
};

namespace detail {

inline RowMajorMatrix build_input(const VelocityModel& model, const Tensor2& z, std::span<const double> t) {
    const auto& arch = model.arch();
    if (z.cols() != arch.data_dim)
        throw ShapeError("forward: z has shape " + z.shape() + " but model data dim is " +
                         std::to_string(arch.data_dim));
    if (t.size() != z.rows())
        throw ShapeError("forward: " + std::to_string(t.size()) + " time values for " + std::to_string(z.rows()) +
                         " samples");
    RowMajorMatrix x(Eigen::Index(z.rows()), Eigen::Index(arch.input_dim()));
    for (std::size_t r = 0; r < z.rows(); ++r) {
        double* dst = x.data() + r * arch.input_dim();
        auto zr = z.row(r);
        std::copy(zr.begin(), zr.end(), dst);
        time_embedding(t[r], arch.time_features, {dst + arch.data_dim, arch.time_features});
    }
    return x;
}

// Each output is fma(x[k], w[k][j], acc) over k in order, starting from the
// bias, whichever path computes it. Eigen's product picks kernels (GEMV for
// one row, blocked FMA for many) by shape, which would make a sample's
// velocity depend on the batch it sits in.
#if defined(__AVX512F__)
struct Lanes {
    static constexpr std::size_t width = 8;
    using V = __m512d;
    static V load(const double* p) { return _mm512_loadu_pd(p); }
    static void store(double* p, V v) { _mm512_storeu_pd(p, v); }
    static V splat(double a) { return _mm512_set1_pd(a); }
    static V fma(V a, V b, V c) { return _mm512_fmadd_pd(a, b, c); }
};
#elif defined(__AVX2__) && defined(__FMA__)
struct Lanes {
    static constexpr std::size_t width = 4;
    using V = __m256d;
    static V load(const double* p) { return _mm256_loadu_pd(p); }
    static void store(double* p, V v) { _mm256_storeu_pd(p, v); }
    static V splat(double a) { return _mm256_set1_pd(a); }
    static V fma(V a, V b, V c) { return _mm256_fmadd_pd(a, b, c); }
};
#else
struct Lanes {
    static constexpr std::size_t width = 1;
    using V = double;
    static V load(const double* p) { return *p; }
    static void store(double* p, V v) { *p = v; }
    static V splat(double a) { return a; }
    static V fma(V a, V b, V c) { return std::fma(a, b, c); }
};
#endif

// R rows by two vectors of output columns starting at j0.
template <std::size_t R>
inline void affine_block(const double* x, std::size_t n_in, const double* w, std::size_t n_out, const double* b,
                         double* out, std::size_t j0) {
    constexpr std::size_t W = Lanes::width;
    typename Lanes::V acc[R][2];
    for (std::size_t r = 0; r < R; ++r) acc[r][0] = Lanes::load(b + j0), acc[r][1] = Lanes::load(b + j0 + W);
    for (std::size_t k = 0; k < n_in; ++k) {
        const auto w0 = Lanes::load(w + k * n_out + j0), w1 = Lanes::load(w + k * n_out + j0 + W);
        for (std::size_t r = 0; r < R; ++r) {
            const auto a = Lanes::splat(x[r * n_in + k]);
            acc[r][0] = Lanes::fma(a, w0, acc[r][0]);
            acc[r][1] = Lanes::fma(a, w1, acc[r][1]);
        }
    }
    for (std::size_t r = 0; r < R; ++r) {
        Lanes::store(out + r * n_out + j0, acc[r][0]);
        Lanes::store(out + r * n_out + j0 + W, acc[r][1]);
    }
}

template <std::size_t R>
inline void affine_rows(const double* x, const double* w, std::size_t n_in, std::size_t n_out, const double* b,
                        double* out) {
    std::size_t j = 0;
    for (; j + 2 * Lanes::width <= n_out; j += 2 * Lanes::width) affine_block<R>(x, n_in, w, n_out, b, out, j);
    for (; j < n_out; ++j)
        for (std::size_t r = 0; r < R; ++r) {
            double acc = b[j];
            for (std::size_t k = 0; k < n_in; ++k) acc = std::fma(x[r * n_in + k], w[k * n_out + j], acc);
            out[r * n_out + j] = acc;
        }
}

inline void affine(const RowMajorMatrix& x, const Layer& layer, RowMajorMatrix& out) {
    const std::size_t n_in = layer.weight.rows(), n_out = layer.weight.cols();
    const std::size_t rows = std::size_t(x.rows());
    const double* w = layer.weight.flat().data();
    const double* b = layer.bias.data();
    out.resize(x.rows(), Eigen::Index(n_out));
    std::size_t r = 0;
    for (; r + 8 <= rows; r += 8) affine_rows<8>(x.data() + r * n_in, w, n_in, n_out, b, out.data() + r * n_out);
    for (; r < rows; ++r) affine_rows<1>(x.data() + r * n_in, w, n_in, n_out, b, out.data() + r * n_out);
}

} // namespace detail

inline Tensor2 forward(const VelocityModel& model, const Tensor2& z, std::span<const double> t,
                       ForwardCache* cache = nullptr) {
    RowMajorMatrix x = detail::build_input(model, z, t);
    const std::size_t n_layers = model.layers.size();
    if (cache) {
        cache->inputs.clear();
        cache->pre.clear();
    }
    RowMajorMatrix y;
    for (std::size_t i = 0; i < n_layers; ++i) {
        detail::affine(x, model.layers[i], y);
        if (cache) cache->inputs.push_back(std::move(x));
        if (i + 1 == n_layers) break;
        if (cache) cache->pre.push_back(y);
        x = silu(y);
    }
    Tensor2 out(z.rows(), model.data_dim(), std::vector<double>(y.data(), y.data() + y.size()));
    require_finite(out, "forward");
    return out;
}

inline Tensor2 VelocityModel::operator()(const Tensor2& z, std::span<const double> t) const {
    return forward(*this, z, t);
}

// Parameter gradients given dL/d(output) and the cache of the forward pass.
inline Gradients backward(const VelocityModel& model, const ForwardCache& cache, const Tensor2& grad_out) {
    const std::size_t n_layers = model.layers.size();
    Gradients grads(n_layers);
    RowMajorMatrix delta = grad_out.mat();
    for (std::size_t k = n_layers; k-- > 0;) {
        const auto& layer = model.layers[k];
        const RowMajorMatrix& in = cache.inputs[k];
        RowMajorMatrix dw = in.transpose() * delta;
        Eigen::RowVectorXd db = delta.colwise().sum();
        grads[k].weight = Tensor2(layer.weight.rows(), layer.weight.cols(),
                                  std::vector<double>(dw.data(), dw.data() + dw.size()));
        grads[k].bias.assign(db.data(), db.data() + db.size());
        if (k == 0) break;
        RowMajorMatrix dx = delta * layer.weight.mat().transpose();
        const RowMajorMatrix& pre = cache.pre[k - 1];
        delta = dx.cwiseProduct(silu_grad(pre));
    }
    return grads;
}

// Scalar loss and its gradient with respect to the model output.
struct LossValue {
    double value = 0.0;
    Tensor2 grad;
    double mse_term = 0.0;
    double cos_term = 0.0;
};

struct GradientResult {
    LossValue loss;
    Gradients grads;
};

// Reverse-mode gradient of loss(forward(model, z, t)) with respect to all parameters.
template <class LossFn>
    requires std::is_invocable_r_v<LossValue, LossFn, const Tensor2&>
GradientResult loss_gradients(const VelocityModel& model, const Tensor2& z, std::span<const double> t,
                              LossFn&& loss_fn, long batch_id = -1) {
    ForwardCache cache;
    const Tensor2 pred = forward(model, z, t, &cache);
    LossValue loss = std::invoke(std::forward<LossFn>(loss_fn), pred);
    if (!std::isfinite(loss.value)) {
        throw NonFiniteError("non-finite loss" +
                             (batch_id >= 0 ? " in batch " + std::to_string(batch_id) : std::string{}));
    }
    require_same_shape(loss.grad, pred, "loss_gradients");
    Gradients grads = backward(model, cache, loss.grad);
    return {std::move(loss), std::move(grads)};
}

} // namespace proreflow
