#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "proreflow/flowcore.hpp"
#include "proreflow/numcore.hpp"
#include "proreflow/sampler.hpp"
#include "proreflow/toydata.hpp"

namespace proreflow {

// ---------------------------------------------------------------------------
// Sample quality
// ---------------------------------------------------------------------------

namespace detail {

// Random subset of `keep` rows, in sampled order.
inline Tensor2 subsample_rows(const Tensor2& x, std::size_t keep, std::uint64_t seed) {
    std::vector<std::size_t> idx(x.rows());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = 0; i < keep; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    idx.resize(keep);
    return gather_rows(x, idx);
}

inline std::vector<double> project_sorted(const Tensor2& x, std::span<const double> dir) {
    std::vector<double> p(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto row = x.row(r);
        double s = 0.0;
        for (std::size_t c = 0; c < row.size(); ++c) s += row[c] * dir[c];
        p[r] = s;
    }
    std::sort(p.begin(), p.end());
    return p;
}

} // namespace detail

// Sliced Wasserstein-2 distance over n_projections seeded directions.
// The larger set is subsampled without replacement when sizes differ.
inline double sliced_w2(const Tensor2& a, const Tensor2& b, std::size_t n_projections, std::uint64_t seed) {
    if (a.rows() == 0 || b.rows() == 0) throw Error("sliced_w2: empty point set");
    if (a.cols() != b.cols()) throw ShapeError("sliced_w2: dimension mismatch " + a.shape() + " vs " + b.shape());
    if (n_projections == 0) throw Error("sliced_w2: n_projections must be positive");
    const std::size_t n = std::min(a.rows(), b.rows());
    const std::uint64_t rs = derive_seed(seed, "resample");
    const Tensor2 A = a.rows() > n ? detail::subsample_rows(a, n, rs) : a;
    const Tensor2 B = b.rows() > n ? detail::subsample_rows(b, n, rs) : b;
    const std::size_t D = a.cols();
    Rng rng(derive_seed(seed, "directions"));
    // In 2-D the directions are a randomly rotated fan of evenly spaced angles
    // over [0, pi): each is still uniform, but the set averages quadratic forms
    // exactly instead of up to Monte Carlo error.
    const double offset = rng.uniform();
    std::vector<double> dir(D);
    double total = 0.0;
    for (std::size_t p = 0; p < n_projections; ++p) {
        if (D == 2) {
            const double a = std::numbers::pi * (double(p) + offset) / double(n_projections);
            dir[0] = std::cos(a);
            dir[1] = std::sin(a);
        } else {
            double norm2 = 0.0;
            do {
                norm2 = 0.0;
                for (double& d : dir) {
                    d = rng.normal();
                    norm2 += d * d;
                }
            } while (norm2 == 0.0);
            const double inv = 1.0 / std::sqrt(norm2);
            for (double& d : dir) d *= inv;
        }
        const auto pa = detail::project_sorted(A, dir);
        const auto pb = detail::project_sorted(B, dir);
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += (pa[i] - pb[i]) * (pa[i] - pb[i]);
        total += s / double(n);
    }
    return std::sqrt(total / double(n_projections));
}

// Energy distance 2 E|X - Y| - E|X - X'| - E|Y - Y'| (V-statistic). Sets
// larger than max_points are subsampled first.
inline double energy_distance(const Tensor2& a, const Tensor2& b, std::size_t max_points, std::uint64_t seed) {
    if (a.rows() == 0 || b.rows() == 0) throw Error("energy_distance: empty point set");
    if (a.cols() != b.cols()) throw ShapeError("energy_distance: dimension mismatch");
    const Tensor2 A = a.rows() > max_points ? detail::subsample_rows(a, max_points, derive_seed(seed, "a")) : a;
    const Tensor2 B = b.rows() > max_points ? detail::subsample_rows(b, max_points, derive_seed(seed, "b")) : b;
    auto mean_dist = [](const Tensor2& x, const Tensor2& y) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.rows(); ++i) {
            const auto xi = x.row(i);
            for (std::size_t j = 0; j < y.rows(); ++j) {
                const auto yj = y.row(j);
                double d2 = 0.0;
                for (std::size_t c = 0; c < xi.size(); ++c) d2 += (xi[c] - yj[c]) * (xi[c] - yj[c]);
                s += std::sqrt(d2);
            }
        }
        return s / (double(x.rows()) * double(y.rows()));
    };
    return 2.0 * mean_dist(A, B) - mean_dist(A, A) - mean_dist(B, B);
}

// ---------------------------------------------------------------------------
// Trajectory statistics
// ---------------------------------------------------------------------------

// Mean over trajectories of mean_i |v(z_i, t_i) - (z_1 - z_0)|^2 on an n_steps
// Euler grid started from standard normal noise. Zero iff every recorded
// velocity equals its trajectory's chord.
template <VelocityField F>
double straightness(const F& field, std::size_t dim, std::size_t n_traj, std::size_t n_steps, std::uint64_t seed) {
    if (n_steps < 2) throw Error("straightness: n_steps must be at least 2");
    const Tensor2 z0 = sample_noise(n_traj, dim, seed);
    const SampleResult res = euler_sample(field, n_steps, z0, true);
    const auto& rec = *res.trajectory;
    double total = 0.0;
    for (std::size_t r = 0; r < n_traj; ++r) {
        double acc = 0.0;
        for (const auto& v : rec.velocities) {
            for (std::size_t c = 0; c < dim; ++c) {
                const double chord = res.samples(r, c) - z0(r, c);
                const double d = v(r, c) - chord;
                acc += d * d;
            }
        }
        total += acc / double(n_steps);
    }
    return total / double(n_traj);
}

struct VelocityGapReport {
    std::size_t T = 0;
    Tensor2 l2_matrix;
    Tensor2 cos_matrix;
    std::size_t n_samples = 0;

    // Mean of cos_matrix(i, j) over pairs with min_gap <= |i - j| <= max_gap.
    double mean_cos(std::size_t min_gap, std::size_t max_gap) const {
        double s = 0.0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t j = 0; j < T; ++j) {
                const std::size_t g = i > j ? i - j : j - i;
                if (g >= min_gap && g <= max_gap) {
                    s += cos_matrix(i, j);
                    ++n;
                }
            }
        return n ? s / double(n) : 0.0;
    }
};

// Finite-difference velocities v_i = T (x_{i+1} - x_i) along T-step Euler
// trajectories; pairwise L2 and cosine between timesteps, averaged over samples.
template <VelocityField F>
VelocityGapReport velocity_gap_matrix(const F& field, std::size_t dim, std::size_t T, std::size_t n_samples,
                                      std::uint64_t seed, double eps = 1e-12) {
    if (T < 2) throw Error("velocity_gap_matrix: T must be at least 2");
    if (n_samples == 0) throw Error("velocity_gap_matrix: n_samples must be positive");
    const Tensor2 z0 = sample_noise(n_samples, dim, seed);
    const SampleResult res = euler_sample(field, T, z0, true);
    const auto& states = res.trajectory->states;

    VelocityGapReport rep{T, Tensor2(T, T), Tensor2(T, T), n_samples};
    std::vector<double> v(T * dim), norm(T);
    for (std::size_t r = 0; r < n_samples; ++r) {
        for (std::size_t i = 0; i < T; ++i) {
            double n2 = 0.0;
            for (std::size_t c = 0; c < dim; ++c) {
                const double vi = double(T) * (states[i + 1](r, c) - states[i](r, c));
                v[i * dim + c] = vi;
                n2 += vi * vi;
            }
            norm[i] = std::max(std::sqrt(n2), eps);
        }
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t j = i + 1; j < T; ++j) {
                double d2 = 0.0, dot = 0.0;
                for (std::size_t c = 0; c < dim; ++c) {
                    const double a = v[i * dim + c], b = v[j * dim + c];
                    d2 += (a - b) * (a - b);
                    dot += a * b;
                }
                rep.l2_matrix(i, j) += std::sqrt(d2);
                rep.cos_matrix(i, j) += dot / (norm[i] * norm[j]);
            }
    }
    for (std::size_t i = 0; i < T; ++i) {
        rep.l2_matrix(i, i) = 0.0;
        rep.cos_matrix(i, i) = 1.0;
        for (std::size_t j = i + 1; j < T; ++j) {
            rep.l2_matrix(i, j) /= double(n_samples);
            rep.cos_matrix(i, j) /= double(n_samples);
            rep.l2_matrix(j, i) = rep.l2_matrix(i, j);
            rep.cos_matrix(j, i) = rep.cos_matrix(i, j);
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Direction versus magnitude
// ---------------------------------------------------------------------------

struct DirectionErrorGap {
    double r1 = 0.0; // squared error of a prediction rotated by eps at exact magnitude
    double r2 = 0.0; // squared error of an aligned prediction with magnitude off by eps
    double y = 0.0;  // r1 - r2, approximately (v_mag^2 - 1) eps^2
};

inline DirectionErrorGap direction_error_gap(double v_mag, double eps) {
    if (!(v_mag > 0.0)) throw Error("direction_error_gap: v_mag must be positive");
    // 1 - cos(eps) = 2 sin^2(eps / 2) avoids cancellation for small eps.
    const double s = std::sin(0.5 * eps);
    const double r1 = 4.0 * v_mag * v_mag * s * s;
    const double r2 = eps * eps;
    return {r1, r2, r1 - r2};
}

namespace detail {

inline double hashed_normal(std::uint64_t key) {
    const std::uint64_t a = splitmix64(key);
    const std::uint64_t b = splitmix64(a ^ 0xd1b54a32d192ed03ULL);
    const double u1 = (double(a >> 11) + 1.0) * 0x1.0p-53; // (0, 1]
    const double u2 = double(b >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// Noise key for coordinate c of row r at time t. Keying on t (not on call
// order) makes the perturbed field a pure function of (z, t).
inline std::uint64_t noise_key(std::uint64_t seed, double t, std::size_t r, std::size_t c) {
    return splitmix64(splitmix64(seed ^ std::bit_cast<std::uint64_t>(t)) + splitmix64(r * 0x9e3779b97f4a7c15ULL + c));
}

} // namespace detail

// v = m d with |d| = 1; Gaussian noise of the given scale is added to m.
template <VelocityField F>
struct MagnitudeNoiseField {
    const F& base;
    double scale;
    std::uint64_t seed;

    Tensor2 operator()(const Tensor2& z, std::span<const double> t) const {
        Tensor2 v = base(z, t);
        if (scale == 0.0) return v;
        for (std::size_t r = 0; r < v.rows(); ++r) {
            auto row = v.row(r);
            double n2 = 0.0;
            for (double x : row) n2 += x * x;
            const double m = std::sqrt(n2);
            if (m == 0.0) continue;
            const double m_new = m + scale * detail::hashed_normal(detail::noise_key(seed, t[r], r, 0));
            for (double& x : row) x = m_new * (x / m);
        }
        return v;
    }
};

// v = m d; Gaussian noise of the given scale is added to d, which is then
// renormalised to unit length.
template <VelocityField F>
struct DirectionNoiseField {
    const F& base;
    double scale;
    std::uint64_t seed;

    Tensor2 operator()(const Tensor2& z, std::span<const double> t) const {
        Tensor2 v = base(z, t);
        if (scale == 0.0) return v;
        for (std::size_t r = 0; r < v.rows(); ++r) {
            auto row = v.row(r);
            double n2 = 0.0;
            for (double x : row) n2 += x * x;
            const double m = std::sqrt(n2);
            if (m == 0.0) continue;
            double d2 = 0.0;
            for (std::size_t c = 0; c < row.size(); ++c) {
                row[c] = row[c] / m + scale * detail::hashed_normal(detail::noise_key(seed, t[r], r, c));
                d2 += row[c] * row[c];
            }
            const double dn = std::sqrt(d2);
            if (dn == 0.0) continue;
            for (double& x : row) x = m * x / dn;
        }
        return v;
    }
};

struct NoiseAblationConfig {
    DatasetSpec reference;           // target distribution the samples are scored against
    std::size_t steps = 10;          // Euler steps per sample
    std::size_t n_samples = 8192;    // generated and reference set sizes
    std::size_t n_projections = 128;
    std::size_t probe_samples = 4096; // (z, t) points used to measure perturbation L2
    double match_tolerance = 0.01;   // relative L2 mismatch accepted by the search
    std::size_t max_search_iters = 200;
};

struct NoiseAblationReport {
    std::vector<double> noise_scales;
    double base_quality = 0.0;
    std::vector<double> magnitude_quality;
    std::vector<double> direction_quality;
    std::vector<double> magnitude_l2;    // probe L2 of the magnitude perturbation
    std::vector<double> matched_l2;      // probe L2 of the matched direction perturbation
    std::vector<double> direction_scale; // direction noise scale found by the search
};

namespace detail {

struct ProbeSet {
    Tensor2 z;
    std::vector<double> t;
    Tensor2 v; // unperturbed velocity
};

template <VelocityField G>
double probe_l2(const G& perturbed, const ProbeSet& probe) {
    const Tensor2 v = perturbed(probe.z, probe.t);
    double s = 0.0;
    for (std::size_t r = 0; r < v.rows(); ++r) {
        double d2 = 0.0;
        for (std::size_t c = 0; c < v.cols(); ++c) d2 += (v(r, c) - probe.v(r, c)) * (v(r, c) - probe.v(r, c));
        s += std::sqrt(d2);
    }
    return s / double(v.rows());
}

} // namespace detail

// Compares sample quality under magnitude noise and under direction noise of
// equal mean L2 size on a probe set. The direction scale is found by bisection.
template <VelocityField F>
NoiseAblationReport noise_ablation(const F& field, std::span<const double> scales, const NoiseAblationConfig& cfg,
                                   std::uint64_t seed) {
    for (double s : scales)
        if (!(s >= 0.0) || !std::isfinite(s)) throw Error("noise_ablation: scales must be non-negative");
    const std::size_t dim = cfg.reference.dim;
    DatasetSpec ref_spec = cfg.reference;
    ref_spec.seed = derive_seed(seed, "reference");
    const Tensor2 reference = sample_data(ref_spec, cfg.n_samples);
    const Tensor2 z0 = sample_noise(cfg.n_samples, dim, derive_seed(seed, "z0"));
    const std::uint64_t w2_seed = derive_seed(seed, "sw2");
    auto quality = [&](const auto& f) {
        return sliced_w2(euler_sample(f, cfg.steps, z0).samples, reference, cfg.n_projections, w2_seed);
    };

    detail::ProbeSet probe;
    {
        DatasetSpec ps = cfg.reference;
        ps.seed = derive_seed(seed, "probe_data");
        const Tensor2 x = sample_data(ps, cfg.probe_samples);
        const Tensor2 e = sample_noise(cfg.probe_samples, dim, derive_seed(seed, "probe_noise"));
        Rng rng(derive_seed(seed, "probe_time"));
        probe.t.resize(cfg.probe_samples);
        for (double& t : probe.t) t = rng.uniform();
        probe.z = interpolate(e, x, probe.t);
        probe.v = field(probe.z, probe.t);
    }

    NoiseAblationReport rep;
    rep.noise_scales.assign(scales.begin(), scales.end());
    rep.base_quality = quality(field);
    for (std::size_t i = 0; i < scales.size(); ++i) {
        const double sigma = scales[i];
        const std::uint64_t mag_seed = derive_seed(seed, "magnitude", i);
        const std::uint64_t dir_seed = derive_seed(seed, "direction", i);
        const MagnitudeNoiseField<F> mag{field, sigma, mag_seed};
        const double target = detail::probe_l2(mag, probe);

        auto dir_l2 = [&](double s) { return detail::probe_l2(DirectionNoiseField<F>{field, s, dir_seed}, probe); };
        double lo = 0.0, hi = 0.0, found = 0.0, l2 = 0.0;
        if (target > 0.0) {
            hi = std::max(sigma, 1e-6);
            double l2_hi = dir_l2(hi);
            std::size_t grow = 0;
            while (l2_hi < target) {
                if (++grow > 60)
                    throw Error("noise_ablation: cannot bracket direction scale for magnitude scale " +
                                std::to_string(sigma) + " (target probe L2 " + std::to_string(target) +
                                ", largest reachable " + std::to_string(l2_hi) + " at scale " + std::to_string(hi) +
                                ")");
                lo = hi;
                hi *= 2.0;
                l2_hi = dir_l2(hi);
            }
            found = hi;
            l2 = l2_hi;
            for (std::size_t it = 0; std::abs(l2 - target) > cfg.match_tolerance * target; ++it) {
                if (it >= cfg.max_search_iters)
                    throw Error("noise_ablation: direction scale search did not converge for magnitude scale " +
                                std::to_string(sigma));
                const double mid = 0.5 * (lo + hi);
                const double l2_mid = dir_l2(mid);
                if (l2_mid < target) lo = mid;
                else hi = mid;
                found = mid;
                l2 = l2_mid;
            }
        }
        rep.magnitude_l2.push_back(target);
        rep.matched_l2.push_back(l2);
        rep.direction_scale.push_back(found);
        rep.magnitude_quality.push_back(quality(mag));
        rep.direction_quality.push_back(quality(DirectionNoiseField<F>{field, found, dir_seed}));
    }
    return rep;
}

} // namespace proreflow
