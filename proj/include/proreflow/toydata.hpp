#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>

#include "proreflow/numcore/random.hpp"
#include "proreflow/numcore/tensor.hpp"

namespace proreflow {

enum class DatasetName { gauss8, moons, checkerboard, spiral };

inline constexpr std::array<std::pair<DatasetName, std::string_view>, 4> kDatasetNames{{
    {DatasetName::gauss8, "gauss8"},
    {DatasetName::moons, "moons"},
    {DatasetName::checkerboard, "checkerboard"},
    {DatasetName::spiral, "spiral"},
}};

inline std::string_view to_string(DatasetName name) {
    for (const auto& [n, s] : kDatasetNames)
        if (n == name) return s;
    throw Error("unknown dataset enum value");
}

inline std::optional<DatasetName> parse_dataset_name(std::string_view s) {
    for (const auto& [n, str] : kDatasetNames)
        if (str == s) return n;
    return std::nullopt;
}

struct DatasetSpec {
    DatasetName name = DatasetName::gauss8;
    std::size_t dim = 2;
    double scale = 4.0;
    std::uint64_t seed = 0;

    friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

// Per-mode standard deviation of gauss8 relative to its radius.
inline constexpr double kGauss8RelativeStd = 1.0 / 20.0;

inline std::array<double, 2> gauss8_center(double scale, int k) {
    const double a = 2.0 * std::numbers::pi * double(k) / 8.0;
    return {scale * std::cos(a), scale * std::sin(a)};
}

inline void validate(const DatasetSpec& spec) {
    bool known = false;
    for (const auto& [n, s] : kDatasetNames) known |= (n == spec.name);
    if (!known) throw Error("dataset: unknown name");
    if (spec.dim != 2) throw Error("dataset: built-in datasets are 2-dimensional");
    if (!(spec.scale > 0.0) || !std::isfinite(spec.scale)) throw Error("dataset: scale must be positive");
}

// n i.i.d. samples from the target distribution; pure function of (spec, n).
inline Tensor2 sample_data(const DatasetSpec& spec, std::size_t n) {
    validate(spec);
    if (n == 0) throw Error("sample_data: n must be positive");
    Rng rng(spec.seed);
    Tensor2 out(n, 2);
    const double s = spec.scale;
    for (std::size_t i = 0; i < n; ++i) {
        double x = 0.0, y = 0.0;
        switch (spec.name) {
        case DatasetName::gauss8: {
            const auto c = gauss8_center(s, int(rng.below(8)));
            const double sd = s * kGauss8RelativeStd;
            x = c[0] + sd * rng.normal();
            y = c[1] + sd * rng.normal();
            break;
        }
        case DatasetName::moons: {
            // Two interleaved half circles of radius scale/2, centred on the origin.
            const double a = std::numbers::pi * rng.uniform();
            const double r = 0.5 * s;
            if (rng.below(2) == 0) {
                x = r * std::cos(a) - 0.5 * r;
                y = r * std::sin(a) - 0.25 * r;
            } else {
                x = r - r * std::cos(a) - 0.5 * r;
                y = -r * std::sin(a) + 0.25 * r;
            }
            x += 0.05 * s * rng.normal();
            y += 0.05 * s * rng.normal();
            break;
        }
        case DatasetName::checkerboard: {
            // 4x4 board on [-scale, scale]^2; only cells with even (col + row) are filled.
            const double cell = s / 2.0;
            const auto col = int(rng.below(4));
            const auto row = 2 * int(rng.below(2)) + (col % 2);
            x = -s + cell * (double(col) + rng.uniform());
            y = -s + cell * (double(row) + rng.uniform());
            break;
        }
        case DatasetName::spiral: {
            const double u = std::sqrt(rng.uniform());
            const double theta = 3.0 * std::numbers::pi * u;
            const double r = s * u;
            x = r * std::cos(theta) + 0.03 * s * rng.normal();
            y = r * std::sin(theta) + 0.03 * s * rng.normal();
            break;
        }
        }
        out(i, 0) = x;
        out(i, 1) = y;
    }
    return out;
}

// Standard normal source samples; pure function of (n, dim, seed).
inline Tensor2 sample_noise(std::size_t n, std::size_t dim, std::uint64_t seed) {
    if (n == 0 || dim == 0) throw Error("sample_noise: n and dim must be positive");
    Rng rng(seed);
    Tensor2 out(n, dim);
    for (double& v : out.flat()) v = rng.normal();
    return out;
}

} // namespace proreflow
