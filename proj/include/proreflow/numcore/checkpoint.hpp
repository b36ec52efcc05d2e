#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "proreflow/numcore/mlp.hpp"

namespace proreflow {

// Binary checkpoint layout (all integers and doubles little-endian):
//   magic "PRFLCKPT" | u32 version | u64 data_dim | u64 time_features
//   u64 n_hidden | u64 hidden_dims[n_hidden]
//   per layer: f64 weight[in*out] (row-major, [in x out]) then f64 bias[out]
//   u64 fnv1a64 of every preceding byte
struct CheckpointError : Error {
    using Error::Error;
};

inline constexpr std::array<char, 8> kCheckpointMagic{'P', 'R', 'F', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class HashingWriter {
public:
    explicit HashingWriter(std::ostream& os) : os_(os) {}

    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            hash_ ^= c[i];
            hash_ *= 0x100000001b3ULL;
        }
        os_.write(static_cast<const char*>(p), std::streamsize(n));
    }

    template <class T>
    void le(T v) {
        if constexpr (std::endian::native == std::endian::big) v = byteswap_(v);
        bytes(&v, sizeof v);
    }

    void f64(double d) { le(std::bit_cast<std::uint64_t>(d)); }
    std::uint64_t hash() const { return hash_; }

private:
    template <class T>
    static T byteswap_(T v) {
        auto b = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        std::reverse(b.begin(), b.end());
        return std::bit_cast<T>(b);
    }

    std::ostream& os_;
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

class HashingReader {
public:
    explicit HashingReader(std::istream& is) : is_(is) {}

    void bytes(void* p, std::size_t n) {
        is_.read(static_cast<char*>(p), std::streamsize(n));
        if (!is_) throw CheckpointError("checkpoint: unexpected end of data");
        const auto* c = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            hash_ ^= c[i];
            hash_ *= 0x100000001b3ULL;
        }
    }

    template <class T>
    T le() {
        T v;
        bytes(&v, sizeof v);
        if constexpr (std::endian::native == std::endian::big) {
            auto b = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
            std::reverse(b.begin(), b.end());
            v = std::bit_cast<T>(b);
        }
        return v;
    }

    double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
    std::uint64_t hash() const { return hash_; }

private:
    std::istream& is_;
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

} // namespace detail

inline void write_checkpoint(std::ostream& os, const VelocityModel& model) {
    model.validate();
    detail::HashingWriter w(os);
    w.bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
    w.le<std::uint32_t>(kCheckpointVersion);
    const auto& arch = model.arch();
    w.le<std::uint64_t>(arch.data_dim);
    w.le<std::uint64_t>(arch.time_features);
    w.le<std::uint64_t>(arch.hidden_dims.size());
    for (auto h : arch.hidden_dims) w.le<std::uint64_t>(h);
    for (const auto& layer : model.layers) {
        for (double v : layer.weight.flat()) w.f64(v);
        for (double v : layer.bias) w.f64(v);
    }
    const std::uint64_t digest = w.hash();
    w.le<std::uint64_t>(digest);
    if (!os) throw CheckpointError("checkpoint: write failed");
}

inline VelocityModel read_checkpoint(std::istream& is) {
    detail::HashingReader r(is);
    std::array<char, 8> magic{};
    r.bytes(magic.data(), magic.size());
    if (magic != kCheckpointMagic) throw CheckpointError("checkpoint: bad magic");
    const auto version = r.le<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
    ModelArch arch;
    arch.data_dim = r.le<std::uint64_t>();
    arch.time_features = r.le<std::uint64_t>();
    const auto n_hidden = r.le<std::uint64_t>();
    if (n_hidden > 1024) throw CheckpointError("checkpoint: implausible hidden layer count");
    arch.hidden_dims.resize(n_hidden);
    for (auto& h : arch.hidden_dims) {
        h = r.le<std::uint64_t>();
        if (h > (1u << 20)) throw CheckpointError("checkpoint: implausible hidden width");
    }
    VelocityModel model;
    try {
        model = VelocityModel::zeros(arch);
    } catch (const ShapeError& e) {
        throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
    for (auto& layer : model.layers) {
        for (double& v : layer.weight.flat()) v = r.f64();
        for (double& v : layer.bias) v = r.f64();
    }
    const std::uint64_t expected = r.hash();
    const auto stored = r.le<std::uint64_t>();
    if (stored != expected) throw CheckpointError("checkpoint: checksum mismatch");
    if (!model.all_finite()) throw CheckpointError("checkpoint: non-finite parameter");
    return model;
}

inline void save_checkpoint(const std::filesystem::path& path, const VelocityModel& model) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("checkpoint: cannot open " + path.string() + " for writing");
    write_checkpoint(os, model);
}

inline VelocityModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("checkpoint: cannot open " + path.string());
    try {
        return read_checkpoint(is);
    } catch (const CheckpointError& e) {
        throw CheckpointError(std::string(e.what()) + " (" + path.string() + ")");
    }
}

} // namespace proreflow
