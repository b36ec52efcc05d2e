#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace proreflow {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct NonFiniteError : Error {
    using Error::Error;
};

namespace detail {

inline std::string shape_str(std::size_t rows, std::size_t cols) {
    std::ostringstream os;
    os << '[' << rows << 'x' << cols << ']';
    return os.str();
}

} // namespace detail

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMajorMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMajorMatrix>;

// Dense row-major matrix of doubles. Rows are samples, columns are coordinates.
class Tensor2 {
public:
    Tensor2() = default;
    Tensor2(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("Tensor2: data length " + std::to_string(data_.size()) +
                             " does not match shape " + detail::shape_str(rows_, cols_));
        }
    }

    static Tensor2 from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        Tensor2 t;
        t.rows_ = rows.size();
        t.cols_ = rows.size() ? rows.begin()->size() : 0;
        t.data_.reserve(t.rows_ * t.cols_);
        for (const auto& r : rows) {
            if (r.size() != t.cols_) throw ShapeError("Tensor2::from_rows: ragged rows");
            t.data_.insert(t.data_.end(), r.begin(), r.end());
        }
        return t;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> flat() noexcept { return data_; }
    std::span<const double> flat() const noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    MatrixMap mat() { return {data_.data(), Eigen::Index(rows_), Eigen::Index(cols_)}; }
    ConstMatrixMap mat() const { return {data_.data(), Eigen::Index(rows_), Eigen::Index(cols_)}; }

    std::string shape() const { return detail::shape_str(rows_, cols_); }

    bool all_finite() const noexcept {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    friend bool operator==(const Tensor2&, const Tensor2&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline void require_same_shape(const Tensor2& a, const Tensor2& b, const char* where) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(where) + ": shape mismatch " + a.shape() + " vs " + b.shape());
    }
}

inline void require_finite(const Tensor2& t, const std::string& what) {
    if (!t.all_finite()) throw NonFiniteError(what + ": non-finite value");
}

// Gathers the listed rows into a new tensor.
inline Tensor2 gather_rows(const Tensor2& src, std::span<const std::size_t> idx) {
    Tensor2 out(idx.size(), src.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        auto s = src.row(idx[i]);
        std::copy(s.begin(), s.end(), out.row(i).begin());
    }
    return out;
}

inline void scatter_rows(const Tensor2& src, std::span<const std::size_t> idx, Tensor2& dst) {
    for (std::size_t i = 0; i < idx.size(); ++i) {
        auto s = src.row(i);
        std::copy(s.begin(), s.end(), dst.row(idx[i]).begin());
    }
}

} // namespace proreflow
