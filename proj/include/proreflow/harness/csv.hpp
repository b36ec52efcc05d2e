#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "proreflow/numcore/tensor.hpp"

namespace proreflow::harness {

// Shortest text that round-trips the double exactly.
inline std::string fmt_double(double v) {
    char buf[32];
    for (int prec = 15; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header) : os_(path), path_(path) {
        if (!os_) throw Error("cannot open " + path.string() + " for writing");
        row(header);
    }

    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) os_ << (i ? "," : "") << cells[i];
        os_ << '\n';
        if (!os_) throw Error("write failed: " + path_.string());
    }

private:
    std::ofstream os_;
    std::filesystem::path path_;
};

// Writes samples with header x0,x1,...
inline void write_samples_csv(const std::filesystem::path& path, const Tensor2& x) {
    std::vector<std::string> header;
    for (std::size_t c = 0; c < x.cols(); ++c) header.push_back("x" + std::to_string(c));
    CsvWriter w(path, header);
    std::vector<std::string> cells(x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) cells[c] = fmt_double(x(r, c));
        w.row(cells);
    }
}

// Square matrix with header j0,j1,... and one row per i.
inline void write_matrix_csv(const std::filesystem::path& path, const Tensor2& m) {
    std::vector<std::string> header;
    for (std::size_t c = 0; c < m.cols(); ++c) header.push_back("j" + std::to_string(c));
    CsvWriter w(path, header);
    std::vector<std::string> cells(m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) cells[c] = fmt_double(m(r, c));
        w.row(cells);
    }
}

} // namespace proreflow::harness
