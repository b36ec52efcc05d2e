#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "proreflow/numcore/tensor.hpp"

namespace proreflow {

// Endpoints 0 = t_0 < t_1 < ... < t_K = 1 splitting the time axis into K windows.
class WindowSchedule {
public:
    explicit WindowSchedule(std::vector<double> endpoints) : endpoints_(std::move(endpoints)) {
        if (endpoints_.size() < 2) throw Error("WindowSchedule: need at least two endpoints");
        if (endpoints_.front() != 0.0 || endpoints_.back() != 1.0)
            throw Error("WindowSchedule: endpoints must start at 0 and end at 1");
        for (std::size_t i = 1; i < endpoints_.size(); ++i)
            if (!(endpoints_[i] > endpoints_[i - 1]))
                throw Error("WindowSchedule: endpoints must be strictly increasing");
    }

    static WindowSchedule uniform(std::size_t windows) {
        if (windows == 0) throw Error("WindowSchedule: window count must be positive");
        std::vector<double> e(windows + 1);
        for (std::size_t k = 0; k <= windows; ++k) e[k] = double(k) / double(windows);
        e.back() = 1.0;
        return WindowSchedule(std::move(e));
    }

    std::size_t windows() const noexcept { return endpoints_.size() - 1; }
    const std::vector<double>& endpoints() const noexcept { return endpoints_; }
    double start(std::size_t k) const { return endpoints_.at(k); }
    double end(std::size_t k) const { return endpoints_.at(k + 1); }

    // Index of the window [t_k, t_{k+1}) containing t; t = 1 maps to the last window.
    std::size_t locate(double t) const {
        if (!(t >= 0.0 && t <= 1.0)) throw Error("WindowSchedule::locate: t outside [0, 1]");
        auto it = std::upper_bound(endpoints_.begin(), endpoints_.end(), t);
        const auto k = std::size_t(it - endpoints_.begin());
        return std::min(k == 0 ? 0 : k - 1, windows() - 1);
    }

    friend bool operator==(const WindowSchedule&, const WindowSchedule&) = default;

private:
    std::vector<double> endpoints_;
};

// Merges adjacent window pairs by keeping every second endpoint.
inline WindowSchedule halve_schedule(const WindowSchedule& s) {
    if (s.windows() % 2 != 0)
        throw Error("halve_schedule: window count " + std::to_string(s.windows()) + " is odd");
    std::vector<double> e;
    e.reserve(s.windows() / 2 + 1);
    for (std::size_t i = 0; i < s.endpoints().size(); i += 2) e.push_back(s.endpoints()[i]);
    return WindowSchedule(std::move(e));
}

} // namespace proreflow
