#pragma once

// Shared helpers for the test suites: gradient comparison with a noise
// floor, and flatten/restore of parameter structs for finite differencing.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "megalodon/core.hpp"

namespace megatest {

// Relative error with an absolute floor below finite-difference noise.
inline bool grad_close(double analytic, double fd, double rel_tol = 1e-4, double abs_floor = 1e-8) {
    const double diff = std::abs(analytic - fd);
    if (diff <= abs_floor) return true;
    return diff <= rel_tol * std::max(std::abs(analytic), std::abs(fd));
}

inline double max_abs_diff(const megalodon::Matrix<double>& a, const megalodon::Matrix<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

// A list of (pointer, length) views over the scalars of a parameter struct,
// used to drive finite differences over whole modules.
struct FlatView {
    std::vector<double*> ptrs;

    void add(megalodon::Matrix<double>& m) {
        for (auto& v : m.data) ptrs.push_back(&v);
    }
    void add(std::vector<double>& v) {
        for (auto& x : v) ptrs.push_back(&x);
    }

    std::size_t size() const { return ptrs.size(); }

    std::vector<double> snapshot() const {
        std::vector<double> out(ptrs.size());
        for (std::size_t i = 0; i < ptrs.size(); ++i) out[i] = *ptrs[i];
        return out;
    }
    void restore(std::span<const double> vals) const {
        for (std::size_t i = 0; i < ptrs.size(); ++i) *ptrs[i] = vals[i];
    }
};

}  // namespace megatest
