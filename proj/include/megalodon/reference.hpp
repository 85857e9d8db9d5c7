#pragma once

// Independent reference implementations used to cross-check the real code
// paths. Everything here is deliberately naive: plain loops, two-pass
// statistics, dense per-row softmax. None of it shares code with the
// implementations it verifies.

#include <cmath>
#include <cstddef>
#include <vector>

#include "megalodon/core.hpp"

namespace megalodon::reference {

// Direct O(n*L) causal convolution.
template <typename S>
std::vector<S> direct_causal_conv(std::span<const S> signal, std::span<const S> kernel) {
    const std::size_t n = signal.size();
    const std::size_t l = kernel.size();
    std::vector<S> out(n, S(0));
    for (std::size_t t = 0; t < n; ++t) {
        S acc = S(0);
        const std::size_t smax = std::min(t + 1, l);
        for (std::size_t s = 0; s < smax; ++s) acc += kernel[s] * signal[t - s];
        out[t] = acc;
    }
    return out;
}

// Real multi-dimensional damped EMA scan (the theta = 0 case), written as an
// independent real-valued recurrence:
//   u_t = beta_j * x_{t,j};  h_t = alpha .* u_t + (1 - alpha .* delta) .* h_{t-1};
//   y_{t,j} = eta_j . h_t
// alpha, delta, beta, eta are (d x h) with eta real.
template <typename S>
Matrix<S> damped_ema_scan(const Matrix<S>& x, const Matrix<S>& alpha, const Matrix<S>& delta,
                          const Matrix<S>& beta, const Matrix<S>& eta) {
    const std::size_t n = x.rows, d = x.cols, h = alpha.cols;
    Matrix<S> y(n, d);
    std::vector<S> state(h);
    for (std::size_t j = 0; j < d; ++j) {
        std::fill(state.begin(), state.end(), S(0));
        for (std::size_t t = 0; t < n; ++t) {
            S out = S(0);
            for (std::size_t k = 0; k < h; ++k) {
                const S u = beta(j, k) * x(t, j);
                state[k] = alpha(j, k) * u + (S(1) - alpha(j, k) * delta(j, k)) * state[k];
                out += eta(j, k) * state[k];
            }
            y(t, j) = out;
        }
    }
    return y;
}

// Brute-force cumulative group statistics: mean/variance of x[0..t, group]
// recomputed from scratch for every prefix. prior_* fold in carried history.
struct PrefixStats {
    double mean = 0.0;
    double var = 0.0;
};

template <typename S>
PrefixStats prefix_group_stats(const Matrix<S>& x, std::size_t t_inclusive, std::size_t group_begin,
                               std::size_t group_end, double prior_count = 0.0,
                               double prior_sum = 0.0, double prior_sumsq = 0.0) {
    double count = prior_count;
    double sum = prior_sum;
    double sumsq = prior_sumsq;
    for (std::size_t i = 0; i <= t_inclusive; ++i) {
        for (std::size_t j = group_begin; j < group_end; ++j) {
            const double v = static_cast<double>(x(i, j));
            count += 1.0;
            sum += v;
            sumsq += v * v;
        }
    }
    PrefixStats s;
    s.mean = sum / count;
    s.var = sumsq / count - s.mean * s.mean;
    return s;
}

// Two-pass per-row mean/variance (population) over the feature dimension.
template <typename S>
PrefixStats row_stats_two_pass(const S* row, std::size_t d) {
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) sum += static_cast<double>(row[j]);
    const double mean = sum / static_cast<double>(d);
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(row[j]) - mean;
        acc += diff * diff;
    }
    PrefixStats s;
    s.mean = mean;
    s.var = acc / static_cast<double>(d);
    return s;
}

// Dense causal attention with per-row softmax and no scale factor, restricted
// to fixed-length chunks. Q,K are (n x z), V is (n x v); single head.
template <typename S>
Matrix<S> dense_chunked_attention(const Matrix<S>& q, const Matrix<S>& k, const Matrix<S>& v,
                                  std::size_t chunk) {
    const std::size_t n = q.rows;
    Matrix<S> out(n, v.cols);
    for (std::size_t t = 0; t < n; ++t) {
        const std::size_t chunk_begin = (t / chunk) * chunk;
        // scores over [chunk_begin, t]
        std::vector<double> scores;
        for (std::size_t s = chunk_begin; s <= t; ++s) {
            double dot = 0.0;
            for (std::size_t c = 0; c < q.cols; ++c)
                dot += static_cast<double>(q(t, c)) * static_cast<double>(k(s, c));
            scores.push_back(dot);
        }
        double mx = scores[0];
        for (double x : scores) mx = std::max(mx, x);
        double denom = 0.0;
        std::vector<double> w(scores.size());
        for (std::size_t i = 0; i < scores.size(); ++i) {
            w[i] = std::exp(scores[i] - mx);
            denom += w[i];
        }
        for (std::size_t i = 0; i < scores.size(); ++i) {
            const double p = w[i] / denom;
            for (std::size_t c = 0; c < v.cols; ++c)
                out(t, c) += static_cast<S>(p * static_cast<double>(v(chunk_begin + i, c)));
        }
    }
    return out;
}

}  // namespace megalodon::reference
