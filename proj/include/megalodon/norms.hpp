#pragma once

// Normalization layers.
//
// timestep_norm normalizes with *cumulative* mean/variance per feature group:
// the statistics at timestep t cover every element of the group in timesteps
// 1..t plus any carried history, so the op is causal and streamable. The
// accumulator is Welford with Kahan-compensated additions.
//
// layer_norm_plus1 is per-timestep layer normalization whose scale is stored
// as an offset from one, so weight decay pulls the effective scale toward 1.

#include <cstddef>
#include <cstdint>
#include <utility>

#include "megalodon/core.hpp"
#include "megalodon/numerics.hpp"

namespace megalodon {

inline constexpr double kNormEps = 1e-5;

template <typename S>
struct NormAffine {
    std::vector<S> gamma;       // stored offset from one; effective scale = gamma + 1
    std::vector<S> beta_shift;  // additive shift
    S eps = S(kNormEps);

    static NormAffine identity(std::size_t d) {
        NormAffine a;
        a.gamma.assign(d, S(0));
        a.beta_shift.assign(d, S(0));
        return a;
    }
};

// One Welford accumulator with Kahan-compensated mean and m2.
template <typename S>
struct WelfordAccumulator {
    std::uint64_t count = 0;
    S mean = S(0);
    S mean_comp = S(0);
    S m2 = S(0);
    S m2_comp = S(0);

    void add(S x) {
        ++count;
        const S delta = x - mean;
        // mean += delta / count, compensated
        {
            const S y = delta / static_cast<S>(count) - mean_comp;
            const S t = mean + y;
            mean_comp = (t - mean) - y;
            mean = t;
        }
        const S delta2 = x - mean;
        {
            const S y = delta * delta2 - m2_comp;
            const S t = m2 + y;
            m2_comp = (t - m2) - y;
            m2 = t;
        }
    }

    S variance() const {
        if (count == 0) return S(0);
        if (m2 < S(0)) throw std::runtime_error("timestep_norm: accumulator corruption (negative variance)");
        return m2 / static_cast<S>(count);
    }
};

template <typename S>
struct TimestepNormState {
    std::vector<WelfordAccumulator<S>> groups;

    static TimestepNormState zero(std::size_t k_groups) {
        TimestepNormState s;
        s.groups.resize(k_groups);
        return s;
    }

    std::size_t num_groups() const { return groups.size(); }
};

// Per-timestep statistics snapshot kept for the backward pass.
template <typename S>
struct TimestepNormCache {
    Matrix<S> x;
    Matrix<S> mean;     // (n x k)
    Matrix<S> inv_std;  // (n x k), 1/sqrt(var + eps)
    std::vector<double> count;  // (n x k) flattened as n*k, samples folded in at each t
    std::size_t k_groups = 0;
};

template <typename S>
std::pair<Matrix<S>, TimestepNormState<S>> timestep_norm(const Matrix<S>& x, std::size_t k_groups,
                                                         const TimestepNormState<S>& state,
                                                         const NormAffine<S>& affine,
                                                         TimestepNormCache<S>* cache = nullptr) {
    const std::size_t n = x.rows, d = x.cols;
    if (k_groups == 0 || d % k_groups != 0)
        throw std::invalid_argument("timestep_norm: d not divisible by k_groups");
    if (state.num_groups() != k_groups)
        throw std::invalid_argument("timestep_norm: state group count mismatch");
    require(affine.gamma.size() == d && affine.beta_shift.size() == d,
            "timestep_norm: affine length mismatch");
    require_finite(x, "timestep_norm input");

    const std::size_t dg = d / k_groups;
    Matrix<S> y(n, d);
    TimestepNormState<S> st = state;

    if (cache) {
        cache->x = x;
        cache->mean = Matrix<S>(n, k_groups);
        cache->inv_std = Matrix<S>(n, k_groups);
        cache->count.assign(n * k_groups, 0.0);
        cache->k_groups = k_groups;
    }

    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t g = 0; g < k_groups; ++g) {
            auto& acc = st.groups[g];
            const std::size_t j0 = g * dg;
            for (std::size_t j = j0; j < j0 + dg; ++j) acc.add(x(t, j));
            const S mu = acc.mean;
            const S var = acc.variance();
            const S inv_std = S(1) / std::sqrt(var + affine.eps);
            for (std::size_t j = j0; j < j0 + dg; ++j) {
                y(t, j) = (affine.gamma[j] + S(1)) * (x(t, j) - mu) * inv_std + affine.beta_shift[j];
            }
            if (cache) {
                cache->mean(t, g) = mu;
                cache->inv_std(t, g) = inv_std;
                cache->count[t * k_groups + g] = static_cast<double>(acc.count);
            }
        }
    }

    return {std::move(y), std::move(st)};
}

// Backward through the cumulative statistics. Every x_{i,j} influences the
// normalization of all later timesteps in its group through mu_t and
// sigma_t; the dependency collapses into three suffix sums per group.
template <typename S>
void timestep_norm_backward(const TimestepNormCache<S>& cache, const NormAffine<S>& affine,
                            const Matrix<S>& dy, Matrix<S>& dx, std::vector<S>& dgamma,
                            std::vector<S>& dbeta) {
    const std::size_t n = cache.x.rows, d = cache.x.cols, k = cache.k_groups;
    const std::size_t dg = d / k;
    require(dy.rows == n && dy.cols == d, "timestep_norm backward: dy shape mismatch");

    for (std::size_t g = 0; g < k; ++g) {
        const std::size_t j0 = g * dg;
        S c_suffix = S(0), d_suffix = S(0), e_suffix = S(0);
        for (std::size_t t = n; t-- > 0;) {
            const S mu = cache.mean(t, g);
            const S inv_std = cache.inv_std(t, g);
            const S inv_n = S(1) / static_cast<S>(cache.count[t * k + g]);

            S a_t = S(0), b_t = S(0);
            for (std::size_t j = j0; j < j0 + dg; ++j) {
                const S w = dy(t, j) * (affine.gamma[j] + S(1));
                a_t += w;
                b_t += w * (cache.x(t, j) - mu);
                dgamma[j] += dy(t, j) * (cache.x(t, j) - mu) * inv_std;
                dbeta[j] += dy(t, j);
            }
            c_suffix += a_t * inv_n * inv_std;
            const S b_scaled = b_t * inv_n * inv_std * inv_std * inv_std;
            d_suffix += b_scaled;
            e_suffix += b_scaled * mu;

            for (std::size_t j = j0; j < j0 + dg; ++j) {
                const S w = dy(t, j) * (affine.gamma[j] + S(1));
                dx(t, j) += w * inv_std - c_suffix - cache.x(t, j) * d_suffix + e_suffix;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Layer normalization with plus-1 scale.
// ---------------------------------------------------------------------------

template <typename S>
struct LayerNormCache {
    Matrix<S> x_hat;     // normalized input
    std::vector<S> inv_std;  // per row
};

template <typename S>
Matrix<S> layer_norm_plus1(const Matrix<S>& x, const NormAffine<S>& affine,
                           LayerNormCache<S>* cache = nullptr) {
    const std::size_t n = x.rows, d = x.cols;
    require(d >= 1, "layer_norm: feature dimension must be >= 1");
    require(affine.gamma.size() == d && affine.beta_shift.size() == d,
            "layer_norm: affine length mismatch");

    Matrix<S> y(n, d);
    if (cache) {
        cache->x_hat = Matrix<S>(n, d);
        cache->inv_std.assign(n, S(0));
    }
    for (std::size_t t = 0; t < n; ++t) {
        const S* row = x.row(t);
        S mean = S(0);
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<S>(d);
        S var = S(0);
        for (std::size_t j = 0; j < d; ++j) {
            const S diff = row[j] - mean;
            var += diff * diff;
        }
        var /= static_cast<S>(d);
        const S inv_std = S(1) / std::sqrt(var + affine.eps);
        for (std::size_t j = 0; j < d; ++j) {
            const S x_hat = (row[j] - mean) * inv_std;
            y(t, j) = (affine.gamma[j] + S(1)) * x_hat + affine.beta_shift[j];
            if (cache) cache->x_hat(t, j) = x_hat;
        }
        if (cache) cache->inv_std[t] = inv_std;
    }
    return y;
}

template <typename S>
void layer_norm_backward(const LayerNormCache<S>& cache, const NormAffine<S>& affine,
                         const Matrix<S>& dy, Matrix<S>& dx, std::vector<S>& dgamma,
                         std::vector<S>& dbeta) {
    const std::size_t n = cache.x_hat.rows, d = cache.x_hat.cols;
    require(dy.rows == n && dy.cols == d, "layer_norm backward: dy shape mismatch");
    for (std::size_t t = 0; t < n; ++t) {
        const S* xh = cache.x_hat.row(t);
        const S inv_std = cache.inv_std[t];
        S sum_g = S(0), sum_gx = S(0);
        for (std::size_t j = 0; j < d; ++j) {
            const S w = dy(t, j) * (affine.gamma[j] + S(1));
            sum_g += w;
            sum_gx += w * xh[j];
            dgamma[j] += dy(t, j) * xh[j];
            dbeta[j] += dy(t, j);
        }
        const S inv_d = S(1) / static_cast<S>(d);
        for (std::size_t j = 0; j < d; ++j) {
            const S w = dy(t, j) * (affine.gamma[j] + S(1));
            dx(t, j) += inv_std * (w - inv_d * sum_g - xh[j] * inv_d * sum_gx);
        }
    }
}

}  // namespace megalodon
