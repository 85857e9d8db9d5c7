#pragma once

// Core containers and helpers shared by every module: a row-major matrix,
// a deterministic RNG (bit-identical streams across platforms), and the
// small dense-linear-algebra kernels the layers are built from.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace megalodon {

// ---------------------------------------------------------------------------
// Matrix: row-major (rows x cols). Sequences are stored as (time, feature).
// ---------------------------------------------------------------------------

template <typename S>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<S> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, S fill = S(0)) : rows(r), cols(c), data(r * c, fill) {}

    S& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    const S& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    S* row(std::size_t i) { return data.data() + i * cols; }
    const S* row(std::size_t i) const { return data.data() + i * cols; }

    std::size_t size() const { return data.size(); }
    void set_zero() { std::fill(data.begin(), data.end(), S(0)); }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

template <typename S>
bool all_finite(std::span<const S> v) {
    for (S x : v) {
        if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
}

template <typename S>
bool all_finite(const Matrix<S>& m) {
    return all_finite(std::span<const S>(m.data));
}

template <typename S>
void require_finite(const Matrix<S>& m, const char* what) {
    if (!all_finite(m)) throw std::invalid_argument(std::string(what) + ": non-finite values");
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 is bit-exact by the standard; the
// distributions are hand-rolled because std:: distributions are not.
// ---------------------------------------------------------------------------

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t bits() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller, one value per call (the spare is kept).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    // Uniform integer in [0, n) by rejection; exact and deterministic.
    std::uint64_t bounded(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("bounded: n must be positive");
        std::uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
        for (;;) {
            std::uint64_t r = engine_();
            if (r >= threshold) return r % n;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(bounded(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Mixes a base seed with stream labels (layer index, step, ...) so that
// sub-streams are decorrelated but reproducible. splitmix64 finalizer.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (a + 1) + 0xbf58476d1ce4e5b9ULL * (b + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename S>
S logistic(S x) {
    return S(1) / (S(1) + std::exp(-x));
}

template <typename S>
S silu(S x) {
    return x * logistic(x);
}

// d/dx silu(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x)))
template <typename S>
S silu_grad(S x) {
    S s = logistic(x);
    return s * (S(1) + x * (S(1) - s));
}

// ---------------------------------------------------------------------------
// Dense kernels. "nn": C = A*B, "nt": C = A*B^T, "tn": C = A^T*B.
// All accumulate into C so backward passes can sum contributions;
// callers zero C first when they want a plain product.
// Loop orders keep the k-accumulation identical between the blocked and
// streaming paths, which the state-carry exactness tests rely on.
// ---------------------------------------------------------------------------

template <typename S>
void matmul_nn_acc(const Matrix<S>& a, const Matrix<S>& b, Matrix<S>& c) {
    require(a.cols == b.rows, "matmul_nn: inner dimension mismatch");
    require(c.rows == a.rows && c.cols == b.cols, "matmul_nn: output shape mismatch");
    for (std::size_t i = 0; i < a.rows; ++i) {
        const S* arow = a.row(i);
        S* crow = c.row(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            S aik = arow[k];
            const S* brow = b.row(k);
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
}

template <typename S>
void matmul_nt_acc(const Matrix<S>& a, const Matrix<S>& b, Matrix<S>& c) {
    require(a.cols == b.cols, "matmul_nt: inner dimension mismatch");
    require(c.rows == a.rows && c.cols == b.rows, "matmul_nt: output shape mismatch");
    for (std::size_t i = 0; i < a.rows; ++i) {
        const S* arow = a.row(i);
        S* crow = c.row(i);
        for (std::size_t j = 0; j < b.rows; ++j) {
            const S* brow = b.row(j);
            S acc = S(0);
            for (std::size_t k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
            crow[j] += acc;
        }
    }
}

template <typename S>
void matmul_tn_acc(const Matrix<S>& a, const Matrix<S>& b, Matrix<S>& c) {
    require(a.rows == b.rows, "matmul_tn: inner dimension mismatch");
    require(c.rows == a.cols && c.cols == b.cols, "matmul_tn: output shape mismatch");
    for (std::size_t k = 0; k < a.rows; ++k) {
        const S* arow = a.row(k);
        const S* brow = b.row(k);
        for (std::size_t i = 0; i < a.cols; ++i) {
            S aki = arow[i];
            S* crow = c.row(i);
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
        }
    }
}

template <typename S>
Matrix<S> matmul_nn(const Matrix<S>& a, const Matrix<S>& b) {
    Matrix<S> c(a.rows, b.cols);
    matmul_nn_acc(a, b, c);
    return c;
}

// y = x*W + b, the ubiquitous projection. W is (in x out), b has length out.
template <typename S>
Matrix<S> linear_forward(const Matrix<S>& x, const Matrix<S>& w, std::span<const S> b) {
    require(x.cols == w.rows, "linear: input/weight dimension mismatch");
    require(b.empty() || b.size() == w.cols, "linear: bias length mismatch");
    Matrix<S> y(x.rows, w.cols);
    if (!b.empty()) {
        for (std::size_t i = 0; i < y.rows; ++i) std::copy(b.begin(), b.end(), y.row(i));
    }
    matmul_nn_acc(x, w, y);
    return y;
}

// Accumulates dx += dy*W^T, dw += x^T*dy, db += colsum(dy).
template <typename S>
void linear_backward(const Matrix<S>& x, const Matrix<S>& w, const Matrix<S>& dy,
                     Matrix<S>& dx, Matrix<S>& dw, std::span<S> db) {
    matmul_nt_acc(dy, w, dx);
    matmul_tn_acc(x, dy, dw);
    if (!db.empty()) {
        for (std::size_t i = 0; i < dy.rows; ++i) {
            const S* r = dy.row(i);
            for (std::size_t j = 0; j < dy.cols; ++j) db[j] += r[j];
        }
    }
}

}  // namespace megalodon
