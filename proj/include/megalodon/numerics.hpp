#pragma once

// Dependency-free numeric primitives: radix-2 FFT and FFT-based causal
// convolution, masked stable softmax, compensated (Kahan) summation, and a
// central-difference gradient checker. Everything here is a pure function;
// all paths are safe to call concurrently.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "megalodon/core.hpp"

namespace megalodon {

// ---------------------------------------------------------------------------
// Complex spectra as explicit (re, im) arrays.
// ---------------------------------------------------------------------------

template <typename S>
struct ComplexVector {
    std::vector<S> re;
    std::vector<S> im;

    ComplexVector() = default;
    explicit ComplexVector(std::size_t n) : re(n, S(0)), im(n, S(0)) {}

    std::size_t size() const {
        require(re.size() == im.size(), "ComplexVector: re/im length mismatch");
        return re.size();
    }
};

inline std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

// In-place iterative Cooley-Tukey. Length must be a power of two.
// Twiddles are generated in double regardless of S.
template <typename S>
void fft_inplace(ComplexVector<S>& a, bool inverse) {
    const std::size_t n = a.size();
    require(n > 0 && (n & (n - 1)) == 0, "fft: length must be a power of two");
    S* re = a.re.data();
    S* im = a.im.data();

    // bit-reversal permutation
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(re[i], re[j]);
            std::swap(im[i], im[j]);
        }
    }

    const double sign = inverse ? 1.0 : -1.0;
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = sign * 2.0 * 3.141592653589793238462643383279502884 / static_cast<double>(len);
        const S wr = static_cast<S>(std::cos(ang));
        const S wi = static_cast<S>(std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            S cur_r = S(1), cur_i = S(0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                const std::size_t u = i + k;
                const std::size_t v = i + k + len / 2;
                const S vr = re[v] * cur_r - im[v] * cur_i;
                const S vi = re[v] * cur_i + im[v] * cur_r;
                re[v] = re[u] - vr;
                im[v] = im[u] - vi;
                re[u] += vr;
                im[u] += vi;
                const S nr = cur_r * wr - cur_i * wi;
                cur_i = cur_r * wi + cur_i * wr;
                cur_r = nr;
            }
        }
    }

    if (inverse) {
        const S inv_n = S(1) / static_cast<S>(n);
        for (std::size_t i = 0; i < n; ++i) {
            re[i] *= inv_n;
            im[i] *= inv_n;
        }
    }
}

// Causal convolution via zero-padded FFT: out[t] = sum_s kernel[s]*signal[t-s].
// Output length equals the signal length.
template <typename S>
std::vector<S> causal_fft_conv(std::span<const S> signal, std::span<const S> kernel) {
    if (signal.empty() || kernel.empty()) throw std::invalid_argument("empty sequence");
    require(all_finite(signal) && all_finite(kernel), "causal_fft_conv: non-finite input");

    const std::size_t n = signal.size();
    const std::size_t l = kernel.size();
    const std::size_t m = next_pow2(n + l - 1);

    ComplexVector<S> a(m), b(m);
    std::copy(signal.begin(), signal.end(), a.re.begin());
    std::copy(kernel.begin(), kernel.end(), b.re.begin());

    fft_inplace(a, false);
    fft_inplace(b, false);
    for (std::size_t i = 0; i < m; ++i) {
        const S r = a.re[i] * b.re[i] - a.im[i] * b.im[i];
        const S im = a.re[i] * b.im[i] + a.im[i] * b.re[i];
        a.re[i] = r;
        a.im[i] = im;
    }
    fft_inplace(a, true);

    return std::vector<S>(a.re.begin(), a.re.begin() + static_cast<std::ptrdiff_t>(n));
}

// ---------------------------------------------------------------------------
// Masked softmax with max-subtraction. Masked entries are excluded before the
// max (treated as -inf) and come out exactly zero.
// ---------------------------------------------------------------------------

template <typename S>
std::vector<S> stable_softmax(std::span<const S> scores, std::span<const std::uint8_t> mask) {
    require(mask.empty() || mask.size() == scores.size(), "stable_softmax: mask length mismatch");
    const std::size_t m = scores.size();

    S max_val = S(0);
    bool any = false;
    for (std::size_t i = 0; i < m; ++i) {
        if (!mask.empty() && !mask[i]) continue;
        if (!any || scores[i] > max_val) max_val = scores[i];
        any = true;
    }
    if (!any) throw std::invalid_argument("fully masked row");

    std::vector<S> out(m, S(0));
    S denom = S(0);
    for (std::size_t i = 0; i < m; ++i) {
        if (!mask.empty() && !mask[i]) continue;
        const S e = std::exp(scores[i] - max_val);
        out[i] = e;
        denom += e;
    }
    for (std::size_t i = 0; i < m; ++i) out[i] /= denom;
    return out;
}

template <typename S>
std::vector<S> stable_softmax(std::span<const S> scores) {
    return stable_softmax(scores, std::span<const std::uint8_t>{});
}

// ---------------------------------------------------------------------------
// Kahan summation. The accumulator form is reused by the streaming norm
// statistics; the free function sums a whole sequence.
// ---------------------------------------------------------------------------

template <typename S>
struct KahanAccumulator {
    S sum = S(0);
    S comp = S(0);

    void add(S value) {
        const S y = value - comp;
        const S t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
};

template <typename S>
S kahan_sum(std::span<const S> values) {
    KahanAccumulator<S> acc;
    for (S v : values) acc.add(v);
    return acc.sum;
}

// ---------------------------------------------------------------------------
// Central-difference gradient of a scalar function. Used as the independent
// oracle for every analytic backward pass in the project.
// ---------------------------------------------------------------------------

inline std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                            std::span<const double> x0, double eps) {
    require(eps > 0.0, "finite_diff_grad: eps must be positive");
    std::vector<double> x(x0.begin(), x0.end());
    std::vector<double> grad(x.size(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + eps;
        const double fp = f(x);
        x[i] = saved - eps;
        const double fm = f(x);
        x[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw std::runtime_error("finite_diff_grad: non-finite value at coordinate " + std::to_string(i));
        }
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    return grad;
}

}  // namespace megalodon
