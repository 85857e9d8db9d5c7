#pragma once

// Complex exponential moving average. Each of the d input dimensions is
// expanded to h complex hidden channels driven by the recurrence
//
//   u_t = beta_j * x_{t,j}
//   h_t = alpha * e^{i*theta} .* u_t + (1 - alpha .* delta) * e^{i*theta} .* h_{t-1}
//   y_{t,j} = Re(eta_j^T h_t)
//
// alpha and delta are stored unconstrained and mapped into (0,1) by the
// logistic, so the recurrence multiplier (1 - alpha.*delta) e^{i*theta}
// always has modulus < 1. Complex values are explicit (re, im) pairs.
//
// Three evaluation routes: a stateful per-timestep recurrence, a
// materialized convolution kernel, and an FFT convolution of that kernel
// (zero initial state only). Analytic backward passes exist for the
// recurrent and FFT routes.

#include <cstddef>
#include <string>
#include <utility>

#include "megalodon/core.hpp"
#include "megalodon/numerics.hpp"

namespace megalodon {

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

template <typename S>
struct CemaParams {
    std::size_t d = 0;
    std::size_t h = 0;
    Matrix<S> alpha_raw;  // (d x h), logistic-mapped decay
    Matrix<S> delta_raw;  // (d x h), logistic-mapped damping
    Matrix<S> beta;       // (d x h) expansion
    Matrix<S> eta_re;     // (d x h) output projection, real part
    Matrix<S> eta_im;     // (d x h) output projection, imaginary part
    std::vector<S> omega;  // (d) base angles

    static CemaParams zeros(std::size_t d, std::size_t h) {
        CemaParams p;
        p.d = d;
        p.h = h;
        p.alpha_raw = Matrix<S>(d, h);
        p.delta_raw = Matrix<S>(d, h);
        p.beta = Matrix<S>(d, h);
        p.eta_re = Matrix<S>(d, h);
        p.eta_im = Matrix<S>(d, h);
        p.omega.assign(d, S(0));
        return p;
    }

    // Mapped alpha ~ 0.9 and delta ~ 0.3 with small noise, omega uniform in
    // (0,1), beta/eta zero-mean Gaussian with variance 1/h.
    static CemaParams init(std::size_t d, std::size_t h, Rng& rng) {
        CemaParams p = zeros(d, h);
        const double logit_09 = std::log(0.9 / 0.1);
        const double logit_03 = std::log(0.3 / 0.7);
        const double sd = 1.0 / std::sqrt(static_cast<double>(h));
        for (std::size_t j = 0; j < d; ++j) {
            for (std::size_t k = 0; k < h; ++k) {
                p.alpha_raw(j, k) = static_cast<S>(logit_09 + 0.1 * rng.normal());
                p.delta_raw(j, k) = static_cast<S>(logit_03 + 0.1 * rng.normal());
                p.beta(j, k) = static_cast<S>(sd * rng.normal());
                p.eta_re(j, k) = static_cast<S>(sd * rng.normal());
                p.eta_im(j, k) = static_cast<S>(sd * rng.normal());
            }
            p.omega[j] = static_cast<S>(rng.uniform());
        }
        return p;
    }
};

template <typename S>
struct CemaState {
    Matrix<S> h_re;  // (d x h)
    Matrix<S> h_im;  // (d x h)
    std::size_t t_offset = 0;

    static CemaState zero(std::size_t d, std::size_t h) {
        CemaState s;
        s.h_re = Matrix<S>(d, h);
        s.h_im = Matrix<S>(d, h);
        return s;
    }

    bool is_zero() const {
        if (t_offset != 0) return false;
        for (S v : h_re.data)
            if (v != S(0)) return false;
        for (S v : h_im.data)
            if (v != S(0)) return false;
        return true;
    }
};

// theta_{j,k} = (2*pi*k/h) * omega_j for k = 1..h (stored at index k-1).
template <typename S>
Matrix<S> theta_angles(const CemaParams<S>& p) {
    require(p.h >= 1, "theta_angles: h must be >= 1");
    Matrix<S> theta(p.d, p.h);
    for (std::size_t j = 0; j < p.d; ++j) {
        for (std::size_t k = 0; k < p.h; ++k) {
            theta(j, k) = static_cast<S>(kTwoPi * static_cast<double>(k + 1) /
                                         static_cast<double>(p.h)) * p.omega[j];
        }
    }
    return theta;
}

// Mapped coefficients: a = alpha*e^{i theta} (input gain) and
// q = (1 - alpha*delta)*e^{i theta} (recurrence multiplier).
template <typename S>
struct CemaCoeffs {
    Matrix<S> alpha, delta;      // logistic-mapped
    Matrix<S> cos_t, sin_t;      // cos/sin of theta
    Matrix<S> a_re, a_im;
    Matrix<S> q_re, q_im;
};

template <typename S>
CemaCoeffs<S> cema_coeffs(const CemaParams<S>& p) {
    CemaCoeffs<S> c;
    const Matrix<S> theta = theta_angles(p);
    const std::size_t d = p.d, h = p.h;
    c.alpha = Matrix<S>(d, h);
    c.delta = Matrix<S>(d, h);
    c.cos_t = Matrix<S>(d, h);
    c.sin_t = Matrix<S>(d, h);
    c.a_re = Matrix<S>(d, h);
    c.a_im = Matrix<S>(d, h);
    c.q_re = Matrix<S>(d, h);
    c.q_im = Matrix<S>(d, h);
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t k = 0; k < h; ++k) {
            const S al = logistic(p.alpha_raw(j, k));
            const S de = logistic(p.delta_raw(j, k));
            const S ct = std::cos(theta(j, k));
            const S st = std::sin(theta(j, k));
            c.alpha(j, k) = al;
            c.delta(j, k) = de;
            c.cos_t(j, k) = ct;
            c.sin_t(j, k) = st;
            c.a_re(j, k) = al * ct;
            c.a_im(j, k) = al * st;
            const S r = S(1) - al * de;
            c.q_re(j, k) = r * ct;
            c.q_im(j, k) = r * st;
        }
    }
    return c;
}

template <typename S>
void check_cema_dims(const Matrix<S>& x, const CemaParams<S>& p, const CemaState<S>& state) {
    if (x.cols != p.d) {
        throw std::invalid_argument("cema: feature axis mismatch, x has " + std::to_string(x.cols) +
                                    " dims but params expect d=" + std::to_string(p.d));
    }
    if (state.h_re.rows != p.d || state.h_re.cols != p.h || !state.h_re.same_shape(state.h_im)) {
        throw std::invalid_argument("cema: state axis mismatch, expected (d=" + std::to_string(p.d) +
                                    ", h=" + std::to_string(p.h) + ")");
    }
}

// Forward caches for backprop-through-time: hidden states for every timestep,
// with row 0 holding the incoming state.
template <typename S>
struct CemaRecurrentCache {
    Matrix<S> x;                 // (n x d)
    Matrix<S> h_re_all, h_im_all;  // (n+1 x d*h)
    CemaCoeffs<S> coeffs;
};

template <typename S>
std::pair<Matrix<S>, CemaState<S>> cema_forward_recurrent(const Matrix<S>& x, const CemaParams<S>& p,
                                                          const CemaState<S>& state,
                                                          CemaRecurrentCache<S>* cache = nullptr) {
    check_cema_dims(x, p, state);
    require_finite(x, "cema input");

    const std::size_t n = x.rows, d = p.d, h = p.h;
    const CemaCoeffs<S> co = cema_coeffs(p);

    Matrix<S> y(n, d);
    CemaState<S> out = state;
    out.t_offset = state.t_offset + n;

    if (cache) {
        cache->x = x;
        cache->h_re_all = Matrix<S>(n + 1, d * h);
        cache->h_im_all = Matrix<S>(n + 1, d * h);
        for (std::size_t j = 0; j < d; ++j) {
            for (std::size_t k = 0; k < h; ++k) {
                cache->h_re_all(0, j * h + k) = state.h_re(j, k);
                cache->h_im_all(0, j * h + k) = state.h_im(j, k);
            }
        }
    }

    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t j = 0; j < d; ++j) {
            const S xt = x(t, j);
            S yt = S(0);
            for (std::size_t k = 0; k < h; ++k) {
                const S u = p.beta(j, k) * xt;
                const S hr = out.h_re(j, k), hi = out.h_im(j, k);
                const S new_r = co.a_re(j, k) * u + co.q_re(j, k) * hr - co.q_im(j, k) * hi;
                const S new_i = co.a_im(j, k) * u + co.q_re(j, k) * hi + co.q_im(j, k) * hr;
                out.h_re(j, k) = new_r;
                out.h_im(j, k) = new_i;
                yt += p.eta_re(j, k) * new_r - p.eta_im(j, k) * new_i;
                if (cache) {
                    cache->h_re_all(t + 1, j * h + k) = new_r;
                    cache->h_im_all(t + 1, j * h + k) = new_i;
                }
            }
            y(t, j) = yt;
        }
    }

    if (cache) cache->coeffs = co;
    return {std::move(y), std::move(out)};
}

namespace detail {

// Chain rule from gradients w.r.t. the mapped coefficients a and q down to
// the stored parameters (raw alpha/delta through the logistic, omega through
// theta). ga/gq are (d x h) accumulated upstream gradients.
template <typename S>
void cema_coeff_grads_to_params(const CemaParams<S>& p, const CemaCoeffs<S>& co,
                                const Matrix<S>& ga_re, const Matrix<S>& ga_im,
                                const Matrix<S>& gq_re, const Matrix<S>& gq_im,
                                CemaParams<S>& grads) {
    for (std::size_t j = 0; j < p.d; ++j) {
        S gomega = S(0);
        for (std::size_t k = 0; k < p.h; ++k) {
            const S al = co.alpha(j, k), de = co.delta(j, k);
            const S ct = co.cos_t(j, k), st = co.sin_t(j, k);
            const S r = S(1) - al * de;
            const S gq_dot_e = gq_re(j, k) * ct + gq_im(j, k) * st;
            const S galpha = ga_re(j, k) * ct + ga_im(j, k) * st - de * gq_dot_e;
            const S gdelta = -al * gq_dot_e;
            const S gtheta = al * (-ga_re(j, k) * st + ga_im(j, k) * ct) +
                             r * (-gq_re(j, k) * st + gq_im(j, k) * ct);
            grads.alpha_raw(j, k) += galpha * al * (S(1) - al);
            grads.delta_raw(j, k) += gdelta * de * (S(1) - de);
            gomega += gtheta * static_cast<S>(kTwoPi * static_cast<double>(k + 1) /
                                              static_cast<double>(p.h));
        }
        grads.omega[j] += gomega;
    }
}

}  // namespace detail

// Backprop through the recurrence. Accumulates into grads and dx.
// Gradient w.r.t. the incoming state is not propagated (training always
// starts windows from the zero state).
template <typename S>
void cema_backward_recurrent(const CemaParams<S>& p, const CemaRecurrentCache<S>& cache,
                             const Matrix<S>& dy, Matrix<S>& dx, CemaParams<S>& grads) {
    const std::size_t n = cache.x.rows, d = p.d, h = p.h;
    require(dy.rows == n && dy.cols == d, "cema backward: dy shape mismatch");
    const CemaCoeffs<S>& co = cache.coeffs;

    Matrix<S> gh_re(d, h), gh_im(d, h);
    Matrix<S> ga_re(d, h), ga_im(d, h), gq_re(d, h), gq_im(d, h);

    for (std::size_t t = n; t-- > 0;) {
        for (std::size_t j = 0; j < d; ++j) {
            const S g = dy(t, j);
            const S xt = cache.x(t, j);
            S gx = S(0);
            for (std::size_t k = 0; k < h; ++k) {
                const std::size_t col = j * h + k;
                const S hr = cache.h_re_all(t + 1, col);
                const S hi = cache.h_im_all(t + 1, col);
                // y_{t,j} = sum_k eta_re*h_re - eta_im*h_im
                S ghr = gh_re(j, k) + g * p.eta_re(j, k);
                S ghi = gh_im(j, k) - g * p.eta_im(j, k);
                grads.eta_re(j, k) += g * hr;
                grads.eta_im(j, k) -= g * hi;

                const S u = p.beta(j, k) * xt;
                ga_re(j, k) += ghr * u;
                ga_im(j, k) += ghi * u;
                const S gu = ghr * co.a_re(j, k) + ghi * co.a_im(j, k);
                grads.beta(j, k) += gu * xt;
                gx += gu * p.beta(j, k);

                const S pr = cache.h_re_all(t, col);
                const S pi = cache.h_im_all(t, col);
                gq_re(j, k) += ghr * pr + ghi * pi;
                gq_im(j, k) += -ghr * pi + ghi * pr;
                // propagate to h_{t-1}: multiply by conj(q)
                gh_re(j, k) = ghr * co.q_re(j, k) + ghi * co.q_im(j, k);
                gh_im(j, k) = -ghr * co.q_im(j, k) + ghi * co.q_re(j, k);
            }
            dx(t, j) += gx;
        }
    }

    detail::cema_coeff_grads_to_params(p, co, ga_re, ga_im, gq_re, gq_im, grads);
}

// Materialized convolution kernel: K_j[s] = Re(sum_k eta * a * beta * q^s).
// Convolving column j of a zero-state input with K_j reproduces the
// recurrence.
template <typename S>
Matrix<S> cema_kernel(const CemaParams<S>& p, std::size_t l) {
    require(l >= 1, "cema_kernel: kernel length must be >= 1");
    const CemaCoeffs<S> co = cema_coeffs(p);
    Matrix<S> kernel(p.d, l);
    for (std::size_t j = 0; j < p.d; ++j) {
        for (std::size_t k = 0; k < p.h; ++k) {
            // c = eta * a * beta
            const S b = p.beta(j, k);
            const S c_re = b * (p.eta_re(j, k) * co.a_re(j, k) - p.eta_im(j, k) * co.a_im(j, k));
            const S c_im = b * (p.eta_re(j, k) * co.a_im(j, k) + p.eta_im(j, k) * co.a_re(j, k));
            S p_re = S(1), p_im = S(0);  // q^s
            for (std::size_t s = 0; s < l; ++s) {
                kernel(j, s) += c_re * p_re - c_im * p_im;
                const S nr = p_re * co.q_re(j, k) - p_im * co.q_im(j, k);
                p_im = p_re * co.q_im(j, k) + p_im * co.q_re(j, k);
                p_re = nr;
            }
        }
    }
    return kernel;
}

// FFT evaluation of the zero-state CEMA: per-dimension causal convolution of
// x[:,j] with cema_kernel(p, n)[j].
template <typename S>
Matrix<S> cema_forward_fft(const Matrix<S>& x, const CemaParams<S>& p) {
    check_cema_dims(x, p, CemaState<S>::zero(p.d, p.h));
    require_finite(x, "cema input");
    const std::size_t n = x.rows, d = p.d;
    const Matrix<S> kernel = cema_kernel(p, n);

    Matrix<S> y(n, d);
    std::vector<S> col(n);
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t t = 0; t < n; ++t) col[t] = x(t, j);
        const std::vector<S> out =
            causal_fft_conv<S>(col, std::span<const S>(kernel.row(j), n));
        for (std::size_t t = 0; t < n; ++t) y(t, j) = out[t];
    }
    return y;
}

template <typename S>
Matrix<S> cema_forward_fft(const Matrix<S>& x, const CemaParams<S>& p, const CemaState<S>& state) {
    if (!state.is_zero()) throw std::invalid_argument("fft path requires zero state");
    return cema_forward_fft(x, p);
}

// Backprop through the FFT route. dK is recovered by correlating dy with x,
// dx by correlating dy with the kernel; dK then chains through the kernel's
// closed form (powers of q) to the parameters.
template <typename S>
void cema_backward_fft(const CemaParams<S>& p, const Matrix<S>& x, const Matrix<S>& dy,
                       Matrix<S>& dx, CemaParams<S>& grads) {
    const std::size_t n = x.rows, d = p.d, h = p.h;
    require(dy.rows == n && dy.cols == d, "cema backward: dy shape mismatch");
    const CemaCoeffs<S> co = cema_coeffs(p);
    const Matrix<S> kernel = cema_kernel(p, n);

    Matrix<S> ga_re(d, h), ga_im(d, h), gq_re(d, h), gq_im(d, h);
    std::vector<S> dy_rev(n), xcol(n), dk(n);

    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t t = 0; t < n; ++t) {
            dy_rev[t] = dy(n - 1 - t, j);
            xcol[t] = x(t, j);
        }
        // dK_j[s] = sum_t dy[t]*x[t-s]
        const std::vector<S> corr_x = causal_fft_conv<S>(dy_rev, xcol);
        for (std::size_t s = 0; s < n; ++s) dk[s] = corr_x[n - 1 - s];
        // dx_j[t] = sum_s K[s]*dy[t+s]
        const std::vector<S> corr_k =
            causal_fft_conv<S>(dy_rev, std::span<const S>(kernel.row(j), n));
        for (std::size_t t = 0; t < n; ++t) dx(t, j) += corr_k[n - 1 - t];

        for (std::size_t k = 0; k < h; ++k) {
            const S b = p.beta(j, k);
            const S er = p.eta_re(j, k), ei = p.eta_im(j, k);
            const S ar = co.a_re(j, k), ai = co.a_im(j, k);
            const S c_re = b * (er * ar - ei * ai);
            const S c_im = b * (er * ai + ei * ar);

            S gc_re = S(0), gc_im = S(0), gqr = S(0), gqi = S(0);
            S p_re = S(1), p_im = S(0);       // q^s
            S prev_re = S(0), prev_im = S(0);  // q^{s-1}
            for (std::size_t s = 0; s < n; ++s) {
                const S g = dk[s];
                gc_re += g * p_re;
                gc_im -= g * p_im;
                if (s >= 1) {
                    // d K[s] / d q = c * s * q^{s-1}
                    const S m_re = static_cast<S>(s) * prev_re;
                    const S m_im = static_cast<S>(s) * prev_im;
                    gqr += g * (c_re * m_re - c_im * m_im);
                    gqi -= g * (c_re * m_im + c_im * m_re);
                }
                prev_re = p_re;
                prev_im = p_im;
                const S nr = p_re * co.q_re(j, k) - p_im * co.q_im(j, k);
                p_im = p_re * co.q_im(j, k) + p_im * co.q_re(j, k);
                p_re = nr;
            }

            grads.eta_re(j, k) += b * (gc_re * ar + gc_im * ai);
            grads.eta_im(j, k) += b * (-gc_re * ai + gc_im * ar);
            grads.beta(j, k) += gc_re * (er * ar - ei * ai) + gc_im * (er * ai + ei * ar);
            ga_re(j, k) += b * (gc_re * er + gc_im * ei);
            ga_im(j, k) += b * (-gc_re * ei + gc_im * er);
            gq_re(j, k) += gqr;
            gq_im(j, k) += gqi;
        }
    }

    detail::cema_coeff_grads_to_params(p, co, ga_re, ga_im, gq_re, gq_im, grads);
}

}  // namespace megalodon
