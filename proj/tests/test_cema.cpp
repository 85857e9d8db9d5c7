#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "megalodon/cema.hpp"
#include "megalodon/reference.hpp"
#include "test_util.hpp"

using namespace megalodon;
using megatest::FlatView;

namespace {

// logistic(40) rounds to exactly 1.0 in both float and double, so the
// boundary examples (alpha = 1, delta = 1) are reachable through the raw
// parameterization.
constexpr double kRawOne = 40.0;

CemaParams<double> scalar_params(double alpha_raw, double delta_raw, double beta, double eta_re,
                                 double eta_im = 0.0, double omega = 0.0) {
    auto p = CemaParams<double>::zeros(1, 1);
    p.alpha_raw(0, 0) = alpha_raw;
    p.delta_raw(0, 0) = delta_raw;
    p.beta(0, 0) = beta;
    p.eta_re(0, 0) = eta_re;
    p.eta_im(0, 0) = eta_im;
    p.omega[0] = omega;
    return p;
}

Matrix<double> random_input(Rng& rng, std::size_t n, std::size_t d, double scale = 1.0) {
    Matrix<double> x(n, d);
    for (auto& v : x.data) v = scale * rng.normal();
    return x;
}

FlatView cema_param_view(CemaParams<double>& p) {
    FlatView v;
    v.add(p.alpha_raw);
    v.add(p.delta_raw);
    v.add(p.beta);
    v.add(p.eta_re);
    v.add(p.eta_im);
    v.add(p.omega);
    return v;
}

}  // namespace

TEST_CASE("theta_angles examples", "[cema]") {
    auto p = CemaParams<double>::zeros(2, 4);
    p.omega[0] = 0.0;
    p.omega[1] = 1.0;
    auto theta = theta_angles(p);
    for (std::size_t k = 0; k < 4; ++k) CHECK(theta(0, k) == 0.0);
    const double pi = kTwoPi / 2.0;
    CHECK(theta(1, 0) == Catch::Approx(pi / 2.0));
    CHECK(theta(1, 1) == Catch::Approx(pi));
    CHECK(theta(1, 2) == Catch::Approx(3.0 * pi / 2.0));
    CHECK(theta(1, 3) == Catch::Approx(2.0 * pi));

    auto p1 = CemaParams<double>::zeros(1, 1);
    p1.omega[0] = 0.5;
    CHECK(theta_angles(p1)(0, 0) == Catch::Approx(pi));
}

TEST_CASE("memoryless reduction alpha=delta=1", "[cema]") {
    auto p = scalar_params(kRawOne, kRawOne, 1.0, 1.0);
    Matrix<double> x(2, 1);
    x(0, 0) = 2.0;
    x(1, 0) = -3.0;
    auto [y, st] = cema_forward_recurrent(x, p, CemaState<double>::zero(1, 1));
    CHECK(y(0, 0) == 2.0);
    CHECK(y(1, 0) == -3.0);
    CHECK(st.t_offset == 2);
}

TEST_CASE("scalar EMA closed form", "[cema]") {
    auto p = scalar_params(0.0, kRawOne, 1.0, 1.0);  // alpha = 0.5, delta = 1
    Matrix<double> x(3, 1, 1.0);
    auto [y, st] = cema_forward_recurrent(x, p, CemaState<double>::zero(1, 1));
    CHECK(y(0, 0) == Catch::Approx(0.5).margin(1e-15));
    CHECK(y(1, 0) == Catch::Approx(0.75).margin(1e-15));
    CHECK(y(2, 0) == Catch::Approx(0.875).margin(1e-15));
}

TEST_CASE("kernel geometric decay", "[cema]") {
    auto p = scalar_params(0.0, kRawOne, 1.0, 1.0);
    auto k = cema_kernel(p, 3);
    CHECK(k(0, 0) == Catch::Approx(0.5).margin(1e-15));
    CHECK(k(0, 1) == Catch::Approx(0.25).margin(1e-15));
    CHECK(k(0, 2) == Catch::Approx(0.125).margin(1e-15));
}

TEST_CASE("kernel single tap when alpha=delta=1", "[cema]") {
    auto p = scalar_params(kRawOne, kRawOne, 1.3, 0.7, 0.2, 0.37);
    auto k = cema_kernel(p, 5);
    const double theta = kTwoPi * 0.37;  // h=1, k=1
    const double expect = 1.3 * (0.7 * std::cos(theta) - 0.2 * std::sin(theta));
    CHECK(k(0, 0) == Catch::Approx(expect).margin(1e-14));
    for (std::size_t s = 1; s < 5; ++s) CHECK(k(0, s) == 0.0);
}

TEST_CASE("kernel magnitude bounded by decaying envelope", "[cema][property]") {
    Rng rng(31);
    auto p = CemaParams<double>::init(3, 5, rng);
    const std::size_t L = 48;
    auto kernel = cema_kernel(p, L);
    auto co = cema_coeffs(p);
    for (std::size_t j = 0; j < p.d; ++j) {
        for (std::size_t s = 0; s < L; ++s) {
            double envelope = 0.0;
            for (std::size_t k = 0; k < p.h; ++k) {
                const double eta_mag = std::hypot(p.eta_re(j, k), p.eta_im(j, k));
                const double q_mag = std::hypot(co.q_re(j, k), co.q_im(j, k));
                envelope += eta_mag * std::abs(p.beta(j, k)) * co.alpha(j, k) * std::pow(q_mag, s);
            }
            CHECK(std::abs(kernel(j, s)) <= envelope + 1e-12);
        }
        // envelope itself decays geometrically: |q| < 1 for every k
        for (std::size_t k = 0; k < p.h; ++k) {
            CHECK(std::hypot(co.q_re(j, k), co.q_im(j, k)) < 1.0);
        }
    }
}

TEST_CASE("recurrence multiplier modulus below one across raw space", "[cema][property]") {
    Rng rng(77);
    // Strictly contractive wherever alpha*delta stays above machine epsilon;
    // never expanding even when the product underflows and 1-alpha*delta
    // rounds to 1.
    for (int trial = 0; trial < 200; ++trial) {
        auto p = CemaParams<double>::zeros(1, 1);
        p.alpha_raw(0, 0) = rng.uniform(-12.0, 12.0);
        p.delta_raw(0, 0) = rng.uniform(-12.0, 12.0);
        p.omega[0] = rng.uniform(-5.0, 5.0);
        auto co = cema_coeffs(p);
        CHECK(std::hypot(co.q_re(0, 0), co.q_im(0, 0)) < 1.0);
    }
    for (int trial = 0; trial < 200; ++trial) {
        auto p = CemaParams<double>::zeros(1, 1);
        p.alpha_raw(0, 0) = rng.uniform(-60.0, 60.0);
        p.delta_raw(0, 0) = rng.uniform(-60.0, 60.0);
        p.omega[0] = rng.uniform(-5.0, 5.0);
        auto co = cema_coeffs(p);
        CHECK(std::hypot(co.q_re(0, 0), co.q_im(0, 0)) <= 1.0);
    }
}

TEST_CASE("dual-path equivalence recurrent vs fft", "[cema]") {
    Rng rng(101);
    auto p = CemaParams<double>::init(4, 8, rng);
    auto x = random_input(rng, 32, 4);
    auto [y_rec, st] = cema_forward_recurrent(x, p, CemaState<double>::zero(4, 8));
    auto y_fft = cema_forward_fft(x, p);
    CHECK(megatest::max_abs_diff(y_rec, y_fft) < 1e-10);

    // and against the kernel evaluated by direct convolution
    auto kernel = cema_kernel(p, x.rows);
    for (std::size_t j = 0; j < 4; ++j) {
        std::vector<double> col(x.rows);
        for (std::size_t t = 0; t < x.rows; ++t) col[t] = x(t, j);
        auto direct = reference::direct_causal_conv<double>(
            col, std::span<const double>(kernel.row(j), x.rows));
        for (std::size_t t = 0; t < x.rows; ++t)
            CHECK(y_rec(t, j) == Catch::Approx(direct[t]).margin(1e-10));
    }
}

TEST_CASE("dual-path equivalence holds in 32-bit", "[cema]") {
    Rng rng(55);
    auto pd = CemaParams<double>::init(3, 4, rng);
    CemaParams<float> p = CemaParams<float>::zeros(3, 4);
    for (std::size_t i = 0; i < pd.alpha_raw.data.size(); ++i) {
        p.alpha_raw.data[i] = static_cast<float>(pd.alpha_raw.data[i]);
        p.delta_raw.data[i] = static_cast<float>(pd.delta_raw.data[i]);
        p.beta.data[i] = static_cast<float>(pd.beta.data[i]);
        p.eta_re.data[i] = static_cast<float>(pd.eta_re.data[i]);
        p.eta_im.data[i] = static_cast<float>(pd.eta_im.data[i]);
    }
    for (std::size_t j = 0; j < 3; ++j) p.omega[j] = static_cast<float>(pd.omega[j]);

    Matrix<float> x(64, 3);
    for (auto& v : x.data) v = static_cast<float>(rng.normal());
    auto [y_rec, st] = cema_forward_recurrent(x, p, CemaState<float>::zero(3, 4));
    auto y_fft = cema_forward_fft(x, p);
    float max_err = 0.0f;
    for (std::size_t i = 0; i < y_rec.data.size(); ++i)
        max_err = std::max(max_err, std::abs(y_rec.data[i] - y_fft.data[i]));
    CHECK(max_err < 1e-4f);
}

TEST_CASE("theta=0 reduction equals real damped EMA scan", "[cema]") {
    Rng rng(7);
    auto p = CemaParams<double>::init(3, 4, rng);
    for (std::size_t j = 0; j < p.d; ++j) p.omega[j] = 0.0;
    p.eta_im.set_zero();

    auto x = random_input(rng, 24, 3);
    auto [y, st] = cema_forward_recurrent(x, p, CemaState<double>::zero(3, 4));

    auto co = cema_coeffs(p);
    auto expect = reference::damped_ema_scan(x, co.alpha, co.delta, p.beta, p.eta_re);
    CHECK(megatest::max_abs_diff(y, expect) < 1e-12);
}

TEST_CASE("state carry is bit-exact across splits", "[cema]") {
    Rng rng(13);
    auto p = CemaParams<double>::init(4, 6, rng);
    auto x = random_input(rng, 40, 4);

    auto [y_full, st_full] = cema_forward_recurrent(x, p, CemaState<double>::zero(4, 6));

    Matrix<double> xa(17, 4), xb(23, 4);
    for (std::size_t t = 0; t < 17; ++t)
        for (std::size_t j = 0; j < 4; ++j) xa(t, j) = x(t, j);
    for (std::size_t t = 0; t < 23; ++t)
        for (std::size_t j = 0; j < 4; ++j) xb(t, j) = x(17 + t, j);

    auto [ya, sta] = cema_forward_recurrent(xa, p, CemaState<double>::zero(4, 6));
    auto [yb, stb] = cema_forward_recurrent(xb, p, sta);

    for (std::size_t t = 0; t < 17; ++t)
        for (std::size_t j = 0; j < 4; ++j) REQUIRE(ya(t, j) == y_full(t, j));
    for (std::size_t t = 0; t < 23; ++t)
        for (std::size_t j = 0; j < 4; ++j) REQUIRE(yb(t, j) == y_full(17 + t, j));
    REQUIRE(stb.t_offset == 40);
    for (std::size_t i = 0; i < st_full.h_re.data.size(); ++i) {
        REQUIRE(stb.h_re.data[i] == st_full.h_re.data[i]);
        REQUIRE(stb.h_im.data[i] == st_full.h_im.data[i]);
    }
}

TEST_CASE("fft path zero input and impulse response", "[cema]") {
    Rng rng(3);
    auto p = CemaParams<double>::init(2, 3, rng);
    Matrix<double> zero(16, 2);
    auto y0 = cema_forward_fft(zero, p);
    for (double v : y0.data) CHECK(std::abs(v) < 1e-14);

    Matrix<double> imp(16, 2);
    imp(0, 1) = 2.5;
    auto y = cema_forward_fft(imp, p);
    auto kernel = cema_kernel(p, 16);
    for (std::size_t t = 0; t < 16; ++t) {
        CHECK(y(t, 0) == Catch::Approx(0.0).margin(1e-12));
        CHECK(y(t, 1) == Catch::Approx(2.5 * kernel(1, t)).margin(1e-11));
    }
}

TEST_CASE("fft path rejects nonzero state", "[cema][errors]") {
    Rng rng(5);
    auto p = CemaParams<double>::init(2, 2, rng);
    auto x = random_input(rng, 4, 2);
    auto st = CemaState<double>::zero(2, 2);
    st.h_re(0, 0) = 0.1;
    CHECK_THROWS_WITH(cema_forward_fft(x, p, st), "fft path requires zero state");
    auto st2 = CemaState<double>::zero(2, 2);
    st2.t_offset = 3;
    CHECK_THROWS_WITH(cema_forward_fft(x, p, st2), "fft path requires zero state");
}

TEST_CASE("dimension mismatch errors name the axis", "[cema][errors]") {
    Rng rng(5);
    auto p = CemaParams<double>::init(3, 2, rng);
    auto x = random_input(rng, 4, 2);
    CHECK_THROWS_WITH(cema_forward_recurrent(x, p, CemaState<double>::zero(3, 2)),
                      Catch::Matchers::ContainsSubstring("feature axis"));
    auto x3 = random_input(rng, 4, 3);
    CHECK_THROWS_WITH(cema_forward_recurrent(x3, p, CemaState<double>::zero(2, 2)),
                      Catch::Matchers::ContainsSubstring("state axis"));
}

TEST_CASE("recurrent-path gradients match finite differences", "[cema][grad]") {
    Rng rng(42);
    const std::size_t n = 7, d = 3, h = 4;
    auto p = CemaParams<double>::init(d, h, rng);
    auto x = random_input(rng, n, d);
    Matrix<double> weights = random_input(rng, n, d);  // fixed loss weights

    auto loss_for = [&](const CemaParams<double>& pp, const Matrix<double>& xx) {
        auto [y, st] = cema_forward_recurrent(xx, pp, CemaState<double>::zero(d, h));
        double acc = 0.0;
        for (std::size_t i = 0; i < y.data.size(); ++i) acc += weights.data[i] * y.data[i];
        return acc;
    };

    // analytic
    CemaRecurrentCache<double> cache;
    auto [y, st] = cema_forward_recurrent(x, p, CemaState<double>::zero(d, h), &cache);
    Matrix<double> dx(n, d);
    auto grads = CemaParams<double>::zeros(d, h);
    cema_backward_recurrent(p, cache, weights, dx, grads);

    // finite differences over parameters
    auto view = cema_param_view(p);
    auto gview = cema_param_view(grads);
    auto f = [&](std::span<const double> vals) {
        view.restore(vals);
        return loss_for(p, x);
    };
    auto x0 = view.snapshot();
    auto fd = finite_diff_grad(f, x0, 1e-6);
    view.restore(x0);
    for (std::size_t i = 0; i < fd.size(); ++i) {
        INFO("param coordinate " << i);
        CHECK(megatest::grad_close(*gview.ptrs[i], fd[i]));
    }

    // finite differences over the input
    FlatView xview;
    xview.add(x);
    auto fx = [&](std::span<const double> vals) {
        xview.restore(vals);
        return loss_for(p, x);
    };
    auto xs = xview.snapshot();
    auto fdx = finite_diff_grad(fx, xs, 1e-6);
    xview.restore(xs);
    for (std::size_t i = 0; i < fdx.size(); ++i) {
        INFO("input coordinate " << i);
        CHECK(megatest::grad_close(dx.data[i], fdx[i]));
    }
}

TEST_CASE("fft-path gradients match the recurrent-path gradients", "[cema][grad]") {
    Rng rng(43);
    const std::size_t n = 12, d = 3, h = 4;
    auto p = CemaParams<double>::init(d, h, rng);
    auto x = random_input(rng, n, d);
    Matrix<double> weights = random_input(rng, n, d);

    CemaRecurrentCache<double> cache;
    auto [y_rec, st] = cema_forward_recurrent(x, p, CemaState<double>::zero(d, h), &cache);
    Matrix<double> dx_rec(n, d);
    auto g_rec = CemaParams<double>::zeros(d, h);
    cema_backward_recurrent(p, cache, weights, dx_rec, g_rec);

    Matrix<double> dx_fft(n, d);
    auto g_fft = CemaParams<double>::zeros(d, h);
    cema_backward_fft(p, x, weights, dx_fft, g_fft);

    CHECK(megatest::max_abs_diff(dx_rec, dx_fft) < 1e-9);
    CHECK(megatest::max_abs_diff(g_rec.alpha_raw, g_fft.alpha_raw) < 1e-9);
    CHECK(megatest::max_abs_diff(g_rec.delta_raw, g_fft.delta_raw) < 1e-9);
    CHECK(megatest::max_abs_diff(g_rec.beta, g_fft.beta) < 1e-9);
    CHECK(megatest::max_abs_diff(g_rec.eta_re, g_fft.eta_re) < 1e-9);
    CHECK(megatest::max_abs_diff(g_rec.eta_im, g_fft.eta_im) < 1e-9);
    for (std::size_t j = 0; j < d; ++j)
        CHECK(g_rec.omega[j] == Catch::Approx(g_fft.omega[j]).margin(1e-9));
}
