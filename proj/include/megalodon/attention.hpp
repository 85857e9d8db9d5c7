#pragma once

// Normalized gated attention.
//
// The sublayer input x (already timestep-normalized by the block) drives two
// branches: the CEMA output X' feeds a shared representation Z whose rows are
// L2-normalized, from which Q and K are produced by per-dimension scale and
// offset (no SiLU on Z, no 1/sqrt(d) score scaling); V comes from x directly.
// Attention is causal softmax restricted to fixed chunks. A reset gate
// (from X') modulates the attention output inside the candidate activation:
//
//   out = silu(X' W_h + (gamma .* O) U_h + b_h)
//
// There is no update gate and no residual here; the block adds the residual.
//
// Attention dropout follows the dropout-before-softmax scheme: eligible
// pre-softmax scores are set to -inf, with the self position always kept.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <utility>

#include "megalodon/cema.hpp"
#include "megalodon/core.hpp"
#include "megalodon/norms.hpp"
#include "megalodon/numerics.hpp"

namespace megalodon {

inline constexpr double kRowNormEps = 1e-6;

template <typename S>
struct AttentionParams {
    std::size_t d = 0, z = 0, v = 0, heads = 1;
    double rope_base = 100000.0;

    Matrix<S> w_z;  // (d x z)
    std::vector<S> b_z;
    std::vector<S> kappa_q, mu_q, kappa_k, mu_k;  // (z)
    Matrix<S> w_v;  // (d x v)
    std::vector<S> b_v;
    Matrix<S> w_gamma;  // (d x v) reset gate
    std::vector<S> b_gamma;
    Matrix<S> w_h;  // (d x d) candidate from X'
    Matrix<S> u_h;  // (v x d) candidate from gated attention output
    std::vector<S> b_h;

    static AttentionParams zeros(std::size_t d, std::size_t z, std::size_t v, std::size_t heads,
                                 double rope_base) {
        AttentionParams p;
        p.d = d;
        p.z = z;
        p.v = v;
        p.heads = heads;
        p.rope_base = rope_base;
        p.w_z = Matrix<S>(d, z);
        p.b_z.assign(z, S(0));
        p.kappa_q.assign(z, S(0));
        p.mu_q.assign(z, S(0));
        p.kappa_k.assign(z, S(0));
        p.mu_k.assign(z, S(0));
        p.w_v = Matrix<S>(d, v);
        p.b_v.assign(v, S(0));
        p.w_gamma = Matrix<S>(d, v);
        p.b_gamma.assign(v, S(0));
        p.w_h = Matrix<S>(d, d);
        p.u_h = Matrix<S>(v, d);
        p.b_h.assign(d, S(0));
        return p;
    }

    static AttentionParams init(std::size_t d, std::size_t z, std::size_t v, std::size_t heads,
                                double rope_base, Rng& rng) {
        require(heads >= 1 && z % heads == 0 && v % heads == 0,
                "attention: z and v must be divisible by heads");
        require((z / heads) % 2 == 0, "attention: head dimension must be even for rotary embedding");
        AttentionParams p = zeros(d, z, v, heads, rope_base);
        auto fill = [&rng](Matrix<S>& m, double fan_in) {
            const double sd = 1.0 / std::sqrt(fan_in);
            for (auto& x : m.data) x = static_cast<S>(sd * rng.normal());
        };
        fill(p.w_z, double(d));
        fill(p.w_v, double(d));
        fill(p.w_gamma, double(d));
        fill(p.w_h, double(d));
        fill(p.u_h, double(v));
        for (std::size_t i = 0; i < z; ++i) {
            p.kappa_q[i] = static_cast<S>(1.0 + 0.1 * rng.normal());
            p.kappa_k[i] = static_cast<S>(1.0 + 0.1 * rng.normal());
            p.mu_q[i] = static_cast<S>(0.02 * rng.normal());
            p.mu_k[i] = static_cast<S>(0.02 * rng.normal());
        }
        return p;
    }
};

// ---------------------------------------------------------------------------
// Shared representation: Z = x W_z + b_z with L2-normalized rows. The norm
// uses a smooth guard sqrt(|Z|^2 + eps^2) so zero rows map to zero rows.
// ---------------------------------------------------------------------------

template <typename S>
struct SharedRepCache {
    Matrix<S> z;          // pre-normalization
    Matrix<S> z_norm;
    std::vector<S> inv_norm;  // per row
};

template <typename S>
Matrix<S> shared_rep(const Matrix<S>& x_ema, const AttentionParams<S>& p,
                     SharedRepCache<S>* cache = nullptr) {
    Matrix<S> z = linear_forward(x_ema, p.w_z, std::span<const S>(p.b_z));
    Matrix<S> out(z.rows, z.cols);
    std::vector<S> inv_norms(z.rows);
    const S eps2 = S(kRowNormEps) * S(kRowNormEps);
    for (std::size_t t = 0; t < z.rows; ++t) {
        S sq = S(0);
        const S* row = z.row(t);
        for (std::size_t j = 0; j < z.cols; ++j) sq += row[j] * row[j];
        const S inv = S(1) / std::sqrt(sq + eps2);
        inv_norms[t] = inv;
        for (std::size_t j = 0; j < z.cols; ++j) out(t, j) = row[j] * inv;
    }
    if (cache) {
        cache->z = std::move(z);
        cache->z_norm = out;
        cache->inv_norm = std::move(inv_norms);
    }
    return out;
}

template <typename S>
void shared_rep_backward(const SharedRepCache<S>& cache, const Matrix<S>& x_ema,
                         const AttentionParams<S>& p, const Matrix<S>& dz_norm, Matrix<S>& dx_ema,
                         Matrix<S>& dw_z, std::span<S> db_z) {
    Matrix<S> dz(cache.z.rows, cache.z.cols);
    for (std::size_t t = 0; t < cache.z.rows; ++t) {
        const S inv = cache.inv_norm[t];
        S dot = S(0);
        for (std::size_t j = 0; j < cache.z.cols; ++j) dot += dz_norm(t, j) * cache.z_norm(t, j);
        for (std::size_t j = 0; j < cache.z.cols; ++j) {
            dz(t, j) = inv * (dz_norm(t, j) - cache.z_norm(t, j) * dot);
        }
    }
    linear_backward(x_ema, p.w_z, dz, dx_ema, dw_z, db_z);
}

// Q or K from the normalized shared representation: kappa .* z + mu.
template <typename S>
Matrix<S> qk_project(const Matrix<S>& z_norm, std::span<const S> kappa, std::span<const S> mu) {
    require(kappa.size() == z_norm.cols && mu.size() == z_norm.cols,
            "qk_project: vector length mismatch");
    Matrix<S> out(z_norm.rows, z_norm.cols);
    for (std::size_t t = 0; t < z_norm.rows; ++t)
        for (std::size_t j = 0; j < z_norm.cols; ++j)
            out(t, j) = kappa[j] * z_norm(t, j) + mu[j];
    return out;
}

template <typename S>
void qk_project_backward(const Matrix<S>& z_norm, std::span<const S> kappa, const Matrix<S>& dout,
                         Matrix<S>& dz_norm, std::span<S> dkappa, std::span<S> dmu) {
    for (std::size_t t = 0; t < z_norm.rows; ++t) {
        for (std::size_t j = 0; j < z_norm.cols; ++j) {
            dz_norm(t, j) += kappa[j] * dout(t, j);
            dkappa[j] += z_norm(t, j) * dout(t, j);
            dmu[j] += dout(t, j);
        }
    }
}

// ---------------------------------------------------------------------------
// Rotary embedding. Applied per head, pairing adjacent dimensions; the
// rotation angle at position p and pair i is p * base^(-2i/d_head).
// Positions are absolute within the full stream, not within the chunk.
// ---------------------------------------------------------------------------

template <typename S>
void rotary_embed_inplace(Matrix<S>& qk, std::size_t heads, std::size_t first_pos, double base,
                          bool invert = false) {
    require(heads >= 1 && qk.cols % heads == 0, "rotary: columns not divisible by heads");
    const std::size_t dh = qk.cols / heads;
    if (dh % 2 != 0) throw std::invalid_argument("rotary: head dimension must be even");
    for (std::size_t t = 0; t < qk.rows; ++t) {
        const double pos = static_cast<double>(first_pos + t);
        for (std::size_t hh = 0; hh < heads; ++hh) {
            S* row = qk.row(t) + hh * dh;
            for (std::size_t i = 0; i < dh / 2; ++i) {
                const double freq = std::pow(base, -2.0 * static_cast<double>(i) /
                                                        static_cast<double>(dh));
                double angle = pos * freq;
                if (invert) angle = -angle;
                const S c = static_cast<S>(std::cos(angle));
                const S s = static_cast<S>(std::sin(angle));
                const S x0 = row[2 * i], x1 = row[2 * i + 1];
                row[2 * i] = c * x0 - s * x1;
                row[2 * i + 1] = s * x0 + c * x1;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// DropKey: fill eligible causal score positions with -inf before softmax.
// The diagonal (self) entry is never dropped, so every row keeps at least
// one finite score. Operates on one (len x len) causal score block.
// ---------------------------------------------------------------------------

template <typename S>
void dropkey_mask(Matrix<S>& scores, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropkey: p must be in [0, 1)");
    if (p == 0.0) return;
    const S neg_inf = -std::numeric_limits<S>::infinity();
    for (std::size_t i = 0; i < scores.rows; ++i) {
        for (std::size_t j = 0; j < i && j < scores.cols; ++j) {
            if (rng.bernoulli(p)) scores(i, j) = neg_inf;
        }
    }
}

// ---------------------------------------------------------------------------
// Chunk-wise causal attention over pre-split Q, K, V. Scores are raw dot
// products (the learnable kappa absorbs the usual scale term). Zero
// cross-chunk weight by construction: each chunk is processed in isolation.
// ---------------------------------------------------------------------------

template <typename S>
struct ChunkAttentionCache {
    // probabilities per (chunk, head); local (len x len) lower-triangular
    std::vector<std::vector<Matrix<S>>> probs;
    std::size_t chunk = 0;
    std::size_t heads = 0;
};

namespace detail {

template <typename S>
Matrix<S> gather_head(const Matrix<S>& m, std::size_t row_begin, std::size_t rows, std::size_t hh,
                      std::size_t dh) {
    Matrix<S> out(rows, dh);
    for (std::size_t t = 0; t < rows; ++t) {
        const S* src = m.row(row_begin + t) + hh * dh;
        std::copy(src, src + dh, out.row(t));
    }
    return out;
}

template <typename S>
void scatter_head_add(Matrix<S>& dst, const Matrix<S>& src, std::size_t row_begin, std::size_t hh,
                      std::size_t dh) {
    for (std::size_t t = 0; t < src.rows; ++t) {
        S* d = dst.row(row_begin + t) + hh * dh;
        for (std::size_t j = 0; j < dh; ++j) d[j] += src(t, j);
    }
}

}  // namespace detail

template <typename S>
Matrix<S> chunked_attention(const Matrix<S>& q, const Matrix<S>& k, const Matrix<S>& v,
                            std::size_t heads, std::size_t chunk, double dropout_p,
                            std::uint64_t seed, bool training,
                            ChunkAttentionCache<S>* cache = nullptr) {
    require(chunk >= 1, "chunked_attention: chunk size must be >= 1");
    require(q.rows == k.rows && q.rows == v.rows, "chunked_attention: sequence length mismatch");
    require(q.cols == k.cols, "chunked_attention: q/k width mismatch");
    require(q.cols % heads == 0 && v.cols % heads == 0,
            "chunked_attention: widths not divisible by heads");

    const std::size_t n = q.rows;
    const std::size_t dh = q.cols / heads;
    const std::size_t dv = v.cols / heads;
    const std::size_t n_chunks = (n + chunk - 1) / chunk;

    Matrix<S> out(n, v.cols);
    if (cache) {
        cache->probs.assign(n_chunks, {});
        cache->chunk = chunk;
        cache->heads = heads;
    }

    for (std::size_t ci = 0; ci < n_chunks; ++ci) {
        const std::size_t b = ci * chunk;
        const std::size_t len = std::min(chunk, n - b);
        if (cache) cache->probs[ci].reserve(heads);
        for (std::size_t hh = 0; hh < heads; ++hh) {
            Matrix<S> qh = detail::gather_head(q, b, len, hh, dh);
            Matrix<S> kh = detail::gather_head(k, b, len, hh, dh);
            Matrix<S> vh = detail::gather_head(v, b, len, hh, dv);

            Matrix<S> scores(len, len);
            matmul_nt_acc(qh, kh, scores);
            if (training && dropout_p > 0.0) {
                Rng rng(mix_seed(seed, ci, hh));
                dropkey_mask(scores, dropout_p, rng);
            }

            Matrix<S> probs(len, len);
            std::vector<std::uint8_t> mask(len);
            for (std::size_t i = 0; i < len; ++i) {
                for (std::size_t j = 0; j < len; ++j)
                    mask[j] = (j <= i && std::isfinite(static_cast<double>(scores(i, j)))) ? 1 : 0;
                auto row = stable_softmax<S>(std::span<const S>(scores.row(i), len), mask);
                std::copy(row.begin(), row.end(), probs.row(i));
            }

            Matrix<S> oh(len, dv);
            matmul_nn_acc(probs, vh, oh);
            detail::scatter_head_add(out, oh, b, hh, dv);
            if (cache) cache->probs[ci].push_back(std::move(probs));
        }
    }
    return out;
}

template <typename S>
void chunked_attention_backward(const ChunkAttentionCache<S>& cache, const Matrix<S>& q,
                                const Matrix<S>& k, const Matrix<S>& v, const Matrix<S>& dout,
                                Matrix<S>& dq, Matrix<S>& dk, Matrix<S>& dv) {
    const std::size_t n = q.rows;
    const std::size_t heads = cache.heads;
    const std::size_t chunk = cache.chunk;
    const std::size_t dh = q.cols / heads;
    const std::size_t dv_w = v.cols / heads;

    for (std::size_t ci = 0; ci < cache.probs.size(); ++ci) {
        const std::size_t b = ci * chunk;
        const std::size_t len = std::min(chunk, n - b);
        for (std::size_t hh = 0; hh < heads; ++hh) {
            const Matrix<S>& probs = cache.probs[ci][hh];
            Matrix<S> qh = detail::gather_head(q, b, len, hh, dh);
            Matrix<S> kh = detail::gather_head(k, b, len, hh, dh);
            Matrix<S> vh = detail::gather_head(v, b, len, hh, dv_w);
            Matrix<S> doh = detail::gather_head(dout, b, len, hh, dv_w);

            Matrix<S> dvh(len, dv_w);
            matmul_tn_acc(probs, doh, dvh);
            Matrix<S> dp(len, len);
            matmul_nt_acc(doh, vh, dp);

            Matrix<S> ds(len, len);
            for (std::size_t i = 0; i < len; ++i) {
                S dot = S(0);
                for (std::size_t j = 0; j <= i; ++j) dot += dp(i, j) * probs(i, j);
                for (std::size_t j = 0; j <= i; ++j) ds(i, j) = probs(i, j) * (dp(i, j) - dot);
            }

            Matrix<S> dqh(len, dh), dkh(len, dh);
            matmul_nn_acc(ds, kh, dqh);
            matmul_tn_acc(ds, qh, dkh);

            detail::scatter_head_add(dq, dqh, b, hh, dh);
            detail::scatter_head_add(dk, dkh, b, hh, dh);
            detail::scatter_head_add(dv, dvh, b, hh, dv_w);
        }
    }
}

// ---------------------------------------------------------------------------
// Gated attention sublayer: the full composition for one window starting at
// the position recorded in the CEMA state. Training mode uses the FFT CEMA
// route (zero state required); otherwise the recurrence is used and state is
// carried.
// ---------------------------------------------------------------------------

template <typename S>
struct GatedAttentionCache {
    Matrix<S> x;       // sublayer input
    Matrix<S> x_ema;   // CEMA output
    SharedRepCache<S> shared;
    Matrix<S> q, k;    // post-rotary
    Matrix<S> v_pre, v;
    Matrix<S> o;
    Matrix<S> gate_pre, gate;
    Matrix<S> cand_pre;
    ChunkAttentionCache<S> attn;
    std::size_t first_pos = 0;
    bool used_fft_cema = true;
    CemaRecurrentCache<S> cema_rec;
};

template <typename S>
struct AttnRunOptions {
    std::size_t chunk = 1;
    double dropout_p = 0.0;
    std::uint64_t seed = 0;
    bool training = false;
};

template <typename S>
std::pair<Matrix<S>, CemaState<S>> gated_attention_sublayer(const Matrix<S>& x,
                                                            const AttentionParams<S>& p,
                                                            const CemaParams<S>& cema,
                                                            const CemaState<S>& cema_state,
                                                            const AttnRunOptions<S>& opts,
                                                            GatedAttentionCache<S>* cache = nullptr) {
    require(x.cols == p.d, "gated attention: input width mismatch");
    const std::size_t first_pos = cema_state.t_offset;

    Matrix<S> x_ema;
    CemaState<S> state_out = cema_state;
    const bool use_fft = opts.training && cema_state.is_zero();
    if (use_fft) {
        x_ema = cema_forward_fft(x, cema, cema_state);
        state_out.t_offset += x.rows;  // hidden state left untouched by the fft route
    } else if (cache) {
        auto [xe, st] = cema_forward_recurrent(x, cema, cema_state, &cache->cema_rec);
        x_ema = std::move(xe);
        state_out = std::move(st);
    } else {
        auto [xe, st] = cema_forward_recurrent(x, cema, cema_state);
        x_ema = std::move(xe);
        state_out = std::move(st);
    }

    SharedRepCache<S> shared;
    Matrix<S> z_norm = shared_rep(x_ema, p, &shared);
    Matrix<S> q = qk_project(z_norm, std::span<const S>(p.kappa_q), std::span<const S>(p.mu_q));
    Matrix<S> k = qk_project(z_norm, std::span<const S>(p.kappa_k), std::span<const S>(p.mu_k));
    rotary_embed_inplace(q, p.heads, first_pos, p.rope_base);
    rotary_embed_inplace(k, p.heads, first_pos, p.rope_base);

    Matrix<S> v_pre = linear_forward(x, p.w_v, std::span<const S>(p.b_v));
    Matrix<S> v(v_pre.rows, v_pre.cols);
    for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = silu(v_pre.data[i]);

    ChunkAttentionCache<S> attn_cache;
    Matrix<S> o = chunked_attention(q, k, v, p.heads, opts.chunk, opts.dropout_p, opts.seed,
                                    opts.training, cache ? &attn_cache : nullptr);

    Matrix<S> gate_pre = linear_forward(x_ema, p.w_gamma, std::span<const S>(p.b_gamma));
    Matrix<S> gate(gate_pre.rows, gate_pre.cols);
    for (std::size_t i = 0; i < gate.data.size(); ++i) gate.data[i] = silu(gate_pre.data[i]);

    Matrix<S> gated(o.rows, o.cols);
    for (std::size_t i = 0; i < gated.data.size(); ++i) gated.data[i] = gate.data[i] * o.data[i];

    Matrix<S> cand_pre = linear_forward(x_ema, p.w_h, std::span<const S>(p.b_h));
    matmul_nn_acc(gated, p.u_h, cand_pre);
    Matrix<S> out(cand_pre.rows, cand_pre.cols);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = silu(cand_pre.data[i]);

    if (cache) {
        cache->x = x;
        cache->x_ema = std::move(x_ema);
        cache->shared = std::move(shared);
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v_pre = std::move(v_pre);
        cache->v = std::move(v);
        cache->o = std::move(o);
        cache->gate_pre = std::move(gate_pre);
        cache->gate = std::move(gate);
        cache->cand_pre = std::move(cand_pre);
        cache->attn = std::move(attn_cache);
        cache->first_pos = first_pos;
        cache->used_fft_cema = use_fft;
    }
    return {std::move(out), std::move(state_out)};
}

template <typename S>
void gated_attention_backward(const GatedAttentionCache<S>& cache, const AttentionParams<S>& p,
                              const CemaParams<S>& cema, const Matrix<S>& dout, Matrix<S>& dx,
                              AttentionParams<S>& gp, CemaParams<S>& gcema) {
    const std::size_t n = cache.x.rows;

    // out = silu(cand_pre); cand_pre = x_ema W_h + (gate .* o) U_h + b_h
    Matrix<S> dcand(n, p.d);
    for (std::size_t i = 0; i < dcand.data.size(); ++i)
        dcand.data[i] = dout.data[i] * silu_grad(cache.cand_pre.data[i]);

    Matrix<S> dx_ema(n, p.d);
    linear_backward(cache.x_ema, p.w_h, dcand, dx_ema, gp.w_h, std::span<S>(gp.b_h));

    Matrix<S> gated(n, p.v);
    for (std::size_t i = 0; i < gated.data.size(); ++i)
        gated.data[i] = cache.gate.data[i] * cache.o.data[i];
    Matrix<S> dgated(n, p.v);
    matmul_nt_acc(dcand, p.u_h, dgated);
    matmul_tn_acc(gated, dcand, gp.u_h);

    Matrix<S> dgate_pre(n, p.v), do_(n, p.v);
    for (std::size_t i = 0; i < dgated.data.size(); ++i) {
        do_.data[i] = dgated.data[i] * cache.gate.data[i];
        dgate_pre.data[i] =
            dgated.data[i] * cache.o.data[i] * silu_grad(cache.gate_pre.data[i]);
    }
    linear_backward(cache.x_ema, p.w_gamma, dgate_pre, dx_ema, gp.w_gamma, std::span<S>(gp.b_gamma));

    // attention
    Matrix<S> dq(n, p.z), dk(n, p.z), dv(n, p.v);
    chunked_attention_backward(cache.attn, cache.q, cache.k, cache.v, do_, dq, dk, dv);

    // V = silu(x W_v + b_v)
    Matrix<S> dv_pre(n, p.v);
    for (std::size_t i = 0; i < dv.data.size(); ++i)
        dv_pre.data[i] = dv.data[i] * silu_grad(cache.v_pre.data[i]);
    linear_backward(cache.x, p.w_v, dv_pre, dx, gp.w_v, std::span<S>(gp.b_v));

    // rotary is orthogonal: invert by rotating gradients the other way
    rotary_embed_inplace(dq, p.heads, cache.first_pos, p.rope_base, /*invert=*/true);
    rotary_embed_inplace(dk, p.heads, cache.first_pos, p.rope_base, /*invert=*/true);

    Matrix<S> dz_norm(n, p.z);
    qk_project_backward(cache.shared.z_norm, std::span<const S>(p.kappa_q), dq, dz_norm,
                        std::span<S>(gp.kappa_q), std::span<S>(gp.mu_q));
    qk_project_backward(cache.shared.z_norm, std::span<const S>(p.kappa_k), dk, dz_norm,
                        std::span<S>(gp.kappa_k), std::span<S>(gp.mu_k));

    shared_rep_backward(cache.shared, cache.x_ema, p, dz_norm, dx_ema, gp.w_z, std::span<S>(gp.b_z));

    // CEMA
    if (cache.used_fft_cema) {
        cema_backward_fft(cema, cache.x, dx_ema, dx, gcema);
    } else {
        cema_backward_recurrent(cema, cache.cema_rec, dx_ema, dx, gcema);
    }
}

// ---------------------------------------------------------------------------
// Streaming attention state: K/V rows for the current chunk only.
// ---------------------------------------------------------------------------

template <typename S>
struct ChunkKvCache {
    Matrix<S> k;  // (filled x z)
    Matrix<S> v;  // (filled x v)
    std::size_t filled = 0;

    static ChunkKvCache zero(std::size_t chunk, std::size_t z_dim, std::size_t v_dim) {
        ChunkKvCache c;
        c.k = Matrix<S>(chunk, z_dim);
        c.v = Matrix<S>(chunk, v_dim);
        return c;
    }

    void reset() { filled = 0; }

    std::size_t memory_bytes() const { return (k.data.size() + v.data.size()) * sizeof(S); }
};

// Incremental counterpart of gated_attention_sublayer: consumes rows one at a
// time, resetting the KV cache at every global chunk boundary. Produces
// bit-identical outputs to the blocked path for aligned fresh windows.
template <typename S>
std::pair<Matrix<S>, CemaState<S>> gated_attention_streaming(const Matrix<S>& x,
                                                             const AttentionParams<S>& p,
                                                             const CemaParams<S>& cema,
                                                             const CemaState<S>& cema_state,
                                                             ChunkKvCache<S>& kv, std::size_t chunk) {
    require(x.cols == p.d, "gated attention: input width mismatch");
    const std::size_t n = x.rows;
    const std::size_t first_pos = cema_state.t_offset;
    const std::size_t dh = p.z / p.heads;
    const std::size_t dv = p.v / p.heads;

    auto [x_ema, state_out] = cema_forward_recurrent(x, cema, cema_state);

    Matrix<S> z_norm = shared_rep(x_ema, p);
    Matrix<S> q = qk_project(z_norm, std::span<const S>(p.kappa_q), std::span<const S>(p.mu_q));
    Matrix<S> k = qk_project(z_norm, std::span<const S>(p.kappa_k), std::span<const S>(p.mu_k));
    rotary_embed_inplace(q, p.heads, first_pos, p.rope_base);
    rotary_embed_inplace(k, p.heads, first_pos, p.rope_base);

    Matrix<S> v_pre = linear_forward(x, p.w_v, std::span<const S>(p.b_v));
    Matrix<S> v(v_pre.rows, v_pre.cols);
    for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = silu(v_pre.data[i]);

    Matrix<S> o(n, p.v);
    std::vector<S> scores;
    for (std::size_t t = 0; t < n; ++t) {
        const std::size_t pos = first_pos + t;
        if (pos % chunk == 0) kv.reset();
        require(kv.filled == pos % chunk, "chunk kv cache out of sync with stream position");
        std::copy(k.row(t), k.row(t) + p.z, kv.k.row(kv.filled));
        std::copy(v.row(t), v.row(t) + p.v, kv.v.row(kv.filled));
        ++kv.filled;

        const std::size_t len = kv.filled;
        scores.assign(len, S(0));
        for (std::size_t hh = 0; hh < p.heads; ++hh) {
            const S* qrow = q.row(t) + hh * dh;
            for (std::size_t j = 0; j < len; ++j) {
                const S* krow = kv.k.row(j) + hh * dh;
                S acc = S(0);
                for (std::size_t c = 0; c < dh; ++c) acc += qrow[c] * krow[c];
                scores[j] = acc;
            }
            auto probs = stable_softmax<S>(std::span<const S>(scores.data(), len));
            S* orow = o.row(t) + hh * dv;
            for (std::size_t j = 0; j < len; ++j) {
                const S* vrow = kv.v.row(j) + hh * dv;
                const S pj = probs[j];
                for (std::size_t c = 0; c < dv; ++c) orow[c] += pj * vrow[c];
            }
        }
    }

    Matrix<S> gate_pre = linear_forward(x_ema, p.w_gamma, std::span<const S>(p.b_gamma));
    Matrix<S> cand_pre = linear_forward(x_ema, p.w_h, std::span<const S>(p.b_h));
    Matrix<S> gated(n, p.v);
    for (std::size_t i = 0; i < gated.data.size(); ++i)
        gated.data[i] = silu(gate_pre.data[i]) * o.data[i];
    matmul_nn_acc(gated, p.u_h, cand_pre);
    Matrix<S> out(n, p.d);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = silu(cand_pre.data[i]);

    return {std::move(out), std::move(state_out)};
}

}  // namespace megalodon
