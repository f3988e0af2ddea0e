#pragma once

#include <cmath>
#include <cstring>
#include <optional>

#include "lidit/blas.hpp"
#include "lidit/tensor.hpp"

namespace lidit {

// ---------------------------------------------------------------------------
// linear / activations
// ---------------------------------------------------------------------------

// y = x . W^T (+ b); x: [..., in], w: [out, in], b: [out]
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* b = nullptr) {
    int64_t in = x.dim(-1);
    if (w.rank() != 2 || w.dim(1) != in)
        throw ShapeError("linear: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
    int64_t out_dim = w.dim(0);
    int64_t rows = x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = out_dim;
    Tensor<S> out = Tensor<S>::uninit(out_shape);
    blas::gemm(false, true, static_cast<int>(rows), static_cast<int>(out_dim), static_cast<int>(in),
               S(1), x.data(), static_cast<int>(in), w.data(), static_cast<int>(in),
               S(0), out.data(), static_cast<int>(out_dim));
    if (b) {
        if (b->rank() != 1 || b->dim(0) != out_dim) throw ShapeError("linear: bias shape");
        S* po = out.data();
        const S* pb = b->data();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < out_dim; ++j) po[r * out_dim + j] += pb[j];
    }
    bool trace = b ? detail::tracing<S>({&x, &w, b}) : detail::tracing<S>({&x, &w});
    Tensor<S> bias = b ? *b : Tensor<S>();
    detail::mark_and_record(out, trace, [x, w, bias, out, rows, in, out_dim]() mutable {
        const S* g = out.grad();
        if (x.requires_grad()) {
            // dX = dY . W
            blas::gemm(false, false, static_cast<int>(rows), static_cast<int>(in), static_cast<int>(out_dim),
                       S(1), g, static_cast<int>(out_dim), w.data(), static_cast<int>(in),
                       S(1), x.grad(), static_cast<int>(in));
        }
        if (w.requires_grad()) {
            // dW = dY^T . X
            blas::gemm(true, false, static_cast<int>(out_dim), static_cast<int>(in), static_cast<int>(rows),
                       S(1), g, static_cast<int>(out_dim), x.data(), static_cast<int>(in),
                       S(1), w.grad(), static_cast<int>(in));
        }
        if (bias.defined() && bias.requires_grad()) {
            S* gb = bias.grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
        }
    });
    return out;
}

template <class S>
inline S gelu_tanh_scalar(S x) {
    const S c = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
    S inner = c * (x + static_cast<S>(0.044715) * x * x * x);
    return S(0.5) * x * (S(1) + std::tanh(inner));
}

template <class S>
Tensor<S> gelu_tanh(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::uninit(x.shape());
    const S* px = x.data();
    S* po = out.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = gelu_tanh_scalar(px[i]);
    bool trace = detail::tracing<S>({&x});
    detail::mark_and_record(out, trace, [x, out, n]() mutable {
        const S c = static_cast<S>(0.7978845608028654);
        const S* g = out.grad();
        const S* px = x.data();
        S* gx = x.grad();
        for (int64_t i = 0; i < n; ++i) {
            S xv = px[i];
            S inner = c * (xv + static_cast<S>(0.044715) * xv * xv * xv);
            S t = std::tanh(inner);
            S dinner = c * (S(1) + S(3) * static_cast<S>(0.044715) * xv * xv);
            S d = S(0.5) * (S(1) + t) + S(0.5) * xv * (S(1) - t * t) * dinner;
            gx[i] += g[i] * d;
        }
    });
    return out;
}

template <class S>
Tensor<S> silu(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::uninit(x.shape());
    const S* px = x.data();
    S* po = out.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        S s = S(1) / (S(1) + std::exp(-px[i]));
        po[i] = px[i] * s;
    }
    bool trace = detail::tracing<S>({&x});
    detail::mark_and_record(out, trace, [x, out, n]() mutable {
        const S* g = out.grad();
        const S* px = x.data();
        S* gx = x.grad();
        for (int64_t i = 0; i < n; ++i) {
            S s = S(1) / (S(1) + std::exp(-px[i]));
            gx[i] += g[i] * (s + px[i] * s * (S(1) - s));
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// rms norm
// ---------------------------------------------------------------------------

// Normalizes each group of (d / groups) trailing channels to unit RMS, then
// scales by gamma (length d). groups=1 is plain RMSNorm over the trailing dim.
template <class S>
Tensor<S> rms_norm_groups(const Tensor<S>& x, const Tensor<S>& gamma, S eps, int64_t groups) {
    int64_t d = x.dim(-1);
    if (gamma.rank() != 1 || gamma.dim(0) != d)
        throw ShapeError("rms_norm: gamma " + shape_str(gamma.shape()) + " vs trailing dim " + std::to_string(d));
    if (groups < 1 || d % groups != 0) throw ShapeError("rms_norm: bad group count");
    if (!(eps > S(0))) throw ShapeError("rms_norm: eps must be positive");
    int64_t gd = d / groups;
    int64_t rows = x.numel() / d;
    Tensor<S> out = Tensor<S>::uninit(x.shape());
    const S* px = x.data();
    const S* pg = gamma.data();
    S* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t grp = 0; grp < groups; ++grp) {
            const S* xv = px + r * d + grp * gd;
            S* ov = po + r * d + grp * gd;
            const S* gv = pg + grp * gd;
            S ms = 0;
            for (int64_t i = 0; i < gd; ++i) ms += xv[i] * xv[i];
            S inv = S(1) / std::sqrt(ms / static_cast<S>(gd) + eps);
            for (int64_t i = 0; i < gd; ++i) ov[i] = gv[i] * xv[i] * inv;
        }
    }
    bool trace = detail::tracing<S>({&x, &gamma});
    detail::mark_and_record(out, trace, [x, gamma, out, rows, d, gd, groups, eps]() mutable {
        const S* g = out.grad();
        const S* px = x.data();
        const S* pg = gamma.data();
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t grp = 0; grp < groups; ++grp) {
                int64_t base = r * d + grp * gd;
                const S* xv = px + base;
                const S* gv = pg + grp * gd;
                const S* dy = g + base;
                S ms = 0;
                for (int64_t i = 0; i < gd; ++i) ms += xv[i] * xv[i];
                S rinv = S(1) / std::sqrt(ms / static_cast<S>(gd) + eps);
                if (x.requires_grad()) {
                    S dot = 0;  // sum_j dy_j * gamma_j * x_j
                    for (int64_t i = 0; i < gd; ++i) dot += dy[i] * gv[i] * xv[i];
                    S* gx = x.grad() + base;
                    S k = dot * rinv * rinv * rinv / static_cast<S>(gd);
                    for (int64_t i = 0; i < gd; ++i) gx[i] += dy[i] * gv[i] * rinv - xv[i] * k;
                }
                if (gamma.requires_grad()) {
                    S* gg = gamma.grad() + grp * gd;
                    for (int64_t i = 0; i < gd; ++i) gg[i] += dy[i] * xv[i] * rinv;
                }
            }
        }
    });
    return out;
}

template <class S>
Tensor<S> rms_norm(const Tensor<S>& x, const Tensor<S>& gamma, S eps) {
    return rms_norm_groups(x, gamma, eps, 1);
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

enum class MaskMode { None, Causal, Explicit };

struct AttentionSpec {
    int n_heads = 1;
    int head_dim = 0;
    MaskMode mask_mode = MaskMode::None;
    bool qk_norm = false;
};

// [B, L, H*hd] -> [B, H, L, hd]
template <class S>
Tensor<S> split_heads(const Tensor<S>& x, int64_t n_heads) {
    int64_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
    if (D % n_heads != 0) throw ShapeError("split_heads: width not divisible by head count");
    int64_t hd = D / n_heads;
    Tensor<S> out = Tensor<S>::uninit({B, n_heads, L, hd});
    const S* px = x.data();
    S* po = out.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t l = 0; l < L; ++l)
            for (int64_t h = 0; h < n_heads; ++h)
                std::copy(px + ((b * L + l) * D) + h * hd, px + ((b * L + l) * D) + (h + 1) * hd,
                          po + (((b * n_heads + h) * L) + l) * hd);
    bool trace = detail::tracing<S>({&x});
    detail::mark_and_record(out, trace, [x, out, B, L, n_heads, hd]() mutable {
        int64_t D = n_heads * hd;
        const S* g = out.grad();
        S* gx = x.grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t l = 0; l < L; ++l)
                for (int64_t h = 0; h < n_heads; ++h) {
                    const S* src = g + (((b * n_heads + h) * L) + l) * hd;
                    S* dst = gx + ((b * L + l) * D) + h * hd;
                    for (int64_t i = 0; i < hd; ++i) dst[i] += src[i];
                }
    });
    return out;
}

// [B, H, L, hd] -> [B, L, H*hd]
template <class S>
Tensor<S> merge_heads(const Tensor<S>& x) {
    int64_t B = x.dim(0), H = x.dim(1), L = x.dim(2), hd = x.dim(3);
    Tensor<S> out = Tensor<S>::uninit({B, L, H * hd});
    const S* px = x.data();
    S* po = out.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t l = 0; l < L; ++l)
                std::copy(px + (((b * H + h) * L) + l) * hd, px + (((b * H + h) * L) + l + 1) * hd,
                          po + ((b * L + l) * (H * hd)) + h * hd);
    bool trace = detail::tracing<S>({&x});
    detail::mark_and_record(out, trace, [x, out, B, H, L, hd]() mutable {
        const S* g = out.grad();
        S* gx = x.grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t l = 0; l < L; ++l) {
                    const S* src = g + ((b * L + l) * (H * hd)) + h * hd;
                    S* dst = gx + (((b * H + h) * L) + l) * hd;
                    for (int64_t i = 0; i < hd; ++i) dst[i] += src[i];
                }
    });
    return out;
}

// Scaled dot-product attention over already-split heads.
// q: [B, H, Lq, hd], k/v: [B, H, Lkv, hd].
// mask_mode Causal requires Lq == Lkv. Explicit uses `mask` (Lq x Lkv,
// true = may attend). kv_valid, when given, is [B, Lkv] and masks keys
// per batch row on top of the mode mask.
template <class S>
Tensor<S> attention_core(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                         MaskMode mask_mode,
                         const std::vector<uint8_t>* mask = nullptr,
                         const std::vector<uint8_t>* kv_valid = nullptr) {
    int64_t B = q.dim(0), H = q.dim(1), Lq = q.dim(2), hd = q.dim(3);
    int64_t Lkv = k.dim(2);
    if (k.dim(0) != B || k.dim(1) != H || k.dim(3) != hd) throw ShapeError("attention: k shape");
    check_same_shape(k, v, "attention k/v");
    if (mask_mode == MaskMode::Causal && Lq != Lkv)
        throw ShapeError("attention: causal mask needs square attention");
    if (mask_mode == MaskMode::Explicit) {
        if (!mask || static_cast<int64_t>(mask->size()) != Lq * Lkv)
            throw ShapeError("attention: explicit mask must be Lq x Lkv");
    }
    if (kv_valid && static_cast<int64_t>(kv_valid->size()) != B * Lkv)
        throw ShapeError("attention: kv_valid must be B x Lkv");

    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(hd));
    const S neg_big = static_cast<S>(-1e30);
    Tensor<S> out = Tensor<S>::uninit({B, H, Lq, hd});
    // softmax probabilities are kept for the backward pass
    Tensor<S> probs = Tensor<S>::uninit({B, H, Lq, Lkv});

    for (int64_t b = 0; b < B; ++b) {
        const uint8_t* valid = kv_valid ? kv_valid->data() + b * Lkv : nullptr;
        for (int64_t h = 0; h < H; ++h) {
            const S* qs = q.data() + ((b * H + h) * Lq) * hd;
            const S* ks = k.data() + ((b * H + h) * Lkv) * hd;
            const S* vs = v.data() + ((b * H + h) * Lkv) * hd;
            S* ps = probs.data() + ((b * H + h) * Lq) * Lkv;
            S* os = out.data() + ((b * H + h) * Lq) * hd;
            // logits = q . k^T / sqrt(hd)
            blas::gemm(false, true, static_cast<int>(Lq), static_cast<int>(Lkv), static_cast<int>(hd),
                       inv_sqrt, qs, static_cast<int>(hd), ks, static_cast<int>(hd),
                       S(0), ps, static_cast<int>(Lkv));
            for (int64_t i = 0; i < Lq; ++i) {
                S* row = ps + i * Lkv;
                if (mask_mode == MaskMode::Causal) {
                    for (int64_t j = i + 1; j < Lkv; ++j) row[j] = neg_big;
                } else if (mask_mode == MaskMode::Explicit) {
                    const uint8_t* mr = mask->data() + i * Lkv;
                    for (int64_t j = 0; j < Lkv; ++j)
                        if (!mr[j]) row[j] = neg_big;
                }
                if (valid)
                    for (int64_t j = 0; j < Lkv; ++j)
                        if (!valid[j]) row[j] = neg_big;
                S mx = row[0];
                for (int64_t j = 1; j < Lkv; ++j) mx = std::max(mx, row[j]);
                if (mx <= neg_big / 2)
                    throw ShapeError("attention: fully masked query row " + std::to_string(i));
                S sum = 0;
                for (int64_t j = 0; j < Lkv; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    sum += row[j];
                }
                S inv = S(1) / sum;
                for (int64_t j = 0; j < Lkv; ++j) row[j] *= inv;
            }
            // out = probs . v
            blas::gemm(false, false, static_cast<int>(Lq), static_cast<int>(hd), static_cast<int>(Lkv),
                       S(1), ps, static_cast<int>(Lkv), vs, static_cast<int>(hd),
                       S(0), os, static_cast<int>(hd));
        }
    }

    bool trace = detail::tracing<S>({&q, &k, &v});
    detail::mark_and_record(out, trace, [q, k, v, probs, out, B, H, Lq, Lkv, hd, inv_sqrt]() mutable {
        RawBuffer<S> dp(static_cast<size_t>(Lq * Lkv));
        RawBuffer<S> ds(static_cast<size_t>(Lq * Lkv));
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t h = 0; h < H; ++h) {
                const S* go = out.grad() + ((b * H + h) * Lq) * hd;
                const S* ps = probs.data() + ((b * H + h) * Lq) * Lkv;
                const S* qs = q.data() + ((b * H + h) * Lq) * hd;
                const S* ks = k.data() + ((b * H + h) * Lkv) * hd;
                const S* vs = v.data() + ((b * H + h) * Lkv) * hd;
                if (v.requires_grad()) {
                    // dV += P^T . dO
                    blas::gemm(true, false, static_cast<int>(Lkv), static_cast<int>(hd), static_cast<int>(Lq),
                               S(1), ps, static_cast<int>(Lkv), go, static_cast<int>(hd),
                               S(1), v.grad() + ((b * H + h) * Lkv) * hd, static_cast<int>(hd));
                }
                // dP = dO . V^T
                blas::gemm(false, true, static_cast<int>(Lq), static_cast<int>(Lkv), static_cast<int>(hd),
                           S(1), go, static_cast<int>(hd), vs, static_cast<int>(hd),
                           S(0), dp.data(), static_cast<int>(Lkv));
                // softmax backward: dS = P * (dP - rowsum(dP * P)); masked entries have P = 0
                for (int64_t i = 0; i < Lq; ++i) {
                    const S* pr = ps + i * Lkv;
                    const S* dpr = dp.data() + i * Lkv;
                    S* dsr = ds.data() + i * Lkv;
                    S dot = 0;
                    for (int64_t j = 0; j < Lkv; ++j) dot += dpr[j] * pr[j];
                    for (int64_t j = 0; j < Lkv; ++j) dsr[j] = pr[j] * (dpr[j] - dot);
                }
                if (q.requires_grad()) {
                    // dQ += dS . K / sqrt(hd)
                    blas::gemm(false, false, static_cast<int>(Lq), static_cast<int>(hd), static_cast<int>(Lkv),
                               inv_sqrt, ds.data(), static_cast<int>(Lkv), ks, static_cast<int>(hd),
                               S(1), q.grad() + ((b * H + h) * Lq) * hd, static_cast<int>(hd));
                }
                if (k.requires_grad()) {
                    // dK += dS^T . Q / sqrt(hd)
                    blas::gemm(true, false, static_cast<int>(Lkv), static_cast<int>(hd), static_cast<int>(Lq),
                               inv_sqrt, ds.data(), static_cast<int>(Lkv), qs, static_cast<int>(hd),
                               S(1), k.grad() + ((b * H + h) * Lkv) * hd, static_cast<int>(hd));
                }
            }
        }
    });
    return out;
}

// Full attention op over packed widths: q [B, Lq, H*hd], k/v [B, Lkv, H*hd].
// Applies optional per-head QK RMSNorm (gamma length H*hd) before the dot
// product, as the stability contract requires.
template <class S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                    const AttentionSpec& spec,
                    const std::vector<uint8_t>* mask = nullptr,
                    const std::vector<uint8_t>* kv_valid = nullptr,
                    const Tensor<S>* gamma_q = nullptr,
                    const Tensor<S>* gamma_k = nullptr) {
    int64_t D = q.dim(-1);
    if (D != static_cast<int64_t>(spec.n_heads) * spec.head_dim)
        throw ShapeError("attention: width != n_heads * head_dim");
    if (k.dim(-1) != D || v.dim(-1) != D) throw ShapeError("attention: k/v width");
    Tensor<S> qn = q, kn = k;
    if (spec.qk_norm) {
        const S eps = static_cast<S>(1e-6);
        Tensor<S> gq = gamma_q ? *gamma_q : Tensor<S>::full({D}, S(1));
        Tensor<S> gk = gamma_k ? *gamma_k : Tensor<S>::full({D}, S(1));
        qn = rms_norm_groups(q, gq, eps, spec.n_heads);
        kn = rms_norm_groups(k, gk, eps, spec.n_heads);
    }
    Tensor<S> qh = split_heads(qn, spec.n_heads);
    Tensor<S> kh = split_heads(kn, spec.n_heads);
    Tensor<S> vh = split_heads(v, spec.n_heads);
    Tensor<S> oh = attention_core(qh, kh, vh, spec.mask_mode, mask, kv_valid);
    return merge_heads(oh);
}

// ---------------------------------------------------------------------------
// conditioning helpers
// ---------------------------------------------------------------------------

// x: [B, L, d], scale/shift: [B, d]; out = x * (1 + scale) + shift
template <class S>
Tensor<S> modulate_scale_shift(const Tensor<S>& x, const Tensor<S>& sc, const Tensor<S>& sh) {
    int64_t B = x.dim(0), L = x.dim(1), d = x.dim(2);
    if (sc.dim(0) != B || sc.dim(-1) != d || sh.dim(0) != B || sh.dim(-1) != d)
        throw ShapeError("modulate: conditioning width mismatch");
    Tensor<S> out = Tensor<S>::uninit(x.shape());
    const S* px = x.data();
    const S* psc = sc.data();
    const S* psh = sh.data();
    S* po = out.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t l = 0; l < L; ++l)
            for (int64_t j = 0; j < d; ++j)
                po[(b * L + l) * d + j] =
                    px[(b * L + l) * d + j] * (S(1) + psc[b * d + j]) + psh[b * d + j];
    bool trace = detail::tracing<S>({&x, &sc, &sh});
    detail::mark_and_record(out, trace, [x, sc, sh, out, B, L, d]() mutable {
        const S* g = out.grad();
        const S* px = x.data();
        const S* psc = sc.data();
        if (x.requires_grad()) {
            S* gx = x.grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t l = 0; l < L; ++l)
                    for (int64_t j = 0; j < d; ++j)
                        gx[(b * L + l) * d + j] += g[(b * L + l) * d + j] * (S(1) + psc[b * d + j]);
        }
        if (sc.requires_grad()) {
            S* gs = sc.grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t l = 0; l < L; ++l)
                    for (int64_t j = 0; j < d; ++j)
                        gs[b * d + j] += g[(b * L + l) * d + j] * px[(b * L + l) * d + j];
        }
        if (sh.requires_grad()) {
            S* gh = sh.grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t l = 0; l < L; ++l)
                    for (int64_t j = 0; j < d; ++j) gh[b * d + j] += g[(b * L + l) * d + j];
        }
    });
    return out;
}

// x: [B, L, d], gate: [B, d]; out = x * gate (broadcast over L)
template <class S>
Tensor<S> mul_rowvec(const Tensor<S>& x, const Tensor<S>& gate) {
    int64_t B = x.dim(0), L = x.dim(1), d = x.dim(2);
    if (gate.dim(0) != B || gate.dim(-1) != d) throw ShapeError("mul_rowvec: gate width mismatch");
    Tensor<S> out = Tensor<S>::uninit(x.shape());
    const S* px = x.data();
    const S* pg = gate.data();
    S* po = out.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t l = 0; l < L; ++l)
            for (int64_t j = 0; j < d; ++j)
                po[(b * L + l) * d + j] = px[(b * L + l) * d + j] * pg[b * d + j];
    bool trace = detail::tracing<S>({&x, &gate});
    detail::mark_and_record(out, trace, [x, gate, out, B, L, d]() mutable {
        const S* g = out.grad();
        const S* px = x.data();
        const S* pg = gate.data();
        if (x.requires_grad()) {
            S* gx = x.grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t l = 0; l < L; ++l)
                    for (int64_t j = 0; j < d; ++j)
                        gx[(b * L + l) * d + j] += g[(b * L + l) * d + j] * pg[b * d + j];
        }
        if (gate.requires_grad()) {
            S* gg = gate.grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t l = 0; l < L; ++l)
                    for (int64_t j = 0; j < d; ++j)
                        gg[b * d + j] += g[(b * L + l) * d + j] * px[(b * L + l) * d + j];
        }
    });
    return out;
}

// masked mean over rows: x [B, L, d], valid [B*L] -> [B, d]
template <class S>
Tensor<S> masked_mean_rows(const Tensor<S>& x, const std::vector<uint8_t>& valid) {
    int64_t B = x.dim(0), L = x.dim(1), d = x.dim(2);
    if (static_cast<int64_t>(valid.size()) != B * L) throw ShapeError("masked_mean: mask length");
    std::vector<int64_t> counts(static_cast<size_t>(B), 0);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t l = 0; l < L; ++l)
            if (valid[b * L + l]) ++counts[static_cast<size_t>(b)];
    for (int64_t b = 0; b < B; ++b)
        if (counts[static_cast<size_t>(b)] == 0)
            throw ShapeError("masked_mean: all positions masked out in row " + std::to_string(b));
    Tensor<S> out = Tensor<S>::zeros({B, d});
    const S* px = x.data();
    S* po = out.data();
    for (int64_t b = 0; b < B; ++b) {
        S inv = S(1) / static_cast<S>(counts[static_cast<size_t>(b)]);
        for (int64_t l = 0; l < L; ++l) {
            if (!valid[b * L + l]) continue;
            for (int64_t j = 0; j < d; ++j) po[b * d + j] += px[(b * L + l) * d + j] * inv;
        }
    }
    bool trace = detail::tracing<S>({&x});
    detail::mark_and_record(out, trace, [x, out, valid, counts, B, L, d]() mutable {
        const S* g = out.grad();
        S* gx = x.grad();
        for (int64_t b = 0; b < B; ++b) {
            S inv = S(1) / static_cast<S>(counts[static_cast<size_t>(b)]);
            for (int64_t l = 0; l < L; ++l) {
                if (!valid[b * L + l]) continue;
                for (int64_t j = 0; j < d; ++j) gx[(b * L + l) * d + j] += g[b * d + j] * inv;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// embedding lookup
// ---------------------------------------------------------------------------

// table: [V, d], ids length L -> [L, d]
template <class S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<int32_t>& ids) {
    int64_t V = table.dim(0), d = table.dim(1);
    int64_t L = static_cast<int64_t>(ids.size());
    for (int32_t id : ids)
        if (id < 0 || id >= V) throw ShapeError("embedding: id out of range: " + std::to_string(id));
    Tensor<S> out = Tensor<S>::uninit({L, d});
    const S* pt = table.data();
    S* po = out.data();
    for (int64_t l = 0; l < L; ++l)
        std::copy(pt + ids[static_cast<size_t>(l)] * d, pt + (ids[static_cast<size_t>(l)] + 1) * d, po + l * d);
    bool trace = detail::tracing<S>({&table});
    detail::mark_and_record(out, trace, [table, out, ids, L, d]() mutable {
        const S* g = out.grad();
        S* gt = table.grad();
        for (int64_t l = 0; l < L; ++l) {
            S* dst = gt + ids[static_cast<size_t>(l)] * d;
            const S* src = g + l * d;
            for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// 3x3 convolution (stride 1, zero padding 1)
// ---------------------------------------------------------------------------

// x: [B, Cin, H, W], w: [Cout, Cin, 3, 3], b: [Cout] -> [B, Cout, H, W]
template <class S>
Tensor<S> conv3x3(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (w.rank() != 4 || w.dim(1) != Cin || w.dim(2) != 3 || w.dim(3) != 3)
        throw ShapeError("conv3x3: weight shape " + shape_str(w.shape()));
    int64_t Cout = w.dim(0);
    if (b.dim(0) != Cout) throw ShapeError("conv3x3: bias shape");
    int64_t K = Cin * 9;
    int64_t HW = H * W;
    Tensor<S> out = Tensor<S>::uninit({B, Cout, H, W});

    // batched im2col patch matrix [B*HW, K], one GEMM over the whole batch
    auto build_col = [x, B, Cin, H, W, HW, K](S* col_all) {
        for (int64_t bi = 0; bi < B; ++bi) {
            const S* xs = x.data() + bi * Cin * HW;
            for (int64_t y = 0; y < H; ++y)
                for (int64_t xcol = 0; xcol < W; ++xcol) {
                    S* row = col_all + ((bi * HW) + y * W + xcol) * K;
                    int64_t idx = 0;
                    for (int64_t c = 0; c < Cin; ++c)
                        for (int64_t dy = -1; dy <= 1; ++dy)
                            for (int64_t dx = -1; dx <= 1; ++dx, ++idx) {
                                int64_t yy = y + dy, xx = xcol + dx;
                                row[idx] = (yy < 0 || yy >= H || xx < 0 || xx >= W)
                                               ? S(0)
                                               : xs[(c * H + yy) * W + xx];
                            }
                }
        }
    };

    {
        RawBuffer<S> col(static_cast<size_t>(B * HW * K));
        RawBuffer<S> tmp(static_cast<size_t>(B * HW * Cout));
        build_col(col.data());
        // [B*HW, K] . [Cout, K]^T -> [B*HW, Cout]
        blas::gemm(false, true, static_cast<int>(B * HW), static_cast<int>(Cout), static_cast<int>(K),
                   S(1), col.data(), static_cast<int>(K), w.data(), static_cast<int>(K),
                   S(0), tmp.data(), static_cast<int>(Cout));
        const S* pb = b.data();
        for (int64_t bi = 0; bi < B; ++bi) {
            S* po = out.data() + bi * Cout * HW;
            const S* ts = tmp.data() + bi * HW * Cout;
            for (int64_t p = 0; p < HW; ++p)
                for (int64_t c = 0; c < Cout; ++c) po[c * HW + p] = ts[p * Cout + c] + pb[c];
        }
    }

    bool trace = detail::tracing<S>({&x, &w, &b});
    detail::mark_and_record(out, trace, [x, w, b, out, build_col, B, Cin, Cout, H, W, K, HW]() mutable {
        RawBuffer<S> dy_t(static_cast<size_t>(B * HW * Cout));
        for (int64_t bi = 0; bi < B; ++bi) {
            const S* g = out.grad() + bi * Cout * HW;
            S* dst = dy_t.data() + bi * HW * Cout;
            for (int64_t p = 0; p < HW; ++p)
                for (int64_t c = 0; c < Cout; ++c) dst[p * Cout + c] = g[c * HW + p];
        }
        if (w.requires_grad()) {
            RawBuffer<S> col(static_cast<size_t>(B * HW * K));
            build_col(col.data());
            // dW += dY^T . col  ([Cout, B*HW] . [B*HW, K])
            blas::gemm(true, false, static_cast<int>(Cout), static_cast<int>(K), static_cast<int>(B * HW),
                       S(1), dy_t.data(), static_cast<int>(Cout), col.data(), static_cast<int>(K),
                       S(1), w.grad(), static_cast<int>(K));
        }
        if (b.requires_grad()) {
            S* gb = b.grad();
            for (int64_t bi = 0; bi < B; ++bi) {
                const S* g = out.grad() + bi * Cout * HW;
                for (int64_t c = 0; c < Cout; ++c) {
                    S acc = 0;
                    for (int64_t p = 0; p < HW; ++p) acc += g[c * HW + p];
                    gb[c] += acc;
                }
            }
        }
        if (x.requires_grad()) {
            RawBuffer<S> dcol(static_cast<size_t>(B * HW * K));
            // dcol = dY . W  ([B*HW, Cout] . [Cout, K])
            blas::gemm(false, false, static_cast<int>(B * HW), static_cast<int>(K), static_cast<int>(Cout),
                       S(1), dy_t.data(), static_cast<int>(Cout), w.data(), static_cast<int>(K),
                       S(0), dcol.data(), static_cast<int>(K));
            for (int64_t bi = 0; bi < B; ++bi) {
                S* gx = x.grad() + bi * Cin * HW;
                for (int64_t y = 0; y < H; ++y)
                    for (int64_t xcol = 0; xcol < W; ++xcol) {
                        const S* row = dcol.data() + ((bi * HW) + y * W + xcol) * K;
                        int64_t idx = 0;
                        for (int64_t c = 0; c < Cin; ++c)
                            for (int64_t dy = -1; dy <= 1; ++dy)
                                for (int64_t dx = -1; dx <= 1; ++dx, ++idx) {
                                    int64_t yy = y + dy, xx = xcol + dx;
                                    if (yy >= 0 && yy < H && xx >= 0 && xx < W)
                                        gx[(c * H + yy) * W + xx] += row[idx];
                                }
                    }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// timestep features
// ---------------------------------------------------------------------------

// Sinusoidal features of an integer step: [sin(t*f_0..), cos(t*f_0..)],
// f_i = 10000^(-i/half). Pure function of t, no gradient.
template <class S>
Tensor<S> timestep_sinusoid(int64_t t, int64_t dim) {
    if (dim % 2 != 0) throw ShapeError("timestep_sinusoid: dim must be even");
    int64_t half = dim / 2;
    Tensor<S> out = Tensor<S>::uninit({dim});
    S* po = out.data();
    for (int64_t i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        double arg = static_cast<double>(t) * freq;
        po[i] = static_cast<S>(std::sin(arg));
        po[half + i] = static_cast<S>(std::cos(arg));
    }
    return out;
}

}  // namespace lidit
