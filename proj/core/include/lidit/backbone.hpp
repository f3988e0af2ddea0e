#pragma once

#include "lidit/collab_refiner.hpp"

namespace lidit {

// ---------------------------------------------------------------------------
// patch <-> token layout ops
// ---------------------------------------------------------------------------

// [B, C, H, W] -> [B, (H/p)(W/p), p*p*C]; token 0 is the top-left patch,
// tokens run row-major over the patch grid. Feature layout per token is
// channel-major: index = (c*p + py)*p + px.
template <class S>
Tensor<S> patchify_pixels(const Tensor<S>& x, int64_t p) {
    int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % p != 0 || W % p != 0)
        throw ShapeError("patchify: resolution " + std::to_string(H) + "x" + std::to_string(W) +
                         " not divisible by patch size " + std::to_string(p));
    int64_t gh = H / p, gw = W / p, L = gh * gw, F = p * p * C;
    Tensor<S> out = Tensor<S>::uninit({B, L, F});
    const S* px = x.data();
    S* po = out.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t gy = 0; gy < gh; ++gy)
            for (int64_t gx = 0; gx < gw; ++gx) {
                S* tok = po + (b * L + gy * gw + gx) * F;
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t py = 0; py < p; ++py)
                        for (int64_t pxi = 0; pxi < p; ++pxi)
                            tok[(c * p + py) * p + pxi] =
                                px[((b * C + c) * H + gy * p + py) * W + gx * p + pxi];
            }
    bool trace = detail::tracing<S>({&x});
    detail::mark_and_record(out, trace, [x, out, B, C, gh, gw, p]() mutable {
        int64_t H = gh * p, W = gw * p, L = gh * gw, F = p * p * C;
        const S* g = out.grad();
        S* gx2 = x.grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t gy = 0; gy < gh; ++gy)
                for (int64_t gxi = 0; gxi < gw; ++gxi) {
                    const S* tok = g + (b * L + gy * gw + gxi) * F;
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t py = 0; py < p; ++py)
                            for (int64_t pxi = 0; pxi < p; ++pxi)
                                gx2[((b * C + c) * H + gy * p + py) * W + gxi * p + pxi] +=
                                    tok[(c * p + py) * p + pxi];
                }
    });
    return out;
}

// exact inverse of patchify_pixels
template <class S>
Tensor<S> unpatchify_pixels(const Tensor<S>& t, int64_t p, int64_t C, int64_t H, int64_t W) {
    int64_t B = t.dim(0), L = t.dim(1), F = t.dim(2);
    int64_t gh = H / p, gw = W / p;
    if (L != gh * gw || F != p * p * C) throw ShapeError("unpatchify: token layout mismatch");
    Tensor<S> out = Tensor<S>::uninit({B, C, H, W});
    const S* pt = t.data();
    S* po = out.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t gy = 0; gy < gh; ++gy)
            for (int64_t gx = 0; gx < gw; ++gx) {
                const S* tok = pt + (b * L + gy * gw + gx) * F;
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t py = 0; py < p; ++py)
                        for (int64_t pxi = 0; pxi < p; ++pxi)
                            po[((b * C + c) * H + gy * p + py) * W + gx * p + pxi] =
                                tok[(c * p + py) * p + pxi];
            }
    bool trace = detail::tracing<S>({&t});
    detail::mark_and_record(out, trace, [t, out, B, C, gh, gw, p]() mutable {
        int64_t H = gh * p, W = gw * p, L = gh * gw, F = p * p * C;
        const S* g = out.grad();
        S* gt = t.grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t gy = 0; gy < gh; ++gy)
                for (int64_t gx = 0; gx < gw; ++gx) {
                    S* tok = gt + (b * L + gy * gw + gx) * F;
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t py = 0; py < p; ++py)
                            for (int64_t pxi = 0; pxi < p; ++pxi)
                                tok[(c * p + py) * p + pxi] +=
                                    g[((b * C + c) * H + gy * p + py) * W + gx * p + pxi];
                }
    });
    return out;
}

// [B, L, d] -> [B, d, gh, gw], row-major token order
template <class S>
Tensor<S> tokens_to_grid(const Tensor<S>& x, int64_t gh, int64_t gw) {
    int64_t B = x.dim(0), L = x.dim(1), d = x.dim(2);
    if (L != gh * gw) throw ShapeError("tokens_to_grid: non-rectangular grid");
    Tensor<S> out = Tensor<S>::uninit({B, d, gh, gw});
    const S* px = x.data();
    S* po = out.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t l = 0; l < L; ++l)
            for (int64_t c = 0; c < d; ++c) po[(b * d + c) * L + l] = px[(b * L + l) * d + c];
    bool trace = detail::tracing<S>({&x});
    detail::mark_and_record(out, trace, [x, out, B, L, d]() mutable {
        const S* g = out.grad();
        S* gx = x.grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t l = 0; l < L; ++l)
                for (int64_t c = 0; c < d; ++c) gx[(b * L + l) * d + c] += g[(b * d + c) * L + l];
    });
    return out;
}

template <class S>
Tensor<S> grid_to_tokens(const Tensor<S>& x) {
    int64_t B = x.dim(0), d = x.dim(1), L = x.dim(2) * x.dim(3);
    Tensor<S> out = Tensor<S>::uninit({B, L, d});
    const S* px = x.data();
    S* po = out.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t l = 0; l < L; ++l)
            for (int64_t c = 0; c < d; ++c) po[(b * L + l) * d + c] = px[(b * d + c) * L + l];
    bool trace = detail::tracing<S>({&x});
    detail::mark_and_record(out, trace, [x, out, B, L, d]() mutable {
        const S* g = out.grad();
        S* gx = x.grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t l = 0; l < L; ++l)
                for (int64_t c = 0; c < d; ++c) gx[(b * d + c) * L + l] += g[(b * L + l) * d + c];
    });
    return out;
}

// ---------------------------------------------------------------------------
// denoiser
// ---------------------------------------------------------------------------

struct LIDiTConfig {
    int64_t depth = 8;
    int64_t d_model = 256;
    int64_t n_heads = 8;
    int64_t patch_size = 2;
    int64_t in_channels = 4;
    int64_t ffn_expansion = 4;
    bool qk_norm = true;
    bool shared_qk_gamma = false;
};

// Batched conditioning, padded to the longest sequence in the batch.
template <class S>
struct CondBatch {
    Tensor<S> tokens;              // [B, Lmax, d_model]
    std::vector<uint8_t> kv_valid;  // B * Lmax
    Tensor<S> pooled;              // [B, d_model]

    bool fully_valid() const {
        for (uint8_t v : kv_valid)
            if (!v) return false;
        return true;
    }
};

template <class S>
CondBatch<S> collate_conditioning(const std::vector<RefinedConditioning<S>>& conds) {
    if (conds.empty()) throw ShapeError("collate_conditioning: empty batch");
    int64_t d = conds[0].tokens.dim(1);
    int64_t lmax = 0;
    for (const auto& c : conds) lmax = std::max(lmax, c.length());
    std::vector<Tensor<S>> rows, pooled;
    CondBatch<S> out;
    for (const auto& c : conds) {
        int64_t L = c.length();
        Tensor<S> r = reshape(c.tokens, {1, L, d});
        if (L < lmax) r = concat<S>({r, Tensor<S>::zeros({1, lmax - L, d})}, 1);
        rows.push_back(r);
        pooled.push_back(reshape(c.pooled, {1, d}));
        for (int64_t i = 0; i < lmax; ++i)
            out.kv_valid.push_back(i < L ? c.mask[static_cast<size_t>(i)] : 0);
    }
    out.tokens = rows.size() == 1 ? rows[0] : concat(rows, 0);
    out.pooled = pooled.size() == 1 ? pooled[0] : concat(pooled, 0);
    return out;
}

// The diffusion transformer: patchify, convolutional positional embedding,
// depth x (modulated self-attention, cross-attention, FFN), then a
// zero-initialized output head predicting the noise. No parameter depends on
// the grid size, so one weight set serves any divisible resolution.
template <class S>
struct LIDiT {
    LIDiTConfig cfg;
    Linear<S> patch_proj;
    ResBlockPosEmbed<S> pos_embed;
    TimestepEmbed<S> t_embed;
    Linear<S> pooled_proj;

    struct Block {
        RMSNorm<S> norm1, norm2, norm3;
        MultiheadAttention<S> self_attn, cross_attn;
        FFN<S> ffn;
        Linear<S> mod_fc1, mod_fc2;  // c -> 9 modulation vectors, final layer zero-init
    };
    std::vector<Block> blocks;
    RMSNorm<S> final_norm;
    Linear<S> final_proj;

    LIDiT() = default;
    LIDiT(ParamStore<S>& ps, const std::string& prefix, LIDiTConfig config, Rng& rng) : cfg(config) {
        if (cfg.d_model % cfg.n_heads != 0)
            throw std::runtime_error("backbone: d_model must be divisible by n_heads");
        int64_t f = cfg.patch_size * cfg.patch_size * cfg.in_channels;
        patch_proj = Linear<S>(ps, prefix + "patch_proj", f, cfg.d_model, rng);
        pos_embed = ResBlockPosEmbed<S>(ps, prefix + "pos_embed", cfg.d_model, rng);
        t_embed = TimestepEmbed<S>(ps, prefix + "t_embed", cfg.d_model, rng);
        pooled_proj = Linear<S>(ps, prefix + "pooled_proj", cfg.d_model, cfg.d_model, rng);
        for (int64_t i = 0; i < cfg.depth; ++i) {
            std::string p = prefix + "block" + std::to_string(i);
            Block b;
            b.norm1 = RMSNorm<S>(ps, p + ".norm1", cfg.d_model);
            b.self_attn = MultiheadAttention<S>(ps, p + ".self_attn", cfg.d_model, cfg.d_model,
                                                static_cast<int>(cfg.n_heads), cfg.qk_norm, rng,
                                                cfg.shared_qk_gamma);
            b.norm2 = RMSNorm<S>(ps, p + ".norm2", cfg.d_model);
            b.cross_attn = MultiheadAttention<S>(ps, p + ".cross_attn", cfg.d_model, cfg.d_model,
                                                 static_cast<int>(cfg.n_heads), cfg.qk_norm, rng,
                                                 cfg.shared_qk_gamma);
            b.norm3 = RMSNorm<S>(ps, p + ".norm3", cfg.d_model);
            b.ffn = FFN<S>(ps, p + ".ffn", cfg.d_model, cfg.ffn_expansion, rng);
            b.mod_fc1 = Linear<S>(ps, p + ".mod.fc1", cfg.d_model, cfg.d_model, rng);
            b.mod_fc2 = Linear<S>(ps, p + ".mod.fc2", cfg.d_model, 9 * cfg.d_model, rng,
                                  /*zero_init=*/true);
            blocks.push_back(std::move(b));
        }
        final_norm = RMSNorm<S>(ps, prefix + "final_norm", cfg.d_model);
        final_proj = Linear<S>(ps, prefix + "final_proj", cfg.d_model, f, rng, /*zero_init=*/true);
    }

    // x: [B, C, H, W]; timesteps: one per sample; returns predicted noise of
    // the same shape
    Tensor<S> forward(const Tensor<S>& x, const std::vector<int64_t>& timesteps,
                      const CondBatch<S>& cond) const {
        int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        if (C != cfg.in_channels) throw ShapeError("backbone: channel count mismatch");
        if (static_cast<int64_t>(timesteps.size()) != B) throw ShapeError("backbone: timestep count");
        if (cond.tokens.dim(0) != B) throw ShapeError("backbone: conditioning batch mismatch");
        int64_t p = cfg.patch_size;
        int64_t gh = H / p, gw = W / p;

        Tensor<S> tokens = patch_proj(patchify_pixels(x, p));
        tokens = grid_to_tokens(pos_embed(tokens_to_grid(tokens, gh, gw)));

        // conditioning vector: timestep embedding + projected pooled text
        std::vector<Tensor<S>> t_rows;
        for (int64_t b = 0; b < B; ++b) t_rows.push_back(t_embed(timesteps[static_cast<size_t>(b)]));
        Tensor<S> c = t_rows.size() == 1 ? t_rows[0] : concat(t_rows, 0);
        c = add(c, pooled_proj(cond.pooled));

        const std::vector<uint8_t>* kv_valid = cond.fully_valid() ? nullptr : &cond.kv_valid;
        for (const Block& b : blocks) {
            Tensor<S> m = b.mod_fc2(silu(b.mod_fc1(c)));  // [B, 9d]
            Tensor<S> m9 = reshape(m, {B, int64_t(9), cfg.d_model});
            auto tri = [&](int64_t i) { return reshape(slice_rows(m9, i, i + 1), {B, cfg.d_model}); };
            Tensor<S> sh1 = tri(0), sc1 = tri(1), g1 = tri(2);
            Tensor<S> sh2 = tri(3), sc2 = tri(4), g2 = tri(5);
            Tensor<S> sh3 = tri(6), sc3 = tri(7), g3 = tri(8);

            Tensor<S> a_in = modulate_scale_shift(b.norm1(tokens), sc1, sh1);
            tokens = add(tokens, mul_rowvec(b.self_attn(a_in, a_in, MaskMode::None), g1));

            Tensor<S> q_in = modulate_scale_shift(b.norm2(tokens), sc2, sh2);
            tokens = add(tokens,
                         mul_rowvec(b.cross_attn(q_in, cond.tokens, MaskMode::None, kv_valid), g2));

            Tensor<S> f_in = modulate_scale_shift(b.norm3(tokens), sc3, sh3);
            tokens = add(tokens, mul_rowvec(b.ffn(f_in), g3));
        }

        Tensor<S> out = final_proj(final_norm(tokens));
        return unpatchify_pixels(out, p, C, H, W);
    }
};

}  // namespace lidit
