#pragma once

#include "lidit/prompt_encoder.hpp"

namespace lidit {

struct AllMaskedError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// mean of embeddings over mask-true positions -> [d_enc]
template <class S>
Tensor<S> pool_context(const PromptEncoding<S>& enc) {
    int64_t L = enc.length(), d = enc.width();
    bool any = false;
    for (uint8_t m : enc.mask)
        if (m) any = true;
    if (!any) throw AllMaskedError("pool_context: every position is masked out");
    Tensor<S> x = reshape(enc.embeddings, {1, L, d});
    return reshape(masked_mean_rows(x, enc.mask), {d});
}

struct RefinerConfig {
    int64_t n_blocks = 2;
    int64_t d_enc = 0;
    int64_t n_heads = 4;
    bool gating_enabled = true;
    bool full_attention = true;     // ablation switch: false re-applies the causal mask
    bool shared_gate_head = false;  // one gate head for both sub-layers instead of two
};

// Full-attention transformer stack over one encoder's output. Each block
// adds gated residuals:
//   H <- H + g1(ctx) * SelfAttn(norm(H));  H <- H + g2(ctx) * FFN(norm(H))
// ctx = pooled input representation + projected timestep embedding, computed
// once per call from the refiner input. Gate projections start at zero, so a
// freshly built refiner is exactly the identity.
template <class S>
struct TokenRefiner {
    RefinerConfig cfg;
    TimestepEmbed<S> t_embed;
    Linear<S> t_proj;

    struct Block {
        RMSNorm<S> norm1, norm2;
        MultiheadAttention<S> attn;
        FFN<S> ffn;
        Linear<S> gate1, gate2;  // ctx -> per-channel gates, zero-init
    };
    std::vector<Block> blocks;

    TokenRefiner() = default;
    TokenRefiner(ParamStore<S>& ps, const std::string& prefix, RefinerConfig config, Rng& rng)
        : cfg(config) {
        if (cfg.n_blocks < 1) throw std::runtime_error("token refiner: need at least one block");
        if (cfg.d_enc <= 0) throw std::runtime_error("token refiner: d_enc unset");
        t_embed = TimestepEmbed<S>(ps, prefix + "t_embed", cfg.d_enc, rng);
        t_proj = Linear<S>(ps, prefix + "t_proj", cfg.d_enc, cfg.d_enc, rng);
        for (int64_t i = 0; i < cfg.n_blocks; ++i) {
            std::string p = prefix + "block" + std::to_string(i);
            Block b;
            b.norm1 = RMSNorm<S>(ps, p + ".norm1", cfg.d_enc);
            b.attn = MultiheadAttention<S>(ps, p + ".attn", cfg.d_enc, cfg.d_enc,
                                           static_cast<int>(cfg.n_heads), /*qk_norm=*/false, rng);
            b.norm2 = RMSNorm<S>(ps, p + ".norm2", cfg.d_enc);
            b.ffn = FFN<S>(ps, p + ".ffn", cfg.d_enc, 4, rng);
            if (cfg.gating_enabled) {
                b.gate1 = Linear<S>(ps, p + ".gate1", cfg.d_enc, cfg.d_enc, rng, /*zero_init=*/true);
                if (!cfg.shared_gate_head)
                    b.gate2 = Linear<S>(ps, p + ".gate2", cfg.d_enc, cfg.d_enc, rng, /*zero_init=*/true);
            }
            blocks.push_back(std::move(b));
        }
    }

    // conditioning vector shared by every block's gates: [1, d_enc]
    Tensor<S> gate_context(const PromptEncoding<S>& enc, int64_t t) const {
        Tensor<S> pooled = reshape(pool_context(enc), {1, cfg.d_enc});
        return add(pooled, t_proj(t_embed(t)));
    }

    PromptEncoding<S> refine(const PromptEncoding<S>& enc, int64_t t) const {
        if (enc.width() != cfg.d_enc)
            throw ShapeError("token refiner: encoder width " + std::to_string(enc.width()) +
                             " != configured " + std::to_string(cfg.d_enc));
        int64_t L = enc.length();
        MaskMode mode = cfg.full_attention ? MaskMode::None : MaskMode::Causal;

        Tensor<S> ctx;
        if (cfg.gating_enabled) ctx = gate_context(enc, t);

        Tensor<S> h = reshape(enc.embeddings, {1, L, cfg.d_enc});
        for (const Block& b : blocks) {
            Tensor<S> n1 = b.norm1(h);
            Tensor<S> attn_out = b.attn(n1, n1, mode);
            if (cfg.gating_enabled) attn_out = mul_rowvec(attn_out, b.gate1(ctx));
            h = add(h, attn_out);
            Tensor<S> ffn_out = b.ffn(b.norm2(h));
            if (cfg.gating_enabled)
                ffn_out = mul_rowvec(ffn_out, (cfg.shared_gate_head ? b.gate1 : b.gate2)(ctx));
            h = add(h, ffn_out);
        }

        PromptEncoding<S> out;
        out.embeddings = reshape(h, {L, cfg.d_enc});
        out.mask = enc.mask;
        out.instruction_len = enc.instruction_len;
        out.encoder_id = enc.encoder_id;
        return out;
    }
};

}  // namespace lidit
