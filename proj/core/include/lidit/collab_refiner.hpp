#pragma once

#include "lidit/token_refiner.hpp"

namespace lidit {

// drops the prepended instruction rows; prompt-token order is preserved
template <class S>
PromptEncoding<S> truncate_instruction(const PromptEncoding<S>& enc) {
    int64_t L = enc.length(), d = enc.width();
    if (enc.instruction_len >= L)
        throw ShapeError("truncate_instruction: nothing would remain (instruction_len " +
                         std::to_string(enc.instruction_len) + " >= L " + std::to_string(L) + ")");
    PromptEncoding<S> out;
    if (enc.instruction_len == 0) {
        out.embeddings = enc.embeddings;
    } else {
        Tensor<S> x = reshape(enc.embeddings, {1, L, d});
        out.embeddings = reshape(slice_rows(x, enc.instruction_len, L), {L - enc.instruction_len, d});
    }
    out.mask.assign(enc.mask.begin() + static_cast<ptrdiff_t>(enc.instruction_len), enc.mask.end());
    out.instruction_len = 0;
    out.encoder_id = enc.encoder_id;
    return out;
}

struct CollabConfig {
    int64_t n_blocks = 1;
    std::vector<int64_t> branch_widths;  // one entry per encoder branch
    int64_t d_model = 0;
    int64_t n_heads = 8;
};

template <class S>
struct RefinedConditioning {
    Tensor<S> tokens;           // [L_cond, d_model]
    std::vector<uint8_t> mask;  // length L_cond
    Tensor<S> pooled;           // [d_model]

    int64_t length() const { return tokens.dim(0); }
};

// Parallel per-branch refinement with cross-branch information exchange.
// Each branch is first projected to the backbone width. Per block, per
// branch b:
//   H_b <- H_b + gate * CrossAttn(q = mod(norm(H_b)), kv = other branches)
//   H_b <- H_b + gate * FFN(mod(norm(H_b)))
// Cross-attention reads the other branches' states at block entry, so
// branch updates within a block are order-independent. Modulation and
// gating are conditioned per branch on (pooled branch input + timestep),
// the same recipe the token refiner uses, and start at zero. After the
// blocks the instruction rows are dropped per branch and the surviving
// tokens are concatenated in declared branch order.
template <class S>
struct CollabRefiner {
    CollabConfig cfg;
    TimestepEmbed<S> t_embed;
    Linear<S> t_proj;
    std::vector<Linear<S>> proj;       // branch width -> d_model
    std::vector<Linear<S>> pool_proj;  // branch width -> d_model (context path)

    struct BranchBlock {
        RMSNorm<S> norm_q, norm_f;
        MultiheadAttention<S> cross;
        FFN<S> ffn;
        ModulationHead<S> mod_cross, mod_ffn;
    };
    // blocks[block][branch]
    std::vector<std::vector<BranchBlock>> blocks;

    CollabRefiner() = default;
    CollabRefiner(ParamStore<S>& ps, const std::string& prefix, CollabConfig config, Rng& rng)
        : cfg(std::move(config)) {
        if (cfg.n_blocks < 1) throw std::runtime_error("collab refiner: need at least one block");
        if (cfg.branch_widths.empty()) throw std::runtime_error("collab refiner: no branches");
        if (cfg.d_model <= 0) throw std::runtime_error("collab refiner: d_model unset");
        t_embed = TimestepEmbed<S>(ps, prefix + "t_embed", cfg.d_model, rng);
        t_proj = Linear<S>(ps, prefix + "t_proj", cfg.d_model, cfg.d_model, rng);
        for (size_t br = 0; br < cfg.branch_widths.size(); ++br) {
            std::string p = prefix + "branch" + std::to_string(br);
            proj.push_back(Linear<S>(ps, p + ".proj", cfg.branch_widths[br], cfg.d_model, rng));
            pool_proj.push_back(Linear<S>(ps, p + ".pool_proj", cfg.branch_widths[br], cfg.d_model, rng));
        }
        for (int64_t bl = 0; bl < cfg.n_blocks; ++bl) {
            std::vector<BranchBlock> row;
            for (size_t br = 0; br < cfg.branch_widths.size(); ++br) {
                std::string p = prefix + "block" + std::to_string(bl) + ".branch" + std::to_string(br);
                BranchBlock bb;
                bb.norm_q = RMSNorm<S>(ps, p + ".norm_q", cfg.d_model);
                bb.norm_f = RMSNorm<S>(ps, p + ".norm_f", cfg.d_model);
                bb.cross = MultiheadAttention<S>(ps, p + ".cross", cfg.d_model, cfg.d_model,
                                                 static_cast<int>(cfg.n_heads), /*qk_norm=*/false, rng);
                bb.ffn = FFN<S>(ps, p + ".ffn", cfg.d_model, 4, rng);
                bb.mod_cross = ModulationHead<S>(ps, p + ".mod_cross", cfg.d_model, cfg.d_model, rng);
                bb.mod_ffn = ModulationHead<S>(ps, p + ".mod_ffn", cfg.d_model, cfg.d_model, rng);
                row.push_back(std::move(bb));
            }
            blocks.push_back(std::move(row));
        }
    }

    RefinedConditioning<S> refine(const std::vector<PromptEncoding<S>>& branches, int64_t t) const {
        size_t nb = cfg.branch_widths.size();
        if (branches.size() != nb)
            throw ShapeError("collab refiner: expected " + std::to_string(nb) + " branches, got " +
                             std::to_string(branches.size()));
        for (size_t br = 0; br < nb; ++br)
            if (branches[br].width() != cfg.branch_widths[br])
                throw ShapeError("collab refiner: branch " + std::to_string(br) + " width mismatch");

        // project to the backbone width; context from each branch's input
        std::vector<Tensor<S>> h(nb);
        std::vector<Tensor<S>> ctx(nb);
        Tensor<S> te = t_proj(t_embed(t));
        for (size_t br = 0; br < nb; ++br) {
            int64_t L = branches[br].length();
            h[br] = proj[br](reshape(branches[br].embeddings, {1, L, cfg.branch_widths[br]}));
            Tensor<S> pooled = reshape(pool_context(branches[br]), {1, cfg.branch_widths[br]});
            ctx[br] = add(pool_proj[br](pooled), te);
        }

        for (const auto& row : blocks) {
            // cross-attention reads the states other branches had at block entry
            std::vector<Tensor<S>> entry = h;
            if (nb > 1) {
                for (size_t br = 0; br < nb; ++br) {
                    const BranchBlock& bb = row[br];
                    std::vector<Tensor<S>> others;
                    std::vector<uint8_t> kv_mask;
                    for (size_t ob = 0; ob < nb; ++ob) {
                        if (ob == br) continue;
                        others.push_back(entry[ob]);
                        kv_mask.insert(kv_mask.end(), branches[ob].mask.begin(), branches[ob].mask.end());
                    }
                    Tensor<S> kv = others.size() == 1 ? others[0] : concat(others, 1);
                    auto m = bb.mod_cross(ctx[br]);
                    Tensor<S> q = modulate_scale_shift(bb.norm_q(h[br]), m.scale, m.shift);
                    bool all_valid = true;
                    for (uint8_t v : kv_mask)
                        if (!v) all_valid = false;
                    Tensor<S> attn_out = bb.cross(q, kv, MaskMode::None, all_valid ? nullptr : &kv_mask);
                    h[br] = add(h[br], mul_rowvec(attn_out, m.gate));
                }
            }
            for (size_t br = 0; br < nb; ++br) {
                const BranchBlock& bb = row[br];
                auto m = bb.mod_ffn(ctx[br]);
                Tensor<S> x = modulate_scale_shift(bb.norm_f(h[br]), m.scale, m.shift);
                h[br] = add(h[br], mul_rowvec(bb.ffn(x), m.gate));
            }
        }

        // drop instruction rows per branch, then concatenate surviving tokens
        std::vector<Tensor<S>> kept;
        std::vector<uint8_t> mask;
        for (size_t br = 0; br < nb; ++br) {
            int64_t L = branches[br].length();
            int64_t il = branches[br].instruction_len;
            if (il >= L) throw ShapeError("collab refiner: branch truncation would drop every token");
            kept.push_back(il == 0 ? h[br] : slice_rows(h[br], il, L));
            mask.insert(mask.end(), branches[br].mask.begin() + static_cast<ptrdiff_t>(il),
                        branches[br].mask.end());
        }
        Tensor<S> tokens3 = kept.size() == 1 ? kept[0] : concat(kept, 1);
        int64_t L_cond = tokens3.dim(1);

        RefinedConditioning<S> out;
        out.tokens = reshape(tokens3, {L_cond, cfg.d_model});
        out.mask = mask;
        out.pooled = reshape(masked_mean_rows(tokens3, mask), {cfg.d_model});
        return out;
    }
};

}  // namespace lidit
