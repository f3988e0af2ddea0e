#pragma once

#include <string>
#include <vector>

#include "lidit/fixture.hpp"
#include "lidit/nn.hpp"
#include "lidit/tokenizer.hpp"

namespace lidit {

inline constexpr const char* kDefaultInstruction =
    "Describe the image by detailing the color, shape, size, texture, quantity, text, and "
    "spatial relationships of the objects.";

struct EmptyPromptError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TokenSequence {
    std::vector<int32_t> token_ids;
    int64_t instruction_len = 0;
    int64_t prompt_len = 0;
};

// instruction tokens are prepended to the prompt tokens; both counts recorded
inline TokenSequence build_input(const std::string& instruction, const std::string& prompt,
                                 const Vocab& vocab) {
    TokenSequence seq;
    std::vector<int32_t> instr = tokenize(vocab, instruction);
    std::vector<int32_t> body = tokenize(vocab, prompt);
    if (body.empty()) throw EmptyPromptError("prompt tokenizes to zero tokens");
    seq.instruction_len = static_cast<int64_t>(instr.size());
    seq.prompt_len = static_cast<int64_t>(body.size());
    seq.token_ids = std::move(instr);
    seq.token_ids.insert(seq.token_ids.end(), body.begin(), body.end());
    return seq;
}

template <class S>
struct PromptEncoding {
    Tensor<S> embeddings;       // [L, d_enc]
    std::vector<uint8_t> mask;  // length L
    int64_t instruction_len = 0;
    std::string encoder_id;

    int64_t length() const { return embeddings.dim(0); }
    int64_t width() const { return embeddings.dim(1); }
};

template <class S>
FixtureData to_fixture(const PromptEncoding<S>& enc) {
    FixtureData fx;
    fx.L = static_cast<uint32_t>(enc.length());
    fx.d_enc = static_cast<uint32_t>(enc.width());
    fx.instruction_len = static_cast<uint32_t>(enc.instruction_len);
    fx.embeddings.resize(static_cast<size_t>(fx.L) * fx.d_enc);
    for (size_t i = 0; i < fx.embeddings.size(); ++i)
        fx.embeddings[i] = static_cast<float>(enc.embeddings.at(static_cast<int64_t>(i)));
    fx.mask = enc.mask;
    return fx;
}

template <class S>
PromptEncoding<S> from_fixture(const FixtureData& fx, std::string encoder_id) {
    PromptEncoding<S> enc;
    std::vector<S> data(fx.embeddings.begin(), fx.embeddings.end());
    enc.embeddings = Tensor<S>::from_data({fx.L, fx.d_enc}, std::move(data));
    enc.mask = fx.mask;
    enc.instruction_len = fx.instruction_len;
    enc.encoder_id = std::move(encoder_id);
    return enc;
}

// ---------------------------------------------------------------------------
// toy frozen causal language model
// ---------------------------------------------------------------------------

struct ToyLMConfig {
    int64_t vocab_size = 0;
    int64_t n_layers = 4;
    int64_t d_enc = 128;
    int64_t n_heads = 4;
    int64_t max_len = 160;
    uint64_t seed = 1;
    std::string id = "toy";
};

// Frozen random causal decoder. Hidden states are tapped at the output of
// block index n_layers - 3 (the third-to-last block). Parameters never join
// an optimizer; encode() is a pure function of (seed, token_ids).
template <class S>
struct ToyCausalLM {
    ToyLMConfig cfg;
    ParamStore<S> params;
    Tensor<S> token_embed, pos_embed;

    struct Block {
        RMSNorm<S> norm1, norm2;
        MultiheadAttention<S> attn;
        FFN<S> ffn;
    };
    std::vector<Block> blocks;

    explicit ToyCausalLM(ToyLMConfig config) : cfg(std::move(config)) {
        if (cfg.n_layers < 3) throw std::runtime_error("toy lm: need at least 3 layers for the tap point");
        if (cfg.vocab_size <= 0) cfg.vocab_size = Vocab::standard().size();
        params.frozen = true;
        Rng rng(Rng::fold(cfg.seed, 0x70f11));
        token_embed = params.add("token_embed", init_trunc_normal<S>({cfg.vocab_size, cfg.d_enc}, rng, 0.02));
        pos_embed = params.add("pos_embed", init_trunc_normal<S>({cfg.max_len, cfg.d_enc}, rng, 0.02));
        // only blocks up to the tap point are ever evaluated, but the full
        // stack is materialized so the frozen-parameter hash covers it
        for (int64_t i = 0; i < cfg.n_layers; ++i) {
            std::string p = "block" + std::to_string(i);
            Block b;
            b.norm1 = RMSNorm<S>(params, p + ".norm1", cfg.d_enc);
            b.attn = MultiheadAttention<S>(params, p + ".attn", cfg.d_enc, cfg.d_enc,
                                           static_cast<int>(cfg.n_heads), /*qk_norm=*/false, rng);
            b.norm2 = RMSNorm<S>(params, p + ".norm2", cfg.d_enc);
            b.ffn = FFN<S>(params, p + ".ffn", cfg.d_enc, 4, rng);
            blocks.push_back(std::move(b));
        }
    }

    int64_t tap_block() const { return cfg.n_layers - 3; }

    PromptEncoding<S> encode(const TokenSequence& seq) const {
        int64_t L = static_cast<int64_t>(seq.token_ids.size());
        if (L > cfg.max_len) throw std::runtime_error("toy lm: sequence longer than max_len");
        for (int32_t id : seq.token_ids)
            if (id < 0 || id >= cfg.vocab_size)
                throw std::runtime_error("toy lm: token id out of vocabulary: " + std::to_string(id));
        NoGradScope<S> ng;  // frozen: the encoder never contributes gradients
        Tensor<S> h = embedding(token_embed, seq.token_ids);
        Tensor<S> pos = slice_rows(reshape(pos_embed, {1, cfg.max_len, cfg.d_enc}), 0, L);
        h = add(reshape(h, {1, L, cfg.d_enc}), pos);
        for (int64_t i = 0; i <= tap_block(); ++i) {
            const Block& b = blocks[static_cast<size_t>(i)];
            Tensor<S> n1 = b.norm1(h);
            h = add(h, b.attn(n1, n1, MaskMode::Causal));
            h = add(h, b.ffn(b.norm2(h)));
        }
        PromptEncoding<S> enc;
        enc.embeddings = reshape(h, {L, cfg.d_enc});
        enc.mask.assign(static_cast<size_t>(L), 1);
        enc.instruction_len = seq.instruction_len;
        enc.encoder_id = cfg.id;
        return enc;
    }
};

}  // namespace lidit
