#pragma once

#include <memory>

#include "lidit/backbone.hpp"
#include "lidit/image.hpp"

namespace lidit {

// stable content hash of a token sequence; names fixture files on disk
inline uint64_t token_sequence_hash(const TokenSequence& seq) {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h = (h ^ (v & 0xff)) * 1099511628211ull;
            v >>= 8;
        }
    };
    mix(static_cast<uint64_t>(seq.instruction_len));
    for (int32_t id : seq.token_ids) mix(static_cast<uint64_t>(static_cast<uint32_t>(id)));
    return h;
}

inline std::string fixture_file_name(const TokenSequence& seq) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx.lief",
                  static_cast<unsigned long long>(token_sequence_hash(seq)));
    return buf;
}

struct EncoderSpec {
    enum class Kind { Toy, FixtureDir };
    Kind kind = Kind::Toy;
    ToyLMConfig toy;
    std::string fixture_dir;  // Kind::FixtureDir
    int64_t d_enc() const { return toy.d_enc; }
};

// Frozen embedding source: an in-process toy LM, or precomputed fixture
// files looked up by token-sequence hash.
template <class S>
struct EncoderHandle {
    EncoderSpec spec;
    std::unique_ptr<ToyCausalLM<S>> lm;

    explicit EncoderHandle(EncoderSpec s) : spec(std::move(s)) {
        if (spec.kind == EncoderSpec::Kind::Toy) lm = std::make_unique<ToyCausalLM<S>>(spec.toy);
    }

    int64_t width() const { return spec.toy.d_enc; }
    const std::string& id() const { return spec.toy.id; }

    PromptEncoding<S> encode(const TokenSequence& seq) const {
        if (spec.kind == EncoderSpec::Kind::Toy) return lm->encode(seq);
        std::string path = spec.fixture_dir + "/" + fixture_file_name(seq);
        PromptEncoding<S> enc = from_fixture<S>(load_fixture(path), spec.toy.id);
        if (enc.width() != width())
            throw FixtureError(FixtureError::Kind::BadHeader,
                               "fixture width " + std::to_string(enc.width()) + " != encoder width " +
                                   std::to_string(width()) + ": " + path);
        return enc;
    }
};

enum class FusionMode { Single, Concat, Collab };

struct PipelineConfig {
    bool instruction_enabled = true;
    std::string instruction_text = kDefaultInstruction;
    bool token_refiner_enabled = true;
    int64_t refiner_blocks = 2;
    int64_t refiner_heads = 4;
    bool refiner_gating = true;
    bool refiner_full_attention = true;
    bool refiner_shared_gate_head = false;
    FusionMode fusion = FusionMode::Collab;
    size_t single_encoder = 0;  // branch used when fusion == Single
    int64_t collab_blocks = 1;
    int64_t collab_heads = 8;
    int64_t d_model = 256;
};

// Text -> conditioning: tokenize with the optional instruction prefix, run
// each frozen encoder, refine per branch, then fuse. Also owns the learned
// null conditioning used for classifier-free guidance dropout.
template <class S>
struct ConditioningPipeline {
    PipelineConfig cfg;
    std::vector<EncoderHandle<S>> encoders;
    std::vector<TokenRefiner<S>> refiners;       // one per active branch
    std::unique_ptr<CollabRefiner<S>> collab;    // fusion == Collab
    std::vector<Linear<S>> proj;                 // fusion != Collab
    Tensor<S> null_tokens, null_pooled;

    ConditioningPipeline(ParamStore<S>& ps, const std::string& prefix, PipelineConfig config,
                         std::vector<EncoderSpec> encoder_specs, Rng& rng)
        : cfg(std::move(config)) {
        if (encoder_specs.empty()) throw std::runtime_error("pipeline: no encoders configured");
        if (cfg.fusion == FusionMode::Single) {
            if (cfg.single_encoder >= encoder_specs.size())
                throw std::runtime_error("pipeline: single_encoder index out of range");
        } else if (encoder_specs.size() < 2) {
            throw std::runtime_error("pipeline: concat/collab fusion needs at least two encoders");
        }
        for (auto& es : encoder_specs) encoders.emplace_back(std::move(es));

        std::vector<int64_t> widths;
        for (size_t b : active_branches()) widths.push_back(encoders[b].width());

        if (cfg.token_refiner_enabled) {
            for (size_t i = 0; i < widths.size(); ++i) {
                RefinerConfig rc;
                rc.n_blocks = cfg.refiner_blocks;
                rc.d_enc = widths[i];
                rc.n_heads = cfg.refiner_heads;
                rc.gating_enabled = cfg.refiner_gating;
                rc.full_attention = cfg.refiner_full_attention;
                rc.shared_gate_head = cfg.refiner_shared_gate_head;
                refiners.emplace_back(ps, prefix + "refiner" + std::to_string(i) + ".", rc, rng);
            }
        }

        if (cfg.fusion == FusionMode::Collab) {
            CollabConfig cc;
            cc.n_blocks = cfg.collab_blocks;
            cc.branch_widths = widths;
            cc.d_model = cfg.d_model;
            cc.n_heads = cfg.collab_heads;
            collab = std::make_unique<CollabRefiner<S>>(ps, prefix + "collab.", cc, rng);
        } else {
            for (size_t i = 0; i < widths.size(); ++i)
                proj.emplace_back(ps, prefix + "proj" + std::to_string(i), widths[i], cfg.d_model, rng);
        }

        null_tokens = ps.add(prefix + "null_tokens", init_trunc_normal<S>({1, cfg.d_model}, rng));
        null_pooled = ps.add(prefix + "null_pooled", init_trunc_normal<S>({cfg.d_model}, rng));
    }

    std::vector<size_t> active_branches() const {
        if (cfg.fusion == FusionMode::Single) return {cfg.single_encoder};
        std::vector<size_t> all(encoders.size());
        for (size_t i = 0; i < all.size(); ++i) all[i] = i;
        return all;
    }

    TokenSequence tokenize_prompt(const std::string& prompt) const {
        std::string instruction = cfg.instruction_enabled ? cfg.instruction_text : "";
        return build_input(instruction, prompt, Vocab::standard());
    }

    RefinedConditioning<S> condition(const std::string& prompt, int64_t t) const {
        TokenSequence seq = tokenize_prompt(prompt);
        std::vector<PromptEncoding<S>> branches;
        std::vector<size_t> active = active_branches();
        for (size_t i = 0; i < active.size(); ++i) {
            PromptEncoding<S> enc = encoders[active[i]].encode(seq);
            if (cfg.token_refiner_enabled) enc = refiners[i].refine(enc, t);
            branches.push_back(std::move(enc));
        }
        if (cfg.fusion == FusionMode::Collab) return collab->refine(branches, t);

        // single / concat: project each truncated branch and join
        std::vector<Tensor<S>> kept;
        std::vector<uint8_t> mask;
        for (size_t i = 0; i < branches.size(); ++i) {
            PromptEncoding<S> cut = truncate_instruction(branches[i]);
            kept.push_back(proj[i](reshape(cut.embeddings, {1, cut.length(), cut.width()})));
            mask.insert(mask.end(), cut.mask.begin(), cut.mask.end());
        }
        Tensor<S> tokens3 = kept.size() == 1 ? kept[0] : concat(kept, 1);
        RefinedConditioning<S> out;
        out.tokens = reshape(tokens3, {tokens3.dim(1), cfg.d_model});
        out.mask = mask;
        out.pooled = reshape(masked_mean_rows(tokens3, mask), {cfg.d_model});
        return out;
    }

    RefinedConditioning<S> null_conditioning() const {
        RefinedConditioning<S> out;
        out.tokens = null_tokens;
        out.mask = {1};
        out.pooled = null_pooled;
        return out;
    }
};

}  // namespace lidit
