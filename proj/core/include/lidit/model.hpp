#pragma once

#include "lidit/diffusion.hpp"
#include "lidit/pipeline.hpp"

namespace lidit {

struct ModelConfig {
    LIDiTConfig backbone;
    PipelineConfig pipeline;
    std::vector<EncoderSpec> encoders;
    uint64_t init_seed = 0;
};

// Trainable bundle: conditioning pipeline plus denoiser sharing one
// parameter store. The frozen encoders keep their own stores inside the
// pipeline and never touch this one. Construction order fixes the
// initialization stream, so equal (config, seed) means equal weights.
template <class S>
struct GenerativeModel {
    ModelConfig cfg;
    ParamStore<S> params;
    Rng init_rng;
    ConditioningPipeline<S> pipeline;
    LIDiT<S> backbone;

    explicit GenerativeModel(ModelConfig config)
        : cfg(std::move(config)),
          params(),
          init_rng(Rng::fold(cfg.init_seed, 0x1417)),
          pipeline(params, "cond.", make_pipeline_cfg(cfg), cfg.encoders, init_rng),
          backbone(params, "dit.", cfg.backbone, init_rng) {}

    RefinedConditioning<S> condition(const std::string& prompt, int64_t t) const {
        return pipeline.condition(prompt, t);
    }

private:
    static PipelineConfig make_pipeline_cfg(const ModelConfig& c) {
        PipelineConfig p = c.pipeline;
        p.d_model = c.backbone.d_model;
        return p;
    }
};

// Text-to-latent sampling with classifier-free guidance. The prompt
// conditioning is rebuilt at every step because the refiners are
// timestep-conditioned; the learned null conditioning is constant.
// cfg_scale 1 skips the unconditional pass, 0 uses it exclusively.
template <class S>
Tensor<S> sample_latents(const GenerativeModel<S>& model, const std::vector<std::string>& prompts,
                         const Shape& latent_shape, const NoiseSchedule& sched,
                         const SampleParams& params, Rng rng) {
    int64_t B = latent_shape[0];
    if (static_cast<int64_t>(prompts.size()) != B)
        throw ShapeError("sample_latents: prompt count must match batch size");
    NoGradScope<S> ng;
    std::vector<RefinedConditioning<S>> nulls(static_cast<size_t>(B),
                                              model.pipeline.null_conditioning());
    CondBatch<S> null_cond = collate_conditioning(nulls);

    auto denoise = [&](const Tensor<S>& x, int64_t t) {
        std::vector<int64_t> ts(static_cast<size_t>(B), t);
        if (params.cfg_scale == 0.0) return model.backbone.forward(x, ts, null_cond);
        std::vector<RefinedConditioning<S>> conds;
        for (const auto& p : prompts) conds.push_back(model.condition(p, t));
        CondBatch<S> cond = collate_conditioning(conds);
        Tensor<S> e_cond = model.backbone.forward(x, ts, cond);
        if (params.cfg_scale == 1.0) return e_cond;
        Tensor<S> e_unc = model.backbone.forward(x, ts, null_cond);
        return add(e_unc, scale(sub(e_cond, e_unc), static_cast<S>(params.cfg_scale)));
    };
    return ancestral_sample<S>(denoise, latent_shape, sched, params, rng);
}

}  // namespace lidit
