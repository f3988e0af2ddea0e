#pragma once

#include <chrono>
#include <cmath>

#include "lidit/checkpoint.hpp"
#include "lidit/codec.hpp"
#include "lidit/dataset.hpp"
#include "lidit/model.hpp"

namespace lidit {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 1.0;  // global-norm cap; 0 disables
};

template <class S>
struct AdamW {
    AdamWConfig cfg;
    std::vector<std::vector<S>> m, v;
    int64_t step_count = 0;

    void init(const ParamStore<S>& ps) {
        m.clear();
        v.clear();
        for (const auto& [name, t] : ps.items) {
            m.emplace_back(static_cast<size_t>(t.numel()), S(0));
            v.emplace_back(static_cast<size_t>(t.numel()), S(0));
        }
    }

    // applies one update from accumulated gradients; returns the pre-clip
    // global gradient norm
    double step(ParamStore<S>& ps) {
        double sq = 0.0;
        for (auto& [name, t] : ps.items) {
            const S* g = t.grad();
            for (int64_t i = 0; i < t.numel(); ++i) sq += static_cast<double>(g[i]) * g[i];
        }
        double norm = std::sqrt(sq);
        double scale = 1.0;
        if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) scale = cfg.grad_clip / norm;

        ++step_count;
        double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count));
        double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count));
        for (size_t pi = 0; pi < ps.items.size(); ++pi) {
            auto& t = ps.items[pi].second;
            S* p = t.data();
            S* g = t.grad();
            S* mi = m[pi].data();
            S* vi = v[pi].data();
            for (int64_t i = 0; i < t.numel(); ++i) {
                double gi = static_cast<double>(g[i]) * scale;
                double mn = cfg.beta1 * mi[i] + (1.0 - cfg.beta1) * gi;
                double vn = cfg.beta2 * vi[i] + (1.0 - cfg.beta2) * gi * gi;
                mi[i] = static_cast<S>(mn);
                vi[i] = static_cast<S>(vn);
                double update = (mn / bc1) / (std::sqrt(vn / bc2) + cfg.eps);
                p[i] = static_cast<S>(p[i] - cfg.lr * (update + cfg.weight_decay * p[i]));
            }
        }
        return norm;
    }
};

template <class S>
struct Ema {
    double decay = 0.999;
    std::vector<std::vector<S>> shadow;

    void init(const ParamStore<S>& ps) {
        shadow.clear();
        for (const auto& [name, t] : ps.items)
            shadow.emplace_back(t.data(), t.data() + t.numel());
    }

    void update(const ParamStore<S>& ps) {
        for (size_t pi = 0; pi < ps.items.size(); ++pi) {
            const S* p = ps.items[pi].second.data();
            S* sh = shadow[pi].data();
            int64_t n = ps.items[pi].second.numel();
            for (int64_t i = 0; i < n; ++i)
                sh[i] = static_cast<S>(decay * sh[i] + (1.0 - decay) * p[i]);
        }
    }
};

struct TrainConfig {
    int64_t steps = 20000;
    int64_t batch_size = 8;
    AdamWConfig adamw;
    double ema_decay = 0.999;
    double cond_dropout = 0.1;
    int64_t checkpoint_every = 2000;
    uint64_t seed = 0;
    int64_t T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    SigmaMode sigma_mode = SigmaMode::Beta;
    CorpusConfig corpus;
};

struct StepMetrics {
    int64_t step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

// Single-threaded training loop over the procedural corpus. Every random
// draw is a pure function of (seed, step), so resuming from a checkpoint
// reproduces the uninterrupted run exactly.
template <class S>
class Trainer {
public:
    Trainer(GenerativeModel<S>& model, TrainConfig cfg)
        : model_(model), cfg_(std::move(cfg)),
          sched_(NoiseSchedule::linear(cfg_.T, cfg_.beta_start, cfg_.beta_end)) {
        opt_.cfg = cfg_.adamw;
        opt_.init(model_.params);
        ema_.decay = cfg_.ema_decay;
        ema_.init(model_.params);
        codec_ = std::make_unique<IdentityCodec>();
    }

    const NoiseSchedule& schedule() const { return sched_; }
    int64_t current_step() const { return step_; }
    const Ema<S>& ema() const { return ema_; }

    StepMetrics step() {
        auto t0 = std::chrono::steady_clock::now();
        int64_t s = step_ + 1;

        Rng rng_idx(Rng::fold(Rng::fold(cfg_.seed, 1), static_cast<uint64_t>(s)));
        Rng rng_t(Rng::fold(Rng::fold(cfg_.seed, 2), static_cast<uint64_t>(s)));
        Rng rng_eps(Rng::fold(Rng::fold(cfg_.seed, 3), static_cast<uint64_t>(s)));
        Rng rng_drop(Rng::fold(Rng::fold(cfg_.seed, 4), static_cast<uint64_t>(s)));

        int64_t B = cfg_.batch_size;
        int64_t ih = codec_->latent_extent(cfg_.corpus.image_size);
        int64_t ch = codec_->channels();

        Tensor<S> x0 = Tensor<S>::zeros({B, ch, ih, ih});
        Tensor<S> eps = Tensor<S>::zeros(x0.shape());
        S* pe = eps.data();
        for (int64_t i = 0; i < eps.numel(); ++i) pe[i] = static_cast<S>(rng_eps.next_normal());

        std::vector<int64_t> ts(static_cast<size_t>(B));
        std::vector<std::string> captions(static_cast<size_t>(B));
        std::vector<bool> drop(static_cast<size_t>(B));
        int64_t per = ch * ih * ih;
        for (int64_t b = 0; b < B; ++b) {
            int64_t idx = rng_idx.next_int(0, cfg_.corpus.size - 1);
            SceneRecord rec = corpus_record(cfg_.corpus, idx);
            Tensor<float> latent = codec_->encode_image(render_scene(rec.shapes, cfg_.corpus.image_size));
            for (int64_t i = 0; i < per; ++i)
                x0.data()[b * per + i] = static_cast<S>(latent.at(i));
            captions[static_cast<size_t>(b)] = rec.caption;
            ts[static_cast<size_t>(b)] = rng_t.next_int(1, cfg_.T);
            drop[static_cast<size_t>(b)] = rng_drop.next_uniform() < cfg_.cond_dropout;
        }

        double loss_value = 0.0;
        double grad_norm = 0.0;
        {
            Tape<S> tape;
            TapeScope<S> scope(tape);
            std::vector<RefinedConditioning<S>> conds;
            for (int64_t b = 0; b < B; ++b)
                conds.push_back(drop[static_cast<size_t>(b)]
                                    ? model_.pipeline.null_conditioning()
                                    : model_.condition(captions[static_cast<size_t>(b)],
                                                       ts[static_cast<size_t>(b)]));
            CondBatch<S> cond = collate_conditioning(conds);
            Tensor<S> loss = diffusion_loss(model_.backbone, x0, ts, eps, cond, sched_);
            loss_value = static_cast<double>(loss.at(0));
            if (!std::isfinite(loss_value))
                throw NumericalError("non-finite loss at step " + std::to_string(s) + ": " +
                                     std::to_string(loss_value));
            loss.grad()[0] = S(1);
            tape.backward();
        }
        grad_norm = opt_.step(model_.params);
        if (!std::isfinite(grad_norm))
            throw NumericalError("non-finite gradient norm at step " + std::to_string(s) +
                                 " (loss " + std::to_string(loss_value) + ")");
        model_.params.zero_grads();
        ema_.update(model_.params);
        step_ = s;

        StepMetrics m;
        m.step = s;
        m.loss = loss_value;
        m.grad_norm = grad_norm;
        m.lr = cfg_.adamw.lr;
        m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        return m;
    }

    void save(const std::string& path) const {
        std::vector<TensorRecord> records;
        append_store(records, model_.params, "");
        for (size_t pi = 0; pi < model_.params.items.size(); ++pi) {
            const auto& [name, t] = model_.params.items[pi];
            TensorRecord rm, rv, re;
            rm.name = "opt.m." + name;
            rv.name = "opt.v." + name;
            re.name = "ema." + name;
            for (int64_t d : t.shape()) {
                rm.extents.push_back(static_cast<uint32_t>(d));
                rv.extents.push_back(static_cast<uint32_t>(d));
                re.extents.push_back(static_cast<uint32_t>(d));
            }
            rm.data.assign(opt_.m[pi].begin(), opt_.m[pi].end());
            rv.data.assign(opt_.v[pi].begin(), opt_.v[pi].end());
            re.data.assign(ema_.shadow[pi].begin(), ema_.shadow[pi].end());
            records.push_back(std::move(rm));
            records.push_back(std::move(rv));
            records.push_back(std::move(re));
        }
        records.push_back(scalar_record("trainer.step", static_cast<uint64_t>(step_)));
        write_checkpoint(path, records);
    }

    void load(const std::string& path) {
        std::vector<TensorRecord> records = read_checkpoint(path);
        load_store(records, model_.params, "");
        auto find = [&](const std::string& name) -> const TensorRecord& {
            for (const auto& r : records)
                if (r.name == name) return r;
            throw CheckpointError(CheckpointError::Kind::MissingTensor, "missing record: " + name);
        };
        for (size_t pi = 0; pi < model_.params.items.size(); ++pi) {
            const auto& name = model_.params.items[pi].first;
            const auto& rm = find("opt.m." + name);
            const auto& rv = find("opt.v." + name);
            const auto& re = find("ema." + name);
            opt_.m[pi].assign(rm.data.begin(), rm.data.end());
            opt_.v[pi].assign(rv.data.begin(), rv.data.end());
            ema_.shadow[pi].assign(re.data.begin(), re.data.end());
        }
        step_ = static_cast<int64_t>(scalar_from_record(find("trainer.step")));
        opt_.step_count = step_;
    }

    // writes the EMA weights into the live parameters (used for sampling)
    void apply_ema() {
        for (size_t pi = 0; pi < model_.params.items.size(); ++pi) {
            auto& t = model_.params.items[pi].second;
            std::copy(ema_.shadow[pi].begin(), ema_.shadow[pi].end(), t.data());
        }
    }

private:
    GenerativeModel<S>& model_;
    TrainConfig cfg_;
    NoiseSchedule sched_;
    AdamW<S> opt_;
    Ema<S> ema_;
    std::unique_ptr<IdentityCodec> codec_;
    int64_t step_ = 0;
};

}  // namespace lidit
