#pragma once

#include "lidit/backbone.hpp"
#include "lidit/schedule.hpp"

namespace lidit {

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// closed-form forward marginal: x_t = sqrt(abar) * x0 + sqrt(1 - abar) * eps
template <class S>
Tensor<S> q_sample_closed(const Tensor<S>& x0, double alpha_bar, const Tensor<S>& eps) {
    check_same_shape(x0, eps, "q_sample");
    S a = static_cast<S>(std::sqrt(alpha_bar));
    S b = static_cast<S>(std::sqrt(1.0 - alpha_bar));
    return add(scale(x0, a), scale(eps, b));
}

template <class S>
Tensor<S> q_sample(const Tensor<S>& x0, int64_t t, const Tensor<S>& eps, const NoiseSchedule& sched) {
    return q_sample_closed(x0, sched.alpha_bar_t(t), eps);
}

// batched variant with one timestep per sample; x0/eps are [B, ...]
template <class S>
Tensor<S> q_sample_batch(const Tensor<S>& x0, const std::vector<int64_t>& ts, const Tensor<S>& eps,
                         const NoiseSchedule& sched) {
    check_same_shape(x0, eps, "q_sample");
    int64_t B = x0.dim(0);
    if (static_cast<int64_t>(ts.size()) != B) throw ShapeError("q_sample: timestep count");
    int64_t per = x0.numel() / B;
    Tensor<S> out = Tensor<S>::uninit(x0.shape());
    const S* px = x0.data();
    const S* pe = eps.data();
    S* po = out.data();
    std::vector<S> as(static_cast<size_t>(B)), bs(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) {
        double abar = sched.alpha_bar_t(ts[static_cast<size_t>(b)]);
        as[static_cast<size_t>(b)] = static_cast<S>(std::sqrt(abar));
        bs[static_cast<size_t>(b)] = static_cast<S>(std::sqrt(1.0 - abar));
    }
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < per; ++i)
            po[b * per + i] = as[static_cast<size_t>(b)] * px[b * per + i] +
                              bs[static_cast<size_t>(b)] * pe[b * per + i];
    bool trace = detail::tracing<S>({&x0, &eps});
    detail::mark_and_record(out, trace, [x0, eps, out, as, bs, B, per]() mutable {
        const S* g = out.grad();
        if (x0.requires_grad()) {
            S* gx = x0.grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < per; ++i) gx[b * per + i] += g[b * per + i] * as[static_cast<size_t>(b)];
        }
        if (eps.requires_grad()) {
            S* ge = eps.grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < per; ++i) ge[b * per + i] += g[b * per + i] * bs[static_cast<size_t>(b)];
        }
    });
    return out;
}

// One ancestral reverse step at schedule index t (1-based):
//   mu = (x_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
//   x_{t-1} = mu + sigma_t * z, with z = 0 at t = 1
template <class S>
Tensor<S> p_sample_step(const Tensor<S>& x_t, int64_t t, const Tensor<S>& eps_hat,
                        const NoiseSchedule& sched, Rng& rng,
                        SigmaMode sigma_mode = SigmaMode::Beta) {
    if (t < 1) throw ScheduleError("p_sample_step: t must be >= 1");
    check_same_shape(x_t, eps_hat, "p_sample_step");
    double alpha = sched.alpha_t(t);
    double abar = sched.alpha_bar_t(t);
    S coef = static_cast<S>((1.0 - alpha) / std::sqrt(1.0 - abar));
    S inv_sqrt_alpha = static_cast<S>(1.0 / std::sqrt(alpha));
    Tensor<S> mu = scale(sub(x_t, scale(eps_hat, coef)), inv_sqrt_alpha);
    if (t == 1) return mu;
    S sigma = static_cast<S>(std::sqrt(sched.sigma2(t, sigma_mode)));
    S* pm = mu.data();
    for (int64_t i = 0; i < mu.numel(); ++i) pm[i] += sigma * static_cast<S>(rng.next_normal());
    return mu;
}

// Simplified per-timestep objective: unweighted MSE between the injected
// noise and the model's prediction on x_t.
template <class S>
Tensor<S> diffusion_loss(const LIDiT<S>& model, const Tensor<S>& x0, const std::vector<int64_t>& ts,
                         const Tensor<S>& eps, const CondBatch<S>& cond, const NoiseSchedule& sched) {
    Tensor<S> x_t = q_sample_batch(x0, ts, eps, sched);
    return mse(eps, model.forward(x_t, ts, cond));
}

struct SampleParams {
    int64_t steps = 0;  // 0 means the schedule's full length
    double cfg_scale = 1.0;
    SigmaMode sigma_mode = SigmaMode::Beta;
};

// Ancestral loop from pure noise over an evenly respaced sub-schedule.
// `denoise(x, model_t)` returns the (already guidance-combined) noise
// prediction; it is called once per step with the original timestep the
// model was trained on.
template <class S, class Denoise>
Tensor<S> ancestral_sample(Denoise&& denoise, const Shape& latent_shape, const NoiseSchedule& sched,
                           const SampleParams& params, Rng rng) {
    if (params.cfg_scale < 0.0) throw ScheduleError("sample: cfg_scale must be non-negative");
    int64_t steps = params.steps == 0 ? sched.T : params.steps;
    if (steps > sched.T) throw ScheduleError("sample: steps exceed schedule length");
    NoGradScope<S> ng;

    std::vector<int64_t> model_t;
    NoiseSchedule sub_sched = sched.respaced(steps, &model_t);

    Tensor<S> x = Tensor<S>::uninit(latent_shape);
    S* px = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) px[i] = static_cast<S>(rng.next_normal());

    for (int64_t k = steps; k >= 1; --k) {
        Tensor<S> eps_hat = denoise(x, model_t[static_cast<size_t>(k - 1)]);
        x = p_sample_step(x, k, eps_hat, sub_sched, rng, params.sigma_mode);
    }
    return x;
}

}  // namespace lidit
