#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "lidit/diffusion.hpp"
#include "lidit/model.hpp"
#include "lidit/trainer.hpp"
#include "support/grad_check.hpp"

using namespace lidit;
using testsupport::fill_normal;

namespace {

ModelConfig tiny_model_config(uint64_t seed) {
    ModelConfig mc;
    mc.backbone.depth = 1;
    mc.backbone.d_model = 32;
    mc.backbone.n_heads = 4;
    mc.backbone.patch_size = 4;
    mc.backbone.in_channels = 3;
    mc.pipeline.fusion = FusionMode::Single;
    mc.pipeline.refiner_blocks = 1;
    mc.pipeline.refiner_heads = 2;
    EncoderSpec enc;
    enc.toy.n_layers = 3;
    enc.toy.d_enc = 16;
    enc.toy.n_heads = 2;
    enc.toy.seed = 77;
    enc.toy.id = "toy16";
    mc.encoders = {enc};
    mc.init_seed = seed;
    return mc;
}

}  // namespace

TEST_CASE("schedule: single-step case, terminal value, identities") {
    NoiseSchedule one = NoiseSchedule::linear(1, 0.3, 0.3);
    CHECK(one.alpha_bar_t(1) == doctest::Approx(0.7).epsilon(1e-15));

    NoiseSchedule s = NoiseSchedule::linear(1000, 1e-4, 0.02);
    // direct product computation as oracle
    long double prod = 1.0L;
    for (int64_t t = 1; t <= 1000; ++t) {
        long double frac = static_cast<long double>(t - 1) / 999.0L;
        prod *= 1.0L - (1e-4L + (0.02L - 1e-4L) * frac);
    }
    CHECK(s.alpha_bar_t(1000) == doctest::Approx(static_cast<double>(prod)).epsilon(1e-10));
    CHECK(s.alpha_bar_t(1000) == doctest::Approx(4.04e-5).epsilon(0.01));

    // cumulative-product identity to 1e-12
    for (int64_t t = 1; t <= 1000; ++t) {
        double ratio = s.alpha_bar_t(t) / s.alpha_bar_t(t - 1);
        CHECK(std::abs(ratio - s.alpha_t(t)) < 1e-12);
    }

    // monotonicity for random valid parameters
    Rng rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        double b0 = 1e-5 + rng.next_uniform() * 1e-3;
        double b1 = b0 + rng.next_uniform() * 0.05;
        int64_t T = 2 + rng.next_int(0, 200);
        NoiseSchedule r = NoiseSchedule::linear(T, b0, b1);
        for (int64_t t = 2; t <= T; ++t) {
            CHECK(r.beta_t(t) > r.beta_t(t - 1));
            CHECK(r.alpha_bar_t(t) < r.alpha_bar_t(t - 1));
            CHECK(r.alpha_bar_t(t) > 0.0);
        }
    }

    CHECK_THROWS_AS(NoiseSchedule::linear(0, 1e-4, 0.02), ScheduleError);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.0, 0.02), ScheduleError);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.5, 0.2), ScheduleError);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 1e-4, 1.0), ScheduleError);
    CHECK_THROWS_AS(s.beta_t(0), ScheduleError);
    CHECK_THROWS_AS(s.beta_t(1001), ScheduleError);
}

TEST_CASE("schedule: respacing preserves alpha_bar and the per-step identity") {
    NoiseSchedule s = NoiseSchedule::linear(100, 1e-4, 0.05);
    std::vector<int64_t> model_t;
    NoiseSchedule sub = s.respaced(10, &model_t);
    CHECK(sub.T == 10);
    CHECK(model_t.size() == 10);
    CHECK(model_t.back() == 100);
    for (int64_t k = 1; k <= 10; ++k) {
        CHECK(sub.alpha_bar_t(k) == doctest::Approx(s.alpha_bar_t(model_t[static_cast<size_t>(k - 1)]))
                                        .epsilon(1e-14));
        double ratio = sub.alpha_bar_t(k) / sub.alpha_bar_t(k - 1);
        CHECK(std::abs(ratio - sub.alpha_t(k)) < 1e-12);
    }
    // full-length respacing is the identity
    std::vector<int64_t> ident;
    NoiseSchedule same = s.respaced(100, &ident);
    for (int64_t t = 1; t <= 100; ++t) {
        CHECK(ident[static_cast<size_t>(t - 1)] == t);
        CHECK(same.alpha_bar_t(t) == doctest::Approx(s.alpha_bar_t(t)).epsilon(1e-14));
    }
    CHECK_THROWS_AS(s.respaced(101, nullptr), ScheduleError);
}

TEST_CASE("q_sample: limit cases and the closed-form marginal") {
    Rng rng(2);
    Tensor<double> x0 = Tensor<double>::zeros({2, 3});
    Tensor<double> eps = Tensor<double>::zeros({2, 3});
    fill_normal(x0, rng);
    fill_normal(eps, rng);

    Tensor<double> same = q_sample_closed(x0, 1.0, eps);
    for (int64_t i = 0; i < x0.numel(); ++i) CHECK(same.at(i) == doctest::Approx(x0.at(i)).epsilon(1e-15));
    Tensor<double> noise = q_sample_closed(x0, 0.0, eps);
    for (int64_t i = 0; i < x0.numel(); ++i) CHECK(noise.at(i) == doctest::Approx(eps.at(i)).epsilon(1e-15));

    NoiseSchedule s = NoiseSchedule::linear(50, 1e-3, 0.04);
    Tensor<double> xt = q_sample(x0, 20, eps, s);
    double a = std::sqrt(s.alpha_bar_t(20)), b = std::sqrt(1.0 - s.alpha_bar_t(20));
    for (int64_t i = 0; i < x0.numel(); ++i)
        CHECK(xt.at(i) == doctest::Approx(a * x0.at(i) + b * eps.at(i)).epsilon(1e-13));
    CHECK_THROWS_AS(q_sample(x0, 51, eps, s), ScheduleError);
}

TEST_CASE("q_sample: closed form matches 10-step iterated Monte-Carlo composition") {
    // x_t = sqrt(alpha_t) x_{t-1} + sqrt(1-alpha_t) z_t iterated 10 steps;
    // empirical mean and variance of x_T must match the closed form within
    // three standard errors (20k trials here; the acceptance suite runs 100k)
    NoiseSchedule s = NoiseSchedule::linear(10, 0.01, 0.2);
    const double x0 = 1.7;
    const int64_t trials = 20000;
    Rng rng(3);
    double sum = 0.0, sumsq = 0.0;
    for (int64_t k = 0; k < trials; ++k) {
        double x = x0;
        for (int64_t t = 1; t <= 10; ++t)
            x = std::sqrt(s.alpha_t(t)) * x + std::sqrt(1.0 - s.alpha_t(t)) * rng.next_normal();
        sum += x;
        sumsq += x * x;
    }
    double mean = sum / trials;
    double var = sumsq / trials - mean * mean;
    double expect_mean = std::sqrt(s.alpha_bar_t(10)) * x0;
    double expect_var = 1.0 - s.alpha_bar_t(10);
    double se_mean = std::sqrt(expect_var / trials);
    double se_var = expect_var * std::sqrt(2.0 / (trials - 1));
    CHECK(std::abs(mean - expect_mean) < 3.0 * se_mean);
    CHECK(std::abs(var - expect_var) < 3.0 * se_var);
}

TEST_CASE("p_sample_step: determinism at t=1, exact one-step inversion, noise variance") {
    NoiseSchedule s1 = NoiseSchedule::linear(1, 0.17, 0.17);
    Rng data_rng(4);
    Tensor<double> x0 = Tensor<double>::zeros({3, 2});
    Tensor<double> eps = Tensor<double>::zeros({3, 2});
    fill_normal(x0, data_rng);
    fill_normal(eps, data_rng);

    // perfect oracle: with eps_hat == eps and T == 1, x0 returns exactly
    Tensor<double> x1 = q_sample(x0, 1, eps, s1);
    Rng rng(5);
    Tensor<double> rec = p_sample_step(x1, 1, eps, s1, rng);
    for (int64_t i = 0; i < x0.numel(); ++i) CHECK(std::abs(rec.at(i) - x0.at(i)) < 1e-12);

    // t = 1 draws no noise: two different streams agree
    Rng ra(6), rb(7);
    Tensor<double> da = p_sample_step(x1, 1, eps, s1, ra);
    Tensor<double> db = p_sample_step(x1, 1, eps, s1, rb);
    for (int64_t i = 0; i < da.numel(); ++i) CHECK(da.at(i) == db.at(i));

    CHECK_THROWS_AS(p_sample_step(x1, 0, eps, s1, ra), ScheduleError);

    // sigma contribution: repeated sampling at fixed inputs has variance
    // close to beta_t
    NoiseSchedule s = NoiseSchedule::linear(20, 0.01, 0.25);
    const int64_t t = 13, trials = 20000;
    Tensor<double> xt = Tensor<double>::from_data({1}, {0.4});
    Tensor<double> eh = Tensor<double>::from_data({1}, {-0.2});
    Rng noise_rng(8);
    double sum = 0, sumsq = 0;
    for (int64_t k = 0; k < trials; ++k) {
        double v = p_sample_step(xt, t, eh, s, noise_rng).at(0);
        sum += v;
        sumsq += v * v;
    }
    double mean = sum / trials;
    double var = sumsq / trials - mean * mean;
    double expect = s.beta_t(t);
    CHECK(std::abs(var - expect) < 3.0 * expect * std::sqrt(2.0 / (trials - 1)));

    // the alpha-bar-ratio sigma variant is strictly smaller
    CHECK(s.sigma2(t, SigmaMode::AlphaBarRatio) < s.sigma2(t, SigmaMode::Beta));
}

TEST_CASE("diffusion loss: zero-model value and gradient path") {
    GenerativeModel<double> model(tiny_model_config(9));
    NoiseSchedule sched = NoiseSchedule::linear(20, 1e-3, 0.05);

    Rng rng(10);
    Tensor<double> x0 = Tensor<double>::zeros({2, 3, 8, 8});
    fill_normal(x0, rng, 0.5);
    Tensor<double> eps = Tensor<double>::zeros(x0.shape());
    fill_normal(eps, rng);
    std::vector<int64_t> ts = {3, 17};

    std::vector<RefinedConditioning<double>> conds = {model.condition("a red circle", ts[0]),
                                                      model.condition("a blue square", ts[1])};
    CondBatch<double> cond = collate_conditioning<double>(conds);

    // freshly initialized backbone predicts zero, so the loss is mean(eps^2)
    Tensor<double> loss = diffusion_loss(model.backbone, x0, ts, eps, cond, sched);
    double expect = 0.0;
    for (int64_t i = 0; i < eps.numel(); ++i) expect += eps.at(i) * eps.at(i);
    expect /= static_cast<double>(eps.numel());
    CHECK(loss.at(0) == doctest::Approx(expect).epsilon(1e-12));

    // with eps == 0 the zero model is a perfect predictor: loss exactly 0
    Tensor<double> zero_eps = Tensor<double>::zeros(x0.shape());
    Tensor<double> zl = diffusion_loss(model.backbone, x0, ts, zero_eps, cond, sched);
    CHECK(zl.at(0) == 0.0);

    // gradient of the loss w.r.t. model parameters matches finite differences
    for (auto& [name, t] : model.params.items) {
        Rng r(Rng::fold(11, std::hash<std::string>{}(name)));
        fill_normal(t, r, 0.05);
    }
    std::vector<Tensor<double>> checked;
    for (auto& [name, t] : model.params.items)
        if (name.find("dit.") == 0) checked.push_back(t);
    auto res = testsupport::grad_check(
        [&] { return diffusion_loss(model.backbone, x0, ts, eps, cond, sched); }, checked, Rng(12), 2);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("sampling: determinism, cfg degenerate cases, steps validation") {
    GenerativeModel<float> model(tiny_model_config(13));
    for (auto& [name, t] : model.params.items) {
        Rng r(Rng::fold(14, std::hash<std::string>{}(name)));
        fill_normal(t, r, 0.05);
    }
    NoiseSchedule sched = NoiseSchedule::linear(25, 1e-3, 0.05);
    std::vector<std::string> prompt = {"a red circle"};

    SampleParams params;
    params.steps = 10;
    params.cfg_scale = 2.0;
    Tensor<float> a = sample_latents(model, prompt, {1, 3, 8, 8}, sched, params, Rng(100));
    Tensor<float> b = sample_latents(model, prompt, {1, 3, 8, 8}, sched, params, Rng(100));
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));  // bitwise

    // cfg_scale 1 equals a manual unguided ancestral loop over the same stream
    SampleParams plain;
    plain.steps = 10;
    plain.cfg_scale = 1.0;
    Tensor<float> p = sample_latents(model, prompt, {1, 3, 8, 8}, sched, plain, Rng(101));
    auto manual_denoise = [&](const Tensor<float>& x, int64_t t) {
        CondBatch<float> cond = collate_conditioning<float>({model.condition(prompt[0], t)});
        return model.backbone.forward(x, {t}, cond);
    };
    Tensor<float> manual = ancestral_sample<float>(manual_denoise, {1, 3, 8, 8}, sched, plain, Rng(101));
    for (int64_t i = 0; i < p.numel(); ++i) CHECK(p.at(i) == manual.at(i));

    // cfg_scale 0 ignores the prompt entirely
    SampleParams uncond;
    uncond.steps = 10;
    uncond.cfg_scale = 0.0;
    Tensor<float> ua = sample_latents(model, {"a red circle"}, {1, 3, 8, 8}, sched, uncond, Rng(102));
    Tensor<float> ub = sample_latents(model, {"a blue square"}, {1, 3, 8, 8}, sched, uncond, Rng(102));
    for (int64_t i = 0; i < ua.numel(); ++i) CHECK(ua.at(i) == ub.at(i));

    SampleParams too_many;
    too_many.steps = 26;
    CHECK_THROWS_AS(sample_latents(model, prompt, {1, 3, 8, 8}, sched, too_many, Rng(1)), ScheduleError);
    SampleParams negative;
    negative.cfg_scale = -0.5;
    CHECK_THROWS_AS(sample_latents(model, prompt, {1, 3, 8, 8}, sched, negative, Rng(1)), ScheduleError);
}

TEST_CASE("trainer: loss decreases over 200 steps on a 64-sample corpus") {
    ModelConfig mc = tiny_model_config(20);
    GenerativeModel<float> model(mc);
    TrainConfig tc;
    tc.steps = 200;
    tc.batch_size = 4;
    tc.seed = 21;
    tc.T = 50;
    tc.corpus.size = 64;
    tc.corpus.seed = 22;
    tc.checkpoint_every = 0;
    Trainer<float> trainer(model, tc);

    std::vector<double> losses;
    for (int64_t s = 0; s < 200; ++s) losses.push_back(trainer.step().loss);
    auto smooth = [&](int64_t begin) {
        double acc = 0;
        for (int64_t i = begin; i < begin + 50; ++i) acc += losses[static_cast<size_t>(i)];
        return acc / 50.0;
    };
    double first = smooth(0), last = smooth(150);
    CHECK(last < first);
}

TEST_CASE("trainer: identical seeds give identical metric streams; resume is exact") {
    ModelConfig mc = tiny_model_config(30);
    TrainConfig tc;
    tc.steps = 24;
    tc.batch_size = 2;
    tc.seed = 31;
    tc.T = 20;
    tc.corpus.size = 16;
    tc.corpus.seed = 32;

    auto run = [&](int64_t n, Trainer<float>& tr) {
        std::vector<StepMetrics> ms;
        for (int64_t s = 0; s < n; ++s) ms.push_back(tr.step());
        return ms;
    };

    GenerativeModel<float> m1(mc);
    Trainer<float> t1(m1, tc);
    auto full = run(24, t1);

    GenerativeModel<float> m2(mc);
    Trainer<float> t2(m2, tc);
    auto again = run(24, t2);
    for (size_t i = 0; i < full.size(); ++i) {
        CHECK(full[i].loss == again[i].loss);  // bitwise agreement
        CHECK(full[i].grad_norm == again[i].grad_norm);
    }

    // train 12, checkpoint, resume in a fresh model, continue 12: the
    // continued stream matches the uninterrupted one exactly
    GenerativeModel<float> m3(mc);
    Trainer<float> t3(m3, tc);
    run(12, t3);
    auto ckpt = std::filesystem::temp_directory_path() / "lidit_resume_test.lidt";
    t3.save(ckpt.string());

    GenerativeModel<float> m4(mc);
    Trainer<float> t4(m4, tc);
    t4.load(ckpt.string());
    CHECK(t4.current_step() == 12);
    auto tail = run(12, t4);
    for (size_t i = 0; i < tail.size(); ++i) {
        CHECK(tail[i].step == full[i + 12].step);
        CHECK(tail[i].loss == full[i + 12].loss);
        CHECK(tail[i].grad_norm == full[i + 12].grad_norm);
    }

    // checkpoint round-trip is bitwise: saving the resumed trainer at the
    // same step yields an identical file
    auto ckpt2 = std::filesystem::temp_directory_path() / "lidit_resume_test2.lidt";
    GenerativeModel<float> m5(mc);
    Trainer<float> t5(m5, tc);
    run(12, t5);
    t5.save(ckpt2.string());
    std::ifstream f1(ckpt, std::ios::binary), f2(ckpt2, std::ios::binary);
    std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(c1 == c2);
    CHECK(!c1.empty());
}

TEST_CASE("trainer: frozen encoders stay frozen through training") {
    ModelConfig mc = tiny_model_config(40);
    GenerativeModel<float> model(mc);
    uint64_t before = model.pipeline.encoders[0].lm->params.content_hash();
    TrainConfig tc;
    tc.batch_size = 2;
    tc.seed = 41;
    tc.T = 20;
    tc.corpus.size = 8;
    tc.corpus.seed = 42;
    Trainer<float> trainer(model, tc);
    for (int s = 0; s < 10; ++s) trainer.step();
    CHECK(model.pipeline.encoders[0].lm->params.content_hash() == before);
}

TEST_CASE("trainer: conditioning dropout at probability one erases prompt dependence") {
    ModelConfig mc = tiny_model_config(50);
    GenerativeModel<float> model(mc);
    for (auto& [name, t] : model.params.items) {
        Rng r(Rng::fold(51, std::hash<std::string>{}(name)));
        fill_normal(t, r, 0.05);
    }
    NoiseSchedule sched = NoiseSchedule::linear(20, 1e-3, 0.05);
    // with dropout forced on, every sample uses the learned null conditioning;
    // the prompt text cannot influence the prediction
    CondBatch<float> null_cond = collate_conditioning<float>({model.pipeline.null_conditioning()});
    Rng rng(52);
    Tensor<float> x = Tensor<float>::zeros({1, 3, 8, 8});
    fill_normal(x, rng);
    Tensor<float> a = model.backbone.forward(x, {5}, null_cond);
    Tensor<float> b = model.backbone.forward(x, {5}, null_cond);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
}
