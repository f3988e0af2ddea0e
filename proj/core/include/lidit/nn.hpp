#pragma once

#include <string>
#include <vector>

#include "lidit/ops.hpp"
#include "lidit/rng.hpp"
#include "lidit/tensor.hpp"

namespace lidit {

// Ordered, named parameter registry. Registration order is fixed by module
// construction, so optimizer state and checkpoints line up deterministically.
template <class S>
struct ParamStore {
    std::vector<std::pair<std::string, Tensor<S>>> items;
    bool frozen = false;  // frozen stores never mark parameters for gradients

    Tensor<S> add(const std::string& name, Tensor<S> t) {
        for (auto& [n, _] : items)
            if (n == name) throw std::runtime_error("duplicate parameter name: " + name);
        t.set_requires_grad(!frozen);
        items.emplace_back(name, t);
        return t;
    }

    Tensor<S>* find(const std::string& name) {
        for (auto& [n, t] : items)
            if (n == name) return &t;
        return nullptr;
    }

    int64_t total_elements() const {
        int64_t n = 0;
        for (auto& [_, t] : items) n += t.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [_, t] : items) t.zero_grad();
    }

    // FNV-1a over raw parameter bytes, in registration order
    uint64_t content_hash() const {
        uint64_t h = 1469598103934665603ull;
        for (auto& [name, t] : items) {
            for (char c : name) h = (h ^ static_cast<uint8_t>(c)) * 1099511628211ull;
            const auto* bytes = reinterpret_cast<const uint8_t*>(t.data());
            size_t nb = sizeof(S) * static_cast<size_t>(t.numel());
            for (size_t i = 0; i < nb; ++i) h = (h ^ bytes[i]) * 1099511628211ull;
        }
        return h;
    }
};

// ---------------------------------------------------------------------------
// initializers
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> init_trunc_normal(Shape shape, Rng& rng, double sigma = 0.02) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    S* p = t.data();
    int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) p[i] = static_cast<S>(rng.next_trunc_normal(sigma));
    return t;
}

template <class S>
Tensor<S> init_zeros(Shape shape) {
    return Tensor<S>::zeros(std::move(shape));
}

template <class S>
Tensor<S> init_ones(Shape shape) {
    return Tensor<S>::full(std::move(shape), S(1));
}

// ---------------------------------------------------------------------------
// modules
// ---------------------------------------------------------------------------

template <class S>
struct Linear {
    Tensor<S> w, b;
    bool has_bias = true;

    Linear() = default;
    Linear(ParamStore<S>& ps, const std::string& name, int64_t in, int64_t out, Rng& rng,
           bool zero_init = false, bool bias = true)
        : has_bias(bias) {
        w = ps.add(name + ".w", zero_init ? init_zeros<S>({out, in})
                                          : init_trunc_normal<S>({out, in}, rng));
        if (bias) b = ps.add(name + ".b", init_zeros<S>({out}));
    }

    Tensor<S> operator()(const Tensor<S>& x) const {
        return linear(x, w, has_bias ? &b : nullptr);
    }
};

template <class S>
struct RMSNorm {
    Tensor<S> gamma;
    S eps = static_cast<S>(1e-6);

    RMSNorm() = default;
    RMSNorm(ParamStore<S>& ps, const std::string& name, int64_t d) {
        gamma = ps.add(name + ".gamma", init_ones<S>({d}));
    }

    Tensor<S> operator()(const Tensor<S>& x) const { return rms_norm(x, gamma, eps); }
};

// Two-layer feed-forward: w_out . act(w_in . x), GELU(tanh) activation.
template <class S>
struct FFN {
    Linear<S> w_in, w_out;

    FFN() = default;
    FFN(ParamStore<S>& ps, const std::string& name, int64_t d, int64_t expansion, Rng& rng) {
        if (expansion < 1) throw std::runtime_error("ffn: expansion must be >= 1");
        w_in = Linear<S>(ps, name + ".in", d, d * expansion, rng);
        w_out = Linear<S>(ps, name + ".out", d * expansion, d, rng);
    }

    Tensor<S> operator()(const Tensor<S>& x) const { return w_out(gelu_tanh(w_in(x))); }
};

// Multi-head attention with projections and optional per-head QK-norm.
// When `shared_qk_gamma` is set the learned gamma is one head wide and tiled
// across heads at call time.
template <class S>
struct MultiheadAttention {
    Linear<S> wq, wk, wv, wo;
    Tensor<S> gamma_q, gamma_k;
    AttentionSpec spec;
    bool shared_qk_gamma = false;

    MultiheadAttention() = default;
    MultiheadAttention(ParamStore<S>& ps, const std::string& name, int64_t d, int64_t kv_width,
                       int n_heads, bool qk_norm, Rng& rng, bool shared_gamma = false)
        : shared_qk_gamma(shared_gamma) {
        if (d % n_heads != 0) throw std::runtime_error("attention: width not divisible by heads");
        spec.n_heads = n_heads;
        spec.head_dim = static_cast<int>(d / n_heads);
        spec.qk_norm = qk_norm;
        wq = Linear<S>(ps, name + ".q", d, d, rng);
        wk = Linear<S>(ps, name + ".k", kv_width, d, rng);
        wv = Linear<S>(ps, name + ".v", kv_width, d, rng);
        wo = Linear<S>(ps, name + ".o", d, d, rng);
        if (qk_norm) {
            int64_t glen = shared_gamma ? spec.head_dim : d;
            gamma_q = ps.add(name + ".qnorm.gamma", init_ones<S>({glen}));
            gamma_k = ps.add(name + ".knorm.gamma", init_ones<S>({glen}));
        }
    }

    Tensor<S> operator()(const Tensor<S>& x, const Tensor<S>& kv_src, MaskMode mode,
                         const std::vector<uint8_t>* kv_valid = nullptr) const {
        AttentionSpec s = spec;
        s.mask_mode = mode;
        Tensor<S> q = wq(x);
        Tensor<S> k = wk(kv_src);
        Tensor<S> v = wv(kv_src);
        if (!s.qk_norm) return wo(attention(q, k, v, s, nullptr, kv_valid));
        Tensor<S> gq = gamma_q, gk = gamma_k;
        if (shared_qk_gamma) {
            gq = concat(std::vector<Tensor<S>>(static_cast<size_t>(s.n_heads), gamma_q), 0);
            gk = concat(std::vector<Tensor<S>>(static_cast<size_t>(s.n_heads), gamma_k), 0);
        }
        return wo(attention(q, k, v, s, nullptr, kv_valid, &gq, &gk));
    }
};

// Sinusoidal features followed by a two-layer MLP of the same width.
template <class S>
struct TimestepEmbed {
    Linear<S> fc1, fc2;
    int64_t dim = 0;

    TimestepEmbed() = default;
    TimestepEmbed(ParamStore<S>& ps, const std::string& name, int64_t d, Rng& rng) : dim(d) {
        fc1 = Linear<S>(ps, name + ".fc1", d, d, rng);
        fc2 = Linear<S>(ps, name + ".fc2", d, d, rng);
    }

    // [1, dim]
    Tensor<S> operator()(int64_t t) const {
        Tensor<S> feat = reshape(timestep_sinusoid<S>(t, dim), {1, dim});
        return fc2(silu(fc1(feat)));
    }
};

// Convolutional positional embedding: x + conv(silu(conv(x))) on the 2-D
// patch grid. The second conv is zero-initialized so the block starts as the
// identity.
template <class S>
struct ResBlockPosEmbed {
    Tensor<S> w1, b1, w2, b2;

    ResBlockPosEmbed() = default;
    ResBlockPosEmbed(ParamStore<S>& ps, const std::string& name, int64_t channels, Rng& rng) {
        w1 = ps.add(name + ".conv1.w", init_trunc_normal<S>({channels, channels, 3, 3}, rng));
        b1 = ps.add(name + ".conv1.b", init_zeros<S>({channels}));
        w2 = ps.add(name + ".conv2.w", init_zeros<S>({channels, channels, 3, 3}));
        b2 = ps.add(name + ".conv2.b", init_zeros<S>({channels}));
    }

    // x: [B, C, h, w]
    Tensor<S> operator()(const Tensor<S>& x) const {
        return add(x, conv3x3(silu(conv3x3(x, w1, b1)), w2, b2));
    }
};

// One shift/scale/gate triple, produced per sample from a conditioning
// vector. Zero-initialized so modulated blocks contribute nothing at start.
template <class S>
struct ModulationHead {
    Linear<S> fc;  // d_ctx -> 3*d, zero-init
    int64_t d = 0;

    ModulationHead() = default;
    ModulationHead(ParamStore<S>& ps, const std::string& name, int64_t d_ctx, int64_t width, Rng& rng)
        : d(width) {
        fc = Linear<S>(ps, name, d_ctx, 3 * width, rng, /*zero_init=*/true);
    }

    struct Triple {
        Tensor<S> shift, scale, gate;  // each [B, d]
    };

    // ctx: [B, d_ctx]
    Triple operator()(const Tensor<S>& ctx) const {
        Tensor<S> m = fc(ctx);  // [B, 3d]
        int64_t B = m.dim(0);
        Tensor<S> m3 = reshape(m, {B, int64_t(3), d});
        Triple t;
        t.shift = reshape(slice_rows(m3, 0, 1), {B, d});
        t.scale = reshape(slice_rows(m3, 1, 2), {B, d});
        t.gate = reshape(slice_rows(m3, 2, 3), {B, d});
        return t;
    }
};

}  // namespace lidit
