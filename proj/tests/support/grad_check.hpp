#pragma once

// Test-only oracles, independent of the ops they check: central finite
// differences for gradients and naive loop references for attention math.

#include <cmath>
#include <functional>
#include <vector>

#include "lidit/nn.hpp"
#include "lidit/rng.hpp"
#include "lidit/tensor.hpp"

namespace testsupport {

struct GradCheckResult {
    double max_rel_err = 0.0;
    int checked = 0;
    // worst offender, for diagnostics
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    size_t worst_tensor = 0;
    int64_t worst_coord = 0;
};

// Central differences with h=1e-5 in double resolve absolute differences
// down to roughly eps*|f|/h ~ 1e-11. Differences below 1e-9 are treated as
// agreement: relative error on a gradient the oracle cannot resolve is
// measurement noise, not evidence.
inline double rel_err(double analytic, double numeric) {
    double aa = std::abs(analytic), an = std::abs(numeric);
    if (std::abs(analytic - numeric) <= 1e-9) return 0.0;
    return std::abs(analytic - numeric) / std::max(aa, an);
}

// Compares reverse-mode gradients of a scalar-valued forward against central
// finite differences, on a deterministic sample of coordinates per tensor.
template <class F>
GradCheckResult grad_check(F&& forward, std::vector<lidit::Tensor<double>> tensors,
                           lidit::Rng rng, int coords_per_tensor = 6, double h = 1e-5) {
    using namespace lidit;
    GradCheckResult res;

    for (auto& t : tensors) {
        t.set_requires_grad(true);
        t.zero_grad();
    }

    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        Tensor<double> loss = forward();
        loss.ensure_grad();
        loss.grad()[0] = 1.0;
        tape.backward();
    }
    std::vector<std::vector<double>> analytic;
    for (auto& t : tensors) {
        t.ensure_grad();
        analytic.emplace_back(t.grad(), t.grad() + t.numel());
    }

    for (size_t ti = 0; ti < tensors.size(); ++ti) {
        auto& t = tensors[ti];
        int64_t n = t.numel();
        int count = static_cast<int>(std::min<int64_t>(coords_per_tensor, n));
        for (int c = 0; c < count; ++c) {
            int64_t idx = (n <= coords_per_tensor) ? c : rng.next_int(0, n - 1);
            double orig = t.data()[idx];
            double f_plus, f_minus;
            {
                NoGradScope<double> ng;
                t.data()[idx] = orig + h;
                f_plus = forward().at(0);
                t.data()[idx] = orig - h;
                f_minus = forward().at(0);
                t.data()[idx] = orig;
            }
            double numeric = (f_plus - f_minus) / (2.0 * h);
            double e = rel_err(analytic[ti][static_cast<size_t>(idx)], numeric);
            if (e > res.max_rel_err) {
                res.max_rel_err = e;
                res.worst_analytic = analytic[ti][static_cast<size_t>(idx)];
                res.worst_numeric = numeric;
                res.worst_tensor = ti;
                res.worst_coord = idx;
            }
            ++res.checked;
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// naive references
// ---------------------------------------------------------------------------

// plain [m,k] x [k,n] row-major matmul
inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                        int m, int k, int n) {
    std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0;
            for (int l = 0; l < k; ++l) acc += a[i * k + l] * b[l * n + j];
            c[i * n + j] = acc;
        }
    return c;
}

// single-head attention reference: q [Lq,hd], k/v [Lkv,hd]
inline std::vector<double> naive_attention(const std::vector<double>& q, const std::vector<double>& k,
                                           const std::vector<double>& v, int lq, int lkv, int hd,
                                           bool causal) {
    std::vector<double> out(static_cast<size_t>(lq) * hd, 0.0);
    double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int i = 0; i < lq; ++i) {
        std::vector<double> logits(static_cast<size_t>(lkv), -1e300);
        int jmax = causal ? std::min(i + 1, lkv) : lkv;
        for (int j = 0; j < jmax; ++j) {
            double dot = 0;
            for (int d = 0; d < hd; ++d) dot += q[i * hd + d] * k[j * hd + d];
            logits[static_cast<size_t>(j)] = dot * scale;
        }
        double mx = logits[0];
        for (int j = 1; j < lkv; ++j) mx = std::max(mx, logits[static_cast<size_t>(j)]);
        double sum = 0;
        std::vector<double> w(static_cast<size_t>(lkv), 0.0);
        for (int j = 0; j < lkv; ++j) {
            w[static_cast<size_t>(j)] = std::exp(logits[static_cast<size_t>(j)] - mx);
            sum += w[static_cast<size_t>(j)];
        }
        for (int j = 0; j < lkv; ++j)
            for (int d = 0; d < hd; ++d) out[i * hd + d] += (w[static_cast<size_t>(j)] / sum) * v[j * hd + d];
    }
    return out;
}

// y[i] = gamma[i] * x[i] / sqrt(mean(x^2) + eps), one row
inline std::vector<double> naive_rms_norm(const std::vector<double>& x, const std::vector<double>& gamma,
                                          double eps) {
    double ms = 0;
    for (double v : x) ms += v * v;
    ms /= static_cast<double>(x.size());
    double inv = 1.0 / std::sqrt(ms + eps);
    std::vector<double> y(x.size());
    for (size_t i = 0; i < x.size(); ++i) y[i] = gamma[i] * x[i] * inv;
    return y;
}

// y = x . W^T + b; x [rows, in], w [out, in]
inline std::vector<double> naive_linear(const std::vector<double>& x, const std::vector<double>& w,
                                        const std::vector<double>& b, int rows, int in, int out) {
    std::vector<double> y(static_cast<size_t>(rows) * out, 0.0);
    for (int r = 0; r < rows; ++r)
        for (int o = 0; o < out; ++o) {
            double acc = b.empty() ? 0.0 : b[static_cast<size_t>(o)];
            for (int i = 0; i < in; ++i) acc += x[r * in + i] * w[o * in + i];
            y[r * out + o] = acc;
        }
    return y;
}

inline double naive_gelu(double x) {
    double c = std::sqrt(2.0 / M_PI);
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

// fills a tensor with standard normal draws from the given stream
template <class S>
void fill_normal(lidit::Tensor<S>& t, lidit::Rng& rng, double std_dev = 1.0) {
    S* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<S>(rng.next_normal() * std_dev);
}

// copies out a named parameter's raw values
template <class S>
std::vector<double> param_values(lidit::ParamStore<S>& ps, const std::string& name) {
    auto* t = ps.find(name);
    if (!t) throw std::runtime_error("no such parameter: " + name);
    return std::vector<double>(t->data(), t->data() + t->numel());
}

}  // namespace testsupport
