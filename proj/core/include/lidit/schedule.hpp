#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace lidit {

struct ScheduleError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// reverse-step noise scale: beta_t itself, or the posterior variance
// (1 - abar_{t-1}) / (1 - abar_t) * beta_t
enum class SigmaMode { Beta, AlphaBarRatio };

// Diffusion schedule tables, kept in double so the cumulative-product
// identities hold to 1e-12. Timesteps are 1-based: t in [1, T].
struct NoiseSchedule {
    int64_t T = 0;
    std::vector<double> beta;       // beta[t-1]
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // prod_{s<=t} alpha[s]

    static NoiseSchedule linear(int64_t T, double beta_start, double beta_end);

    double beta_t(int64_t t) const { return beta[index(t)]; }
    double alpha_t(int64_t t) const { return alpha[index(t)]; }
    // alpha_bar_t(0) == 1 by convention
    double alpha_bar_t(int64_t t) const { return t == 0 ? 1.0 : alpha_bar[index(t)]; }

    double sigma2(int64_t t, SigmaMode mode) const {
        if (mode == SigmaMode::Beta) return beta_t(t);
        return (1.0 - alpha_bar_t(t - 1)) / (1.0 - alpha_bar_t(t)) * beta_t(t);
    }

    // Sub-schedule over `steps` timesteps taken evenly from [1, T]. Index k
    // of the result corresponds to original timestep model_t[k-1]; effective
    // betas are derived from alpha_bar ratios so the per-step update formula
    // applies unchanged.
    NoiseSchedule respaced(int64_t steps, std::vector<int64_t>* model_t) const;

private:
    size_t index(int64_t t) const {
        if (t < 1 || t > T)
            throw ScheduleError("timestep " + std::to_string(t) + " outside [1," + std::to_string(T) + "]");
        return static_cast<size_t>(t - 1);
    }
};

}  // namespace lidit
