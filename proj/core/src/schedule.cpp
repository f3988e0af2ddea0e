#include "lidit/schedule.hpp"

namespace lidit {

NoiseSchedule NoiseSchedule::linear(int64_t T, double beta_start, double beta_end) {
    if (T < 1) throw ScheduleError("schedule: T must be at least 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ScheduleError("schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int64_t t = 0; t < T; ++t) {
        double frac = T == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(T - 1);
        double b = beta_start + (beta_end - beta_start) * frac;
        s.beta[static_cast<size_t>(t)] = b;
        s.alpha[static_cast<size_t>(t)] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bar[static_cast<size_t>(t)] = prod;
    }
    return s;
}

NoiseSchedule NoiseSchedule::respaced(int64_t steps, std::vector<int64_t>* model_t) const {
    if (steps < 1 || steps > T)
        throw ScheduleError("respaced: steps must lie in [1, T], got " + std::to_string(steps));
    NoiseSchedule s;
    s.T = steps;
    if (model_t) model_t->clear();
    double prev_abar = 1.0;
    for (int64_t k = 1; k <= steps; ++k) {
        int64_t t = (k * T) / steps;  // strictly increasing, ends at T
        double abar = alpha_bar_t(t);
        double a = abar / prev_abar;
        s.beta.push_back(1.0 - a);
        s.alpha.push_back(a);
        s.alpha_bar.push_back(abar);
        prev_abar = abar;
        if (model_t) model_t->push_back(t);
    }
    return s;
}

}  // namespace lidit
