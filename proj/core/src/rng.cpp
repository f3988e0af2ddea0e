#include "lidit/rng.hpp"

#include <cmath>

namespace lidit {

uint64_t Rng::mix(uint64_t key, uint64_t ctr) {
    uint64_t z = key + 0x9e3779b97f4a7c15ull * (ctr + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

uint64_t Rng::fold(uint64_t key, uint64_t v) {
    return mix(key ^ 0xa5a5a5a5a5a5a5a5ull, v);
}

double Rng::next_uniform() {
    return (next_u64() >> 11) * 0x1.0p-53;
}

double Rng::next_uniform_pos() {
    return 1.0 - next_uniform();
}

double Rng::next_normal() {
    double u1 = next_uniform_pos();
    double u2 = next_uniform();
    double r  = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * M_PI * u2);
}

double Rng::next_trunc_normal(double sigma) {
    for (;;) {
        double z = next_normal();
        if (z >= -2.0 && z <= 2.0) return z * sigma;
    }
}

int64_t Rng::next_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
}

}  // namespace lidit
