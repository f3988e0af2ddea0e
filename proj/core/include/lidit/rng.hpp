#pragma once

#include <cstdint>

namespace lidit {

// Counter-based random stream: every draw is a pure function of (key, counter),
// so streams replay exactly and independent streams never interact. Derive
// sub-streams with fold() instead of sharing one counter across purposes.
struct Rng {
    uint64_t key     = 0;
    uint64_t counter = 0;

    Rng() = default;
    explicit Rng(uint64_t k, uint64_t c = 0) : key(k), counter(c) {}

    // splitmix64-style bijective mix of key and counter
    static uint64_t mix(uint64_t key, uint64_t ctr);

    // derive a new stream key; fold(fold(k, a), b) != fold(fold(k, b), a)
    static uint64_t fold(uint64_t key, uint64_t v);

    Rng stream(uint64_t v) const { return Rng(fold(key, v)); }

    uint64_t next_u64() { return mix(key, counter++); }

    // uniform in [0, 1)
    double next_uniform();
    // uniform in (0, 1]
    double next_uniform_pos();
    // standard normal via Box-Muller; always consumes two counters
    double next_normal();
    // normal truncated to [-2, 2] standard deviations, then scaled
    double next_trunc_normal(double sigma);
    // uniform integer in [lo, hi] inclusive
    int64_t next_int(int64_t lo, int64_t hi);
};

}  // namespace lidit
