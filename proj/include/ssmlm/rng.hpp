#pragma once

#include <cmath>
#include <cstdint>

namespace ssmlm {

// splitmix64 generator. Self-contained so that seeded runs are reproducible
// across platforms and standard libraries.
struct Rng {
    uint64_t state;

    explicit Rng(uint64_t seed = 0) : state(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() {
        return double(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    int64_t range(int64_t lo, int64_t hi) { // inclusive lo, exclusive hi
        return lo + int64_t(below(uint64_t(hi - lo)));
    }

    double normal() {
        // Box-Muller; one draw per call keeps the state sequence simple.
        double u1 = uniform(), u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double lognormal(double mu, double sigma) { return std::exp(mu + sigma * normal()); }

    // Derive an independent stream, e.g. per (seed, item index).
    static Rng fork(uint64_t seed, uint64_t index) {
        Rng r(seed ^ (0x517cc1b727220a95ull * (index + 1)));
        r.next_u64();
        return r;
    }
};

} // namespace ssmlm
