#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace codl {

// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// distributions here are hand-rolled (std::normal_distribution is
// implementation-defined), so streams replay bit-exactly everywhere.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : gen_(seed), seed_mix_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0,1).
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n) {
        // Rejection-free modulo bias is negligible for n << 2^64; keep exact anyway.
        uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
        for (;;) {
            uint64_t r = gen_();
            if (r >= threshold) return r % n;
        }
    }

    // Standard normal via Box-Muller (cached second value).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Derive an independent stream; used to isolate e.g. data-order draws
    // from parameter-init draws.
    Rng fork(uint64_t tag) const {
        uint64_t x = seed_mix_ ^ (0x9e3779b97f4a7c15ull + tag * 0xbf58476d1ce4e5b9ull);
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ull;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebull;
        x ^= x >> 31;
        return Rng(x);
    }

    void reseed(uint64_t seed) {
        gen_.seed(seed);
        seed_mix_ = seed;
        have_spare_ = false;
    }

private:
    std::mt19937_64 gen_;
    uint64_t seed_mix_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace codl
