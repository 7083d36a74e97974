#pragma once

#include <cmath>
#include <cstdint>

namespace mgt {

// Deterministic, platform-independent PRNG (splitmix64).
// std::mt19937 engines are portable but the standard distributions are not,
// so all sampling transforms are done by hand here.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Modulo bias is ~n/2^64, irrelevant here.
    uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

    // Standard normal via polar Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        have_spare_ = true;
        return u * m;
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

  private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Stateless mixer for deriving independent streams from (seed, stream, index).
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c = 0) {
    Rng r(a * 0x9E3779B97F4A7C15ull + b * 0xC2B2AE3D27D4EB4Full + c + 1);
    r.next_u64();
    return r.next_u64();
}

// FNV-1a, used for run ids and batch digests.
inline uint64_t fnv1a(const void* bytes, size_t n, uint64_t h = 0xCBF29CE484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

}  // namespace mgt
