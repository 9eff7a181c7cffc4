#pragma once

#include <cmath>
#include <cstdint>

namespace neslam {

/// SplitMix64 stream. All randomness in the system flows through this so that
/// runs are reproducible bit-for-bit for a fixed seed on any platform; the
/// standard <random> distributions are implementation-defined and would break
/// the determinism contract.
class Rng {
 public:
    explicit Rng(uint64_t seed = 0x9e3779b97f4a7c15ull) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0,1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    /// Standard normal via Box-Muller, one cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Mixes identifiers into a stream seed, e.g. (run seed, frame id, pixel id,
/// iteration) for per-ray sampling.
inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    return z ^ (z >> 31);
}

inline uint64_t seed_for(uint64_t base, uint64_t frame, uint64_t pixel, uint64_t iter) {
    return hash_combine(hash_combine(hash_combine(base, frame), pixel), iter);
}

}  // namespace neslam
