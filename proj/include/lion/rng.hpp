#pragma once

#include <cstdint>
#include <cmath>

namespace lion {

/// Deterministic 64-bit PRNG (splitmix64). Identical seeds yield identical
/// draw sequences on every platform; all randomness in the project flows
/// through this type so runs are reproducible at the draw level.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform double in [0, 1), 53 usable bits.
    double next_uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller. Each call consumes exactly two
    /// uniform draws (the sine branch is discarded) so the mapping from
    /// seed to draw sequence stays trivial to reimplement.
    double next_normal() {
        double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; // (0, 1]
        double u2 = next_uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    /// Uniform integer in [0, n). Modulo reduction; the bias is irrelevant
    /// at our scales and keeps the draw sequence definition one-line.
    uint64_t next_below(uint64_t n) { return next_u64() % n; }

    /// Derive an independent stream for a named sub-purpose.
    Rng split(uint64_t salt) {
        uint64_t s = next_u64();
        return Rng(s ^ (salt * 0x9E3779B97F4A7C15ULL));
    }

private:
    uint64_t state_;
};

} // namespace lion
