#pragma once

#include <cstdint>
#include <string_view>

namespace nht {

/// Counter-based splittable RNG. Every consumer forks its own stream from a
/// single root seed, so reports are reproducible and independent of evaluation
/// order. Mixing is splitmix64; forks hash a label or index into the state.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

    Rng fork(std::uint64_t stream) const {
        return Rng(mix(state_ ^ mix(stream + 0x632be59bd9b4e019ull)), tag());
    }

    Rng fork(std::string_view label) const {
        std::uint64_t h = 1469598103934665603ull;  // FNV-1a
        for (char c : label) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        return fork(h);
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return mix(state_);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) { return a + (b - a) * next_unit(); }

    /// Uniform integer in [0, n).
    std::uint64_t next_below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    /// +1 or -1 with equal probability.
    double sign() { return (next_u64() & 1) ? 1.0 : -1.0; }

private:
    struct TagT {};
    static TagT tag() { return {}; }
    Rng(std::uint64_t raw, TagT) : state_(raw) {}

    static std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t state_;
};

}  // namespace nht
