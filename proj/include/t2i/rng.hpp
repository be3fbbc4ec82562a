#pragma once

#include <cmath>
#include <cstdint>

#include "t2i/common.hpp"

namespace t2i {

inline uint64_t splitmix64(uint64_t& s) {
    uint64_t z = (s += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic RNG with named substreams. Every consumer derives its own
// stream from the run's root seed plus a purpose string (and optional integer
// keys), so adding a consumer or reordering draws in one stream never
// perturbs another. Not for cryptography.
struct Rng {
    uint64_t state;

    explicit Rng(uint64_t seed = 0) : state(seed) {
        // Scramble so nearby seeds give unrelated streams.
        splitmix64(state);
    }

    uint64_t u64() { return splitmix64(state); }

    uint32_t u32() { return static_cast<uint32_t>(u64() >> 32); }

    // Uniform in [0, n).
    uint64_t below(uint64_t n) {
        check(n > 0, "Rng::below: n must be positive");
        // Rejection sampling keeps the distribution exact.
        uint64_t lim = ~uint64_t(0) - ~uint64_t(0) % n;
        uint64_t v;
        do { v = u64(); } while (v >= lim);
        return v % n;
    }

    // Uniform in [0, 1) with 24 bits of mantissa, exact in f32.
    float uniform() { return static_cast<float>(u64() >> 40) * 0x1p-24f; }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller, computed in double and rounded once.
    float gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do { u1 = (static_cast<double>(u64() >> 11)) * 0x1p-53; } while (u1 <= 0.0);
        u2 = (static_cast<double>(u64() >> 11)) * 0x1p-53;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925287 * u2;
        spare_ = static_cast<float>(r * std::sin(a));
        have_spare_ = true;
        return static_cast<float>(r * std::cos(a));
    }

  private:
    float spare_ = 0.0f;
    bool have_spare_ = false;
};

// Substream derivation: root seed x purpose name x integer keys -> seed.
inline uint64_t derive_seed(uint64_t root, const std::string& name) {
    uint64_t s = root ^ fnv1a64(name);
    splitmix64(s);
    return s;
}
inline uint64_t derive_seed(uint64_t root, const std::string& name, uint64_t k0) {
    uint64_t s = derive_seed(root, name) ^ (k0 * 0x9e3779b97f4a7c15ull + 0x632be59bd9b4e019ull);
    splitmix64(s);
    return s;
}
inline uint64_t derive_seed(uint64_t root, const std::string& name, uint64_t k0, uint64_t k1) {
    uint64_t s = derive_seed(root, name, k0) ^ (k1 * 0xd6e8feb86659fd93ull + 0x2545f4914f6cdd1dull);
    splitmix64(s);
    return s;
}

inline Rng substream(uint64_t root, const std::string& name) {
    return Rng(derive_seed(root, name));
}
inline Rng substream(uint64_t root, const std::string& name, uint64_t k0) {
    return Rng(derive_seed(root, name, k0));
}
inline Rng substream(uint64_t root, const std::string& name, uint64_t k0, uint64_t k1) {
    return Rng(derive_seed(root, name, k0, k1));
}

}  // namespace t2i
