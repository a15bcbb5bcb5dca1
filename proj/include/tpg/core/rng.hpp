#ifndef TPG_CORE_RNG_HPP
#define TPG_CORE_RNG_HPP

#include <cmath>
#include <cstdint>
#include <string_view>

namespace tpg {

// xoshiro256** seeded through splitmix64. Self-contained so that streams are
// bit-identical across standard libraries and platforms; std::<distribution>
// implementations are not portable enough for the reproducibility contract.
struct Rng {
    uint64_t s[4];

    explicit Rng(uint64_t seed = 0) {
        uint64_t x = seed;
        for (auto& si : s) si = splitmix64(x);
    }

    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9e3779b97f4a7c15ull;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    uint64_t next_u64() {
        uint64_t result = rotl(s[1] * 5, 7) * 9;
        uint64_t t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = rotl(s[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) { return n ? next_u64() % n : 0; }

    // integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + int64_t(uniform_int(uint64_t(hi - lo + 1)));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller, one value per call (the pair's second half is discarded to
    // keep the stream position a simple function of call count)
    double normal() {
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }
};

// FNV-1a over a tag string, for deriving independent named substreams.
inline uint64_t hash_tag(std::string_view tag) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : tag) {
        h ^= uint64_t(uint8_t(c));
        h *= 0x100000001b3ull;
    }
    return h;
}

// Counter-based stream derivation: the stream for (seed, tag, a, b) does not
// depend on how many draws other streams made. Training code keys streams by
// (run seed, purpose tag, step, sample index) so that resuming from a
// checkpoint replays the exact same randomness.
inline Rng rng_stream(uint64_t seed, std::string_view tag, uint64_t a = 0, uint64_t b = 0) {
    uint64_t x = seed;
    uint64_t h = Rng::splitmix64(x) ^ hash_tag(tag);
    h = h * 0x2545f4914f6cdd1dull + a;
    uint64_t y = h;
    uint64_t h2 = Rng::splitmix64(y) + b * 0x9e3779b97f4a7c15ull;
    uint64_t z = h2;
    return Rng(Rng::splitmix64(z));
}

}  // namespace tpg

#endif
