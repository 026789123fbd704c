#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace esegeta {

// Counter-style deterministic RNG. Every randomized routine derives its own
// stream from (seed, stream index), so results are bit-reproducible under any
// execution order and independent of the platform's std distributions.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t mix_key(uint64_t seed, uint64_t stream) {
    uint64_t s = seed ^ (0x9e3779b97f4a7c15ull + (stream << 1));
    splitmix64(s);
    return splitmix64(s) ^ stream;
}

inline uint64_t fnv1a(std::string_view text) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

class Rng {
public:
    explicit Rng(uint64_t key) : state_(key) {
        // decorrelate trivially related keys
        splitmix64(state_);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; one value per call so streams stay position-stable.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // [0, n)
    int below(int n) { return n <= 1 ? 0 : static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

private:
    uint64_t state_;
};

inline Rng stream_rng(uint64_t seed, uint64_t stream) { return Rng(mix_key(seed, stream)); }

inline Rng named_rng(uint64_t seed, std::string_view name) { return Rng(mix_key(seed, fnv1a(name))); }

}  // namespace esegeta
