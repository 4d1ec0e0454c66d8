#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace gradiend {

// Deterministic, platform-independent RNG. std::mt19937 engines are portable
// but the standard distributions are not, so all sampling helpers live here.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        // splitmix64
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // uniform integer in [0, n)
    uint64_t next_index(uint64_t n) { return next_u64() % n; }

    // standard normal via Box-Muller
    double normal() {
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    bool bernoulli(double p) { return next_double() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = next_index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    uint64_t state_;
};

inline uint64_t hash_str(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull; // FNV-1a
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

// Derive an independent stream seed from a base seed and a tag.
inline uint64_t derive_seed(uint64_t seed, std::string_view tag) {
    Rng r(seed ^ hash_str(tag));
    return r.next_u64();
}

inline uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t index) {
    Rng r(seed ^ hash_str(tag) ^ (0x9e3779b97f4a7c15ull * (index + 1)));
    return r.next_u64();
}

} // namespace gradiend
