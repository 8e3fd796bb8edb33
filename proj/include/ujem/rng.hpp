#pragma once

#include <cstdint>
#include <string_view>

namespace ujem {

// SplitMix64. Every random draw in the project flows through this generator so
// that identical seeds give bit-identical runs regardless of platform or
// standard library. Reference: Steele, Lea, Flood, "Fast splittable
// pseudorandom number generators", OOPSLA 2014.
class SplitMix64 {
  public:
    explicit SplitMix64(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform double in [0, 1), 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  private:
    uint64_t state_;
};

// FNV-1a 64-bit hash of a tag string.
constexpr uint64_t hash_tag(std::string_view tag) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : tag) {
        h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Derives the seed of a named substream. Streams with distinct tags are
// independent for all practical purposes; the derivation is part of the file
// format contract (identical across implementations).
inline uint64_t derive(uint64_t seed, std::string_view tag) {
    return SplitMix64(seed ^ hash_tag(tag)).next_u64();
}

inline uint64_t derive(uint64_t seed, std::string_view tag, uint64_t index) {
    return SplitMix64(derive(seed, tag) + index * 0x9e3779b97f4a7c15ULL).next_u64();
}

} // namespace ujem
