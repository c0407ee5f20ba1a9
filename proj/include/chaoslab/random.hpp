#pragma once

// Seeded substreams and low-discrepancy sequences.

#include <cstdint>
#include <random>
#include <string_view>

namespace chaoslab {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_mix(std::uint64_t h, std::uint64_t v) {
  return splitmix64(h ^ splitmix64(v + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed of the substream keyed by (root seed, N, repetition, stage). Cells
/// seeded this way never share state, so results do not depend on how cells
/// are scheduled.
inline std::uint64_t substream_seed(std::uint64_t root, std::uint64_t n,
                                    std::uint64_t rep, std::string_view stage) {
  std::uint64_t h = splitmix64(root);
  h = hash_mix(h, n);
  h = hash_mix(h, rep);
  h = hash_mix(h, hash_string(stage));
  return h;
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t root, std::uint64_t n, std::uint64_t rep,
                    std::string_view stage) {
  return Rng(substream_seed(root, n, rep, stage));
}

/// Radical inverse of `index` in base `base` (van der Corput).
inline double radical_inverse(std::uint64_t index, unsigned base) {
  double inv = 1.0 / base, f = inv, r = 0.0;
  while (index > 0) {
    r += f * static_cast<double>(index % base);
    index /= base;
    f *= inv;
  }
  return r;
}

inline constexpr unsigned kPrimes[] = {2,  3,  5,  7,  11, 13, 17, 19,
                                       23, 29, 31, 37, 41, 43, 47, 53};

/// Component `dim` of the Halton point with the given index (index 0 skipped).
inline double halton(std::uint64_t index, unsigned dim) {
  return radical_inverse(index + 1, kPrimes[dim % 16]);
}

}  // namespace chaoslab
