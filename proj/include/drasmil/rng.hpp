#pragma once

#include <cstdint>
#include <cmath>
#include <random>
#include <string_view>

namespace drasmil {

// mt19937_64 is bit-stable across standard libraries; all value draws below
// are hand-rolled so streams never depend on libstdc++ distribution internals.
using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Stable sub-seed derivation: hash of (tag, a, b) folded into the base seed.
// Used everywhere a component needs its own stream, so that per-bag and
// per-repeat results are independent of evaluation order and worker count.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t h = splitmix64(base ^ fnv1a64(tag));
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                 std::string_view id, std::uint64_t b = 0) {
  return derive_seed(base, tag, fnv1a64(id), b);
}

// Uniform in [0, 1) with 53 bits of mantissa.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_real(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

// Unbiased integer in [0, n) by rejection.
inline std::uint64_t uniform_below(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

// Standard normal via Box-Muller (cosine branch only; stateless).
inline double normal(Rng& rng) {
  double u1 = 1.0 - uniform01(rng);  // (0, 1], keeps log finite
  double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
}

}  // namespace drasmil
