#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace vertseg {

// splitmix64 finalizer; good avalanche for combining seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Per-sample stream seed. Every random draw of the data pipeline is keyed by
// this, so worker scheduling order never changes what a sample sees.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view volume_id,
                                    std::int64_t slice_index, std::int64_t epoch) {
  std::uint64_t h = mix64(seed);
  h = mix64(h ^ hash_string(volume_id));
  h = mix64(h ^ static_cast<std::uint64_t>(slice_index));
  h = mix64(h ^ static_cast<std::uint64_t>(epoch));
  return h;
}

using Rng = std::mt19937_64;

// Draws are computed by hand rather than through <random> distributions so
// streams are identical across standard libraries.
inline double uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
  return lo + (hi - lo) * static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline bool bernoulli(Rng& rng, double p) { return uniform(rng) < p; }

// Uniform integer in [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  return static_cast<std::uint64_t>(uniform(rng) * static_cast<double>(n)) % n;
}

inline double normal(Rng& rng) {
  double u1 = uniform(rng);
  while (u1 <= 0.0) u1 = uniform(rng);
  const double u2 = uniform(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace vertseg
