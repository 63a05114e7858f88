// rng.hpp - seeded RNG helpers with pinned-down sampling routines.
//
// std::uniform_*_distribution output is implementation-defined, so every
// sampling primitive used for reproducible artifacts is spelled out here.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace jacfuse {

using Rng = std::mt19937_64;

inline std::uint64_t hash_string(const std::string &s) {
  // FNV-1a, also used for run-log digests.
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

// Decorrelated stream for the same top-level seed.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
  return Rng(seed ^ (stream * 0x9e3779b97f4a7c15ull + 0x385db17ull));
}

inline Rng make_rng(std::uint64_t seed, const std::string &stream) {
  return make_rng(seed, hash_string(stream));
}

// Uniform in [0, n) without modulo bias.
inline std::size_t uniform_index(Rng &rng, std::size_t n) {
  const std::uint64_t span = n;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return static_cast<std::size_t>(v % span);
}

// Uniform in [0, 1).
inline double uniform_real(Rng &rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_real(Rng &rng, double lo, double hi) {
  return lo + (hi - lo) * uniform_real(rng);
}

// Standard normal via Box-Muller (polar form avoided to keep the draw count
// per sample fixed).
inline double normal(Rng &rng) {
  const double u1 = uniform_real(rng);
  const double u2 = uniform_real(rng);
  const double r = std::sqrt(-2.0 * std::log(u1 + 1e-300));
  return r * std::cos(2.0 * 3.14159265358979323846 * u2);
}

template <class T> void shuffle_inplace(Rng &rng, std::vector<T> &v) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[uniform_index(rng, i)]);
  }
}

} // namespace jacfuse
