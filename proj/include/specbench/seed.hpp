#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>

namespace specbench {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; a bijection on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a master seed and a cell path
/// such as (repetition, model, level). Order-sensitive: (1, 2) != (2, 1).
constexpr std::uint64_t derive_seed(std::uint64_t master, std::span<const std::uint64_t> path) noexcept {
  std::uint64_t h = mix64(master);
  std::uint64_t depth = 0;
  for (std::uint64_t idx : path) {
    ++depth;
    h = mix64(h ^ mix64(idx + 0x632be59bd9b4e019ULL * depth));
  }
  return h;
}

constexpr std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) noexcept {
  return derive_seed(master, std::span<const std::uint64_t>(path.begin(), path.size()));
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace specbench
