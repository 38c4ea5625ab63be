#pragma once

#include <cstdint>
#include <random>

namespace dfdg {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent stream seeds from a
/// master seed and a stream tag.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t tag = 0) { return Rng(mix_seed(seed, tag)); }

}  // namespace dfdg
