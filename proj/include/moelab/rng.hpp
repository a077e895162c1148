#pragma once

#include <cstdint>
#include <random>

namespace moelab {

// splitmix64 finalizer. Used to derive independent seeds from (seed, tag)
// pairs so per-sample noise streams stay deterministic under any
// parallelization of sample generation.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  return mix64(mix64(seed) ^ mix64(tag + 0x5bf03635ULL));
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t tag = 0) {
  return std::mt19937_64(derive_seed(seed, tag));
}

}  // namespace moelab
