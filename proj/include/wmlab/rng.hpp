// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace wmlab {

// 64-bit avalanche mix (splitmix64 finalizer). Pinned: KGW partitions and
// every derived seed depend on its exact output.
constexpr uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Maps a 64-bit word to a double strictly inside (0, 1).
constexpr double unit_open(uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

// Seed derivation tree: child = mix(parent ^ fnv1a(label)).
uint64_t derive_seed(uint64_t parent, std::string_view label);
uint64_t derive_seed(uint64_t parent, uint64_t index);

// Seedable generator with implementation-independent distributions. The
// engine (mt19937_64) has a standardized output sequence; the distribution
// code below is ours because std::*_distribution is implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }
  // Uniform in (0, 1).
  double uniform() { return unit_open(engine_()); }
  // Uniform integer in [0, n) by rejection; n > 0.
  uint64_t uniform_int(uint64_t n);
  // Standard normal via Box-Muller; caches the second variate.
  double normal();

  // Fisher-Yates shuffle, i from the back, j uniform in [0, i].
  template <typename T>
  void shuffle(std::span<T> items) {
    for (size_t i = items.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace wmlab
