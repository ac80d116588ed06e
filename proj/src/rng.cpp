// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wmlab/rng.hpp"

#include <cmath>
#include <numbers>

namespace wmlab {

namespace {

constexpr uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

uint64_t derive_seed(uint64_t parent, std::string_view label) {
  return mix64(parent ^ fnv1a(label));
}

uint64_t derive_seed(uint64_t parent, uint64_t index) {
  return mix64(mix64(parent) + index);
}

uint64_t Rng::uniform_int(uint64_t n) {
  // Largest multiple of n representable; reject the tail to stay unbiased.
  const uint64_t limit = UINT64_MAX - (UINT64_MAX % n + 1) % n;
  uint64_t r;
  do {
    r = engine_();
  } while (r > limit);
  return r % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

}  // namespace wmlab
