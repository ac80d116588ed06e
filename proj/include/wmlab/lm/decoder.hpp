// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <span>
#include <vector>

#include "wmlab/lm/params.hpp"

namespace wmlab::lm {

// Token-at-a-time evaluation for sampling loops. Keeps per-layer key/value
// rows of the tokens fed so far, so each step costs one row of the full
// forward pass. Logits agree with forward_logits up to float summation order.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const ModelParams& params);
  ~IncrementalDecoder();
  IncrementalDecoder(IncrementalDecoder&&) noexcept;
  IncrementalDecoder& operator=(IncrementalDecoder&&) noexcept;

  // Appends one token and returns the logits for the next position.
  std::span<const float> push(int token);
  // Feeds several tokens; returns logits after the last one.
  std::span<const float> push_all(std::span<const int> tokens);
  size_t position() const;
  void reset();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace wmlab::lm
