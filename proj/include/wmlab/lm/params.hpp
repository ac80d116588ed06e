// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "wmlab/lm/model_config.hpp"
#include "wmlab/tensor.hpp"

namespace wmlab::lm {

// The full parameter set theta of one model. Treated as an immutable value by
// every inference routine, so a single instance can be shared (by const
// reference or shared_ptr<const>) across worker threads.
struct ModelParams {
  ModelConfig config;
  std::map<std::string, Tensor> tensors;
  // Free-form provenance: init seed, modification lineage, watermark notes.
  nlohmann::json metadata = nlohmann::json::object();

  // Every tensor zero except layer-norm gains (1). Used by tests as the
  // "all-zero model": its logits are exactly zero.
  static ModelParams zeros(const ModelConfig& config);
  // N(0, 0.02^2) weights from a seeded generator, unit norm gains, zero biases.
  static ModelParams init(const ModelConfig& config, uint64_t seed);

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  // Throws ShapeError/CorruptionError if the tensor set, shapes or values are
  // inconsistent with the config.
  void validate() const;
  // Throws CorruptionError on any non-finite entry.
  void check_finite() const;

  int64_t parameter_count() const;
  // Data equality (metadata ignored).
  bool same_weights(const ModelParams& other) const;
};

// Names a tensor (theta_r) and, optionally, a subset of its entries.
struct TensorSelector {
  std::string tensor_name;
  std::optional<std::vector<uint8_t>> mask;

  // Throws LookupError/ShapeError.
  void validate(const ModelParams& params) const;
};

// A token sequence with a prompt/completion boundary: tokens at index
// >= split_point form the completion.
struct TokenSequence {
  std::vector<int> tokens;
  size_t split_point = 0;

  size_t size() const { return tokens.size(); }
  size_t completion_size() const { return tokens.size() - split_point; }
  // Throws ParameterError on out-of-range ids or split point.
  void validate(int vocab_size) const;
  bool operator==(const TokenSequence&) const = default;
};

}  // namespace wmlab::lm
