// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wmlab/lm/params.hpp"

#include <fmt/format.h>

#include "wmlab/error.hpp"
#include "wmlab/rng.hpp"

namespace wmlab::lm {

namespace {

bool is_norm_gain(const std::string& name) {
  return name == names::kFinalNormGain || name.ends_with(leaf::kLn1Gain) || name.ends_with(leaf::kLn2Gain);
}

}  // namespace

ModelParams ModelParams::zeros(const ModelConfig& config) {
  config.validate();
  ModelParams p;
  p.config = config;
  for (auto& spec : tensor_specs(config)) {
    p.tensors.emplace(spec.name, Tensor(spec.shape, is_norm_gain(spec.name) ? 1.0f : 0.0f));
  }
  return p;
}

ModelParams ModelParams::init(const ModelConfig& config, uint64_t seed) {
  ModelParams p = zeros(config);
  Rng rng(seed);
  for (const auto& spec : tensor_specs(config)) {
    const bool is_matrix = spec.shape.size() == 2;
    if (!is_matrix) continue;  // norms and output bias keep their constant init
    for (float& v : p.tensors.at(spec.name).data) v = static_cast<float>(0.02 * rng.normal());
  }
  p.metadata["seed"] = seed;
  return p;
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw LookupError(fmt::format("no tensor named '{}'", name));
  return it->second;
}

Tensor& ModelParams::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw LookupError(fmt::format("no tensor named '{}'", name));
  return it->second;
}

void ModelParams::validate() const {
  config.validate();
  const auto specs = tensor_specs(config);
  if (specs.size() != tensors.size()) {
    throw ShapeError(fmt::format("expected {} tensors for config, found {}", specs.size(), tensors.size()));
  }
  for (const auto& spec : specs) {
    auto it = tensors.find(spec.name);
    if (it == tensors.end()) throw ShapeError(fmt::format("missing tensor '{}'", spec.name));
    if (it->second.shape != spec.shape || it->second.numel() != shape_numel(spec.shape)) {
      throw ShapeError(fmt::format("tensor '{}' has shape {}, config requires {}", spec.name,
                                   shape_string(it->second.shape), shape_string(spec.shape)));
    }
  }
  check_finite();
}

void ModelParams::check_finite() const {
  for (const auto& [name, t] : tensors) {
    if (!t.all_finite()) throw CorruptionError(fmt::format("tensor '{}' has non-finite entries", name));
  }
}

int64_t ModelParams::parameter_count() const {
  int64_t n = 0;
  for (const auto& [_, t] : tensors) n += t.numel();
  return n;
}

bool ModelParams::same_weights(const ModelParams& other) const {
  return config == other.config && tensors == other.tensors;
}

void TensorSelector::validate(const ModelParams& params) const {
  const Tensor& t = params.at(tensor_name);
  if (mask && static_cast<int64_t>(mask->size()) != t.numel()) {
    throw ShapeError(fmt::format("selector mask has {} entries, tensor '{}' has {}", mask->size(), tensor_name,
                                 t.numel()));
  }
}

void TokenSequence::validate(int vocab_size) const {
  if (split_point > tokens.size()) {
    throw ParameterError(fmt::format("split_point {} exceeds length {}", split_point, tokens.size()));
  }
  for (int t : tokens) {
    if (t < 0 || t >= vocab_size) throw ParameterError(fmt::format("token id {} outside vocabulary", t));
  }
}

}  // namespace wmlab::lm
