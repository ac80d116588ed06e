// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Weight-editing watermarks. Both schemes add seeded Gaussian noise to one
// tensor: Unremovable to the output bias, GaussMark to any selected tensor
// (by default the last block's MLP up-projection).

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "wmlab/lm/params.hpp"

namespace wmlab::wm {

using lm::ModelParams;
using wmlab::Tensor;
using lm::TensorSelector;

enum class MarkScheme { kUnremovable, kGaussMark };

struct GaussianMark {
  MarkScheme scheme = MarkScheme::kGaussMark;
  TensorSelector target;
  double sigma = 0.0;
  uint64_t seed = 0;
  Tensor epsilon;  // zero outside the selector mask

  // Number of perturbed coordinates d_r.
  int64_t dimension() const;
};

// epsilon ~ N(0, sigma^2) on the selected coordinates, zero elsewhere;
// a pure function of (shape, mask, sigma, seed).
Tensor draw_epsilon(const std::vector<int64_t>& shape, const TensorSelector& target, double sigma, uint64_t seed);

struct MarkedModel {
  ModelParams params;
  GaussianMark mark;
};

// Throws UnsupportedArchitecture when the model has no output bias.
MarkedModel embed_unremovable(const ModelParams& params, double sigma, uint64_t seed);
MarkedModel embed_gaussmark(const ModelParams& params, const TensorSelector& target, double sigma, uint64_t seed);

std::string default_gaussmark_target(const lm::ModelConfig& config);

// The mark persists as (scheme, target, sigma, seed, shape); epsilon is
// regenerated on load.
nlohmann::json mark_to_json(const GaussianMark& mark);
GaussianMark mark_from_json(const nlohmann::json& j);
void save_mark(const GaussianMark& mark, const std::filesystem::path& path);
GaussianMark load_mark(const std::filesystem::path& path);

const char* scheme_name(MarkScheme scheme);
MarkScheme parse_scheme(const std::string& name);

}  // namespace wmlab::wm
