// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Model modifications: RTN quantization, unstructured pruning (magnitude and
// Wanda), SLERP merging and full or low-rank finetuning. Each takes
// parameters by const reference and returns new ones.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "wmlab/corpus.hpp"
#include "wmlab/lm/params.hpp"

namespace wmlab::mod {

using lm::ModelParams;
using lm::TokenSequence;

// ---- Quantization ----

// Simulated symmetric round-to-nearest: per group of `group_size`
// consecutive entries of a row (0 = whole row), s = max|w| / (2^(bits-1) - 1)
// and w' = clamp(round(w / s), -2^(bits-1), 2^(bits-1) - 1) * s. Only linear
// weights are touched.
ModelParams quantize_rtn(const ModelParams& params, int bits, int group_size = 64);
void quantize_row(std::span<float> row, int bits, int group_size);

// ---- Pruning ----

// Zeroes the floor(rho * n) smallest-magnitude entries of every linear
// weight; ties go to the lower flat index first.
ModelParams prune_magnitude(const ModelParams& params, double rho);

// Per output row, zeroes the floor(rho * fan_in) entries with the lowest
// |W[i, j]| * ||X_j||_2, where ||X_j||^2 sums feature j's input activation
// over the calibration tokens.
ModelParams prune_wanda(const ModelParams& params, double rho, std::span<const TokenSequence> calibration);
ModelParams prune_wanda_with_norms(const ModelParams& params, double rho,
                                   const std::map<std::string, std::vector<double>>& column_norms);

// ---- Merging ----

// Per-tensor SLERP(a, b, t) = sin((1-t) W)/sin W * a + sin(t W)/sin W * b
// with W the angle between the flattened tensors; W = pi/2 when either
// tensor is all zero, and linear interpolation when sin W < 1e-7.
ModelParams slerp_merge(const ModelParams& theta_wm, const ModelParams& theta_0, double t);
void slerp_tensor(std::span<const float> a, std::span<const float> b, double t, std::span<float> out);

// ---- Finetuning ----

enum class FinetuneMode { kFull, kLowRank };

struct FinetuneOptions {
  int64_t steps = 500;
  int batch_size = 32;
  int seq_len = 256;
  double lr = 1e-4;
  int64_t warmup_steps = 100;
  double max_grad_norm = 1.0;
  FinetuneMode mode = FinetuneMode::kFull;
  int rank = 16;
  double alpha = 32.0;
  uint64_t seed = 0;
  std::function<void(int64_t step, double loss)> on_step;
};

struct LowRankAdapter {
  int rank = 0;
  double scale = 0.0;  // alpha / rank
  // Per target: B [out, rank] and A [rank, in], row-major.
  std::map<std::string, std::vector<float>> a, b;
  std::vector<std::string> targets() const;
};

struct FinetuneResult {
  ModelParams params;
  std::vector<double> losses;
  // Set in low-rank mode: the trained (unmerged) adapters and the frozen
  // weights they were trained against.
  std::optional<LowRankAdapter> adapter;
};

FinetuneResult finetune(const ModelParams& params, const corpus::Corpus& corpus, const FinetuneOptions& options);

// W += scale * B A for every adapter target.
void merge_adapter(ModelParams& params, const LowRankAdapter& adapter);

// Mean next-token cross-entropy over `samples`.
double mean_cross_entropy(const ModelParams& params, std::span<const TokenSequence> samples);

// ---- Dispatch ----

enum class ModKind { kNone, kQuantize, kPrune, kMerge, kFinetune };
enum class PruneMethod { kMagnitude, kWanda };

struct ModificationSpec {
  ModKind kind = ModKind::kNone;
  // quantize
  int bits = 8;
  int group_size = 64;
  // prune
  PruneMethod method = PruneMethod::kMagnitude;
  double rho = 0.2;
  int calibration_sequences = 16;
  int calibration_len = 256;
  // merge
  double t = 0.5;
  std::string partner = "base";
  // finetune (and Wanda calibration data)
  std::string dataset = "broad";
  FinetuneOptions finetune;
  uint64_t seed = 0;

  // Throws ConfigError when a parameter is out of range for the kind.
  void validate() const;
  // Short stable identifier, e.g. "quantize-8b-g64" or "merge-t0.5".
  std::string id() const;
  static ModificationSpec unaltered();
};

nlohmann::json to_json(const ModificationSpec& spec);
// Rejects unknown keys and kinds with ConfigError.
ModificationSpec spec_from_json(const nlohmann::json& j);

struct Resources {
  std::map<std::string, const corpus::Corpus*> corpora;
  std::map<std::string, const ModelParams*> partners;
};

// Dispatches on spec.kind and appends the spec to metadata["lineage"].
// Throws ResourceError when a named corpus or partner is not in `resources`.
ModelParams apply(const ModificationSpec& spec, const ModelParams& params, const Resources& resources);

}  // namespace wmlab::mod
