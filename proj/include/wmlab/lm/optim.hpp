// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "wmlab/lm/model.hpp"
#include "wmlab/lm/params.hpp"

namespace wmlab::lm {

// Loss contribution of one sequence. `logits` row t scores tokens[t + 1];
// the hook writes d(loss_sum)/d(logits) into `dlogits` (pre-sized, zeroed)
// and returns the summed loss and the number of terms it averaged over.
struct LossValue {
  double sum = 0.0;
  int64_t count = 0;
};
using LossHook =
    std::function<LossValue(size_t index, const TokenSequence& seq, const LogitsMatrix& logits, LogitsMatrix& dlogits)>;

// Token-level next-token cross-entropy; PAD targets are skipped.
LossValue cross_entropy_loss(const TokenSequence& seq, const LogitsMatrix& logits, LogitsMatrix& dlogits);

using GradMap = std::map<std::string, std::vector<float>>;

// Mean loss over the batch and its gradient w.r.t. `names` (already divided by
// the total term count). Throws DivergenceError on a non-finite loss.
double compute_gradients(const ModelParams& params, std::span<const TokenSequence> batch,
                         const std::set<std::string>& names, GradMap& grads, const LossHook& loss = {});

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::map<std::string, std::vector<float>> m, v;
};

struct TrainOptions {
  // Tensors to update; empty means every tensor except the output bias.
  std::set<std::string> trainable;
  // The output bias is frozen unless explicitly enabled.
  bool train_output_bias = false;
  // Per-tensor update masks; coordinates with mask 0 never change.
  const std::map<std::string, std::vector<uint8_t>>* update_mask = nullptr;
  // Global-norm gradient clipping; 0 disables.
  double max_grad_norm = 0.0;
};

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
};

// One optimizer step on the mean loss over `batch` (cross-entropy unless a
// hook is given).
StepResult train_step(ModelParams& params, std::span<const TokenSequence> batch, double learning_rate,
                      OptimizerState& state, const TrainOptions& options = {}, const LossHook& loss = {});

// Applies an already-computed gradient. Exposed for trainers that compute
// gradients of reparameterized weights (low-rank adapters).
void apply_update(std::map<std::string, std::vector<float>*>& targets, const GradMap& grads, double learning_rate,
                  OptimizerState& state, const std::map<std::string, std::vector<uint8_t>>* update_mask = nullptr);

// Clips `grads` in place to the given global L2 norm; returns the norm before clipping.
double clip_grad_norm(GradMap& grads, double max_norm);

// Linear warmup followed by cosine decay to zero at total_steps.
double cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr);

std::set<std::string> default_trainable(const ModelParams& params, bool include_output_bias);

}  // namespace wmlab::lm
