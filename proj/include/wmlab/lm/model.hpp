// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Inference-side entry points of the language model: next-token logits and
// distributions, sequence log-likelihood, and exact reverse-mode gradients
// of the log-likelihood with respect to one selected tensor.
//
// All functions take ModelParams by const reference and keep no shared
// state, so they are safe to call concurrently on the same parameters.

#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "wmlab/lm/params.hpp"

namespace wmlab::lm {

using LogitsMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Pre-softmax scores for the token following `context`.
std::vector<float> forward_logits(const ModelParams& params, const TokenSequence& context);

// softmax(logits / temperature). Probabilities are returned in double.
std::vector<double> softmax(std::span<const float> logits, double temperature = 1.0);
std::vector<double> next_token_dist(const ModelParams& params, const TokenSequence& context, double temperature);

// Logits at every position of `tokens`: row t scores tokens[t + 1].
LogitsMatrix sequence_logits(const ModelParams& params, std::span<const int> tokens);

// sum_{t >= scored_from} log p(x_t | x_<t). When omitted, scored_from is
// max(1, text.split_point), i.e. the completion region.
double log_prob(const ModelParams& params, const TokenSequence& text, std::optional<size_t> scored_from = {});
// Per-position terms of log_prob (length = number of scored positions).
std::vector<double> token_log_probs(const ModelParams& params, const TokenSequence& text,
                                    std::optional<size_t> scored_from = {});

// d log_prob / d theta_r for the selected tensor, same shape as that tensor.
// Entries outside the selector's mask are zero.
Tensor grad_log_prob(const ModelParams& params, const TokenSequence& text, const TensorSelector& selector,
                     std::optional<size_t> scored_from = {});

// Per linear weight, the sum over all positions of `batch` of the squared
// input activation of each input feature (length fan_in).
std::map<std::string, std::vector<double>> linear_input_sq_norms(const ModelParams& params,
                                                                  std::span<const TokenSequence> batch);

// Double-precision copies of the weights, used to verify gradients with
// finite differences without float round-off in the perturbation.
struct DoubleWeights {
  ModelConfig config;
  std::map<std::string, std::vector<double>> tensors;
};
DoubleWeights to_double(const ModelParams& params);
double log_prob(const DoubleWeights& weights, const TokenSequence& text, std::optional<size_t> scored_from = {});
std::vector<double> grad_log_prob(const DoubleWeights& weights, const TokenSequence& text,
                                  const std::string& tensor_name, std::optional<size_t> scored_from = {});

}  // namespace wmlab::lm
