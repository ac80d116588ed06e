// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wmlab/lm/optim.hpp"

#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "transformer.hpp"
#include "wmlab/error.hpp"

namespace wmlab::lm {

LossValue cross_entropy_loss(const TokenSequence& seq, const LogitsMatrix& logits, LogitsMatrix& dlogits) {
  LossValue out;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int target = seq.tokens[static_cast<size_t>(r) + 1];
    if (target == kPad) continue;
    const float mx = logits.row(r).maxCoeff();
    const Eigen::ArrayXf e = (logits.row(r).array() - mx).exp().transpose();
    const double z = e.cast<double>().sum();
    out.sum += -(static_cast<double>(logits(r, target)) - mx - std::log(z));
    ++out.count;
    dlogits.row(r) = (e / static_cast<float>(z)).matrix().transpose();
    dlogits(r, target) -= 1.0f;
  }
  return out;
}

double compute_gradients(const ModelParams& params, std::span<const TokenSequence> batch,
                         const std::set<std::string>& names, GradMap& grads, const LossHook& loss) {
  if (batch.empty()) throw ParameterError("batch must be nonempty");
  detail::WeightPtrs<float> w;
  for (const auto& [name, t] : params.tensors) w[name] = t.data.data();
  detail::GradSink<float> sink;
  grads.clear();
  for (const auto& name : names) {
    auto& g = grads[name];
    g.assign(static_cast<size_t>(params.at(name).numel()), 0.0f);
    sink.out[name] = g.data();
  }

  detail::Transformer<float> model(params.config, w);
  double loss_sum = 0.0;
  int64_t count = 0;
  LogitsMatrix dlogits;
  for (size_t i = 0; i < batch.size(); ++i) {
    const TokenSequence& seq = batch[i];
    if (seq.size() < 2) throw ParameterError("training sequences need at least 2 tokens");
    const LogitsMatrix& logits = model.forward(std::span<const int>(seq.tokens.data(), seq.size() - 1));
    dlogits.setZero(logits.rows(), logits.cols());
    const LossValue lv = loss ? loss(i, seq, logits, dlogits) : cross_entropy_loss(seq, logits, dlogits);
    loss_sum += lv.sum;
    count += lv.count;
    if (!sink.out.empty()) model.backward(dlogits, sink);
  }
  if (count == 0) throw ParameterError("batch has no loss terms");
  const double mean = loss_sum / static_cast<double>(count);
  if (!std::isfinite(mean)) throw DivergenceError(fmt::format("non-finite training loss ({})", mean));
  const float inv = 1.0f / static_cast<float>(count);
  for (auto& [_, g] : grads) {
    for (float& v : g) v *= inv;
  }
  return mean;
}

double clip_grad_norm(GradMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, g] : grads) {
    for (float v : g) sq += static_cast<double>(v) * v;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float s = static_cast<float>(max_norm / norm);
    for (auto& [_, g] : grads) {
      for (float& v : g) v *= s;
    }
  }
  return norm;
}

void apply_update(std::map<std::string, std::vector<float>*>& targets, const GradMap& grads, double lr,
                  OptimizerState& state, const std::map<std::string, std::vector<uint8_t>>* update_mask) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (auto& [name, param] : targets) {
    const auto& g = grads.at(name);
    const std::vector<uint8_t>* mask = nullptr;
    if (update_mask) {
      auto it = update_mask->find(name);
      if (it != update_mask->end()) mask = &it->second;
    }
    std::vector<float>& p = *param;
    if (state.kind == OptimizerKind::kSgd) {
      for (size_t i = 0; i < p.size(); ++i) {
        if (mask && !(*mask)[i]) continue;
        p[i] -= static_cast<float>(lr * g[i]);
      }
      continue;
    }
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != p.size()) m.assign(p.size(), 0.0f);
    if (v.size() != p.size()) v.assign(p.size(), 0.0f);
    const float b1 = static_cast<float>(state.beta1), b2 = static_cast<float>(state.beta2);
    for (size_t i = 0; i < p.size(); ++i) {
      if (mask && !(*mask)[i]) continue;
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

std::set<std::string> default_trainable(const ModelParams& params, bool include_output_bias) {
  std::set<std::string> names;
  for (const auto& [name, _] : params.tensors) {
    if (name == names::kOutputBias && !include_output_bias) continue;
    names.insert(name);
  }
  return names;
}

StepResult train_step(ModelParams& params, std::span<const TokenSequence> batch, double learning_rate,
                      OptimizerState& state, const TrainOptions& options, const LossHook& loss) {
  if (learning_rate < 0.0) throw ParameterError("learning_rate must be >= 0");
  std::set<std::string> names =
      options.trainable.empty() ? default_trainable(params, options.train_output_bias) : options.trainable;
  if (!options.train_output_bias) names.erase(names::kOutputBias);
  GradMap grads;
  StepResult result;
  result.loss = compute_gradients(params, batch, names, grads, loss);
  result.grad_norm = clip_grad_norm(grads, options.max_grad_norm);
  std::map<std::string, std::vector<float>*> targets;
  for (const auto& name : names) targets[name] = &params.at(name).data;
  apply_update(targets, grads, learning_rate, state, options.update_mask);
  return result;
}

double cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr) {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const int64_t decay_steps = std::max<int64_t>(1, total_steps - warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(decay_steps));
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace wmlab::lm
