// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wmlab/lm/model.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "transformer.hpp"
#include "wmlab/error.hpp"

namespace wmlab::lm {

namespace {

using detail::Mat;

detail::WeightPtrs<float> float_ptrs(const ModelParams& p) {
  detail::WeightPtrs<float> w;
  for (const auto& [name, t] : p.tensors) w[name] = t.data.data();
  return w;
}

detail::WeightPtrs<double> double_ptrs(const DoubleWeights& dw) {
  detail::WeightPtrs<double> w;
  for (const auto& [name, t] : dw.tensors) w[name] = t.data();
  return w;
}

size_t resolve_scored_from(const TokenSequence& text, std::optional<size_t> scored_from) {
  const size_t from = scored_from.value_or(std::max<size_t>(1, text.split_point));
  if (text.size() < 2) throw ParameterError("log_prob needs a text of at least 2 tokens");
  if (from < 1 || from >= text.size()) {
    throw ParameterError(fmt::format("empty scored region: scored_from={} for text of length {}", from, text.size()));
  }
  return from;
}

// Row-wise log-softmax of logits at rows [from-1, L-1) gathered at the
// observed next tokens.
template <typename T>
std::vector<double> gather_log_probs(const Mat<T>& logits, const std::vector<int>& tokens, size_t from) {
  std::vector<double> out;
  out.reserve(tokens.size() - from);
  for (size_t t = from; t < tokens.size(); ++t) {
    const auto row = logits.row(static_cast<Eigen::Index>(t - 1));
    const double mx = static_cast<double>(row.maxCoeff());
    double z = 0.0;
    for (Eigen::Index j = 0; j < row.size(); ++j) z += std::exp(static_cast<double>(row(j)) - mx);
    out.push_back(static_cast<double>(row(tokens[t])) - mx - std::log(z));
  }
  return out;
}

// d/dlogits of sum_t log p(x_t | x_<t): onehot - softmax on scored rows.
template <typename T>
Mat<T> log_prob_dlogits(const Mat<T>& logits, const std::vector<int>& tokens, size_t from) {
  Mat<T> d = Mat<T>::Zero(logits.rows(), logits.cols());
  for (size_t t = from; t < tokens.size(); ++t) {
    const auto r = static_cast<Eigen::Index>(t - 1);
    const T mx = logits.row(r).maxCoeff();
    auto e = (logits.row(r).array() - mx).exp();
    d.row(r) = -(e / e.sum()).matrix();
    d(r, tokens[t]) += T(1);
  }
  return d;
}

template <typename T>
std::vector<double> token_log_probs_impl(const ModelConfig& config, const detail::WeightPtrs<T>& w,
                                         const TokenSequence& text, size_t from) {
  text.validate(config.vocab_size);
  detail::Transformer<T> model(config, w);
  const std::span<const int> input(text.tokens.data(), text.size() - 1);
  const Mat<T>& logits = model.forward(input);
  return gather_log_probs(logits, text.tokens, from);
}

template <typename T>
std::vector<T> grad_impl(const ModelConfig& config, const detail::WeightPtrs<T>& w, const TokenSequence& text,
                         const std::string& name, int64_t numel, size_t from) {
  text.validate(config.vocab_size);
  detail::Transformer<T> model(config, w);
  const std::span<const int> input(text.tokens.data(), text.size() - 1);
  const Mat<T>& logits = model.forward(input);
  const Mat<T> dlogits = log_prob_dlogits(logits, text.tokens, from);
  std::vector<T> grad(static_cast<size_t>(numel), T(0));
  detail::GradSink<T> sink;
  sink.out[name] = grad.data();
  model.backward(dlogits, sink);
  return grad;
}

double sum(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

std::vector<double> softmax(std::span<const float> logits, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError(fmt::format("temperature must be > 0, got {}", temperature));
  std::vector<double> p(logits.size());
  double mx = -INFINITY;
  for (float l : logits) mx = std::max(mx, static_cast<double>(l) / temperature);
  double z = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) / temperature - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

LogitsMatrix sequence_logits(const ModelParams& params, std::span<const int> tokens) {
  params.check_finite();
  if (params.config.compute_precision == Precision::kDouble) {
    const DoubleWeights dw = to_double(params);
    detail::Transformer<double> model(dw.config, double_ptrs(dw));
    return model.forward(tokens).cast<float>();
  }
  detail::Transformer<float> model(params.config, float_ptrs(params));
  return model.forward(tokens);
}

std::vector<float> forward_logits(const ModelParams& params, const TokenSequence& context) {
  if (context.tokens.empty()) throw ParameterError("forward_logits needs a nonempty context");
  if (static_cast<int>(context.size()) > params.config.context_len) {
    throw LengthError(
        fmt::format("context of {} tokens exceeds context_len {}", context.size(), params.config.context_len));
  }
  context.validate(params.config.vocab_size);
  const LogitsMatrix logits = sequence_logits(params, context.tokens);
  const auto last = logits.row(logits.rows() - 1);
  return std::vector<float>(last.data(), last.data() + last.size());
}

std::vector<double> next_token_dist(const ModelParams& params, const TokenSequence& context, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError(fmt::format("temperature must be > 0, got {}", temperature));
  return softmax(forward_logits(params, context), temperature);
}

std::vector<double> token_log_probs(const ModelParams& params, const TokenSequence& text,
                                    std::optional<size_t> scored_from) {
  const size_t from = resolve_scored_from(text, scored_from);
  params.check_finite();
  if (params.config.compute_precision == Precision::kDouble) {
    const DoubleWeights dw = to_double(params);
    return token_log_probs_impl<double>(dw.config, double_ptrs(dw), text, from);
  }
  return token_log_probs_impl<float>(params.config, float_ptrs(params), text, from);
}

double log_prob(const ModelParams& params, const TokenSequence& text, std::optional<size_t> scored_from) {
  return sum(token_log_probs(params, text, scored_from));
}

Tensor grad_log_prob(const ModelParams& params, const TokenSequence& text, const TensorSelector& selector,
                     std::optional<size_t> scored_from) {
  selector.validate(params);
  const size_t from = resolve_scored_from(text, scored_from);
  params.check_finite();
  const Tensor& target = params.at(selector.tensor_name);
  Tensor out(target.shape);
  if (params.config.compute_precision == Precision::kDouble) {
    const DoubleWeights dw = to_double(params);
    const auto g = grad_impl<double>(dw.config, double_ptrs(dw), text, selector.tensor_name, target.numel(), from);
    std::transform(g.begin(), g.end(), out.data.begin(), [](double v) { return static_cast<float>(v); });
  } else {
    out.data = grad_impl<float>(params.config, float_ptrs(params), text, selector.tensor_name, target.numel(), from);
  }
  if (selector.mask) {
    for (size_t i = 0; i < out.data.size(); ++i) {
      if (!(*selector.mask)[i]) out.data[i] = 0.0f;
    }
  }
  return out;
}

std::map<std::string, std::vector<double>> linear_input_sq_norms(const ModelParams& params,
                                                                  std::span<const TokenSequence> batch) {
  params.check_finite();
  std::map<std::string, std::vector<double>> out;
  detail::Transformer<float> model(params.config, float_ptrs(params));
  for (const auto& seq : batch) {
    seq.validate(params.config.vocab_size);
    model.forward(seq.tokens);
    for (const auto& [name, x] : model.linear_inputs()) {
      auto& acc = out[name];
      acc.resize(static_cast<size_t>(x->cols()), 0.0);
      for (Eigen::Index r = 0; r < x->rows(); ++r) {
        for (Eigen::Index j = 0; j < x->cols(); ++j) {
          const double v = (*x)(r, j);
          acc[static_cast<size_t>(j)] += v * v;
        }
      }
    }
  }
  return out;
}

DoubleWeights to_double(const ModelParams& params) {
  DoubleWeights dw;
  dw.config = params.config;
  for (const auto& [name, t] : params.tensors) dw.tensors[name] = std::vector<double>(t.data.begin(), t.data.end());
  return dw;
}

double log_prob(const DoubleWeights& weights, const TokenSequence& text, std::optional<size_t> scored_from) {
  const size_t from = resolve_scored_from(text, scored_from);
  return sum(token_log_probs_impl<double>(weights.config, double_ptrs(weights), text, from));
}

std::vector<double> grad_log_prob(const DoubleWeights& weights, const TokenSequence& text,
                                  const std::string& tensor_name, std::optional<size_t> scored_from) {
  const size_t from = resolve_scored_from(text, scored_from);
  auto it = weights.tensors.find(tensor_name);
  if (it == weights.tensors.end()) throw LookupError(fmt::format("no tensor named '{}'", tensor_name));
  return grad_impl<double>(weights.config, double_ptrs(weights), text, tensor_name,
                           static_cast<int64_t>(it->second.size()), from);
}

}  // namespace wmlab::lm
