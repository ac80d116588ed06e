// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wmlab/lm/decoder.hpp"

#include <cmath>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "transformer.hpp"
#include "wmlab/error.hpp"

namespace wmlab::lm {

namespace {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXf;
using CMat = Eigen::Map<const Mat>;
using CVec = Eigen::Map<const Vec>;

Vec layer_norm(const Vec& x, const float* gain, const float* bias) {
  const auto n = x.size();
  const float mean = x.mean();
  const float var = (x.array() - mean).square().mean();
  const float r = 1.0f / std::sqrt(var + 1e-5f);
  return ((x.array() - mean) * r).matrix().cwiseProduct(CVec(gain, n)) + CVec(bias, n);
}

float gelu(float u) { return 0.5f * u * (1.0f + std::tanh(0.7978845608028654f * (u + 0.044715f * u * u * u))); }

}  // namespace

struct IncrementalDecoder::Impl {
  const ModelParams& p;
  detail::AlignedWeights<float> weights;
  int d, f, V, H, hd;
  size_t pos = 0;
  std::vector<Mat> keys, values;  // per layer [context_len, d]
  std::vector<float> logits;

  explicit Impl(const ModelParams& params)
      : p(params),
        weights(params.config, pointers(params)),
        d(params.config.d_model),
        f(params.config.d_ff),
        V(params.config.vocab_size),
        H(params.config.n_heads),
        hd(params.config.head_dim()) {
    keys.assign(params.config.n_layers, Mat(params.config.context_len, d));
    values.assign(params.config.n_layers, Mat(params.config.context_len, d));
    logits.resize(V);
  }

  static detail::WeightPtrs<float> pointers(const ModelParams& params) {
    detail::WeightPtrs<float> out;
    for (const auto& [name, t] : params.tensors) out[name] = t.data.data();
    return out;
  }

  const float* w(const std::string& name) const { return weights.get(name); }

  void step(int token) {
    if (pos >= static_cast<size_t>(p.config.context_len)) {
      throw LengthError(fmt::format("decoder exceeded context_len {}", p.config.context_len));
    }
    if (token < 0 || token >= V) throw ParameterError(fmt::format("token id {} outside vocabulary", token));
    Vec x = CMat(w(names::kTokEmb), V, d).row(token).transpose() +
            CMat(w(names::kPosEmb), p.config.context_len, d).row(static_cast<Eigen::Index>(pos)).transpose();
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    const auto n = static_cast<Eigen::Index>(pos) + 1;
    for (int l = 0; l < p.config.n_layers; ++l) {
      auto name = [&](const char* leaf_name) { return names::block(l, leaf_name); };
      const Vec a = layer_norm(x, w(name(leaf::kLn1Gain)), w(name(leaf::kLn1Bias)));
      const Vec q = CMat(w(name(leaf::kWq)), d, d) * a;
      keys[l].row(n - 1) = (CMat(w(name(leaf::kWk)), d, d) * a).transpose();
      values[l].row(n - 1) = (CMat(w(name(leaf::kWv)), d, d) * a).transpose();
      Vec att(d);
      for (int h = 0; h < H; ++h) {
        Vec s = keys[l].topRows(n).middleCols(h * hd, hd) * q.segment(h * hd, hd) * scale;
        s = (s.array() - s.maxCoeff()).exp();
        s /= s.sum();
        att.segment(h * hd, hd) = values[l].topRows(n).middleCols(h * hd, hd).transpose() * s;
      }
      x += CMat(w(name(leaf::kWo)), d, d) * att;
      const Vec b = layer_norm(x, w(name(leaf::kLn2Gain)), w(name(leaf::kLn2Bias)));
      const Vec u = (CMat(w(name(leaf::kUp)), f, d) * b).unaryExpr([](float v) { return gelu(v); });
      x += CMat(w(name(leaf::kDown)), d, f) * u;
    }
    const Vec h = layer_norm(x, w(names::kFinalNormGain), w(names::kFinalNormBias));
    Eigen::Map<Vec> out(logits.data(), V);
    out.noalias() = CMat(w(names::kHead), V, d) * h;
    if (p.config.output_bias_enabled) out += CVec(w(names::kOutputBias), V);
    ++pos;
  }
};

IncrementalDecoder::IncrementalDecoder(const ModelParams& params) : impl_(std::make_unique<Impl>(params)) {}
IncrementalDecoder::~IncrementalDecoder() = default;
IncrementalDecoder::IncrementalDecoder(IncrementalDecoder&&) noexcept = default;
IncrementalDecoder& IncrementalDecoder::operator=(IncrementalDecoder&&) noexcept = default;

std::span<const float> IncrementalDecoder::push(int token) {
  impl_->step(token);
  return impl_->logits;
}

std::span<const float> IncrementalDecoder::push_all(std::span<const int> tokens) {
  if (tokens.empty()) throw ParameterError("push_all needs at least one token");
  for (int t : tokens) impl_->step(t);
  return impl_->logits;
}

size_t IncrementalDecoder::position() const { return impl_->pos; }
void IncrementalDecoder::reset() { impl_->pos = 0; }

}  // namespace wmlab::lm
