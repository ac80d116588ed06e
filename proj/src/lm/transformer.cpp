// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "transformer.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include <fmt/format.h>

#include "wmlab/error.hpp"
#include "wmlab/tensor.hpp"

namespace wmlab::lm::detail {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <typename T>
const T* lookup(const WeightPtrs<T>& w, const std::string& name) {
  auto it = w.find(name);
  if (it == w.end()) throw LookupError(fmt::format("no tensor named '{}'", name));
  return it->second;
}

// dst += src over contiguous storage. Sink buffers have arbitrary alignment,
// so expressions are evaluated into aligned temporaries first and added here.
template <typename Derived>
void accumulate(typename Derived::Scalar* dst, const Eigen::PlainObjectBase<Derived>& src) {
  const auto* s = src.data();
  for (Eigen::Index i = 0; i < src.size(); ++i) dst[i] += s[i];
}

// y = LN(x) * g + b, keeping xhat and 1/std per row.
template <typename T>
void layer_norm(const Mat<T>& x, const T* gain, const T* bias, Mat<T>& xhat, RowVec<T>& rstd, Mat<T>& y) {
  const Eigen::Index n = x.rows(), d = x.cols();
  xhat.resize(n, d);
  rstd.resize(n);
  y.resize(n, d);
  CRowMap<T> g(gain, d), b(bias, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T r = T(1) / std::sqrt(var + T(kLnEps));
    rstd(i) = r;
    xhat.row(i) = (x.row(i).array() - mean) * r;
    y.row(i) = xhat.row(i).cwiseProduct(g) + b;
  }
}

// Returns dx; accumulates dgain/dbias when the sink wants them.
template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const RowVec<T>& rstd, const T* gain, T* dgain,
                           T* dbias) {
  const Eigen::Index n = dy.rows(), d = dy.cols();
  CRowMap<T> g(gain, d);
  if (dgain) accumulate(dgain, RowVec<T>(dy.cwiseProduct(xhat).colwise().sum()));
  if (dbias) accumulate(dbias, RowVec<T>(dy.colwise().sum()));
  Mat<T> dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVec<T> dxhat = dy.row(i).cwiseProduct(g);
    const T mean_dxhat = dxhat.mean();
    const T mean_dxhat_xhat = dxhat.cwiseProduct(xhat.row(i)).mean();
    dx.row(i) = (dxhat.array() - mean_dxhat - xhat.row(i).array() * mean_dxhat_xhat) * rstd(i);
  }
  return dx;
}

template <typename T>
T gelu(T u) {
  return T(0.5) * u * (T(1) + std::tanh(T(kGeluC) * (u + T(kGeluA) * u * u * u)));
}

template <typename T>
T gelu_grad(T u) {
  const T th = std::tanh(T(kGeluC) * (u + T(kGeluA) * u * u * u));
  return T(0.5) * (T(1) + th) + T(0.5) * u * (T(1) - th * th) * T(kGeluC) * (T(1) + T(3 * kGeluA) * u * u);
}

}  // namespace

template <typename T>
AlignedWeights<T>::AlignedWeights(const ModelConfig& config, const WeightPtrs<T>& source) {
  constexpr size_t kStride = 64 / sizeof(T);
  const auto specs = tensor_specs(config);
  std::vector<size_t> offsets;
  size_t total = 0;
  for (const auto& spec : specs) {
    offsets.push_back(total);
    total += (static_cast<size_t>(shape_numel(spec.shape)) + kStride - 1) / kStride * kStride;
  }
  buffer_.assign(total, T(0));
  for (size_t i = 0; i < specs.size(); ++i) {
    const T* src = lookup(source, specs[i].name);
    T* dst = buffer_.data() + offsets[i];
    std::copy(src, src + shape_numel(specs[i].shape), dst);
    ptrs_[specs[i].name] = dst;
  }
}

template <typename T>
const T* AlignedWeights<T>::get(const std::string& name) const {
  return lookup(ptrs_, name);
}

template <typename T>
Transformer<T>::Transformer(const ModelConfig& config, const WeightPtrs<T>& source)
    : config_(config), weights_(config, source) {
  const WeightPtrs<T>& w = weights_.ptrs();
  tok_emb_ = lookup(w, names::kTokEmb);
  pos_emb_ = lookup(w, names::kPosEmb);
  lnf_g_ = lookup(w, names::kFinalNormGain);
  lnf_b_ = lookup(w, names::kFinalNormBias);
  head_ = lookup(w, names::kHead);
  out_bias_ = config.output_bias_enabled ? lookup(w, names::kOutputBias) : nullptr;
  for (int l = 0; l < config.n_layers; ++l) {
    Layer layer;
    layer.prefix = fmt::format("blocks.{}.", l);
    auto get = [&](const char* leaf_name) { return lookup(w, names::block(l, leaf_name)); };
    layer.ln1_g = get(leaf::kLn1Gain);
    layer.ln1_b = get(leaf::kLn1Bias);
    layer.wq = get(leaf::kWq);
    layer.wk = get(leaf::kWk);
    layer.wv = get(leaf::kWv);
    layer.wo = get(leaf::kWo);
    layer.ln2_g = get(leaf::kLn2Gain);
    layer.ln2_b = get(leaf::kLn2Bias);
    layer.up = get(leaf::kUp);
    layer.down = get(leaf::kDown);
    layers_.push_back(std::move(layer));
  }
  cache_.resize(layers_.size());
}

template <typename T>
const Mat<T>& Transformer<T>::forward(std::span<const int> tokens) {
  const int L = static_cast<int>(tokens.size());
  const int d = config_.d_model, f = config_.d_ff, V = config_.vocab_size;
  const int H = config_.n_heads, hd = config_.head_dim();
  if (L < 1) throw ParameterError("forward needs at least one token");
  if (L > config_.context_len) {
    throw LengthError(fmt::format("sequence of {} tokens exceeds context_len {}", L, config_.context_len));
  }
  tokens_.assign(tokens.begin(), tokens.end());

  CMatMap<T> tok(tok_emb_, V, d), pos(pos_emb_, config_.context_len, d);
  Mat<T> x(L, d);
  for (int t = 0; t < L; ++t) {
    const int id = tokens_[t];
    if (id < 0 || id >= V) throw ParameterError(fmt::format("token id {} outside vocabulary", id));
    x.row(t) = tok.row(id) + pos.row(t);
  }

  const T scale = T(1) / std::sqrt(T(hd));
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (size_t li = 0; li < layers_.size(); ++li) {
    const Layer& ly = layers_[li];
    LayerCache& c = cache_[li];
    layer_norm<T>(x, ly.ln1_g, ly.ln1_b, c.ln1_hat, c.ln1_rstd, c.a);
    CMatMap<T> wq(ly.wq, d, d), wk(ly.wk, d, d), wv(ly.wv, d, d), wo(ly.wo, d, d);
    c.q.noalias() = c.a * wq.transpose();
    c.k.noalias() = c.a * wk.transpose();
    c.v.noalias() = c.a * wv.transpose();
    c.att.resize(L, d);
    c.probs.resize(H);
    for (int h = 0; h < H; ++h) {
      Mat<T>& p = c.probs[h];
      p.noalias() = c.q.middleCols(h * hd, hd) * c.k.middleCols(h * hd, hd).transpose();
      for (int i = 0; i < L; ++i) {
        auto row = p.row(i);
        row.head(i + 1) *= scale;
        if (i + 1 < L) row.tail(L - i - 1).setConstant(neg_inf);
        const T mx = row.head(i + 1).maxCoeff();
        row.head(i + 1) = (row.head(i + 1).array() - mx).exp();
        row.head(i + 1) /= row.head(i + 1).sum();
        if (i + 1 < L) row.tail(L - i - 1).setZero();
      }
      c.att.middleCols(h * hd, hd).noalias() = p * c.v.middleCols(h * hd, hd);
    }
    x.noalias() += c.att * wo.transpose();

    layer_norm<T>(x, ly.ln2_g, ly.ln2_b, c.ln2_hat, c.ln2_rstd, c.b);
    CMatMap<T> up(ly.up, f, d), down(ly.down, d, f);
    c.u.noalias() = c.b * up.transpose();
    c.g = c.u.unaryExpr([](T u) { return gelu(u); });
    x.noalias() += c.g * down.transpose();
  }

  layer_norm<T>(x, lnf_g_, lnf_b_, lnf_hat_, lnf_rstd_, h_);
  CMatMap<T> head(head_, V, d);
  logits_.noalias() = h_ * head.transpose();
  if (out_bias_) logits_.rowwise() += CRowMap<T>(out_bias_, V);
  return logits_;
}

template <typename T>
int Transformer<T>::lowest_block_needed(const GradSink<T>& sink) const {
  int lowest = static_cast<int>(layers_.size());
  for (const auto& [name, _] : sink.out) {
    const int b = block_index(name);
    if (b >= 0) {
      lowest = std::min(lowest, b);
    } else if (name == names::kTokEmb || name == names::kPosEmb) {
      return 0;
    }
  }
  return lowest;
}

template <typename T>
void Transformer<T>::backward(const Mat<T>& dlogits, const GradSink<T>& sink) {
  const int L = static_cast<int>(tokens_.size());
  const int d = config_.d_model, f = config_.d_ff, V = config_.vocab_size;
  const int H = config_.n_heads, hd = config_.head_dim();
  const T scale = T(1) / std::sqrt(T(hd));

  if (T* g = sink.get(names::kHead)) accumulate(g, Mat<T>(dlogits.transpose() * h_));
  if (out_bias_) {
    if (T* g = sink.get(names::kOutputBias)) accumulate(g, RowVec<T>(dlogits.colwise().sum()));
  }
  const int lowest = lowest_block_needed(sink);
  const bool need_embeddings = sink.wants(names::kTokEmb) || sink.wants(names::kPosEmb);
  const bool need_below_head = lowest < static_cast<int>(layers_.size()) || need_embeddings ||
                               sink.wants(names::kFinalNormGain) || sink.wants(names::kFinalNormBias);
  if (!need_below_head) return;

  const Mat<T> dh = dlogits * CMatMap<T>(head_, V, d);
  Mat<T> dx = layer_norm_backward<T>(dh, lnf_hat_, lnf_rstd_, lnf_g_, sink.get(names::kFinalNormGain),
                                     sink.get(names::kFinalNormBias));

  for (int li = static_cast<int>(layers_.size()) - 1; li >= lowest; --li) {
    const Layer& ly = layers_[li];
    const LayerCache& c = cache_[li];
    auto want = [&](const char* leaf_name) { return sink.get(ly.prefix + leaf_name); };
    CMatMap<T> wq(ly.wq, d, d), wk(ly.wk, d, d), wv(ly.wv, d, d), wo(ly.wo, d, d);
    CMatMap<T> up(ly.up, f, d), down(ly.down, d, f);

    // MLP: x += gelu(LN2(x) up^T) down^T
    if (T* g = want(leaf::kDown)) accumulate(g, Mat<T>(dx.transpose() * c.g));
    Mat<T> du = dx * down;
    du.array() *= c.u.unaryExpr([](T u) { return gelu_grad(u); }).array();
    if (T* g = want(leaf::kUp)) accumulate(g, Mat<T>(du.transpose() * c.b));
    const Mat<T> db = du * up;
    dx += layer_norm_backward<T>(db, c.ln2_hat, c.ln2_rstd, ly.ln2_g, want(leaf::kLn2Gain), want(leaf::kLn2Bias));

    // Attention: x += softmax(q k^T / sqrt(hd)) v wo^T
    if (T* g = want(leaf::kWo)) accumulate(g, Mat<T>(dx.transpose() * c.att));
    const Mat<T> datt = dx * wo;
    Mat<T> dq(L, d), dk(L, d), dv(L, d);
    for (int h = 0; h < H; ++h) {
      const Mat<T>& p = c.probs[h];
      const auto datt_h = datt.middleCols(h * hd, hd);
      dv.middleCols(h * hd, hd).noalias() = p.transpose() * datt_h;
      Mat<T> dp = datt_h * c.v.middleCols(h * hd, hd).transpose();
      // softmax backward, row-wise: ds = p * (dp - <dp, p>)
      for (int i = 0; i < L; ++i) {
        const T dot = dp.row(i).head(i + 1).dot(p.row(i).head(i + 1));
        dp.row(i).head(i + 1) = p.row(i).head(i + 1).cwiseProduct((dp.row(i).head(i + 1).array() - dot).matrix());
        if (i + 1 < L) dp.row(i).tail(L - i - 1).setZero();
      }
      dp *= scale;
      dq.middleCols(h * hd, hd).noalias() = dp * c.k.middleCols(h * hd, hd);
      dk.middleCols(h * hd, hd).noalias() = dp.transpose() * c.q.middleCols(h * hd, hd);
    }
    if (T* g = want(leaf::kWq)) accumulate(g, Mat<T>(dq.transpose() * c.a));
    if (T* g = want(leaf::kWk)) accumulate(g, Mat<T>(dk.transpose() * c.a));
    if (T* g = want(leaf::kWv)) accumulate(g, Mat<T>(dv.transpose() * c.a));
    Mat<T> da = dq * wq;
    da.noalias() += dk * wk;
    da.noalias() += dv * wv;
    dx += layer_norm_backward<T>(da, c.ln1_hat, c.ln1_rstd, ly.ln1_g, want(leaf::kLn1Gain), want(leaf::kLn1Bias));
  }

  if (!need_embeddings) return;
  if (T* g = sink.get(names::kTokEmb)) {
    Eigen::Map<Mat<T>> gt(g, V, d);
    for (int t = 0; t < L; ++t) gt.row(tokens_[t]) += dx.row(t);
  }
  if (T* g = sink.get(names::kPosEmb)) {
    Eigen::Map<Mat<T>> gp(g, config_.context_len, d);
    gp.topRows(L) += dx;
  }
}

template <typename T>
std::map<std::string, const Mat<T>*> Transformer<T>::linear_inputs() const {
  std::map<std::string, const Mat<T>*> out;
  for (size_t li = 0; li < layers_.size(); ++li) {
    const std::string& pre = layers_[li].prefix;
    const LayerCache& c = cache_[li];
    out[pre + leaf::kWq] = &c.a;
    out[pre + leaf::kWk] = &c.a;
    out[pre + leaf::kWv] = &c.a;
    out[pre + leaf::kWo] = &c.att;
    out[pre + leaf::kUp] = &c.b;
    out[pre + leaf::kDown] = &c.g;
  }
  out[names::kHead] = &h_;
  return out;
}

template class AlignedWeights<float>;
template class AlignedWeights<double>;
template class Transformer<float>;
template class Transformer<double>;

}  // namespace wmlab::lm::detail
