// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Forward/backward engine for the decoder-only transformer. Templated on the
// compute scalar so the same code runs in float (normal use) and double
// (gradient verification).

#pragma once

#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "wmlab/lm/model_config.hpp"

namespace wmlab::lm::detail {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using CMatMap = Eigen::Map<const Mat<T>>;
template <typename T>
using CRowMap = Eigen::Map<const RowVec<T>>;

// name -> pointer to row-major data in precision T.
template <typename T>
using WeightPtrs = std::map<std::string, const T*>;

// Private copy of the weights with every tensor on a 64-byte boundary.
// Eigen peels the unaligned head of vectorized reductions, so computing
// straight from std::vector storage made results depend on where malloc
// placed each tensor.
template <typename T>
class AlignedWeights {
 public:
  AlignedWeights(const ModelConfig& config, const WeightPtrs<T>& source);
  const WeightPtrs<T>& ptrs() const { return ptrs_; }
  const T* get(const std::string& name) const;

 private:
  std::vector<T, Eigen::aligned_allocator<T>> buffer_;
  WeightPtrs<T> ptrs_;
};

// Destination for parameter gradients. Only names present are computed; the
// backward pass stops at the lowest block any requested tensor lives in.
template <typename T>
struct GradSink {
  std::map<std::string, T*> out;

  bool wants(const std::string& name) const { return out.count(name) != 0; }
  T* get(const std::string& name) const {
    auto it = out.find(name);
    return it == out.end() ? nullptr : it->second;
  }
};

template <typename T>
class Transformer {
 public:
  Transformer(const ModelConfig& config, const WeightPtrs<T>& weights);

  // Runs the full causal forward pass over `tokens` (length <= context_len)
  // and returns logits [L, vocab]; activations are kept for backward().
  const Mat<T>& forward(std::span<const int> tokens);

  // Accumulates d(loss)/d(theta) into sink given d(loss)/d(logits) for the
  // last forward() call.
  void backward(const Mat<T>& dlogits, const GradSink<T>& sink);

  // Input activations [L, fan_in] of every linear weight for the last
  // forward() call, keyed by weight name.
  std::map<std::string, const Mat<T>*> linear_inputs() const;

 private:
  struct Layer {
    const T *ln1_g, *ln1_b, *wq, *wk, *wv, *wo, *ln2_g, *ln2_b, *up, *down;
    std::string prefix;
  };
  struct LayerCache {
    Mat<T> ln1_hat, a;  // normalized input, ln1 output
    RowVec<T> ln1_rstd;
    Mat<T> q, k, v, att;
    std::vector<Mat<T>> probs;  // per head [L, L]
    Mat<T> ln2_hat, b;
    RowVec<T> ln2_rstd;
    Mat<T> u, g;  // pre/post GELU
  };

  int lowest_block_needed(const GradSink<T>& sink) const;

  const ModelConfig config_;
  AlignedWeights<T> weights_;
  const T *tok_emb_, *pos_emb_, *lnf_g_, *lnf_b_, *head_, *out_bias_;
  std::vector<Layer> layers_;

  std::vector<int> tokens_;
  std::vector<LayerCache> cache_;
  Mat<T> lnf_hat_, h_, logits_;
  RowVec<T> lnf_rstd_;
};

extern template class AlignedWeights<float>;
extern template class AlignedWeights<double>;
extern template class Transformer<float>;
extern template class Transformer<double>;

}  // namespace wmlab::lm::detail
