// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Generation-time watermarks (the f_w transforms) and the sampling loop.
//
// KGW: a keyed PRF of the previous k tokens picks a green list of
// floor(gamma * |V|) tokens whose logits get +delta.
// KTH: a key matrix xi in (0,1)^{|V| x n_key}; token t is the argmax over i
// of xi[i, (t + shift) mod n_key]^(1/p_i) (or ^p_i under the literal
// convention).

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "wmlab/lm/params.hpp"

namespace wmlab::wm {

using lm::ModelParams;
using lm::TokenSequence;

struct KgwParams {
  uint64_t key = 0;
  double gamma = 0.25;
  double delta = 2.0;
  int k = 1;

  int green_count(int vocab_size) const;
  // Throws ParameterError unless 1 <= floor(gamma * V) < V, delta >= 0, k >= 1.
  void validate(int vocab_size) const;
  bool operator==(const KgwParams&) const = default;
};

// Per-token hash H(t).
uint64_t token_hash(int token);
// mix(key ^ wrapping_sum(H over the last k tokens of `prev`)), BOS-padded on
// the left when fewer than k tokens precede the position.
uint64_t kgw_context_seed(const KgwParams& params, std::span<const int> prev);
// Green-set bitmask over the vocabulary for the position following `prev`.
std::vector<uint8_t> kgw_partition(const KgwParams& params, std::span<const int> prev, int vocab_size);

// Memoizes partitions by context seed; k = 1 has at most |V| distinct
// contexts, so detection and generation hit the cache almost always.
// Not thread-safe: use one instance per worker.
class KgwPartitioner {
 public:
  KgwPartitioner(KgwParams params, int vocab_size);
  const std::vector<uint8_t>& green(std::span<const int> prev);
  const KgwParams& params() const { return params_; }

 private:
  KgwParams params_;
  int vocab_size_;
  std::unordered_map<uint64_t, std::vector<uint8_t>> cache_;
};

// softmax(logits / temperature + delta * green).
std::vector<double> kgw_transform(std::span<const float> logits, std::span<const uint8_t> green, double delta,
                                  double temperature = 1.0);
std::vector<double> kgw_transform(std::span<const float> logits, std::span<const int> prev, const KgwParams& params,
                                  double temperature = 1.0);

enum class KthConvention { kInverseProb, kProbAsWritten };

struct KthKey {
  uint64_t seed = 0;
  int vocab_size = 0;
  int n_key = 0;
  KthConvention convention = KthConvention::kInverseProb;
  std::vector<double> matrix;  // column-major: matrix[col * vocab_size + token]

  // Entry (token, col) = unit_open(mix(seed-derived stream, index)); all
  // entries are strictly inside (0, 1).
  static KthKey generate(uint64_t seed, int vocab_size, int n_key = 256,
                         KthConvention convention = KthConvention::kInverseProb);
  double at(int token, int col) const { return matrix[static_cast<size_t>(col) * vocab_size + token]; }
  std::span<const double> column(int col) const {
    return {matrix.data() + static_cast<size_t>(col) * vocab_size, static_cast<size_t>(vocab_size)};
  }
};

// Key entry without materializing a matrix; KthKey::generate uses the same
// function, so permutation-test keys can be evaluated lazily.
double kth_key_entry(uint64_t seed, int vocab_size, int token, int col);

void save_kth_key(const KthKey& key, const std::filesystem::path& path);
KthKey load_kth_key(const std::filesystem::path& path);

// Argmax rule over the key column (position + shift) mod n_key. Zero
// probability tokens are excluded; ties go to the lowest token id. Throws
// ParameterError on an all-zero vector.
int kth_sample(std::span<const double> probs, const KthKey& key, int64_t position, int shift);
int kth_sample_column(std::span<const double> probs, std::span<const double> column, KthConvention convention);

// Uniform shift in [0, n_key), deterministic in (seed, generation_index).
int kth_draw_shift(uint64_t seed, uint64_t generation_index, int n_key);

// Inverse-CDF draw: smallest i with cumsum(p)[i] > u * sum(p).
int sample_categorical(std::span<const double> probs, double u);

enum class SamplerKind { kPlain, kKgw, kKth };

struct Sampler {
  SamplerKind kind = SamplerKind::kPlain;
  double temperature = 1.0;
  uint64_t seed = 0;
  std::optional<KgwParams> kgw;
  std::shared_ptr<const KthKey> kth;
  bool kth_random_shift = false;
  // When false EOS is masked out, which makes every completion full length.
  bool allow_eos = true;

  void validate(int vocab_size) const;
  static Sampler plain(uint64_t seed, double temperature = 1.0);
  static Sampler with_kgw(KgwParams params, uint64_t seed, double temperature = 1.0);
  static Sampler with_kth(std::shared_ptr<const KthKey> key, uint64_t seed, bool random_shift = false,
                          double temperature = 1.0);
};

struct Generation {
  TokenSequence text;  // prompt + completion, split_point = prompt length
  int kth_shift = 0;
};

// Samples up to completion_len tokens after `prompt`. The random stream is
// seeded with sampler.seed + generation_index. PAD is never emitted.
Generation generate(const ModelParams& params, const TokenSequence& prompt, int completion_len,
                    const Sampler& sampler, uint64_t generation_index = 0);

}  // namespace wmlab::wm
