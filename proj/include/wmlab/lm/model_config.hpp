// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace wmlab::lm {

enum class Precision { kSingle, kDouble };

// Byte-level vocabulary: ids 0..255 are raw bytes, then three specials.
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr int kByteVocab = 259;

struct ModelConfig {
  int vocab_size = kByteVocab;
  int d_model = 128;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 512;
  int context_len = 256;
  bool output_bias_enabled = true;
  Precision compute_precision = Precision::kSingle;

  int head_dim() const { return d_model / n_heads; }
  // Throws ParameterError when an invariant is violated.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

// Canonical tensor names and shapes induced by a config, in storage order.
struct TensorSpec {
  std::string name;
  std::vector<int64_t> shape;
};
std::vector<TensorSpec> tensor_specs(const ModelConfig& config);

// Canonical names.
namespace names {
inline constexpr const char* kTokEmb = "tok_emb";
inline constexpr const char* kPosEmb = "pos_emb";
inline constexpr const char* kFinalNormGain = "ln_f.weight";
inline constexpr const char* kFinalNormBias = "ln_f.bias";
inline constexpr const char* kHead = "lm_head.weight";
inline constexpr const char* kOutputBias = "lm_head.bias";
std::string block(int layer, const char* leaf);
}  // namespace names

// Leaf names inside block "blocks.<i>.".
namespace leaf {
inline constexpr const char* kLn1Gain = "ln1.weight";
inline constexpr const char* kLn1Bias = "ln1.bias";
inline constexpr const char* kWq = "attn.wq";
inline constexpr const char* kWk = "attn.wk";
inline constexpr const char* kWv = "attn.wv";
inline constexpr const char* kWo = "attn.wo";
inline constexpr const char* kLn2Gain = "ln2.weight";
inline constexpr const char* kLn2Bias = "ln2.bias";
inline constexpr const char* kUp = "mlp.up";
inline constexpr const char* kDown = "mlp.down";
}  // namespace leaf

// True for the 2-D projection matrices inside blocks and the output head:
// the tensors quantization and pruning act on.
bool is_linear_weight(const std::string& name);
// Attention projections (q/k/v/o) targeted by low-rank adapters.
bool is_attention_projection(const std::string& name);
// Block index encoded in a tensor name, or -1 for non-block tensors.
int block_index(const std::string& name);

}  // namespace wmlab::lm
