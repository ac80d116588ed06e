// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wmlab/lm/model_config.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "wmlab/error.hpp"

namespace wmlab::lm {

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ParameterError(fmt::format("vocab_size must be >= 2, got {}", vocab_size));
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
    throw ParameterError(fmt::format("d_model ({}) must be a positive multiple of n_heads ({})", d_model, n_heads));
  }
  if (n_layers < 0) throw ParameterError("n_layers must be >= 0");
  if (d_ff < 1) throw ParameterError("d_ff must be >= 1");
  if (context_len < 2) throw ParameterError(fmt::format("context_len must be >= 2, got {}", context_len));
}

nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"vocab_size", c.vocab_size},
      {"d_model", c.d_model},
      {"n_layers", c.n_layers},
      {"n_heads", c.n_heads},
      {"d_ff", c.d_ff},
      {"context_len", c.context_len},
      {"output_bias_enabled", c.output_bias_enabled},
      {"compute_precision", c.compute_precision == Precision::kDouble ? "double" : "single"},
  };
}

ModelConfig config_from_json(const nlohmann::json& j) {
  static const char* kKnown[] = {"vocab_size", "d_model",     "n_layers",           "n_heads",
                                 "d_ff",       "context_len", "output_bias_enabled", "compute_precision"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(kKnown), std::end(kKnown), key) == std::end(kKnown)) {
      throw ConfigError(fmt::format("unknown model config key '{}'", key));
    }
  }
  ModelConfig c;
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.context_len = j.value("context_len", c.context_len);
    c.output_bias_enabled = j.value("output_bias_enabled", c.output_bias_enabled);
    const std::string precision = j.value("compute_precision", std::string("single"));
    if (precision == "single") {
      c.compute_precision = Precision::kSingle;
    } else if (precision == "double") {
      c.compute_precision = Precision::kDouble;
    } else {
      throw ConfigError(fmt::format("compute_precision must be 'single' or 'double', got '{}'", precision));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("model config: {}", e.what()));
  }
  c.validate();
  return c;
}

std::string names::block(int layer, const char* leaf_name) { return fmt::format("blocks.{}.{}", layer, leaf_name); }

std::vector<TensorSpec> tensor_specs(const ModelConfig& c) {
  const int64_t v = c.vocab_size, d = c.d_model, f = c.d_ff;
  std::vector<TensorSpec> specs = {
      {names::kTokEmb, {v, d}},
      {names::kPosEmb, {c.context_len, d}},
  };
  for (int l = 0; l < c.n_layers; ++l) {
    specs.push_back({names::block(l, leaf::kLn1Gain), {d}});
    specs.push_back({names::block(l, leaf::kLn1Bias), {d}});
    specs.push_back({names::block(l, leaf::kWq), {d, d}});
    specs.push_back({names::block(l, leaf::kWk), {d, d}});
    specs.push_back({names::block(l, leaf::kWv), {d, d}});
    specs.push_back({names::block(l, leaf::kWo), {d, d}});
    specs.push_back({names::block(l, leaf::kLn2Gain), {d}});
    specs.push_back({names::block(l, leaf::kLn2Bias), {d}});
    specs.push_back({names::block(l, leaf::kUp), {f, d}});
    specs.push_back({names::block(l, leaf::kDown), {d, f}});
  }
  specs.push_back({names::kFinalNormGain, {d}});
  specs.push_back({names::kFinalNormBias, {d}});
  specs.push_back({names::kHead, {v, d}});
  if (c.output_bias_enabled) specs.push_back({names::kOutputBias, {v}});
  return specs;
}

namespace {
bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}
}  // namespace

bool is_attention_projection(const std::string& name) {
  return block_index(name) >= 0 && (ends_with(name, leaf::kWq) || ends_with(name, leaf::kWk) ||
                                    ends_with(name, leaf::kWv) || ends_with(name, leaf::kWo));
}

bool is_linear_weight(const std::string& name) {
  if (name == names::kHead) return true;
  return is_attention_projection(name) ||
         (block_index(name) >= 0 && (ends_with(name, leaf::kUp) || ends_with(name, leaf::kDown)));
}

int block_index(const std::string& name) {
  constexpr std::string_view prefix = "blocks.";
  if (name.rfind(prefix, 0) != 0) return -1;
  const auto dot = name.find('.', prefix.size());
  if (dot == std::string::npos) return -1;
  return std::stoi(name.substr(prefix.size(), dot - prefix.size()));
}

}  // namespace wmlab::lm
