// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wmlab/watermark.hpp"

#include <fstream>

#include <fmt/format.h>

#include "wmlab/error.hpp"
#include "wmlab/rng.hpp"

namespace wmlab::wm {

int64_t GaussianMark::dimension() const {
  if (!target.mask) return epsilon.numel();
  int64_t n = 0;
  for (uint8_t b : *target.mask) n += b != 0;
  return n;
}

Tensor draw_epsilon(const std::vector<int64_t>& shape, const TensorSelector& target, double sigma, uint64_t seed) {
  if (!(sigma >= 0.0)) throw ParameterError(fmt::format("sigma must be >= 0, got {}", sigma));
  Tensor eps(shape);
  Rng rng(derive_seed(seed, "gaussian-mark"));
  for (size_t i = 0; i < eps.data.size(); ++i) {
    const double z = rng.normal();
    if (target.mask && !(*target.mask)[i]) continue;
    eps.data[i] = static_cast<float>(sigma * z);
  }
  return eps;
}

namespace {

MarkedModel embed(const ModelParams& params, MarkScheme scheme, const TensorSelector& target, double sigma,
                  uint64_t seed) {
  target.validate(params);
  MarkedModel out{params, {}};
  out.mark.scheme = scheme;
  out.mark.target = target;
  out.mark.sigma = sigma;
  out.mark.seed = seed;
  Tensor& w = out.params.at(target.tensor_name);
  out.mark.epsilon = draw_epsilon(w.shape, target, sigma, seed);
  if (sigma > 0.0) {
    for (size_t i = 0; i < w.data.size(); ++i) w.data[i] += out.mark.epsilon.data[i];
  }
  out.params.metadata["watermark"] = mark_to_json(out.mark);
  return out;
}

}  // namespace

MarkedModel embed_unremovable(const ModelParams& params, double sigma, uint64_t seed) {
  if (!params.config.output_bias_enabled) {
    throw UnsupportedArchitecture("Unremovable needs a model with an output bias (output_bias_enabled)");
  }
  return embed(params, MarkScheme::kUnremovable, TensorSelector{lm::names::kOutputBias, std::nullopt}, sigma, seed);
}

MarkedModel embed_gaussmark(const ModelParams& params, const TensorSelector& target, double sigma, uint64_t seed) {
  return embed(params, MarkScheme::kGaussMark, target, sigma, seed);
}

std::string default_gaussmark_target(const lm::ModelConfig& config) {
  return lm::names::block(config.n_layers - 1, lm::leaf::kUp);
}

const char* scheme_name(MarkScheme scheme) {
  return scheme == MarkScheme::kUnremovable ? "unremovable" : "gaussmark";
}

MarkScheme parse_scheme(const std::string& name) {
  if (name == "unremovable") return MarkScheme::kUnremovable;
  if (name == "gaussmark") return MarkScheme::kGaussMark;
  throw ConfigError(fmt::format("unknown weight watermark scheme '{}'", name));
}

nlohmann::json mark_to_json(const GaussianMark& mark) {
  nlohmann::json j{{"scheme", scheme_name(mark.scheme)},
                   {"target", mark.target.tensor_name},
                   {"sigma", mark.sigma},
                   {"seed", mark.seed},
                   {"shape", mark.epsilon.shape}};
  if (mark.target.mask) j["mask"] = *mark.target.mask;
  return j;
}

GaussianMark mark_from_json(const nlohmann::json& j) {
  try {
    GaussianMark m;
    m.scheme = parse_scheme(j.at("scheme").get<std::string>());
    m.target.tensor_name = j.at("target").get<std::string>();
    if (j.contains("mask")) m.target.mask = j.at("mask").get<std::vector<uint8_t>>();
    m.sigma = j.at("sigma").get<double>();
    m.seed = j.at("seed").get<uint64_t>();
    const auto shape = j.at("shape").get<std::vector<int64_t>>();
    m.epsilon = draw_epsilon(shape, m.target, m.sigma, m.seed);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("malformed watermark record: {}", e.what()));
  }
}

void save_mark(const GaussianMark& mark, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError(fmt::format("cannot write '{}'", path.string()));
  out << mark_to_json(mark).dump(2) << "\n";
}

GaussianMark load_mark(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot read '{}'", path.string()));
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("'{}' is not valid JSON: {}", path.string(), e.what()));
  }
  return mark_from_json(j);
}

}  // namespace wmlab::wm
