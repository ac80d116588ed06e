// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wmlab/modify.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include <fmt/format.h>

#include "wmlab/error.hpp"
#include "wmlab/lm/model.hpp"
#include "wmlab/lm/optim.hpp"
#include "wmlab/rng.hpp"

namespace wmlab::mod {

using lm::LogitsMatrix;

// ---- Quantization ----

void quantize_row(std::span<float> row, int bits, int group_size) {
  const size_t g = group_size == 0 ? row.size() : static_cast<size_t>(group_size);
  const float qmax = static_cast<float>((1 << (bits - 1)) - 1);
  const float qmin = -static_cast<float>(1 << (bits - 1));
  for (size_t start = 0; start < row.size(); start += g) {
    const auto group = row.subspan(start, std::min(g, row.size() - start));
    float m = 0.0f;
    for (float w : group) m = std::max(m, std::abs(w));
    if (m == 0.0f) continue;
    const float s = m / qmax;
    for (float& w : group) w = std::clamp(std::round(w / s), qmin, qmax) * s;
  }
}

ModelParams quantize_rtn(const ModelParams& params, int bits, int group_size) {
  if (bits != 4 && bits != 8) throw ParameterError(fmt::format("bits must be 4 or 8, got {}", bits));
  if (group_size < 0) throw ParameterError("group_size must be >= 0 (0 = per row)");
  ModelParams out = params;
  for (auto& [name, t] : out.tensors) {
    if (!lm::is_linear_weight(name)) continue;
    if (group_size != 0 && t.cols() % group_size != 0) {
      throw ParameterError(fmt::format("group_size {} does not divide row length {} of '{}'", group_size, t.cols(), name));
    }
    for (int64_t r = 0; r < t.rows(); ++r) quantize_row(t.row(r), bits, group_size);
  }
  return out;
}

// ---- Pruning ----

namespace {

void check_rho(double rho) {
  if (!(rho >= 0.0 && rho < 1.0)) throw ParameterError(fmt::format("rho must be in [0, 1), got {}", rho));
}

// Zeroes the `count` entries with the lowest score; ties to the lower index.
template <typename Score>
void zero_lowest(std::span<float> w, size_t count, Score score) {
  if (count == 0) return;
  std::vector<size_t> idx(w.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return score(a) < score(b); });
  for (size_t i = 0; i < count; ++i) w[idx[i]] = 0.0f;
}

}  // namespace

ModelParams prune_magnitude(const ModelParams& params, double rho) {
  check_rho(rho);
  ModelParams out = params;
  for (auto& [name, t] : out.tensors) {
    if (!lm::is_linear_weight(name)) continue;
    const auto count = static_cast<size_t>(std::floor(rho * static_cast<double>(t.numel())));
    std::span<float> w(t.data);
    zero_lowest(w, count, [&](size_t i) { return std::abs(w[i]); });
  }
  return out;
}

ModelParams prune_wanda_with_norms(const ModelParams& params, double rho,
                                   const std::map<std::string, std::vector<double>>& column_norms) {
  check_rho(rho);
  ModelParams out = params;
  for (auto& [name, t] : out.tensors) {
    if (!lm::is_linear_weight(name)) continue;
    auto it = column_norms.find(name);
    if (it == column_norms.end()) throw LookupError(fmt::format("no calibration norms for '{}'", name));
    const auto& norm = it->second;
    if (static_cast<int64_t>(norm.size()) != t.cols()) {
      throw ShapeError(fmt::format("{} calibration norms for fan-in {} of '{}'", norm.size(), t.cols(), name));
    }
    const auto count = static_cast<size_t>(std::floor(rho * static_cast<double>(t.cols())));
    for (int64_t r = 0; r < t.rows(); ++r) {
      auto w = t.row(r);
      zero_lowest(w, count, [&](size_t j) { return std::abs(static_cast<double>(w[j])) * norm[j]; });
    }
  }
  return out;
}

ModelParams prune_wanda(const ModelParams& params, double rho, std::span<const TokenSequence> calibration) {
  if (calibration.empty()) throw ParameterError("Wanda pruning needs a nonempty calibration sample");
  auto norms = lm::linear_input_sq_norms(params, calibration);
  for (auto& [_, v] : norms) {
    for (double& x : v) x = std::sqrt(x);
  }
  return prune_wanda_with_norms(params, rho, norms);
}

// ---- Merging ----

void slerp_tensor(std::span<const float> a, std::span<const float> b, double t, std::span<float> out) {
  if (a.size() != b.size() || out.size() != a.size()) throw ShapeError("slerp operands differ in size");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  double ca, cb;
  if (na == 0.0 || nb == 0.0) {
    const double omega = std::numbers::pi / 2.0;
    ca = std::sin((1.0 - t) * omega);
    cb = std::sin(t * omega);
  } else {
    const double omega = std::acos(std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0));
    const double s = std::sin(omega);
    if (s < 1e-7) {
      ca = 1.0 - t;
      cb = t;
    } else {
      ca = std::sin((1.0 - t) * omega) / s;
      cb = std::sin(t * omega) / s;
    }
  }
  for (size_t i = 0; i < a.size(); ++i) out[i] = static_cast<float>(ca * a[i] + cb * b[i]);
}

ModelParams slerp_merge(const ModelParams& theta_wm, const ModelParams& theta_0, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw ParameterError(fmt::format("t must be in [0, 1], got {}", t));
  if (!(theta_wm.config == theta_0.config)) throw ShapeError("slerp_merge needs models with the same config");
  ModelParams out = theta_wm;
  for (auto& [name, tensor] : out.tensors) {
    if (!theta_0.has(name)) throw ShapeError(fmt::format("partner has no tensor '{}'", name));
    slerp_tensor(theta_wm.at(name).data, theta_0.at(name).data, t, tensor.data);
  }
  return out;
}

// ---- Finetuning ----

std::vector<std::string> LowRankAdapter::targets() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : b) out.push_back(name);
  return out;
}

void merge_adapter(ModelParams& params, const LowRankAdapter& adapter) {
  for (const auto& name : adapter.targets()) {
    auto& w = params.at(name);
    const auto out_f = static_cast<Eigen::Index>(w.rows());
    const auto in_f = static_cast<Eigen::Index>(w.cols());
    const Eigen::Map<const LogitsMatrix> b(adapter.b.at(name).data(), out_f, adapter.rank);
    const Eigen::Map<const LogitsMatrix> a(adapter.a.at(name).data(), adapter.rank, in_f);
    Eigen::Map<LogitsMatrix> wm(w.data.data(), out_f, in_f);
    const LogitsMatrix delta = static_cast<float>(adapter.scale) * (b * a);
    wm += delta;
  }
}

double mean_cross_entropy(const ModelParams& params, std::span<const TokenSequence> samples) {
  if (samples.empty()) throw ParameterError("no samples to score");
  lm::GradMap unused;
  return lm::compute_gradients(params, samples, {}, unused);
}

namespace {

void check_finetune(const FinetuneOptions& o, const lm::ModelConfig& config) {
  if (o.steps < 0) throw ParameterError("steps must be >= 0");
  if (o.batch_size < 1) throw ParameterError("batch_size must be >= 1");
  if (o.seq_len < 2 || o.seq_len > config.context_len) {
    throw ParameterError(fmt::format("seq_len {} must be in [2, context_len = {}]", o.seq_len, config.context_len));
  }
  if (!(o.lr >= 0.0)) throw ParameterError("learning rate must be >= 0");
  if (o.mode == FinetuneMode::kLowRank && (o.rank < 1 || !(o.alpha > 0.0))) {
    throw ParameterError("low-rank finetuning needs rank >= 1 and alpha > 0");
  }
}

LowRankAdapter init_adapter(const ModelParams& params, int rank, double alpha, uint64_t seed) {
  LowRankAdapter ad;
  ad.rank = rank;
  ad.scale = alpha / rank;
  Rng rng(derive_seed(seed, "lora-init"));
  for (const auto& [name, t] : params.tensors) {
    if (!lm::is_attention_projection(name)) continue;
    if (rank > std::min(t.rows(), t.cols())) {
      throw ParameterError(fmt::format("rank {} exceeds the dimensions of '{}'", rank, name));
    }
    ad.b[name].assign(static_cast<size_t>(t.rows() * rank), 0.0f);
    auto& a = ad.a[name];
    a.resize(static_cast<size_t>(rank * t.cols()));
    const double sd = 1.0 / std::sqrt(static_cast<double>(t.cols()));
    for (float& x : a) x = static_cast<float>(rng.normal() * sd);
  }
  return ad;
}

}  // namespace

FinetuneResult finetune(const ModelParams& params, const corpus::Corpus& corpus, const FinetuneOptions& options) {
  check_finetune(options, params.config);
  FinetuneResult result{params, {}, std::nullopt};
  if (options.mode == FinetuneMode::kLowRank) {
    result.adapter = init_adapter(params, options.rank, options.alpha, options.seed);
  }
  if (options.steps == 0) return result;

  corpus::BatchStream data(corpus, options.seq_len - 1, options.batch_size, derive_seed(options.seed, "finetune-data"),
                           params.config.context_len);
  lm::OptimizerState state;

  if (options.mode == FinetuneMode::kFull) {
    lm::TrainOptions topts;
    topts.max_grad_norm = options.max_grad_norm;
    for (int64_t step = 0; step < options.steps; ++step) {
      const double lr = lm::cosine_lr(step, options.steps, options.warmup_steps, options.lr);
      const auto r = lm::train_step(result.params, data.next(), lr, state, topts);
      result.losses.push_back(r.loss);
      if (options.on_step) options.on_step(step, r.loss);
    }
    return result;
  }

  LowRankAdapter& ad = *result.adapter;
  const std::vector<std::string> targets = ad.targets();
  const std::set<std::string> names(targets.begin(), targets.end());
  const float scale = static_cast<float>(ad.scale);
  for (int64_t step = 0; step < options.steps; ++step) {
    ModelParams work = params;
    merge_adapter(work, ad);
    lm::GradMap wgrads;
    const double loss = lm::compute_gradients(work, data.next(), names, wgrads);

    lm::GradMap agrads;
    std::map<std::string, std::vector<float>*> slots;
    for (const auto& name : targets) {
      const auto& w = params.at(name);
      const auto out_f = static_cast<Eigen::Index>(w.rows());
      const auto in_f = static_cast<Eigen::Index>(w.cols());
      const Eigen::Map<const LogitsMatrix> g(wgrads.at(name).data(), out_f, in_f);
      const Eigen::Map<const LogitsMatrix> b(ad.b.at(name).data(), out_f, ad.rank);
      const Eigen::Map<const LogitsMatrix> a(ad.a.at(name).data(), ad.rank, in_f);
      const LogitsMatrix db = scale * (g * a.transpose());
      const LogitsMatrix da = scale * (b.transpose() * g);
      agrads[name + ".lora_b"].assign(db.data(), db.data() + db.size());
      agrads[name + ".lora_a"].assign(da.data(), da.data() + da.size());
      slots[name + ".lora_b"] = &ad.b.at(name);
      slots[name + ".lora_a"] = &ad.a.at(name);
    }
    lm::clip_grad_norm(agrads, options.max_grad_norm);
    const double lr = lm::cosine_lr(step, options.steps, options.warmup_steps, options.lr);
    lm::apply_update(slots, agrads, lr, state);
    result.losses.push_back(loss);
    if (options.on_step) options.on_step(step, loss);
  }
  merge_adapter(result.params, ad);
  return result;
}

// ---- Dispatch ----

namespace {

const char* kind_name(ModKind k) {
  switch (k) {
    case ModKind::kNone: return "none";
    case ModKind::kQuantize: return "quantize";
    case ModKind::kPrune: return "prune";
    case ModKind::kMerge: return "merge";
    case ModKind::kFinetune: return "finetune";
  }
  return "?";
}

std::string trim_number(double x) { return fmt::format("{:g}", x); }

}  // namespace

void ModificationSpec::validate() const {
  switch (kind) {
    case ModKind::kNone:
      return;
    case ModKind::kQuantize:
      if (bits != 4 && bits != 8) throw ConfigError(fmt::format("quantize.bits must be 4 or 8, got {}", bits));
      if (group_size < 0) throw ConfigError("quantize.group_size must be a positive count or \"per-row\"");
      return;
    case ModKind::kPrune:
      if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError(fmt::format("prune.rho must be in [0, 1), got {}", rho));
      if (method == PruneMethod::kWanda && (calibration_sequences < 1 || calibration_len < 2)) {
        throw ConfigError("prune.calibration_sequences must be >= 1 and calibration_len >= 2");
      }
      return;
    case ModKind::kMerge:
      if (!(t >= 0.0 && t <= 1.0)) throw ConfigError(fmt::format("merge.t must be in [0, 1], got {}", t));
      if (partner.empty()) throw ConfigError("merge.partner must name a checkpoint");
      return;
    case ModKind::kFinetune:
      if (finetune.steps < 0) throw ConfigError("finetune.steps must be >= 0");
      if (!(finetune.lr >= 0.0)) throw ConfigError("finetune.lr must be >= 0");
      if (finetune.batch_size < 1 || finetune.seq_len < 2) throw ConfigError("finetune.batch_size/seq_len out of range");
      if (finetune.mode == FinetuneMode::kLowRank && (finetune.rank < 1 || !(finetune.alpha > 0.0))) {
        throw ConfigError("finetune.rank must be >= 1 and alpha > 0");
      }
      if (dataset.empty()) throw ConfigError("finetune.dataset must name a corpus");
      return;
  }
}

std::string ModificationSpec::id() const {
  switch (kind) {
    case ModKind::kNone:
      return "none";
    case ModKind::kQuantize:
      return group_size == 0 ? fmt::format("quantize-{}b-row", bits) : fmt::format("quantize-{}b-g{}", bits, group_size);
    case ModKind::kPrune:
      return fmt::format("prune-{}-{}", method == PruneMethod::kWanda ? "wanda" : "magnitude", trim_number(rho));
    case ModKind::kMerge:
      return fmt::format("merge-t{}", trim_number(t));
    case ModKind::kFinetune:
      if (finetune.mode == FinetuneMode::kLowRank) {
        return fmt::format("finetune-lowrank-r{}-{}-{}", finetune.rank, dataset, finetune.steps);
      }
      return fmt::format("finetune-full-{}-{}", dataset, finetune.steps);
  }
  return "?";
}

ModificationSpec ModificationSpec::unaltered() { return {}; }

nlohmann::json to_json(const ModificationSpec& s) {
  nlohmann::json j = {{"kind", kind_name(s.kind)}};
  switch (s.kind) {
    case ModKind::kNone:
      break;
    case ModKind::kQuantize:
      j["bits"] = s.bits;
      j["group_size"] = s.group_size == 0 ? nlohmann::json("per-row") : nlohmann::json(s.group_size);
      break;
    case ModKind::kPrune:
      j["method"] = s.method == PruneMethod::kWanda ? "wanda" : "magnitude";
      j["rho"] = s.rho;
      if (s.method == PruneMethod::kWanda) {
        j["calibration_sequences"] = s.calibration_sequences;
        j["calibration_len"] = s.calibration_len;
        j["dataset"] = s.dataset;
        j["seed"] = s.seed;
      }
      break;
    case ModKind::kMerge:
      j["t"] = s.t;
      j["partner"] = s.partner;
      break;
    case ModKind::kFinetune: {
      const auto& f = s.finetune;
      j["dataset"] = s.dataset;
      j["mode"] = f.mode == FinetuneMode::kLowRank ? "low_rank" : "full";
      j["steps"] = f.steps;
      j["lr"] = f.lr;
      j["batch_size"] = f.batch_size;
      j["seq_len"] = f.seq_len;
      j["warmup_steps"] = f.warmup_steps;
      j["max_grad_norm"] = f.max_grad_norm;
      if (f.mode == FinetuneMode::kLowRank) {
        j["rank"] = f.rank;
        j["alpha"] = f.alpha;
      }
      j["seed"] = s.seed;
      break;
    }
  }
  return j;
}

namespace {

void allow_keys(const nlohmann::json& j, std::initializer_list<const char*> keys) {
  for (const auto& [k, _] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; })) {
      throw ConfigError(fmt::format("unknown key '{}' for modification kind '{}'", k, j.value("kind", "")));
    }
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("modification key '{}': {}", key, e.what()));
  }
}

}  // namespace

ModificationSpec spec_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("kind") || !j.at("kind").is_string()) {
    throw ConfigError("modification must be an object with a string 'kind'");
  }
  ModificationSpec s;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "none") {
    allow_keys(j, {"kind"});
  } else if (kind == "quantize") {
    allow_keys(j, {"kind", "bits", "group_size"});
    s.kind = ModKind::kQuantize;
    read(j, "bits", s.bits);
    if (j.contains("group_size")) {
      const auto& g = j.at("group_size");
      if (g.is_string() && g.get<std::string>() == "per-row") {
        s.group_size = 0;
      } else if (g.is_number_integer() && g.get<int>() > 0) {
        s.group_size = g.get<int>();
      } else {
        throw ConfigError("quantize.group_size must be a positive integer or \"per-row\"");
      }
    }
  } else if (kind == "prune") {
    allow_keys(j, {"kind", "method", "rho", "calibration_sequences", "calibration_len", "dataset", "seed"});
    s.kind = ModKind::kPrune;
    std::string method = "magnitude";
    read(j, "method", method);
    if (method == "wanda") {
      s.method = PruneMethod::kWanda;
    } else if (method != "magnitude") {
      throw ConfigError(fmt::format("unknown prune method '{}'", method));
    }
    read(j, "rho", s.rho);
    read(j, "calibration_sequences", s.calibration_sequences);
    read(j, "calibration_len", s.calibration_len);
    read(j, "dataset", s.dataset);
    read(j, "seed", s.seed);
  } else if (kind == "merge") {
    allow_keys(j, {"kind", "t", "partner"});
    s.kind = ModKind::kMerge;
    read(j, "t", s.t);
    read(j, "partner", s.partner);
  } else if (kind == "finetune") {
    allow_keys(j, {"kind", "dataset", "mode", "steps", "lr", "batch_size", "seq_len", "warmup_steps",
                   "max_grad_norm", "rank", "alpha", "seed"});
    s.kind = ModKind::kFinetune;
    auto& f = s.finetune;
    std::string mode = "full";
    read(j, "mode", mode);
    if (mode == "low_rank") {
      f.mode = FinetuneMode::kLowRank;
      f.lr = 5e-4;
    } else if (mode != "full") {
      throw ConfigError(fmt::format("unknown finetune mode '{}'", mode));
    }
    read(j, "dataset", s.dataset);
    read(j, "steps", f.steps);
    read(j, "lr", f.lr);
    read(j, "batch_size", f.batch_size);
    read(j, "seq_len", f.seq_len);
    read(j, "warmup_steps", f.warmup_steps);
    read(j, "max_grad_norm", f.max_grad_norm);
    read(j, "rank", f.rank);
    read(j, "alpha", f.alpha);
    read(j, "seed", s.seed);
    f.seed = s.seed;
  } else {
    throw ConfigError(fmt::format("unknown modification kind '{}'", kind));
  }
  s.validate();
  return s;
}

ModelParams apply(const ModificationSpec& spec, const ModelParams& params, const Resources& resources) {
  spec.validate();
  auto corpus_of = [&](const std::string& name) -> const corpus::Corpus& {
    auto it = resources.corpora.find(name);
    if (it == resources.corpora.end() || !it->second) throw ResourceError(fmt::format("unknown corpus '{}'", name));
    return *it->second;
  };

  ModelParams out;
  switch (spec.kind) {
    case ModKind::kNone:
      out = params;
      break;
    case ModKind::kQuantize:
      out = quantize_rtn(params, spec.bits, spec.group_size);
      break;
    case ModKind::kPrune:
      if (spec.method == PruneMethod::kMagnitude) {
        out = prune_magnitude(params, spec.rho);
      } else {
        const int len = std::min(spec.calibration_len, params.config.context_len);
        corpus::BatchStream cal(corpus_of(spec.dataset), len - 1, spec.calibration_sequences,
                                derive_seed(spec.seed, "wanda-calibration"), params.config.context_len);
        out = prune_wanda(params, spec.rho, cal.next());
      }
      break;
    case ModKind::kMerge: {
      auto it = resources.partners.find(spec.partner);
      if (it == resources.partners.end() || !it->second) {
        throw ResourceError(fmt::format("unknown merge partner '{}'", spec.partner));
      }
      out = slerp_merge(params, *it->second, spec.t);
      break;
    }
    case ModKind::kFinetune: {
      FinetuneOptions f = spec.finetune;
      f.seed = spec.seed;
      out = finetune(params, corpus_of(spec.dataset), f).params;
      break;
    }
  }
  out.check_finite();
  if (!out.metadata.contains("lineage") || !out.metadata["lineage"].is_array()) {
    out.metadata["lineage"] = nlohmann::json::array();
  }
  nlohmann::json entry = to_json(spec);
  entry["id"] = spec.id();
  out.metadata["lineage"].push_back(entry);
  return out;
}

}  // namespace wmlab::mod
