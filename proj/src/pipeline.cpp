// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wmlab/pipeline.hpp"

#include <fstream>

#include <fmt/format.h>

#include "wmlab/distill.hpp"
#include "wmlab/error.hpp"
#include "wmlab/lm/checkpoint.hpp"
#include "wmlab/lm/optim.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/watermark.hpp"

namespace wmlab::pipeline {

using harness::Scheme;
using harness::SchemeKind;
namespace fs = std::filesystem;

ModelParams pretrain(const ModelParams& init, const corpus::Corpus& corpus, const config::PretrainSpec& spec,
                     uint64_t seed, const std::function<void(const PretrainStep&)>& on_step) {
  ModelParams params = init;
  if (spec.steps == 0) return params;
  if (spec.seq_len > params.config.context_len) {
    throw ParameterError(fmt::format("pretrain seq_len {} exceeds context_len {}", spec.seq_len,
                                     params.config.context_len));
  }
  corpus::BatchStream data(corpus, spec.seq_len - 1, spec.batch_size, derive_seed(seed, "pretrain-data"),
                           params.config.context_len);
  lm::OptimizerState state;
  lm::TrainOptions topts;
  topts.max_grad_norm = spec.max_grad_norm;
  for (int64_t step = 0; step < spec.steps; ++step) {
    const double lr = lm::cosine_lr(step, spec.steps, spec.warmup_steps, spec.lr);
    const auto r = lm::train_step(params, data.next(), lr, state, topts);
    if (on_step) on_step({step, r.loss, lr, r.grad_norm});
  }
  params.check_finite();
  params.metadata["pretrain"] = {{"steps", spec.steps},
                                 {"batch_size", spec.batch_size},
                                 {"seq_len", spec.seq_len},
                                 {"lr", spec.lr},
                                 {"seed", seed},
                                 {"corpus", corpus.source_path}};
  return params;
}

namespace {

wm::KthConvention parse_convention(const std::string& s) {
  return s == "prob_as_written" ? wm::KthConvention::kProbAsWritten : wm::KthConvention::kInverseProb;
}

wm::DistillOptions distill_options(const config::SchemeSpec& spec,
                                   const std::function<void(const wm::TrainLogEntry&)>& on_step) {
  wm::DistillOptions o = spec.distill->options;
  o.on_step = on_step;
  return o;
}

}  // namespace

BuiltScheme build_scheme(const config::SchemeSpec& spec, const ModelParams& base, const corpus::Corpus* distill_corpus,
                         const std::function<void(const wm::TrainLogEntry&)>& on_step) {
  BuiltScheme out;
  Scheme& s = out.scheme;
  s.name = spec.name;
  s.kind = spec.kind;
  switch (spec.kind) {
    case SchemeKind::kGaussMark: {
      const std::string target = spec.target.empty() ? wm::default_gaussmark_target(base.config) : spec.target;
      auto m = wm::embed_gaussmark(base, {target, std::nullopt}, spec.sigma, spec.seed);
      s.params = std::move(m.params);
      s.mark = std::move(m.mark);
      break;
    }
    case SchemeKind::kUnremovable: {
      auto m = wm::embed_unremovable(base, spec.sigma, spec.seed);
      s.params = std::move(m.params);
      s.mark = std::move(m.mark);
      break;
    }
    case SchemeKind::kKgw:
      s.params = base;
      s.kgw = wm::KgwParams{spec.seed, spec.gamma, spec.delta, spec.k};
      break;
    case SchemeKind::kKth:
      s.params = base;
      s.kth = std::make_shared<wm::KthKey>(
          wm::KthKey::generate(spec.seed, base.config.vocab_size, spec.n_key, parse_convention(spec.convention)));
      break;
    case SchemeKind::kKgwDistilled:
    case SchemeKind::kKthDistilled: {
      if (!spec.distill) throw ConfigError(fmt::format("scheme '{}' needs a distill section", spec.name));
      if (distill_corpus == nullptr) throw ResourceError(fmt::format("scheme '{}' needs a distillation corpus", spec.name));
      const auto opts = distill_options(spec, on_step);
      wm::DistillResult r;
      if (spec.kind == SchemeKind::kKgwDistilled) {
        s.kgw = wm::KgwParams{spec.seed, spec.gamma, spec.delta, spec.k};
        if (spec.distill->method == "logit") {
          r = wm::distill_logit(base, base, *s.kgw, *distill_corpus, opts);
        } else {
          r = wm::distill_sampling(base, base, wm::Sampler::with_kgw(*s.kgw, derive_seed(opts.seed, "teacher")),
                                   *distill_corpus, opts);
        }
      } else {
        s.kth = std::make_shared<wm::KthKey>(
            wm::KthKey::generate(spec.seed, base.config.vocab_size, spec.n_key, parse_convention(spec.convention)));
        r = wm::distill_sampling(base, base, wm::Sampler::with_kth(s.kth, derive_seed(opts.seed, "teacher"), true),
                                 *distill_corpus, opts);
      }
      s.params = std::move(r.student);
      s.params.metadata["distill"] = r.report.to_json();
      out.distill = std::move(r.report);
      break;
    }
  }
  s.params.metadata["scheme"] = s.describe();
  return out;
}

nlohmann::json kgw_to_json(const wm::KgwParams& p) {
  return {{"key", p.key}, {"gamma", p.gamma}, {"delta", p.delta}, {"k", p.k}};
}

wm::KgwParams kgw_from_json(const nlohmann::json& j) {
  try {
    return wm::KgwParams{j.at("key").get<uint64_t>(), j.at("gamma").get<double>(), j.at("delta").get<double>(),
                         j.at("k").get<int>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("malformed KGW key: {}", e.what()));
  }
}

namespace {

void write_json(const fs::path& path, const nlohmann::json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
    out << j.dump(2) << "\n";
  }
  fs::rename(tmp, path);
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot read {}", path.string()));
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

}  // namespace

void save_scheme(const Scheme& scheme, const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::json meta = scheme.describe();
  if (!scheme.generation_time()) lm::save_checkpoint(scheme.params, dir / "model.dwmf");
  if (scheme.mark) wm::save_mark(*scheme.mark, dir / "mark.json");
  if (scheme.kgw) write_json(dir / "kgw.json", kgw_to_json(*scheme.kgw));
  if (scheme.kth) wm::save_kth_key(*scheme.kth, dir / "kth_key.bin");
  write_json(dir / "scheme.json", meta);
}

Scheme load_scheme(const fs::path& dir, const ModelParams& base) {
  const auto meta = read_json(dir / "scheme.json");
  Scheme s;
  s.name = meta.at("name").get<std::string>();
  s.kind = harness::parse_kind(meta.at("kind").get<std::string>());
  if (s.generation_time()) {
    s.params = base;
  } else {
    s.params = lm::load_checkpoint(dir / "model.dwmf");
  }
  if (fs::exists(dir / "mark.json")) s.mark = wm::load_mark(dir / "mark.json");
  if (fs::exists(dir / "kgw.json")) s.kgw = kgw_from_json(read_json(dir / "kgw.json"));
  if (fs::exists(dir / "kth_key.bin")) s.kth = std::make_shared<wm::KthKey>(wm::load_kth_key(dir / "kth_key.bin"));
  return s;
}

uint64_t weights_digest(const ModelParams& p) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : p.tensors) {
    for (char c : name) h = (h ^ static_cast<uint8_t>(c)) * 0x100000001b3ULL;
    const auto* bytes = reinterpret_cast<const uint8_t*>(t.data.data());
    for (size_t i = 0; i < t.data.size() * sizeof(float); ++i) h = (h ^ bytes[i]) * 0x100000001b3ULL;
  }
  return h;
}

}  // namespace wmlab::pipeline
