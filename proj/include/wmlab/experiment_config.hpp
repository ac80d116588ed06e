// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: one JSON document describes a whole run (model,
// corpora, schemes, modification grid, evaluation settings, global seed).
// The schema is in docs/config.md. Parsing validates everything and rejects
// unknown keys before any work starts.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "wmlab/distill.hpp"
#include "wmlab/harness.hpp"
#include "wmlab/lm/model_config.hpp"
#include "wmlab/modify.hpp"

namespace wmlab::config {

struct CorpusSpec {
  std::filesystem::path path;
  std::string delimiter = "\n\n";
};

struct PretrainSpec {
  std::string corpus = "broad";
  int64_t steps = 3000;
  int batch_size = 8;
  int seq_len = 128;
  double lr = 1e-3;
  int64_t warmup_steps = 100;
  double max_grad_norm = 1.0;
};

struct DistillSpec {
  std::string method = "logit";  // logit | sampling
  std::string corpus = "broad";
  wm::DistillOptions options;
};

struct SchemeSpec {
  std::string name;
  harness::SchemeKind kind = harness::SchemeKind::kGaussMark;
  uint64_t seed = 0;  // key / noise seed
  // gaussmark / unremovable
  double sigma = 0.0;
  std::string target;  // gaussmark tensor; empty = last block up-projection
  // kgw / kgw-d
  double gamma = 0.25;
  double delta = 2.0;
  int k = 1;
  // kth / kth-d
  int n_key = 256;
  std::string convention = "inverse_prob";
  // kgw-d / kth-d
  std::optional<DistillSpec> distill;
};

struct EvalSpec {
  int n_prompts = 200;
  int prompt_len = 32;
  int completion_len = 128;
  std::vector<double> fprs = {0.01, 0.05};
  double temperature = 1.0;
  std::string negative_source = "model";
  std::vector<std::string> domains = {"broad"};
  int workers = 1;
  detect::KthDetectOptions kth;
};

struct ExperimentConfig {
  uint64_t seed = 0;
  std::filesystem::path run_dir;
  lm::ModelConfig model;
  std::map<std::string, CorpusSpec> corpora;
  PretrainSpec pretrain;
  std::vector<SchemeSpec> schemes;
  std::vector<mod::ModificationSpec> modifications;
  EvalSpec eval;

  const SchemeSpec& scheme(const std::string& name) const;
  const mod::ModificationSpec& modification(const std::string& id) const;
};

// Throws ConfigError naming the offending key.
ExperimentConfig parse_experiment_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides = {});

// Applies "a.b.c=value" to a scalar field of `j`. The path must exist and
// name a number, string or boolean; value is parsed as JSON, falling back
// to a plain string.
void apply_override(nlohmann::json& j, const std::string& assignment);

nlohmann::json to_json(const ExperimentConfig& config);

// Seed derivation tree rooted at the global seed.
namespace seeds {
uint64_t init(const ExperimentConfig& c);
uint64_t pretrain(const ExperimentConfig& c);
uint64_t scheme(const ExperimentConfig& c, const std::string& name);
uint64_t distill(const ExperimentConfig& c, const std::string& name);
uint64_t modification(const ExperimentConfig& c, const std::string& id);
uint64_t generation(const ExperimentConfig& c, const std::string& name);
uint64_t eval(const ExperimentConfig& c);
}  // namespace seeds

}  // namespace wmlab::config
