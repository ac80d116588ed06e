// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run-level stages shared by the command-line tool and the acceptance
// suite: pretraining, building a watermarked scheme from its config entry,
// and storing a scheme's weights and key material on disk.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>

#include <json.hpp>

#include "wmlab/corpus.hpp"
#include "wmlab/experiment_config.hpp"
#include "wmlab/harness.hpp"

namespace wmlab::pipeline {

using lm::ModelParams;

struct PretrainStep {
  int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

// Adam with warmup and cosine decay on next-token cross-entropy. Batches
// hold BOS plus seq_len - 1 corpus tokens. steps == 0 returns `init`
// unchanged.
ModelParams pretrain(const ModelParams& init, const corpus::Corpus& corpus, const config::PretrainSpec& spec,
                     uint64_t seed, const std::function<void(const PretrainStep&)>& on_step = {});

struct BuiltScheme {
  harness::Scheme scheme;
  std::optional<wm::DistillReport> distill;
};

// Builds the scheme described by `spec` on top of `base`. Distilled
// schemes need `distill_corpus`; their student starts from `base`.
BuiltScheme build_scheme(const config::SchemeSpec& spec, const ModelParams& base,
                         const corpus::Corpus* distill_corpus = nullptr,
                         const std::function<void(const wm::TrainLogEntry&)>& on_step = {});

nlohmann::json kgw_to_json(const wm::KgwParams& p);
wm::KgwParams kgw_from_json(const nlohmann::json& j);

// Layout under `dir`: scheme.json always; model.dwmf for weight-carrying
// schemes; mark.json, kgw.json or kth_key.bin for the key material.
void save_scheme(const harness::Scheme& scheme, const std::filesystem::path& dir);
// Generation-time schemes take their weights from `base`.
harness::Scheme load_scheme(const std::filesystem::path& dir, const ModelParams& base);

// Stable 64-bit digest of the tensor data (metadata ignored).
uint64_t weights_digest(const ModelParams& params);

}  // namespace wmlab::pipeline
