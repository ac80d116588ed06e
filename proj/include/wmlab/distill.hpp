// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Distillation-based watermark embedding. The sampling variant finetunes the
// student with cross-entropy on watermarked teacher completions; the logit
// variant minimizes sum_t KL(f_w(p_teacher), p_student) on corpus text. The
// CTV variant repeats the logit distillation on theta0 restricted to the
// coordinates selected by |theta1 - theta0| > |theta2 - theta0|.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "wmlab/corpus.hpp"
#include "wmlab/lm/optim.hpp"
#include "wmlab/sampling.hpp"

namespace wmlab::wm {

struct TrainLogEntry {
  int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

struct DistillOptions {
  int64_t steps = 1000;
  int batch_size = 32;
  int seq_len = 256;  // tokens per sample, BOS excluded
  double lr = 1e-4;
  int64_t warmup_steps = 100;
  double max_grad_norm = 1.0;
  uint64_t seed = 0;  // data order and prompt selection
  // Sampling variant: prompt tokens taken from the corpus before the teacher
  // continues for seq_len - prompt_len tokens. 0 starts every completion
  // from BOS alone.
  int prompt_len = 16;
  // Sampling variant: number of held-out watermarked teacher samples scored
  // before and after training.
  int heldout_samples = 0;
  std::function<void(const TrainLogEntry&)> on_step;
};

struct DistillReport {
  std::vector<TrainLogEntry> log;
  uint64_t data_seed = 0;
  uint64_t generation_seed = 0;
  int64_t tokens_seen = 0;
  double heldout_before = 0.0;  // mean per-token CE on held-out samples
  double heldout_after = 0.0;
  nlohmann::json to_json() const;
};

struct DistillResult {
  lm::ModelParams student;
  DistillReport report;
};

// Cross-entropy on completion positions only (targets at index >= split_point).
lm::LossValue completion_cross_entropy(const lm::TokenSequence& seq, const lm::LogitsMatrix& logits,
                                       lm::LogitsMatrix& dlogits);

// Per-position KL(q || softmax(logits)) with q given row-wise; writes
// softmax(logits) - q into dlogits. Returns the summed KL and row count.
lm::LossValue kl_to_targets(const std::vector<std::vector<double>>& targets, const lm::LogitsMatrix& logits,
                            lm::LogitsMatrix& dlogits);

// Watermarked teacher distributions f_w(p_teacher(. | x_<t)) at every
// position of `seq` (row t predicts seq[t + 1]).
std::vector<std::vector<double>> kgw_teacher_targets(const lm::ModelParams& teacher, const lm::TokenSequence& seq,
                                                     KgwPartitioner& partitioner);

DistillResult distill_sampling(const lm::ModelParams& student, const lm::ModelParams& teacher, const Sampler& sampler,
                               const corpus::Corpus& corpus, const DistillOptions& options);

using CoordMask = std::map<std::string, std::vector<uint8_t>>;

// When `mask` is given, coordinates with mask 0 keep their initial value
// bit-exactly.
DistillResult distill_logit(const lm::ModelParams& student, const lm::ModelParams& teacher, const KgwParams& kgw,
                            const corpus::Corpus& corpus, const DistillOptions& options,
                            const CoordMask* mask = nullptr);

struct CtvMask {
  CoordMask masks;
  nlohmann::json provenance;
  int64_t selected() const;
  int64_t total() const;
};

// tau = |theta1 - theta0| > |theta2 - theta0| elementwise. Throws
// ShapeError unless the three models share a config.
CtvMask ctv_mask(const lm::ModelParams& theta0, const lm::ModelParams& theta1, const lm::ModelParams& theta2);

DistillResult distill_logit_masked(const lm::ModelParams& theta0, const lm::ModelParams& teacher, const KgwParams& kgw,
                                   const CtvMask& mask, const corpus::Corpus& corpus, const DistillOptions& options);

void save_ctv_mask(const CtvMask& mask, const std::filesystem::path& path);
CtvMask load_ctv_mask(const std::filesystem::path& path);

}  // namespace wmlab::wm
