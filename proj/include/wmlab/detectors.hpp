// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Watermark detectors. Every statistic is oriented so that larger values
// mean stronger evidence of the watermark; for KTH this is the negated
// minimum alignment cost.
//
// Only completion tokens (index >= split_point) are scored. A text with
// split_point 0 is treated as raw text: for KGW its first k tokens serve as
// context only.

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wmlab/lm/params.hpp"
#include "wmlab/sampling.hpp"
#include "wmlab/watermark.hpp"

namespace wmlab::detect {

using lm::ModelParams;
using lm::TokenSequence;

struct DetectionResult {
  std::string scheme;
  double statistic = 0.0;
  std::optional<double> p_value;
  double threshold = 0.0;
  bool decision = false;  // statistic >= threshold
  int64_t tokens_scored = 0;
  std::string threshold_mode = "analytic";  // analytic | permutation | empirical
  std::map<std::string, double> extras;
};

// Negatives used to set an empirical threshold.
struct NullCalibration {
  std::vector<double> negatives;
  std::string source;
};

// Replaces the analytic decision with the empirical one: threshold is the
// smallest negative value tau with #{neg > tau}/n <= fpr, and the decision
// is statistic > tau.
void apply_calibration(DetectionResult& result, const NullCalibration& null, double fpr);

// ---- KGW ----

struct KgwDetectOptions {
  int vocab_size = 259;
  double alpha = 0.05;
  int64_t min_tokens = 16;
};

DetectionResult detect_kgw(const TokenSequence& text, const wm::KgwParams& params, const KgwDetectOptions& options = {});

// ---- KTH ----

enum class KthMode { kShiftMin, kLevenshtein };

struct KthDetectOptions {
  int n_permutations = 199;
  KthMode mode = KthMode::kShiftMin;
  double indel_cost = 1.3862943611198906;  // 2 |log 0.5|
  uint64_t permutation_seed = 0;
  double alpha = 0.05;
  int64_t min_tokens = 16;
};

// Key entry accessor xi(token, column).
using KeyFn = std::function<double(int token, int column)>;

// sum_t log(1 - xi[x_t, (t + shift) mod n_key]) over `tokens`.
double kth_alignment_cost(std::span<const int> tokens, const wm::KthKey& key, int shift);
double kth_alignment_cost(std::span<const int> tokens, const KeyFn& xi, int n_key, int shift);

// Edit-distance alignment of the m tokens against the m key columns
// starting at `shift`: match (i, j) costs log(1 - xi[x_i, (j + shift) mod
// n_key]), skipping a token or a key column costs indel_cost. With an
// infinite indel_cost this is kth_alignment_cost.
double kth_levenshtein_cost(std::span<const int> tokens, const KeyFn& xi, int n_key, int shift, double indel_cost);

// Minimum over all n_key shifts of the chosen cost.
double kth_min_cost(std::span<const int> tokens, const KeyFn& xi, int n_key, KthMode mode, double indel_cost);

DetectionResult detect_kth(const TokenSequence& text, const wm::KthKey& key, const KthDetectOptions& options = {});

// ---- Weight-editing marks ----

struct ZDetectOptions {
  double alpha = 0.05;
};

// statistic: Z = sum_t eps[x_t] / (sigma |x|); extras["z_sqrt"] holds
// sum_t eps[x_t] / (sigma sqrt|x|), which is standard normal under the null
// and gives the p-value. The threshold is expressed in Z units.
DetectionResult detect_unremovable(const TokenSequence& text, const wm::GaussianMark& mark,
                                   const ZDetectOptions& options = {});

// Z = eps . g / (sigma ||g||), g = grad of the completion log-likelihood
// w.r.t. the marked tensor under `params`. Throws DegenerateStatistic when
// ||g|| = 0.
DetectionResult detect_gaussmark(const TokenSequence& text, const ModelParams& params, const wm::GaussianMark& mark,
                                 const ZDetectOptions& options = {});

// ---- Serialization ----

void write_csv_header(std::ostream& out);
void write_csv_row(std::ostream& out, const std::string& text_id, const DetectionResult& r);
nlohmann::json to_json(const DetectionResult& r);

}  // namespace wmlab::detect
