// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Durability evaluation: positives from the modified watermarked model,
// negatives from the identically modified base model on the same prompts,
// empirical thresholds at fixed FPR levels, ROC curves and median
// perplexity under the unwatermarked base.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "wmlab/corpus.hpp"
#include "wmlab/detectors.hpp"
#include "wmlab/distill.hpp"
#include "wmlab/modify.hpp"
#include "wmlab/sampling.hpp"
#include "wmlab/watermark.hpp"

namespace wmlab::harness {

using lm::ModelParams;
using lm::TokenSequence;

// ---- Metrics ----

struct TprResult {
  double tpr = 0.0;
  double threshold = 0.0;  // decision: statistic > threshold
  // Set when every negative and positive statistic is the same value.
  bool degenerate = false;
};

// Throws InsufficientEvidence with fewer than 20 negatives and
// ParameterError unless 0 < fpr < 1 or when positives are empty.
TprResult compute_tpr_at_fpr(std::span<const double> positives, std::span<const double> negatives, double fpr);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocCurve {
  // Ordered from (0, 0) to (1, 1); one point per distinct statistic value
  // with the decision rule statistic >= value.
  std::vector<RocPoint> points;
  std::vector<double> positives, negatives;
  std::string scheme, modification;
  double auc = 0.0;
};

RocCurve compute_roc(std::span<const double> positives, std::span<const double> negatives);
void write_roc_csv(std::ostream& out, const RocCurve& roc);

// exp(-mean log p) over the completion tokens of `text`.
double perplexity(const ModelParams& judge, const TokenSequence& text);
double median_perplexity(const ModelParams& judge, std::span<const TokenSequence> texts);

// "high" (>= 0.9), "mid" (>= 0.8) or "low".
const char* tpr_band(double tpr);

// ---- Schemes ----

enum class SchemeKind { kKgw, kKth, kKgwDistilled, kKthDistilled, kGaussMark, kUnremovable };

const char* kind_name(SchemeKind kind);
SchemeKind parse_kind(const std::string& name);

// A watermarked model together with the key material its detector needs.
// Generation-time schemes (kKgw, kKth) keep the base weights and watermark
// through the sampler.
struct Scheme {
  std::string name;
  SchemeKind kind = SchemeKind::kGaussMark;
  ModelParams params;
  std::optional<wm::KgwParams> kgw;
  std::shared_ptr<const wm::KthKey> kth;
  std::optional<wm::GaussianMark> mark;

  bool generation_time() const { return kind == SchemeKind::kKgw || kind == SchemeKind::kKth; }
  // Key identity for cache fingerprints.
  nlohmann::json describe() const;
};

struct DetectorOptions {
  detect::KgwDetectOptions kgw;
  detect::KthDetectOptions kth;
  // KTH p-values are skipped when thresholds are empirical.
  bool kth_p_values = false;
};

// Runs the scheme's detector. GaussMark gradients are taken under `base`,
// the unwatermarked weights held by the detector.
detect::DetectionResult detect_with(const Scheme& scheme, const ModelParams& base, const TokenSequence& text,
                                    const DetectorOptions& options = {});

// ---- Durability suite ----

struct Domain {
  std::string name;
  const corpus::Corpus* prompts = nullptr;
};

struct SuiteConfig {
  std::vector<mod::ModificationSpec> modifications;  // "none" is always evaluated first
  int n_prompts = 200;
  int prompt_len = 32;
  int completion_len = 128;
  std::vector<double> fprs = {0.01, 0.05};
  double temperature = 1.0;
  uint64_t seed = 0;
  // "model": completions of the modified base; "human": corpus continuations.
  std::string negative_source = "model";
  DetectorOptions detector;
  int workers = 1;
  // When set, each finished cell is written under <run_dir>/cells and
  // reused by later runs with the same fingerprint.
  std::optional<std::filesystem::path> run_dir;
  std::function<void(const std::string&)> log;
};

struct SuiteInputs {
  const ModelParams* base = nullptr;
  std::vector<const Scheme*> schemes;
  std::vector<Domain> domains;
  mod::Resources resources;  // must include the merge partners and finetune corpora
};

struct CellResult {
  std::string scheme, modification, domain;
  std::string status = "ok";  // ok | failed | cached
  std::string error;
  std::map<std::string, double> tpr;        // keyed by fpr string, e.g. "0.05"
  std::map<std::string, double> threshold;  // same keys
  bool degenerate = false;
  double auc = 0.0;
  double median_ppl = 0.0;
  int n_positives = 0;
  int n_negatives = 0;
  nlohmann::json seeds;
  nlohmann::json modification_spec;
  double runtime_seconds = 0.0;
  std::vector<double> positives, negatives;

  double tpr_at(double fpr) const;
  // Statistics only: runtime and cache status are excluded.
  nlohmann::json to_json(bool with_samples = false) const;
  static CellResult from_json(const nlohmann::json& j);
};

struct EvalReport {
  std::vector<CellResult> rows;
  nlohmann::json provenance = nlohmann::json::object();
  std::vector<double> fprs;

  const CellResult* find(const std::string& scheme, const std::string& modification,
                         const std::string& domain = "") const;
  // Table layout: scheme -> modification -> {tpr@fpr, ppl, band}.
  nlohmann::json to_json() const;
  void write_csv(std::ostream& out) const;
  void write_summary(std::ostream& out) const;
};

std::string fpr_key(double fpr);

class DurabilitySuite {
 public:
  DurabilitySuite(SuiteConfig config, SuiteInputs inputs);

  EvalReport run();
  CellResult run_cell(const Scheme& scheme, const mod::ModificationSpec& modification, const Domain& domain);

  const SuiteConfig& config() const { return config_; }

 private:
  struct Samples {
    std::vector<TokenSequence> texts;
  };
  const ModelParams& modified(const Scheme* scheme, const mod::ModificationSpec& spec);
  const std::vector<TokenSequence>& prompts(const Domain& domain);
  const Samples& negatives(const mod::ModificationSpec& spec, const Domain& domain);
  nlohmann::json fingerprint(const Scheme& scheme, const mod::ModificationSpec& spec, const Domain& domain) const;
  std::filesystem::path cell_path(const Scheme& scheme, const mod::ModificationSpec& spec, const Domain& domain) const;
  void note(const std::string& msg) const;

  SuiteConfig config_;
  SuiteInputs inputs_;
  std::map<std::string, ModelParams> model_cache_;
  std::map<std::string, std::vector<TokenSequence>> prompt_cache_;
  std::map<std::string, Samples> negative_cache_;
};

EvalReport run_durability_suite(const SuiteConfig& config, const SuiteInputs& inputs);

// Same pipeline over several prompt domains; rows are tagged by domain.
EvalReport domain_eval(const SuiteConfig& config, const SuiteInputs& inputs);

// ---- Distillation scaling ----

struct AuditEntry {
  std::string stage;
  std::string data_source;  // "corpus", "watermarked-teacher", "random-init"
  int64_t tokens = 0;
  bool saw_unwatermarked_text = false;
};

struct ScalingConfig {
  std::vector<int64_t> token_budgets;
  std::string init = "pretrained";  // pretrained | random
  std::string method = "logit";     // logit | sampling (random init forces sampling)
  wm::KgwParams kgw;
  wm::DistillOptions distill;       // steps derived from each budget
  uint64_t init_seed = 0;
  std::string distill_corpus = "broad";
  SuiteConfig suite;                // modifications applied to every distilled model
};

struct ScalingResult {
  EvalReport report;  // schemes named "kgw-d@<budget>"
  std::map<int64_t, std::vector<AuditEntry>> audit;
  std::map<int64_t, wm::DistillReport> distill;
};

// Distills one watermarked student per budget and runs the suite on each.
// Budgets are in training tokens: steps = budget / (batch_size * seq_len).
ScalingResult distill_scaling_sweep(const ScalingConfig& config, const ModelParams& teacher, const SuiteInputs& inputs);

nlohmann::json audit_to_json(const std::vector<AuditEntry>& log);

// ---- GaussMark calibration ----

struct GridPoint {
  std::string target;
  double sigma = 0.0;
  double tpr = 0.0;
  double median_ppl = 0.0;
};

struct GridSearchResult {
  std::vector<GridPoint> points;
  GridPoint best;
  double base_ppl = 0.0;
};

// Embeds every (target, sigma) pair, measures TPR at `fpr` on the given
// domain and picks the highest TPR whose median perplexity stays within
// (1 + ppl_tolerance) of the base model's; ties go to the lower perplexity.
GridSearchResult gaussmark_grid_search(const ModelParams& base, const std::vector<std::string>& targets,
                                       const std::vector<double>& sigmas, uint64_t mark_seed,
                                       const SuiteConfig& config, const Domain& domain, double fpr = 0.05,
                                       double ppl_tolerance = 0.10);

// ---- Helpers ----

// Calls fn(i) for i in [0, n) on up to `workers` threads. Results must be
// written to per-index slots; the order of execution is unspecified.
void parallel_for(size_t n, int workers, const std::function<void(size_t)>& fn);

}  // namespace wmlab::harness
