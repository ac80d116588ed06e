// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wmlab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <ostream>
#include <thread>

#include <fmt/format.h>

#include "wmlab/error.hpp"
#include "wmlab/lm/model.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/stats.hpp"

namespace wmlab::harness {

// ---- Metrics ----

TprResult compute_tpr_at_fpr(std::span<const double> positives, std::span<const double> negatives, double fpr) {
  if (positives.empty()) throw ParameterError("no positive statistics");
  TprResult r;
  r.threshold = stats::empirical_threshold(negatives, fpr);
  int64_t above = 0;
  for (double p : positives) above += p > r.threshold;
  r.tpr = static_cast<double>(above) / static_cast<double>(positives.size());
  const double v = negatives.front();
  r.degenerate = std::all_of(negatives.begin(), negatives.end(), [v](double x) { return x == v; }) &&
                 std::all_of(positives.begin(), positives.end(), [v](double x) { return x == v; });
  return r;
}

RocCurve compute_roc(std::span<const double> positives, std::span<const double> negatives) {
  if (positives.empty() || negatives.empty()) throw ParameterError("ROC needs nonempty samples");
  RocCurve roc;
  roc.positives.assign(positives.begin(), positives.end());
  roc.negatives.assign(negatives.begin(), negatives.end());
  std::vector<double> pos = roc.positives, neg = roc.negatives;
  std::sort(pos.begin(), pos.end(), std::greater<>());
  std::sort(neg.begin(), neg.end(), std::greater<>());
  const double m = static_cast<double>(pos.size()), n = static_cast<double>(neg.size());

  roc.points.push_back({0.0, 0.0});
  size_t i = 0, j = 0;
  while (i < pos.size() || j < neg.size()) {
    double v;
    if (i == pos.size()) {
      v = neg[j];
    } else if (j == neg.size()) {
      v = pos[i];
    } else {
      v = std::max(pos[i], neg[j]);
    }
    while (i < pos.size() && pos[i] == v) ++i;
    while (j < neg.size() && neg[j] == v) ++j;
    roc.points.push_back({static_cast<double>(j) / n, static_cast<double>(i) / m});
  }
  for (size_t k = 1; k < roc.points.size(); ++k) {
    const auto& a = roc.points[k - 1];
    const auto& b = roc.points[k];
    roc.auc += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0;
  }
  return roc;
}

void write_roc_csv(std::ostream& out, const RocCurve& roc) {
  out << "scheme,modification,fpr,tpr\n";
  for (const auto& p : roc.points) out << fmt::format("{},{},{:.17g},{:.17g}\n", roc.scheme, roc.modification, p.fpr, p.tpr);
}

double perplexity(const ModelParams& judge, const TokenSequence& text) {
  const size_t from = std::max<size_t>(1, text.split_point);
  if (text.size() <= from) throw ParameterError("text has no completion tokens to score");
  const double lp = lm::log_prob(judge, text, from);
  return std::exp(-lp / static_cast<double>(text.size() - from));
}

double median_perplexity(const ModelParams& judge, std::span<const TokenSequence> texts) {
  if (texts.empty()) throw ParameterError("median_perplexity needs at least one text");
  std::vector<double> ppl;
  ppl.reserve(texts.size());
  for (const auto& t : texts) ppl.push_back(perplexity(judge, t));
  return stats::median(std::move(ppl));
}

const char* tpr_band(double tpr) {
  if (tpr >= 0.9) return "high";
  if (tpr >= 0.8) return "mid";
  return "low";
}

// ---- Schemes ----

const char* kind_name(SchemeKind kind) {
  switch (kind) {
    case SchemeKind::kKgw: return "kgw";
    case SchemeKind::kKth: return "kth";
    case SchemeKind::kKgwDistilled: return "kgw-d";
    case SchemeKind::kKthDistilled: return "kth-d";
    case SchemeKind::kGaussMark: return "gaussmark";
    case SchemeKind::kUnremovable: return "unremovable";
  }
  return "?";
}

SchemeKind parse_kind(const std::string& name) {
  for (auto k : {SchemeKind::kKgw, SchemeKind::kKth, SchemeKind::kKgwDistilled, SchemeKind::kKthDistilled,
                 SchemeKind::kGaussMark, SchemeKind::kUnremovable}) {
    if (name == kind_name(k)) return k;
  }
  throw ConfigError(fmt::format("unknown scheme kind '{}'", name));
}

namespace {

std::string weights_digest(const ModelParams& p) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : p.tensors) {
    for (char c : name) h = (h ^ static_cast<uint8_t>(c)) * 0x100000001b3ULL;
    const auto* bytes = reinterpret_cast<const uint8_t*>(t.data.data());
    for (size_t i = 0; i < t.data.size() * sizeof(float); ++i) h = (h ^ bytes[i]) * 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

}  // namespace

nlohmann::json Scheme::describe() const {
  nlohmann::json j = {{"name", name}, {"kind", kind_name(kind)}, {"weights", weights_digest(params)}};
  if (kgw) j["kgw"] = {{"key", kgw->key}, {"gamma", kgw->gamma}, {"delta", kgw->delta}, {"k", kgw->k}};
  if (kth) j["kth"] = {{"seed", kth->seed}, {"n_key", kth->n_key}};
  if (mark) j["mark"] = {{"scheme", wm::scheme_name(mark->scheme)}, {"sigma", mark->sigma}, {"seed", mark->seed},
                         {"target", mark->target.tensor_name}};
  return j;
}

detect::DetectionResult detect_with(const Scheme& scheme, const ModelParams& base, const TokenSequence& text,
                                    const DetectorOptions& options) {
  switch (scheme.kind) {
    case SchemeKind::kKgw:
    case SchemeKind::kKgwDistilled:
      if (!scheme.kgw) throw ParameterError(fmt::format("scheme '{}' has no KGW key", scheme.name));
      return detect::detect_kgw(text, *scheme.kgw, options.kgw);
    case SchemeKind::kKth:
    case SchemeKind::kKthDistilled: {
      if (!scheme.kth) throw ParameterError(fmt::format("scheme '{}' has no KTH key", scheme.name));
      if (options.kth_p_values) return detect::detect_kth(text, *scheme.kth, options.kth);
      text.validate(scheme.kth->vocab_size);
      const std::span<const int> tokens(text.tokens.data() + text.split_point, text.size() - text.split_point);
      if (static_cast<int64_t>(tokens.size()) < options.kth.min_tokens) {
        throw InsufficientEvidence(fmt::format("KTH detection needs {} tokens, got {}", options.kth.min_tokens, tokens.size()));
      }
      const auto& key = *scheme.kth;
      const detect::KeyFn xi = [&key](int tok, int col) { return key.at(tok, col); };
      const double cost = detect::kth_min_cost(tokens, xi, key.n_key, options.kth.mode, options.kth.indel_cost);
      detect::DetectionResult r;
      r.scheme = "kth";
      r.statistic = -cost;
      r.tokens_scored = static_cast<int64_t>(tokens.size());
      r.threshold_mode = "empirical";
      r.extras["min_cost"] = cost;
      return r;
    }
    case SchemeKind::kGaussMark:
      if (!scheme.mark) throw ParameterError(fmt::format("scheme '{}' has no mark", scheme.name));
      return detect::detect_gaussmark(text, base, *scheme.mark);
    case SchemeKind::kUnremovable:
      if (!scheme.mark) throw ParameterError(fmt::format("scheme '{}' has no mark", scheme.name));
      return detect::detect_unremovable(text, *scheme.mark);
  }
  throw ParameterError("unknown scheme kind");
}

// ---- Helpers ----

void parallel_for(size_t n, int workers, const std::function<void(size_t)>& fn) {
  const auto w = static_cast<size_t>(std::max(1, workers));
  if (w == 1 || n < 2) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (size_t t = 0; t < std::min(w, n); ++t) {
    pool.emplace_back([&] {
      for (size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

std::string fpr_key(double fpr) { return fmt::format("{:g}", fpr); }

// ---- Reports ----

double CellResult::tpr_at(double fpr) const {
  auto it = tpr.find(fpr_key(fpr));
  if (it == tpr.end()) throw LookupError(fmt::format("no TPR at FPR {} for {}/{}", fpr, scheme, modification));
  return it->second;
}

nlohmann::json CellResult::to_json(bool with_samples) const {
  nlohmann::json j = {{"scheme", scheme},
                      {"modification", modification},
                      {"domain", domain},
                      {"status", status == "cached" ? "ok" : status},
                      {"tpr", tpr},
                      {"threshold", threshold},
                      {"degenerate", degenerate},
                      {"auc", auc},
                      {"median_ppl", median_ppl},
                      {"n_positives", n_positives},
                      {"n_negatives", n_negatives},
                      {"seeds", seeds},
                      {"modification_spec", modification_spec}};
  if (!error.empty()) j["error"] = error;
  if (with_samples) {
    j["positives"] = positives;
    j["negatives"] = negatives;
  }
  return j;
}

CellResult CellResult::from_json(const nlohmann::json& j) {
  CellResult c;
  c.scheme = j.at("scheme").get<std::string>();
  c.modification = j.at("modification").get<std::string>();
  c.domain = j.value("domain", "");
  c.status = j.value("status", "ok");
  c.error = j.value("error", "");
  c.tpr = j.at("tpr").get<std::map<std::string, double>>();
  c.threshold = j.at("threshold").get<std::map<std::string, double>>();
  c.degenerate = j.value("degenerate", false);
  c.auc = j.value("auc", 0.0);
  c.median_ppl = j.value("median_ppl", 0.0);
  c.n_positives = j.value("n_positives", 0);
  c.n_negatives = j.value("n_negatives", 0);
  c.seeds = j.value("seeds", nlohmann::json::object());
  c.modification_spec = j.value("modification_spec", nlohmann::json::object());
  c.runtime_seconds = j.value("runtime_seconds", 0.0);
  if (j.contains("positives")) c.positives = j.at("positives").get<std::vector<double>>();
  if (j.contains("negatives")) c.negatives = j.at("negatives").get<std::vector<double>>();
  return c;
}

const CellResult* EvalReport::find(const std::string& scheme, const std::string& modification,
                                   const std::string& domain) const {
  for (const auto& r : rows) {
    if (r.scheme == scheme && r.modification == modification && (domain.empty() || r.domain == domain)) return &r;
  }
  return nullptr;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json table = nlohmann::json::object();
  nlohmann::json rows_j = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_j.push_back(r.to_json());
    nlohmann::json cell = {{"median_ppl", r.median_ppl}, {"status", r.status == "cached" ? "ok" : r.status}};
    for (const auto& [k, v] : r.tpr) cell["tpr@" + k] = v;
    if (r.tpr.count("0.05")) cell["band"] = tpr_band(r.tpr.at("0.05"));
    table[r.domain][r.scheme][r.modification] = cell;
  }
  return {{"fprs", fprs}, {"provenance", provenance}, {"table", table}, {"rows", rows_j}};
}

void EvalReport::write_csv(std::ostream& out) const {
  out << "domain,scheme,modification,status";
  for (double f : fprs) out << ",tpr@" << fpr_key(f) << ",threshold@" << fpr_key(f);
  out << ",auc,median_ppl,n_positives,n_negatives,runtime_seconds\n";
  for (const auto& r : rows) {
    out << fmt::format("{},{},{},{}", r.domain, r.scheme, r.modification, r.status == "cached" ? "ok" : r.status);
    for (double f : fprs) {
      const auto k = fpr_key(f);
      const auto t = r.tpr.find(k);
      const auto h = r.threshold.find(k);
      out << "," << (t == r.tpr.end() ? std::string() : fmt::format("{:.17g}", t->second));
      out << "," << (h == r.threshold.end() ? std::string() : fmt::format("{:.17g}", h->second));
    }
    out << fmt::format(",{:.17g},{:.17g},{},{},{:.3f}\n", r.auc, r.median_ppl, r.n_positives, r.n_negatives,
                       r.runtime_seconds);
  }
}

void EvalReport::write_summary(std::ostream& out) const {
  const double f = std::find(fprs.begin(), fprs.end(), 0.05) != fprs.end() ? 0.05 : (fprs.empty() ? 0.05 : fprs.back());
  out << fmt::format("{:<10} {:<18} {:<28} {:>9} {:>10}  band\n", "domain", "scheme", "modification",
                     "TPR@" + fpr_key(f), "median PPL");
  for (const auto& r : rows) {
    if (r.status == "failed") {
      out << fmt::format("{:<10} {:<18} {:<28} {:>9} {:>10}  failed: {}\n", r.domain, r.scheme, r.modification, "-",
                         "-", r.error);
      continue;
    }
    const auto it = r.tpr.find(fpr_key(f));
    const double t = it == r.tpr.end() ? 0.0 : it->second;
    out << fmt::format("{:<10} {:<18} {:<28} {:>9.3f} {:>10.3f}  {}\n", r.domain, r.scheme, r.modification, t,
                       r.median_ppl, tpr_band(t));
  }
}

// ---- Durability suite ----

DurabilitySuite::DurabilitySuite(SuiteConfig config, SuiteInputs inputs)
    : config_(std::move(config)), inputs_(std::move(inputs)) {
  if (!inputs_.base) throw ParameterError("suite needs a base model");
  if (inputs_.domains.empty()) throw ParameterError("suite needs at least one prompt domain");
  for (const auto& d : inputs_.domains) {
    if (!d.prompts) throw ResourceError(fmt::format("domain '{}' has no prompt corpus", d.name));
  }
  if (config_.n_prompts < 1 || config_.prompt_len < 1 || config_.completion_len < 1) {
    throw ParameterError("n_prompts, prompt_len and completion_len must be >= 1");
  }
  if (config_.prompt_len + 1 + config_.completion_len > inputs_.base->config.context_len) {
    throw ParameterError("prompt_len + completion_len exceeds the model context");
  }
  if (config_.negative_source != "model" && config_.negative_source != "human") {
    throw ParameterError(fmt::format("negative_source must be 'model' or 'human', got '{}'", config_.negative_source));
  }
  for (double f : config_.fprs) {
    if (!(f > 0.0 && f < 1.0)) throw ParameterError(fmt::format("FPR level {} outside (0, 1)", f));
  }
}

void DurabilitySuite::note(const std::string& msg) const {
  if (config_.log) config_.log(msg);
}

const ModelParams& DurabilitySuite::modified(const Scheme* scheme, const mod::ModificationSpec& spec) {
  const ModelParams& source = scheme && !scheme->generation_time() ? scheme->params : *inputs_.base;
  const std::string owner = scheme && !scheme->generation_time() ? scheme->name : std::string("__base__");
  if (spec.kind == mod::ModKind::kNone) return source;
  const std::string key = owner + "|" + mod::to_json(spec).dump();
  auto it = model_cache_.find(key);
  if (it != model_cache_.end()) return it->second;
  note(fmt::format("applying {} to {}", spec.id(), owner));
  return model_cache_.emplace(key, mod::apply(spec, source, inputs_.resources)).first->second;
}

const std::vector<TokenSequence>& DurabilitySuite::prompts(const Domain& domain) {
  auto it = prompt_cache_.find(domain.name);
  if (it != prompt_cache_.end()) return it->second;
  const int tail = config_.negative_source == "human" ? config_.completion_len : 0;
  const auto set = corpus::make_prompt_set(*domain.prompts, config_.n_prompts, config_.prompt_len,
                                           config_.completion_len, derive_seed(config_.seed, "prompts/" + domain.name),
                                           tail);
  std::vector<TokenSequence> out;
  for (size_t i = 0; i < set.prompts.size(); ++i) {
    TokenSequence p;
    p.tokens.push_back(lm::kBos);
    p.tokens.insert(p.tokens.end(), set.prompts[i].tokens.begin(), set.prompts[i].tokens.end());
    p.split_point = p.size();
    out.push_back(std::move(p));
    if (tail > 0) {
      const auto& doc = domain.prompts->documents[set.document_ids[i]];
      TokenSequence h = out.back();
      h.tokens.insert(h.tokens.end(), doc.begin() + config_.prompt_len,
                      doc.begin() + config_.prompt_len + config_.completion_len);
      negative_cache_["human|" + domain.name].texts.push_back(std::move(h));
    }
  }
  return prompt_cache_.emplace(domain.name, std::move(out)).first->second;
}

namespace {

wm::Sampler sampler_for(const Scheme* scheme, uint64_t seed, double temperature) {
  wm::Sampler s = wm::Sampler::plain(seed, temperature);
  if (scheme && scheme->kind == SchemeKind::kKgw) s = wm::Sampler::with_kgw(*scheme->kgw, seed, temperature);
  if (scheme && scheme->kind == SchemeKind::kKth) s = wm::Sampler::with_kth(scheme->kth, seed, false, temperature);
  s.allow_eos = false;
  return s;
}

std::vector<TokenSequence> generate_all(const ModelParams& model, const std::vector<TokenSequence>& prompts,
                                        int completion_len, const wm::Sampler& sampler, int workers) {
  std::vector<TokenSequence> out(prompts.size());
  parallel_for(prompts.size(), workers, [&](size_t i) {
    out[i] = wm::generate(model, prompts[i], completion_len, sampler, static_cast<uint64_t>(i)).text;
  });
  return out;
}

}  // namespace

const DurabilitySuite::Samples& DurabilitySuite::negatives(const mod::ModificationSpec& spec, const Domain& domain) {
  const auto& ps = prompts(domain);
  if (config_.negative_source == "human") return negative_cache_.at("human|" + domain.name);
  const std::string key = domain.name + "|" + mod::to_json(spec).dump();
  auto it = negative_cache_.find(key);
  if (it != negative_cache_.end()) return it->second;
  const ModelParams& model = modified(nullptr, spec);
  const auto sampler = sampler_for(nullptr, derive_seed(config_.seed, "negatives/" + domain.name), config_.temperature);
  Samples s{generate_all(model, ps, config_.completion_len, sampler, config_.workers)};
  return negative_cache_.emplace(key, std::move(s)).first->second;
}

nlohmann::json DurabilitySuite::fingerprint(const Scheme& scheme, const mod::ModificationSpec& spec,
                                            const Domain& domain) const {
  return {{"scheme", scheme.describe()},
          {"modification", mod::to_json(spec)},
          {"domain", domain.name},
          {"base", weights_digest(*inputs_.base)},
          {"n_prompts", config_.n_prompts},
          {"prompt_len", config_.prompt_len},
          {"completion_len", config_.completion_len},
          {"fprs", config_.fprs},
          {"temperature", config_.temperature},
          {"seed", config_.seed},
          {"negative_source", config_.negative_source}};
}

std::filesystem::path DurabilitySuite::cell_path(const Scheme& scheme, const mod::ModificationSpec& spec,
                                                 const Domain& domain) const {
  return *config_.run_dir / "cells" / fmt::format("{}__{}__{}.json", domain.name, scheme.name, spec.id());
}

CellResult DurabilitySuite::run_cell(const Scheme& scheme, const mod::ModificationSpec& spec, const Domain& domain) {
  const auto start = std::chrono::steady_clock::now();
  CellResult cell;
  cell.scheme = scheme.name;
  cell.modification = spec.kind == mod::ModKind::kNone ? "unaltered" : spec.id();
  cell.domain = domain.name;
  cell.modification_spec = mod::to_json(spec);
  const nlohmann::json fp = fingerprint(scheme, spec, domain);

  if (config_.run_dir) {
    const auto path = cell_path(scheme, spec, domain);
    if (std::filesystem::exists(path)) {
      std::ifstream in(path);
      const auto j = nlohmann::json::parse(in, nullptr, false);
      if (!j.is_discarded() && j.value("fingerprint", nlohmann::json()) == fp && j.value("status", "") == "ok") {
        auto cached = CellResult::from_json(j);
        cached.status = "cached";
        note(fmt::format("cell {}/{}/{} loaded from {}", domain.name, scheme.name, cell.modification, path.string()));
        return cached;
      }
    }
  }

  const uint64_t pos_seed = derive_seed(config_.seed, "positives/" + domain.name);
  const uint64_t neg_seed = derive_seed(config_.seed, "negatives/" + domain.name);
  cell.seeds = {{"suite", config_.seed},
                {"prompts", derive_seed(config_.seed, "prompts/" + domain.name)},
                {"positives", pos_seed},
                {"negatives", config_.negative_source == "human" ? nlohmann::json() : nlohmann::json(neg_seed)},
                {"modification", spec.seed},
                {"scheme", scheme.describe()}};
  try {
    note(fmt::format("cell {}/{}/{}", domain.name, scheme.name, cell.modification));
    const ModelParams& model = modified(&scheme, spec);
    const auto& ps = prompts(domain);
    const auto pos_texts =
        generate_all(model, ps, config_.completion_len, sampler_for(&scheme, pos_seed, config_.temperature),
                     config_.workers);
    const auto& neg_texts = negatives(spec, domain).texts;

    cell.positives.assign(pos_texts.size(), 0.0);
    cell.negatives.assign(neg_texts.size(), 0.0);
    const ModelParams& base = *inputs_.base;
    parallel_for(pos_texts.size(), config_.workers, [&](size_t i) {
      cell.positives[i] = detect_with(scheme, base, pos_texts[i], config_.detector).statistic;
    });
    parallel_for(neg_texts.size(), config_.workers, [&](size_t i) {
      cell.negatives[i] = detect_with(scheme, base, neg_texts[i], config_.detector).statistic;
    });
    cell.n_positives = static_cast<int>(cell.positives.size());
    cell.n_negatives = static_cast<int>(cell.negatives.size());
    for (double f : config_.fprs) {
      const auto t = compute_tpr_at_fpr(cell.positives, cell.negatives, f);
      cell.tpr[fpr_key(f)] = t.tpr;
      cell.threshold[fpr_key(f)] = t.threshold;
      cell.degenerate = cell.degenerate || t.degenerate;
    }
    cell.auc = compute_roc(cell.positives, cell.negatives).auc;
    std::vector<double> ppl(pos_texts.size());
    parallel_for(pos_texts.size(), config_.workers, [&](size_t i) { ppl[i] = perplexity(base, pos_texts[i]); });
    cell.median_ppl = stats::median(std::move(ppl));
  } catch (const std::exception& e) {
    cell.status = "failed";
    cell.error = e.what();
    note(fmt::format("cell {}/{}/{} failed: {}", domain.name, scheme.name, cell.modification, e.what()));
  }
  cell.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (config_.run_dir && cell.status == "ok") {
    const auto path = cell_path(scheme, spec, domain);
    std::filesystem::create_directories(path.parent_path());
    auto j = cell.to_json(true);
    j["fingerprint"] = fp;
    j["runtime_seconds"] = cell.runtime_seconds;
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp);
      if (!out) throw IoError(fmt::format("cannot write {}", tmp));
      out << j.dump(1) << "\n";
    }
    std::filesystem::rename(tmp, path);
  }
  return cell;
}

EvalReport DurabilitySuite::run() {
  EvalReport report;
  report.fprs = config_.fprs;
  std::vector<mod::ModificationSpec> mods = {mod::ModificationSpec::unaltered()};
  for (const auto& m : config_.modifications) {
    m.validate();
    if (m.kind != mod::ModKind::kNone) mods.push_back(m);
  }
  nlohmann::json mod_list = nlohmann::json::array();
  for (const auto& m : mods) mod_list.push_back(mod::to_json(m));
  nlohmann::json scheme_list = nlohmann::json::array();
  for (const auto* s : inputs_.schemes) scheme_list.push_back(s->describe());
  report.provenance = {{"seed", config_.seed},
                       {"n_prompts", config_.n_prompts},
                       {"prompt_len", config_.prompt_len},
                       {"completion_len", config_.completion_len},
                       {"temperature", config_.temperature},
                       {"negative_source", config_.negative_source},
                       {"null", config_.negative_source == "model"
                                    ? "completions of the identically modified unwatermarked base on the same prompts"
                                    : "human-written corpus continuations of the same prompts"},
                       {"threshold", "smallest negative tau with #{neg > tau}/n <= fpr; decision statistic > tau"},
                       {"ppl_judge", "unwatermarked base model"},
                       {"base", weights_digest(*inputs_.base)},
                       {"kth_indel_cost", config_.detector.kth.indel_cost},
                       {"modifications", mod_list},
                       {"schemes", scheme_list}};
  for (const auto& domain : inputs_.domains) {
    for (const auto* scheme : inputs_.schemes) {
      for (const auto& m : mods) report.rows.push_back(run_cell(*scheme, m, domain));
    }
  }
  return report;
}

EvalReport run_durability_suite(const SuiteConfig& config, const SuiteInputs& inputs) {
  return DurabilitySuite(config, inputs).run();
}

EvalReport domain_eval(const SuiteConfig& config, const SuiteInputs& inputs) {
  if (inputs.domains.size() < 2) throw ParameterError("domain_eval needs at least two prompt domains");
  return DurabilitySuite(config, inputs).run();
}

// ---- Distillation scaling ----

nlohmann::json audit_to_json(const std::vector<AuditEntry>& log) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : log) {
    j.push_back({{"stage", e.stage},
                 {"data_source", e.data_source},
                 {"tokens", e.tokens},
                 {"saw_unwatermarked_text", e.saw_unwatermarked_text}});
  }
  return j;
}

ScalingResult distill_scaling_sweep(const ScalingConfig& config, const ModelParams& teacher, const SuiteInputs& inputs) {
  if (config.init != "pretrained" && config.init != "random") {
    throw ParameterError(fmt::format("init must be 'pretrained' or 'random', got '{}'", config.init));
  }
  if (config.method != "logit" && config.method != "sampling") {
    throw ParameterError(fmt::format("method must be 'logit' or 'sampling', got '{}'", config.method));
  }
  const bool random_init = config.init == "random";
  const std::string method = random_init ? "sampling" : config.method;
  auto cit = inputs.resources.corpora.find(config.distill_corpus);
  if (cit == inputs.resources.corpora.end() || !cit->second) {
    throw ResourceError(fmt::format("unknown corpus '{}'", config.distill_corpus));
  }
  const corpus::Corpus& corpus = *cit->second;
  const int64_t per_step = static_cast<int64_t>(config.distill.batch_size) * config.distill.seq_len;

  ScalingResult result;
  result.report.fprs = config.suite.fprs;
  std::vector<Scheme> students;
  students.reserve(config.token_budgets.size());
  for (int64_t budget : config.token_budgets) {
    if (budget < 0) throw ParameterError("token budgets must be >= 0");
    auto& audit = result.audit[budget];
    ModelParams student = random_init ? ModelParams::init(teacher.config, config.init_seed) : teacher;
    if (random_init) {
      audit.push_back({"init", "random-init", 0, false});
    } else {
      audit.push_back({"init", "corpus", 0, true});
    }
    wm::DistillOptions opts = config.distill;
    opts.steps = budget / per_step;
    if (random_init) opts.prompt_len = 0;
    wm::DistillResult d;
    if (method == "logit") {
      d = wm::distill_logit(student, teacher, config.kgw, corpus, opts);
      audit.push_back({"distill-logit", "corpus", d.report.tokens_seen, true});
    } else {
      const auto sampler = wm::Sampler::with_kgw(config.kgw, derive_seed(config.distill.seed, "distill-generation"));
      d = wm::distill_sampling(student, teacher, sampler, corpus, opts);
      audit.push_back({"distill-sampling", opts.prompt_len == 0 ? "watermarked-teacher" : "corpus-prompts+watermarked-teacher",
                       d.report.tokens_seen, opts.prompt_len > 0});
    }
    result.distill[budget] = d.report;
    Scheme s;
    s.name = fmt::format("kgw-d@{}", budget);
    s.kind = SchemeKind::kKgwDistilled;
    s.params = std::move(d.student);
    s.params.metadata["distill"] = {{"budget", budget}, {"steps", opts.steps}, {"init", config.init}, {"method", method}};
    s.kgw = config.kgw;
    students.push_back(std::move(s));
  }

  SuiteInputs in = inputs;
  in.schemes.clear();
  for (const auto& s : students) in.schemes.push_back(&s);
  result.report = run_durability_suite(config.suite, in);
  nlohmann::json audits = nlohmann::json::object();
  for (const auto& [b, log] : result.audit) audits[std::to_string(b)] = audit_to_json(log);
  result.report.provenance["distillation"] = {{"init", config.init}, {"method", method}, {"audit", audits}};
  return result;
}

// ---- GaussMark calibration ----

GridSearchResult gaussmark_grid_search(const ModelParams& base, const std::vector<std::string>& targets,
                                       const std::vector<double>& sigmas, uint64_t mark_seed,
                                       const SuiteConfig& config, const Domain& domain, double fpr,
                                       double ppl_tolerance) {
  if (targets.empty() || sigmas.empty()) throw ParameterError("grid search needs targets and sigmas");
  SuiteConfig cfg = config;
  cfg.fprs = {fpr};
  cfg.modifications.clear();
  cfg.run_dir.reset();
  SuiteInputs in;
  in.base = &base;
  in.domains = {domain};
  DurabilitySuite suite(cfg, in);

  GridSearchResult out;
  std::vector<Scheme> schemes;
  bool have_best = false;
  for (const auto& target : targets) {
    for (double sigma : sigmas) {
      auto marked = wm::embed_gaussmark(base, {target, std::nullopt}, sigma, mark_seed);
      Scheme s;
      s.name = fmt::format("gaussmark[{}:{}]", target, sigma);
      s.kind = SchemeKind::kGaussMark;
      s.params = std::move(marked.params);
      s.mark = std::move(marked.mark);
      const auto cell = suite.run_cell(s, mod::ModificationSpec::unaltered(), domain);
      if (cell.status == "failed") throw DegenerateStatistic(fmt::format("grid point {} failed: {}", s.name, cell.error));
      GridPoint p{target, sigma, cell.tpr_at(fpr), cell.median_ppl};
      out.points.push_back(p);
    }
  }
  // The unaltered base at sigma 0 gives the reference perplexity.
  {
    auto marked = wm::embed_gaussmark(base, {targets.front(), std::nullopt}, 1e-30, mark_seed);
    Scheme s;
    s.name = "gaussmark[reference]";
    s.kind = SchemeKind::kGaussMark;
    s.params = base;
    s.mark = std::move(marked.mark);
    out.base_ppl = suite.run_cell(s, mod::ModificationSpec::unaltered(), domain).median_ppl;
  }
  for (const auto& p : out.points) {
    if (p.median_ppl > out.base_ppl * (1.0 + ppl_tolerance)) continue;
    if (!have_best || p.tpr > out.best.tpr || (p.tpr == out.best.tpr && p.median_ppl < out.best.median_ppl)) {
      out.best = p;
      have_best = true;
    }
  }
  if (!have_best) {
    out.best = *std::min_element(out.points.begin(), out.points.end(),
                                 [](const GridPoint& a, const GridPoint& b) { return a.median_ppl < b.median_ppl; });
  }
  return out;
}

}  // namespace wmlab::harness
