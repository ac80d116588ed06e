// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// wmlab: config-driven command line for the watermark durability pipeline.
// Exit codes: 0 success, 1 runtime failure, 2 config or usage error.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "wmlab/corpus.hpp"
#include "wmlab/error.hpp"
#include "wmlab/experiment_config.hpp"
#include "wmlab/harness.hpp"
#include "wmlab/lm/checkpoint.hpp"
#include "wmlab/modify.hpp"
#include "wmlab/pipeline.hpp"
#include "wmlab/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace wmlab;

namespace {

// Usage errors found after parsing (unknown scheme name, wrong kind for the
// subcommand).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void log(const std::string& msg) { fmt::print(stderr, "[wmlab] {}\n", msg); }

std::string hex(uint64_t v) { return fmt::format("{:016x}", v); }

void write_text(const fs::path& path, const std::string& body) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
    out << body;
  }
  fs::rename(tmp, path);
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot read {}", path.string()));
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

// ---- Run context ----

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string delimiter;
  bool delimiter_set = false;
};

class Run {
 public:
  explicit Run(const Options& opts) {
    auto overrides = opts.overrides;
    cfg_ = config::load_experiment_config(opts.config_path, overrides);
    if (opts.delimiter_set) {
      for (auto& [_, c] : cfg_.corpora) c.delimiter = opts.delimiter;
    }
  }

  const config::ExperimentConfig& cfg() const { return cfg_; }
  fs::path dir() const { return cfg_.run_dir; }
  fs::path init_path() const { return dir() / "models" / "init.dwmf"; }
  fs::path base_path() const { return dir() / "models" / "base.dwmf"; }
  fs::path scheme_dir(const std::string& name) const { return dir() / "schemes" / name; }
  fs::path modified_path(const std::string& owner, const std::string& id) const {
    return dir() / "modified" / owner / (id + ".dwmf");
  }

  const corpus::Corpus& corpus(const std::string& name) {
    auto it = corpora_.find(name);
    if (it != corpora_.end()) return *it->second;
    const auto spec = cfg_.corpora.find(name);
    if (spec == cfg_.corpora.end()) throw ResourceError(fmt::format("unknown corpus '{}'", name));
    auto c = std::make_unique<corpus::Corpus>(corpus::ingest(spec->second.path, spec->second.delimiter));
    log(fmt::format("corpus '{}': {} documents, {} tokens", name, c->documents.size(), c->total_tokens()));
    return *corpora_.emplace(name, std::move(c)).first->second;
  }

  const lm::ModelParams& base() {
    if (!base_) {
      if (!fs::exists(base_path())) {
        throw ResourceError(fmt::format("{} not found; run `wmlab pretrain` first", base_path().string()));
      }
      base_ = std::make_unique<lm::ModelParams>(lm::load_checkpoint(base_path()));
      if (!(base_->config == cfg_.model)) {
        throw ShapeError("models/base.dwmf was trained with a different model config");
      }
    }
    return *base_;
  }

  // Loads a stored scheme, or builds and stores it when `build` is set.
  const harness::Scheme& scheme(const std::string& name, bool build) {
    auto it = schemes_.find(name);
    if (it != schemes_.end()) return *it->second;
    const auto& spec = cfg_.scheme(name);
    const auto d = scheme_dir(name);
    std::unique_ptr<harness::Scheme> s;
    if (fs::exists(d / "scheme.json") && stored_matches(spec, d)) {
      s = std::make_unique<harness::Scheme>(pipeline::load_scheme(d, base()));
    } else if (build) {
      s = std::make_unique<harness::Scheme>(build_and_save(spec));
    } else {
      throw ResourceError(fmt::format("scheme '{}' has not been built; run `wmlab {}` first", name,
                                      spec.distill ? "distill" : "watermark"));
    }
    return *schemes_.emplace(name, std::move(s)).first->second;
  }

  harness::Scheme build_and_save(const config::SchemeSpec& spec) {
    const auto& b = base();
    const corpus::Corpus* dc = spec.distill ? &corpus(spec.distill->corpus) : nullptr;
    std::string log_csv = "step,loss,lr,grad_norm\n";
    const auto t0 = std::chrono::steady_clock::now();
    auto built = pipeline::build_scheme(spec, b, dc, [&](const wm::TrainLogEntry& e) {
      log_csv += fmt::format("{},{:.9g},{:.9g},{:.9g}\n", e.step, e.loss, e.lr, e.grad_norm);
      if (e.step % 100 == 0) log(fmt::format("{} distill step {} loss {:.4f}", spec.name, e.step, e.loss));
    });
    built.scheme.params.metadata["lineage"] = b.metadata.value("lineage", json::array());
    built.scheme.params.metadata["scheme_spec"] = scheme_fingerprint(spec);
    const auto d = scheme_dir(spec.name);
    pipeline::save_scheme(built.scheme, d);
    write_text(d / "spec.json", scheme_fingerprint(spec).dump(2) + "\n");
    json extra = {{"scheme", built.scheme.describe()}};
    if (built.distill) {
      write_text(d / "distill_log.csv", log_csv);
      write_text(d / "distill_report.json", built.distill->to_json().dump(2) + "\n");
      extra["distill"] = built.distill->to_json();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log(fmt::format("built scheme '{}' ({}) in {:.1f}s", spec.name, harness::kind_name(spec.kind), secs));
    record(spec.distill ? "distill" : "watermark", fs::relative(d, dir()).string(), extra);
    return std::move(built.scheme);
  }

  json scheme_fingerprint(const config::SchemeSpec& spec) {
    json all = config::to_json(cfg_)["schemes"];
    for (const auto& s : all) {
      if (s.at("name") == spec.name) return {{"spec", s}, {"base", hex(pipeline::weights_digest(base()))}};
    }
    return json::object();
  }

  bool stored_matches(const config::SchemeSpec& spec, const fs::path& d) {
    if (!fs::exists(d / "spec.json")) return false;
    return read_json_file(d / "spec.json") == scheme_fingerprint(spec);
  }

  mod::Resources resources() {
    mod::Resources r;
    for (const auto& [name, _] : cfg_.corpora) r.corpora[name] = &corpus(name);
    r.partners["base"] = &base();
    return r;
  }

  // run_dir/manifest.json: the resolved config plus one entry per artifact.
  void record(const std::string& stage, const std::string& artifact, const json& extra = json::object()) {
    const fs::path path = dir() / "manifest.json";
    json m = fs::exists(path) ? read_json_file(path) : json{{"artifacts", json::object()}};
    m["config"] = config::to_json(cfg_);
    json entry = {{"stage", stage}, {"written_at", std::time(nullptr)}};
    entry.update(extra);
    m["artifacts"][artifact] = entry;
    write_text(path, m.dump(2) + "\n");
  }

 private:
  config::ExperimentConfig cfg_;
  std::map<std::string, std::unique_ptr<corpus::Corpus>> corpora_;
  std::unique_ptr<lm::ModelParams> base_;
  std::map<std::string, std::unique_ptr<harness::Scheme>> schemes_;
};

std::vector<std::string> select_schemes(const config::ExperimentConfig& cfg, const std::vector<std::string>& names,
                                        bool distilled) {
  std::vector<std::string> out;
  if (names.empty()) {
    for (const auto& s : cfg.schemes) {
      if (s.distill.has_value() == distilled) out.push_back(s.name);
    }
    return out;
  }
  for (const auto& n : names) {
    const auto& s = cfg.scheme(n);
    if (s.distill.has_value() != distilled) {
      throw UsageError(fmt::format("scheme '{}' ({}) is built by `wmlab {}`", n, harness::kind_name(s.kind),
                                   distilled ? "watermark" : "distill"));
    }
    out.push_back(n);
  }
  return out;
}

// ---- Subcommands ----

void cmd_init_model(Run& run) {
  const auto seed = config::seeds::init(run.cfg());
  auto params = lm::ModelParams::init(run.cfg().model, seed);
  lm::save_checkpoint(params, run.init_path());
  run.record("init-model", "models/init.dwmf", {{"seed", seed}, {"digest", hex(pipeline::weights_digest(params))}});
  log(fmt::format("wrote {} ({} parameters, seed {})", run.init_path().string(), params.parameter_count(), seed));
}

void cmd_pretrain(Run& run, bool resume) {
  if (resume && fs::exists(run.base_path())) {
    log(fmt::format("{} exists; skipping", run.base_path().string()));
    return;
  }
  const auto& cfg = run.cfg();
  if (!fs::exists(run.init_path())) cmd_init_model(run);
  const auto init = lm::load_checkpoint(run.init_path());
  const auto& corpus = run.corpus(cfg.pretrain.corpus);
  const auto seed = config::seeds::pretrain(cfg);
  std::string csv = "step,loss,lr,grad_norm\n";
  const auto t0 = std::chrono::steady_clock::now();
  auto base = pipeline::pretrain(init, corpus, cfg.pretrain, seed, [&](const pipeline::PretrainStep& s) {
    csv += fmt::format("{},{:.9g},{:.9g},{:.9g}\n", s.step, s.loss, s.lr, s.grad_norm);
    if (s.step % 100 == 0 || s.step + 1 == cfg.pretrain.steps) {
      log(fmt::format("pretrain step {}/{} loss {:.4f}", s.step, cfg.pretrain.steps, s.loss));
    }
  });
  lm::save_checkpoint(base, run.base_path());
  write_text(run.dir() / "pretrain_loss.csv", csv);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  run.record("pretrain", "models/base.dwmf",
             {{"seed", seed}, {"steps", cfg.pretrain.steps}, {"digest", hex(pipeline::weights_digest(base))}});
  log(fmt::format("wrote {} after {} steps ({:.1f}s)", run.base_path().string(), cfg.pretrain.steps, secs));
}

void cmd_build(Run& run, const std::vector<std::string>& names, bool distilled, bool resume) {
  const auto list = select_schemes(run.cfg(), names, distilled);
  if (list.empty()) throw UsageError(distilled ? "no distilled schemes in the config" : "no schemes in the config");
  for (const auto& n : list) {
    const auto& spec = run.cfg().scheme(n);
    if (resume && run.stored_matches(spec, run.scheme_dir(n))) {
      log(fmt::format("scheme '{}' is up to date; skipping", n));
      continue;
    }
    run.build_and_save(spec);
  }
}

const lm::ModelParams& owner_params(Run& run, const std::string& owner) {
  return owner == "base" ? run.base() : run.scheme(owner, false).params;
}

lm::ModelParams modified_model(Run& run, const std::string& owner, const std::string& mod_id, bool write) {
  const auto& spec = run.cfg().modification(mod_id);
  const auto path = run.modified_path(owner, mod_id);
  if (fs::exists(path)) return lm::load_checkpoint(path);
  auto params = mod::apply(spec, owner_params(run, owner), run.resources());
  if (write) {
    lm::save_checkpoint(params, path);
    run.record("modify", fs::relative(path, run.dir()).string(),
               {{"owner", owner}, {"modification", mod::to_json(spec)}, {"digest", hex(pipeline::weights_digest(params))}});
  }
  return params;
}

void cmd_modify(Run& run, const std::string& owner, std::vector<std::string> ids, bool resume) {
  if (owner != "base") run.cfg().scheme(owner);
  if (ids.empty()) {
    for (const auto& m : run.cfg().modifications) ids.push_back(m.id());
  }
  for (const auto& id : ids) {
    run.cfg().modification(id);
    const auto path = run.modified_path(owner, id);
    if (!resume && fs::exists(path)) fs::remove(path);
    if (resume && fs::exists(path)) {
      log(fmt::format("{} exists; skipping", path.string()));
      continue;
    }
    modified_model(run, owner, id, true);
    log(fmt::format("wrote {}", path.string()));
  }
}

void cmd_generate(Run& run, const std::string& owner, const std::string& mod_id, std::string domain, int n,
                  std::string out_path) {
  const auto& cfg = run.cfg();
  if (domain.empty()) domain = cfg.eval.domains.front();
  if (n <= 0) n = cfg.eval.n_prompts;
  const harness::Scheme* scheme = owner == "base" ? nullptr : &run.scheme(owner, false);
  std::optional<lm::ModelParams> modified;
  if (!mod_id.empty() && mod_id != "none") modified = modified_model(run, owner, mod_id, false);
  const lm::ModelParams& model = modified ? *modified : (scheme ? scheme->params : run.base());

  const std::string tag = fmt::format("{}/{}/{}", owner, mod_id.empty() ? "none" : mod_id, domain);
  const uint64_t seed = config::seeds::generation(cfg, tag);
  wm::Sampler sampler = wm::Sampler::plain(seed, cfg.eval.temperature);
  if (scheme && scheme->kind == harness::SchemeKind::kKgw) {
    sampler = wm::Sampler::with_kgw(*scheme->kgw, seed, cfg.eval.temperature);
  } else if (scheme && scheme->kind == harness::SchemeKind::kKth) {
    sampler = wm::Sampler::with_kth(scheme->kth, seed, false, cfg.eval.temperature);
  }
  sampler.allow_eos = false;

  const auto set = corpus::make_prompt_set(run.corpus(domain), n, cfg.eval.prompt_len, cfg.eval.completion_len,
                                           derive_seed(seed, "prompts"));
  std::vector<lm::TokenSequence> texts(set.prompts.size());
  harness::parallel_for(texts.size(), cfg.eval.workers, [&](size_t i) {
    lm::TokenSequence p;
    p.tokens.push_back(lm::kBos);
    p.tokens.insert(p.tokens.end(), set.prompts[i].tokens.begin(), set.prompts[i].tokens.end());
    p.split_point = p.size();
    texts[i] = wm::generate(model, p, cfg.eval.completion_len, sampler, i).text;
  });

  if (out_path.empty()) {
    out_path = (run.dir() / "generations" /
                fmt::format("{}__{}__{}.jsonl", owner, mod_id.empty() ? "none" : mod_id, domain))
                   .string();
  }
  std::string body;
  for (size_t i = 0; i < texts.size(); ++i) {
    const auto& t = texts[i];
    const std::vector<int> completion(t.tokens.begin() + static_cast<std::ptrdiff_t>(t.split_point), t.tokens.end());
    json line = {{"id", i},          {"scheme", owner},          {"modification", mod_id.empty() ? "none" : mod_id},
                 {"domain", domain}, {"split_point", t.split_point}, {"tokens", t.tokens},
                 {"completion", corpus::decode(completion)}};
    body += line.dump(-1, ' ', false, json::error_handler_t::replace) + "\n";
  }
  write_text(out_path, body);
  run.record("generate", fs::relative(fs::absolute(out_path), fs::absolute(run.dir())).string(),
             {{"owner", owner}, {"modification", mod_id.empty() ? "none" : mod_id}, {"domain", domain},
              {"seed", seed}, {"n", texts.size()}});
  log(fmt::format("wrote {} generations to {}", texts.size(), out_path));
}

std::vector<std::pair<std::string, lm::TokenSequence>> read_texts(const std::string& input, const std::string& text) {
  std::vector<std::pair<std::string, lm::TokenSequence>> out;
  if (!text.empty()) {
    lm::TokenSequence t;
    t.tokens = corpus::encode(text);
    out.emplace_back("text", std::move(t));
    return out;
  }
  std::ifstream in(input);
  if (!in) throw IoError(fmt::format("cannot read {}", input));
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      lm::TokenSequence t;
      if (j.contains("tokens")) {
        t.tokens = j.at("tokens").get<std::vector<int>>();
        t.split_point = j.value("split_point", size_t{0});
      } else {
        t.tokens = corpus::encode(j.at("text").get<std::string>());
      }
      const std::string id = j.contains("id") ? j.at("id").dump() : std::to_string(lineno);
      out.emplace_back(id, std::move(t));
    } catch (const json::exception& e) {
      throw FormatError(fmt::format("{}:{}: {}", input, lineno, e.what()));
    }
  }
  return out;
}

void cmd_detect(Run& run, const std::string& name, const std::string& input, const std::string& text,
                std::string out_prefix) {
  const auto& scheme = run.scheme(name, false);
  const auto texts = read_texts(input, text);
  harness::DetectorOptions opts;
  opts.kth = run.cfg().eval.kth;
  opts.kth_p_values = true;
  std::vector<detect::DetectionResult> results(texts.size());
  std::vector<std::string> errors(texts.size());
  harness::parallel_for(texts.size(), run.cfg().eval.workers, [&](size_t i) {
    try {
      results[i] = harness::detect_with(scheme, run.base(), texts[i].second, opts);
    } catch (const wmlab::Error& e) {
      errors[i] = e.what();
    }
  });
  if (out_prefix.empty()) {
    const std::string stem = text.empty() ? fs::path(input).stem().string() : "text";
    out_prefix = (run.dir() / "detections" / fmt::format("{}__{}", stem, name)).string();
  }
  std::ostringstream csv;
  detect::write_csv_header(csv);
  json arr = json::array();
  size_t flagged = 0, scored = 0;
  for (size_t i = 0; i < texts.size(); ++i) {
    if (!errors[i].empty()) {
      arr.push_back({{"id", texts[i].first}, {"error", errors[i]}});
      continue;
    }
    ++scored;
    flagged += results[i].decision ? 1 : 0;
    detect::write_csv_row(csv, texts[i].first, results[i]);
    auto j = detect::to_json(results[i]);
    j["id"] = texts[i].first;
    arr.push_back(j);
  }
  write_text(out_prefix + ".csv", csv.str());
  write_text(out_prefix + ".json",
             json{{"scheme", scheme.describe()}, {"input", text.empty() ? input : "<text>"}, {"results", arr}}.dump(2) +
                 "\n");
  log(fmt::format("{}: {}/{} texts flagged as watermarked ({} unscored)", name, flagged, scored,
                  texts.size() - scored));
  for (size_t i = 0; i < texts.size() && texts.size() <= 5; ++i) {
    if (errors[i].empty()) {
      fmt::print("{} statistic={:.4f} threshold={:.4f} decision={}\n", texts[i].first, results[i].statistic,
                 results[i].threshold, results[i].decision);
    }
  }
}

void write_report_files(const harness::EvalReport& report, const fs::path& eval_dir) {
  write_text(eval_dir / "report.json", report.to_json().dump(2) + "\n");
  std::ostringstream csv, summary;
  report.write_csv(csv);
  report.write_summary(summary);
  write_text(eval_dir / "report.csv", csv.str());
  write_text(eval_dir / "summary.txt", summary.str());
}

void cmd_eval(Run& run, const std::vector<std::string>& names, bool resume) {
  const auto& cfg = run.cfg();
  const fs::path eval_dir = run.dir() / "eval";
  if (!resume && fs::exists(eval_dir / "cells")) fs::remove_all(eval_dir / "cells");

  harness::SuiteInputs in;
  in.base = &run.base();
  std::vector<std::string> list = names;
  if (list.empty()) {
    for (const auto& s : cfg.schemes) list.push_back(s.name);
  }
  if (list.empty()) throw UsageError("no schemes to evaluate");
  for (const auto& n : list) in.schemes.push_back(&run.scheme(n, true));
  for (const auto& d : cfg.eval.domains) in.domains.push_back({d, &run.corpus(d)});
  in.resources = run.resources();

  harness::SuiteConfig sc;
  sc.modifications = cfg.modifications;
  sc.n_prompts = cfg.eval.n_prompts;
  sc.prompt_len = cfg.eval.prompt_len;
  sc.completion_len = cfg.eval.completion_len;
  sc.fprs = cfg.eval.fprs;
  sc.temperature = cfg.eval.temperature;
  sc.seed = config::seeds::eval(cfg);
  sc.negative_source = cfg.eval.negative_source;
  sc.detector.kth = cfg.eval.kth;
  sc.workers = cfg.eval.workers;
  sc.run_dir = eval_dir;
  sc.log = log;

  auto report = in.domains.size() > 1 ? harness::domain_eval(sc, in) : harness::run_durability_suite(sc, in);
  report.provenance["config"] = config::to_json(cfg);
  write_report_files(report, eval_dir);

  size_t failed = 0;
  for (const auto& r : report.rows) {
    if (r.status == "failed") {
      ++failed;
      continue;
    }
    if (r.positives.empty() || r.negatives.empty()) continue;
    auto roc = harness::compute_roc(r.positives, r.negatives);
    roc.scheme = r.scheme;
    roc.modification = r.modification;
    std::ostringstream out;
    harness::write_roc_csv(out, roc);
    write_text(eval_dir / "roc" / fmt::format("{}__{}__{}.csv", r.domain, r.scheme, r.modification), out.str());
  }
  run.record("eval", "eval/report.json", {{"rows", report.rows.size()}, {"failed_cells", failed}});
  std::ostringstream summary;
  report.write_summary(summary);
  fmt::print("{}", summary.str());
  if (failed > 0) log(fmt::format("{} cell(s) failed; see eval/summary.txt", failed));
}

void cmd_report(Run& run, const std::string& format) {
  const fs::path eval_dir = run.dir() / "eval";
  const auto j = read_json_file(eval_dir / "report.json");
  harness::EvalReport report;
  report.fprs = j.at("fprs").get<std::vector<double>>();
  report.provenance = j.at("provenance");
  for (const auto& r : j.at("rows")) report.rows.push_back(harness::CellResult::from_json(r));
  if (format == "json") {
    fmt::print("{}\n", report.to_json().dump(2));
  } else if (format == "csv") {
    report.write_csv(std::cout);
  } else {
    report.write_summary(std::cout);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"wmlab: watermark durability experiments on byte-level transformer models"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  Options opts;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", opts.config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--set", opts.overrides, "Override a scalar config field, e.g. --set eval.n_prompts=50");
    sub->add_option("--delimiter", opts.delimiter, "Document delimiter for every corpus");
  };

  bool resume = false;
  std::vector<std::string> scheme_names, mod_ids;
  std::string owner = "base", mod_id, domain, out, input, text, format = "summary";
  int n = 0;

  auto* init = app.add_subcommand("init-model", "Write the seeded initial checkpoint (models/init.dwmf)");
  add_common(init);

  auto* pre = app.add_subcommand("pretrain", "Train the base model (models/base.dwmf, pretrain_loss.csv)");
  add_common(pre);
  pre->add_flag("--resume", resume, "Skip when models/base.dwmf exists");

  auto* wmk = app.add_subcommand("watermark", "Embed weight marks or draw sampler keys (schemes/<name>/)");
  add_common(wmk);
  wmk->add_option("-s,--scheme", scheme_names, "Scheme name(s); default: every non-distilled scheme");
  wmk->add_flag("--resume", resume, "Skip schemes whose stored spec matches the config");

  auto* dst = app.add_subcommand("distill", "Distill watermarked students (kgw-d, kth-d)");
  add_common(dst);
  dst->add_option("-s,--scheme", scheme_names, "Scheme name(s); default: every distilled scheme");
  dst->add_flag("--resume", resume, "Skip schemes whose stored spec matches the config");

  auto* mdf = app.add_subcommand("modify", "Apply modifications (modified/<owner>/<id>.dwmf)");
  add_common(mdf);
  mdf->add_option("-s,--scheme", owner, "Scheme name or 'base'")->capture_default_str();
  mdf->add_option("-m,--modification", mod_ids, "Modification id(s); default: the whole grid");
  mdf->add_flag("--resume", resume, "Keep existing outputs");

  auto* gen = app.add_subcommand("generate", "Sample completions to JSONL");
  add_common(gen);
  gen->add_option("-s,--scheme", owner, "Scheme name or 'base' (unwatermarked)")->capture_default_str();
  gen->add_option("-m,--modification", mod_id, "Modification id applied to the model");
  gen->add_option("-d,--domain", domain, "Prompt corpus; default: first eval domain");
  gen->add_option("-n,--count", n, "Number of prompts; default: eval.n_prompts");
  gen->add_option("-o,--out", out, "Output JSONL path");

  auto* det = app.add_subcommand("detect", "Run a scheme's detector over texts (CSV + JSON)");
  add_common(det);
  det->add_option("-s,--scheme", owner, "Scheme name")->required();
  auto* in_opt = det->add_option("-i,--input", input, "JSONL with 'tokens'/'split_point' or 'text' per line");
  auto* text_opt = det->add_option("-t,--text", text, "Score one raw text");
  in_opt->excludes(text_opt);
  det->add_option("-o,--out", out, "Output path prefix");

  auto* evl = app.add_subcommand("eval", "Run the durability suite (eval/report.json, report.csv, roc/)");
  add_common(evl);
  evl->add_option("-s,--scheme", scheme_names, "Restrict to these schemes");
  evl->add_flag("--resume", resume, "Reuse finished cells under eval/cells");

  auto* rep = app.add_subcommand("report", "Print a finished evaluation");
  add_common(rep);
  rep->add_option("-f,--format", format, "summary | csv | json")
      ->check(CLI::IsMember({"summary", "csv", "json"}))
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  opts.delimiter_set = !opts.delimiter.empty();
  if (app.got_subcommand(det) && input.empty() && text.empty()) {
    fmt::print(stderr, "error: detect needs --input or --text\n");
    return 2;
  }

  try {
    Run run(opts);
    if (app.got_subcommand(init)) cmd_init_model(run);
    if (app.got_subcommand(pre)) cmd_pretrain(run, resume);
    if (app.got_subcommand(wmk)) cmd_build(run, scheme_names, false, resume);
    if (app.got_subcommand(dst)) cmd_build(run, scheme_names, true, resume);
    if (app.got_subcommand(mdf)) cmd_modify(run, owner, mod_ids, resume);
    if (app.got_subcommand(gen)) cmd_generate(run, owner, mod_id, domain, n, out);
    if (app.got_subcommand(det)) cmd_detect(run, owner, input, text, out);
    if (app.got_subcommand(evl)) cmd_eval(run, scheme_names, resume);
    if (app.got_subcommand(rep)) cmd_report(run, format);
  } catch (const ConfigError& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return 2;
  } catch (const UsageError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 2;
  } catch (const UnsupportedArchitecture& e) {
    fmt::print(stderr, "unsupported architecture: {}\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
