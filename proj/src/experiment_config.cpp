// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wmlab/experiment_config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <fmt/format.h>

#include "wmlab/error.hpp"
#include "wmlab/rng.hpp"

namespace wmlab::config {

namespace {

// Typed field access with the dotted path in every error message.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(fmt::format("'{}' must be an object", name()));
  }

  void allow(std::initializer_list<const char*> keys) const {
    for (const auto& [k, _] : j_.items()) {
      if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; })) {
        throw ConfigError(fmt::format("unknown key '{}'", child(k)));
      }
    }
  }

  bool has(const char* key) const { return j_.contains(key); }
  const nlohmann::json& raw(const char* key) const { return j_.at(key); }
  Section sub(const char* key) const { return Section(j_.at(key), child(key)); }

  template <typename T>
  void get(const char* key, T& out) const {
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
        if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<int64_t>() < 0) {
          throw ConfigError("");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError(fmt::format("'{}' has the wrong type ({})", child(key), v.dump()));
    }
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string name() const { return path_.empty() ? "<root>" : path_; }

 private:
  const nlohmann::json& j_;
  std::string path_;
};

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

PretrainSpec parse_pretrain(const Section& s) {
  s.allow({"corpus", "steps", "batch_size", "seq_len", "lr", "warmup_steps", "max_grad_norm"});
  PretrainSpec p;
  s.get("corpus", p.corpus);
  s.get("steps", p.steps);
  s.get("batch_size", p.batch_size);
  s.get("seq_len", p.seq_len);
  s.get("lr", p.lr);
  s.get("warmup_steps", p.warmup_steps);
  s.get("max_grad_norm", p.max_grad_norm);
  require(p.steps >= 0, "pretrain.steps must be >= 0");
  require(p.batch_size >= 1, "pretrain.batch_size must be >= 1");
  require(p.seq_len >= 2, "pretrain.seq_len must be >= 2");
  require(p.lr >= 0.0, "pretrain.lr must be >= 0");
  return p;
}

DistillSpec parse_distill(const Section& s) {
  s.allow({"method", "corpus", "steps", "batch_size", "seq_len", "lr", "warmup_steps", "max_grad_norm", "prompt_len",
           "seed"});
  DistillSpec d;
  s.get("method", d.method);
  s.get("corpus", d.corpus);
  auto& o = d.options;
  s.get("steps", o.steps);
  s.get("batch_size", o.batch_size);
  s.get("seq_len", o.seq_len);
  s.get("lr", o.lr);
  s.get("warmup_steps", o.warmup_steps);
  s.get("max_grad_norm", o.max_grad_norm);
  s.get("prompt_len", o.prompt_len);
  s.get("seed", o.seed);
  require(d.method == "logit" || d.method == "sampling",
          fmt::format("'{}' must be 'logit' or 'sampling'", s.child("method")));
  require(o.steps >= 0 && o.batch_size >= 1 && o.seq_len >= 2 && o.lr >= 0.0,
          fmt::format("'{}' has an out-of-range value", s.name()));
  return d;
}

SchemeSpec parse_scheme(const Section& s) {
  SchemeSpec sc;
  s.get("name", sc.name);
  require(!sc.name.empty(), fmt::format("'{}' needs a name", s.name()));
  std::string kind;
  s.get("kind", kind);
  sc.kind = harness::parse_kind(kind);
  using K = harness::SchemeKind;
  switch (sc.kind) {
    case K::kGaussMark:
      s.allow({"name", "kind", "seed", "sigma", "target"});
      break;
    case K::kUnremovable:
      s.allow({"name", "kind", "seed", "sigma"});
      break;
    case K::kKgw:
      s.allow({"name", "kind", "seed", "gamma", "delta", "k"});
      break;
    case K::kKgwDistilled:
      s.allow({"name", "kind", "seed", "gamma", "delta", "k", "distill"});
      break;
    case K::kKth:
      s.allow({"name", "kind", "seed", "n_key", "convention"});
      break;
    case K::kKthDistilled:
      s.allow({"name", "kind", "seed", "n_key", "convention", "distill"});
      break;
  }
  s.get("seed", sc.seed);
  s.get("sigma", sc.sigma);
  s.get("target", sc.target);
  s.get("gamma", sc.gamma);
  s.get("delta", sc.delta);
  s.get("k", sc.k);
  s.get("n_key", sc.n_key);
  s.get("convention", sc.convention);
  if (sc.kind == K::kGaussMark || sc.kind == K::kUnremovable) {
    require(s.has("sigma") && sc.sigma >= 0.0, fmt::format("'{}' must be given and >= 0", s.child("sigma")));
  }
  require(sc.gamma > 0.0 && sc.gamma < 1.0, fmt::format("'{}' must be in (0, 1)", s.child("gamma")));
  require(sc.delta >= 0.0, fmt::format("'{}' must be >= 0", s.child("delta")));
  require(sc.k >= 1, fmt::format("'{}' must be >= 1", s.child("k")));
  require(sc.n_key >= 1, fmt::format("'{}' must be >= 1", s.child("n_key")));
  require(sc.convention == "inverse_prob" || sc.convention == "prob_as_written",
          fmt::format("'{}' must be 'inverse_prob' or 'prob_as_written'", s.child("convention")));
  if (sc.kind == K::kKgwDistilled || sc.kind == K::kKthDistilled) {
    sc.distill = s.has("distill") ? parse_distill(s.sub("distill")) : DistillSpec{};
    if (sc.kind == K::kKthDistilled) {
      require(sc.distill->method == "sampling", fmt::format("'{}' must be 'sampling' for kth-d", s.child("distill.method")));
    }
  }
  return sc;
}

EvalSpec parse_eval(const Section& s) {
  s.allow({"n_prompts", "prompt_len", "completion_len", "fprs", "temperature", "negative_source", "domains", "workers",
           "kth"});
  EvalSpec e;
  s.get("n_prompts", e.n_prompts);
  s.get("prompt_len", e.prompt_len);
  s.get("completion_len", e.completion_len);
  s.get("temperature", e.temperature);
  s.get("negative_source", e.negative_source);
  s.get("workers", e.workers);
  if (s.has("fprs")) {
    const auto& f = s.raw("fprs");
    require(f.is_array() && !f.empty(), "'eval.fprs' must be a nonempty list of numbers");
    e.fprs.clear();
    for (const auto& v : f) {
      require(v.is_number() && v.get<double>() > 0.0 && v.get<double>() < 1.0, "'eval.fprs' entries must be in (0, 1)");
      e.fprs.push_back(v.get<double>());
    }
  }
  if (s.has("domains")) {
    const auto& d = s.raw("domains");
    require(d.is_array() && !d.empty(), "'eval.domains' must be a nonempty list of corpus names");
    e.domains.clear();
    for (const auto& v : d) {
      require(v.is_string(), "'eval.domains' entries must be strings");
      e.domains.push_back(v.get<std::string>());
    }
  }
  if (s.has("kth")) {
    const auto k = s.sub("kth");
    k.allow({"n_permutations", "mode", "indel_cost", "permutation_seed"});
    k.get("n_permutations", e.kth.n_permutations);
    k.get("indel_cost", e.kth.indel_cost);
    k.get("permutation_seed", e.kth.permutation_seed);
    std::string mode = "shift_min";
    k.get("mode", mode);
    require(mode == "shift_min" || mode == "levenshtein", "'eval.kth.mode' must be 'shift_min' or 'levenshtein'");
    e.kth.mode = mode == "levenshtein" ? detect::KthMode::kLevenshtein : detect::KthMode::kShiftMin;
    require(e.kth.indel_cost > 0.0, "'eval.kth.indel_cost' must be > 0");
    require(e.kth.n_permutations >= 99, "'eval.kth.n_permutations' must be >= 99");
  }
  require(e.n_prompts >= 20, "'eval.n_prompts' must be >= 20 (empirical thresholds need 20 negatives)");
  require(e.prompt_len >= 1 && e.completion_len >= 1, "'eval.prompt_len' and 'eval.completion_len' must be >= 1");
  require(e.temperature > 0.0, "'eval.temperature' must be > 0");
  require(e.negative_source == "model" || e.negative_source == "human",
          "'eval.negative_source' must be 'model' or 'human'");
  require(e.workers >= 1, "'eval.workers' must be >= 1");
  return e;
}

}  // namespace

const SchemeSpec& ExperimentConfig::scheme(const std::string& name) const {
  for (const auto& s : schemes) {
    if (s.name == name) return s;
  }
  throw ConfigError(fmt::format("no scheme named '{}' in the config", name));
}

const mod::ModificationSpec& ExperimentConfig::modification(const std::string& id) const {
  for (const auto& m : modifications) {
    if (m.id() == id) return m;
  }
  throw ConfigError(fmt::format("no modification with id '{}' in the config", id));
}

ExperimentConfig parse_experiment_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  const Section root(j, "");
  root.allow({"seed", "run_dir", "model", "corpora", "pretrain", "schemes", "modifications", "eval"});
  ExperimentConfig c;
  require(root.has("seed"), "'seed' is required");
  require(root.has("run_dir"), "'run_dir' is required");
  root.get("seed", c.seed);
  std::string run_dir;
  root.get("run_dir", run_dir);
  require(!run_dir.empty(), "'run_dir' must be nonempty");
  c.run_dir = std::filesystem::path(run_dir).is_absolute() ? std::filesystem::path(run_dir) : (base_dir / run_dir).lexically_normal();

  if (root.has("model")) {
    Section(j.at("model"), "model");
    try {
      c.model = lm::config_from_json(j.at("model"));
      c.model.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(fmt::format("model: {}", e.what()));
    } catch (const ParameterError& e) {
      throw ConfigError(fmt::format("model: {}", e.what()));
    }
  }

  require(root.has("corpora"), "'corpora' is required");
  const auto corpora = root.sub("corpora");
  for (const auto& [name, v] : j.at("corpora").items()) {
    CorpusSpec cs;
    const Section s(v, "corpora." + name);
    s.allow({"path", "delimiter"});
    std::string path;
    s.get("path", path);
    require(!path.empty(), fmt::format("'corpora.{}.path' is required", name));
    s.get("delimiter", cs.delimiter);
    cs.path = std::filesystem::path(path).is_absolute() ? std::filesystem::path(path) : (base_dir / path).lexically_normal();
    c.corpora[name] = cs;
  }
  require(!c.corpora.empty(), "'corpora' must name at least one corpus");
  auto need_corpus = [&](const std::string& name, const std::string& where) {
    require(c.corpora.count(name) != 0, fmt::format("'{}' refers to unknown corpus '{}'", where, name));
  };

  c.pretrain.corpus = c.corpora.begin()->first;
  if (root.has("pretrain")) c.pretrain = parse_pretrain(root.sub("pretrain"));
  need_corpus(c.pretrain.corpus, "pretrain.corpus");
  require(c.pretrain.seq_len <= c.model.context_len, "'pretrain.seq_len' exceeds model.context_len");

  std::set<std::string> names;
  if (root.has("schemes")) {
    const auto& arr = j.at("schemes");
    require(arr.is_array(), "'schemes' must be a list");
    for (size_t i = 0; i < arr.size(); ++i) {
      const Section s(arr[i], fmt::format("schemes[{}]", i));
      SchemeSpec sc = parse_scheme(s);
      require(names.insert(sc.name).second, fmt::format("duplicate scheme name '{}'", sc.name));
      require(sc.name != "base", "scheme name 'base' is reserved");
      if (!s.has("seed")) sc.seed = derive_seed(c.seed, "scheme/" + sc.name);
      if (sc.distill) {
        need_corpus(sc.distill->corpus, fmt::format("schemes[{}].distill.corpus", i));
        if (!arr[i].at("distill").contains("seed")) sc.distill->options.seed = derive_seed(c.seed, "distill/" + sc.name);
        require(sc.distill->options.seq_len < c.model.context_len,
                fmt::format("'schemes[{}].distill.seq_len' must be < model.context_len", i));
      }
      c.schemes.push_back(std::move(sc));
    }
  }

  std::set<std::string> ids;
  if (root.has("modifications")) {
    const auto& arr = j.at("modifications");
    require(arr.is_array(), "'modifications' must be a list");
    for (size_t i = 0; i < arr.size(); ++i) {
      mod::ModificationSpec m;
      try {
        m = mod::spec_from_json(arr[i]);
      } catch (const ConfigError& e) {
        throw ConfigError(fmt::format("modifications[{}]: {}", i, e.what()));
      }
      if (m.kind == mod::ModKind::kNone) continue;
      require(ids.insert(m.id()).second, fmt::format("modifications[{}]: duplicate id '{}'", i, m.id()));
      if (!arr[i].contains("seed")) {
        m.seed = derive_seed(c.seed, "modification/" + m.id());
        m.finetune.seed = m.seed;
      }
      if (m.kind == mod::ModKind::kFinetune || (m.kind == mod::ModKind::kPrune && m.method == mod::PruneMethod::kWanda)) {
        need_corpus(m.dataset, fmt::format("modifications[{}].dataset", i));
      }
      if (m.kind == mod::ModKind::kMerge) {
        require(m.partner == "base", fmt::format("modifications[{}].partner must be 'base'", i));
      }
      if (m.kind == mod::ModKind::kFinetune) {
        require(m.finetune.seq_len <= c.model.context_len,
                fmt::format("modifications[{}].seq_len exceeds model.context_len", i));
      }
      c.modifications.push_back(m);
    }
  }

  if (root.has("eval")) c.eval = parse_eval(root.sub("eval"));
  for (const auto& d : c.eval.domains) need_corpus(d, "eval.domains");
  require(c.eval.prompt_len + 1 + c.eval.completion_len <= c.model.context_len,
          "'eval.prompt_len' + 'eval.completion_len' + 1 exceeds model.context_len");
  (void)corpora;
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot read config file {}", path.string()));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(fmt::format("{}: malformed config: {}", path.string(), e.what()));
  }
  for (const auto& o : overrides) apply_override(j, o);
  return parse_experiment_config(j, path.parent_path());
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(fmt::format("override '{}' must look like key.path=value", assignment));
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json* node = &j;
  size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (node->is_array()) {
      size_t idx = 0;
      try {
        idx = std::stoul(key);
      } catch (const std::exception&) {
        throw ConfigError(fmt::format("override path '{}': '{}' is not a list index", path, key));
      }
      if (idx >= node->size()) throw ConfigError(fmt::format("override path '{}': index {} out of range", path, idx));
      node = &(*node)[idx];
    } else if (node->is_object() && node->contains(key)) {
      node = &(*node)[key];
    } else {
      throw ConfigError(fmt::format("override path '{}' does not exist in the config", path));
    }
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (!(node->is_primitive() && !node->is_null())) {
    throw ConfigError(fmt::format("override '{}' targets a section; only scalar fields can be overridden", path));
  }
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded() || !value.is_primitive()) value = text;
  *node = value;
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json corpora = nlohmann::json::object();
  for (const auto& [n, s] : c.corpora) corpora[n] = {{"path", s.path.string()}, {"delimiter", s.delimiter}};
  nlohmann::json schemes = nlohmann::json::array();
  for (const auto& s : c.schemes) {
    nlohmann::json j = {{"name", s.name}, {"kind", harness::kind_name(s.kind)}, {"seed", s.seed}};
    switch (s.kind) {
      case harness::SchemeKind::kGaussMark:
        j["target"] = s.target;
        [[fallthrough]];
      case harness::SchemeKind::kUnremovable:
        j["sigma"] = s.sigma;
        break;
      case harness::SchemeKind::kKgw:
      case harness::SchemeKind::kKgwDistilled:
        j["gamma"] = s.gamma;
        j["delta"] = s.delta;
        j["k"] = s.k;
        break;
      case harness::SchemeKind::kKth:
      case harness::SchemeKind::kKthDistilled:
        j["n_key"] = s.n_key;
        j["convention"] = s.convention;
        break;
    }
    if (s.distill) {
      const auto& o = s.distill->options;
      j["distill"] = {{"method", s.distill->method}, {"corpus", s.distill->corpus}, {"steps", o.steps},
                      {"batch_size", o.batch_size},   {"seq_len", o.seq_len},       {"lr", o.lr},
                      {"warmup_steps", o.warmup_steps}, {"max_grad_norm", o.max_grad_norm},
                      {"prompt_len", o.prompt_len},   {"seed", o.seed}};
    }
    schemes.push_back(j);
  }
  nlohmann::json mods = nlohmann::json::array();
  for (const auto& m : c.modifications) mods.push_back(mod::to_json(m));
  const auto& p = c.pretrain;
  const auto& e = c.eval;
  return {{"seed", c.seed},
          {"run_dir", c.run_dir.string()},
          {"model", lm::to_json(c.model)},
          {"corpora", corpora},
          {"pretrain",
           {{"corpus", p.corpus}, {"steps", p.steps}, {"batch_size", p.batch_size}, {"seq_len", p.seq_len},
            {"lr", p.lr}, {"warmup_steps", p.warmup_steps}, {"max_grad_norm", p.max_grad_norm}}},
          {"schemes", schemes},
          {"modifications", mods},
          {"eval",
           {{"n_prompts", e.n_prompts}, {"prompt_len", e.prompt_len}, {"completion_len", e.completion_len},
            {"fprs", e.fprs}, {"temperature", e.temperature}, {"negative_source", e.negative_source},
            {"domains", e.domains}, {"workers", e.workers},
            {"kth",
             {{"n_permutations", e.kth.n_permutations},
              {"mode", e.kth.mode == detect::KthMode::kLevenshtein ? "levenshtein" : "shift_min"},
              {"indel_cost", e.kth.indel_cost},
              {"permutation_seed", e.kth.permutation_seed}}}}}};
}

namespace seeds {
uint64_t init(const ExperimentConfig& c) { return derive_seed(c.seed, "init"); }
uint64_t pretrain(const ExperimentConfig& c) { return derive_seed(c.seed, "pretrain"); }
uint64_t scheme(const ExperimentConfig& c, const std::string& name) { return derive_seed(c.seed, "scheme/" + name); }
uint64_t distill(const ExperimentConfig& c, const std::string& name) { return derive_seed(c.seed, "distill/" + name); }
uint64_t modification(const ExperimentConfig& c, const std::string& id) {
  return derive_seed(c.seed, "modification/" + id);
}
uint64_t generation(const ExperimentConfig& c, const std::string& name) {
  return derive_seed(c.seed, "generate/" + name);
}
uint64_t eval(const ExperimentConfig& c) { return derive_seed(c.seed, "eval"); }
}  // namespace seeds

}  // namespace wmlab::config
