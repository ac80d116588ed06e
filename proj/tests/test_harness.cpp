// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "test_util.hpp"
#include "wmlab/error.hpp"
#include "wmlab/harness.hpp"
#include "wmlab/lm/model.hpp"

using namespace wmlab;
using namespace wmlab::harness;

namespace {

// Threshold by direct scan: try every negative value in increasing order.
double oracle_threshold(const std::vector<double>& neg, double fpr) {
  std::vector<double> cand = neg;
  std::sort(cand.begin(), cand.end());
  for (double t : cand) {
    int above = 0;
    for (double x : neg) above += x > t;
    if (static_cast<double>(above) / static_cast<double>(neg.size()) <= fpr) return t;
  }
  return cand.back();
}

std::vector<double> draw(Rng& rng, size_t n, double shift, bool ties) {
  std::vector<double> v(n);
  for (auto& x : v) {
    x = rng.normal() + shift;
    if (ties) x = std::round(x * 2.0) / 2.0;
  }
  return v;
}

corpus::Corpus word_corpus(uint64_t seed, const std::vector<std::string>& words, int docs = 60) {
  std::string text;
  Rng rng(seed);
  for (int d = 0; d < docs; ++d) {
    if (d) text += "\n\n";
    for (int w = 0; w < 25; ++w) text += words[rng.uniform_int(words.size())] + " ";
  }
  return corpus::from_text(text);
}

struct Fixture {
  corpus::Corpus broad = word_corpus(1, {"the", "cat", "sat", "on", "a", "mat", "and", "dog", "ran", "far"});
  corpus::Corpus math = word_corpus(2, {"<Q>", "1", "+", "2", "=", "<A>", "3", "4", "7", "9"});
  lm::ModelParams base = lm::ModelParams::init(testing::tiny_config(16, 1, 64), 7);
  Scheme unremovable, gaussmark, kgw, kth;

  Fixture() {
    auto u = wm::embed_unremovable(base, 2.0, 11);
    unremovable = {"unremovable", SchemeKind::kUnremovable, u.params, {}, {}, u.mark};
    auto g = wm::embed_gaussmark(base, {lm::names::kHead, std::nullopt}, 0.5, 12);
    gaussmark = {"gaussmark", SchemeKind::kGaussMark, g.params, {}, {}, g.mark};
    kgw = {"kgw", SchemeKind::kKgw, base, wm::KgwParams{13, 0.25, 4.0, 1}, {}, {}};
    kth = {"kth", SchemeKind::kKth, base, {}, std::make_shared<wm::KthKey>(wm::KthKey::generate(14, 259, 64)), {}};
  }

  SuiteConfig config() const {
    SuiteConfig c;
    c.n_prompts = 30;
    c.prompt_len = 8;
    c.completion_len = 40;
    c.seed = 99;
    return c;
  }

  SuiteInputs inputs(std::vector<const Scheme*> schemes) const {
    SuiteInputs in;
    in.base = &base;
    in.schemes = std::move(schemes);
    in.domains = {{"broad", &broad}};
    in.resources.corpora["broad"] = &broad;
    in.resources.corpora["math"] = &math;
    in.resources.partners["base"] = &base;
    return in;
  }
};

}  // namespace

TEST_CASE("tpr at fixed fpr") {
  std::vector<double> neg(20);
  for (int i = 0; i < 20; ++i) neg[i] = i;
  const std::vector<double> pos = {17, 18.5, 19.5, 25};
  const auto r = compute_tpr_at_fpr(pos, neg, 0.05);
  CHECK(r.threshold == 18.0);
  CHECK(r.tpr == 0.75);
  CHECK_FALSE(r.degenerate);

  const std::vector<double> high = {100, 200, 300};
  for (double f : {0.01, 0.05, 0.2, 0.5}) CHECK(compute_tpr_at_fpr(high, neg, f).tpr == 1.0);

  const std::vector<double> flat(25, 3.0);
  CHECK(compute_tpr_at_fpr(flat, flat, 0.05).degenerate);
  CHECK_THROWS_AS(compute_tpr_at_fpr(pos, std::vector<double>(10, 1.0), 0.05), InsufficientEvidence);
  CHECK_THROWS_AS(compute_tpr_at_fpr(pos, neg, 0.0), ParameterError);

  // Random samples against the scan oracle, with and without ties.
  Rng rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    const size_t n = 20 + rng.uniform_int(981), m = 1 + rng.uniform_int(1000);
    const bool ties = trial % 2 == 0;
    const auto ns = draw(rng, n, 0.0, ties), ps = draw(rng, m, 1.0, ties);
    double prev = -1.0;
    for (double f : {0.01, 0.05, 0.1, 0.3}) {
      const double t = oracle_threshold(ns, f);
      int above = 0;
      for (double x : ps) above += x > t;
      const auto got = compute_tpr_at_fpr(ps, ns, f);
      CHECK(got.threshold == t);
      CHECK(got.tpr == static_cast<double>(above) / static_cast<double>(m));
      CHECK(got.tpr >= prev);
      prev = got.tpr;
    }
  }

  // Exchangeable samples: TPR close to the nominal FPR.
  const auto a = draw(rng, 4000, 0.0, false), b = draw(rng, 4000, 0.0, false);
  const double tpr = compute_tpr_at_fpr(a, b, 0.05).tpr;
  CHECK(std::abs(tpr - 0.05) <= 3.0 * std::sqrt(0.05 * 0.95 / 4000.0) + 0.05 / 4000.0 * 20);
}

TEST_CASE("roc curve against a brute-force scan") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const size_t n = 1 + rng.uniform_int(1000), m = 1 + rng.uniform_int(1000);
    const auto ns = draw(rng, n, 0.0, trial % 2 == 0), ps = draw(rng, m, 0.8, trial % 2 == 0);
    const auto roc = compute_roc(ps, ns);

    std::vector<double> values = ns;
    values.insert(values.end(), ps.begin(), ps.end());
    std::sort(values.begin(), values.end(), std::greater<>());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    REQUIRE(roc.points.size() == values.size() + 1);
    CHECK(roc.points.front().fpr == 0.0);
    CHECK(roc.points.front().tpr == 0.0);
    for (size_t k = 0; k < values.size(); ++k) {
      int fp = 0, tp = 0;
      for (double x : ns) fp += x >= values[k];
      for (double x : ps) tp += x >= values[k];
      CHECK(roc.points[k + 1].fpr == static_cast<double>(fp) / static_cast<double>(n));
      CHECK(roc.points[k + 1].tpr == static_cast<double>(tp) / static_cast<double>(m));
    }
    CHECK(roc.points.back().fpr == 1.0);
    CHECK(roc.points.back().tpr == 1.0);

    // AUC equals the Mann-Whitney probability P(pos > neg) + P(tie) / 2.
    double wins = 0.0;
    for (double p : ps) {
      for (double q : ns) wins += p > q ? 1.0 : (p == q ? 0.5 : 0.0);
    }
    CHECK(roc.auc == doctest::Approx(wins / static_cast<double>(n * m)).epsilon(1e-12));
  }

  const std::vector<double> lo = {0, 1, 2}, hi = {5, 6};
  CHECK(compute_roc(hi, lo).auc == 1.0);
  const std::vector<double> c(10, 1.0);
  const auto diag = compute_roc(c, c);
  CHECK(diag.auc == 0.5);
  CHECK(diag.points.size() == 2);

  std::ostringstream csv;
  write_roc_csv(csv, diag);
  CHECK(csv.str() == "scheme,modification,fpr,tpr\n,,0,0\n,,1,1\n");
}

TEST_CASE("perplexity") {
  const auto zero = lm::ModelParams::zeros(testing::tiny_config(8, 1, 16));
  const lm::TokenSequence t{{256, 3, 4, 5, 6}, 2};
  CHECK(perplexity(zero, t) == doctest::Approx(259.0).epsilon(1e-5));
  std::vector<lm::TokenSequence> one = {t};
  CHECK(median_perplexity(zero, one) == doctest::Approx(perplexity(zero, t)));

  // Two-token vocabulary: the next-token distribution depends only on the
  // previous token, with P(1 | 0) = 1/4 and P(1 | 1) = 1/16.
  lm::ModelConfig c;
  c.vocab_size = 2;
  c.d_model = 2;
  c.n_heads = 1;
  c.n_layers = 1;
  c.d_ff = 4;
  c.context_len = 4;
  auto p = lm::ModelParams::zeros(c);
  p.at(lm::names::kTokEmb).data = {1.0f, -1.0f, -1.0f, 1.0f};
  const double s = 1.0 / std::sqrt(1.0 + 1e-5);  // layer norm of (+-1, -+1)
  const double cw = std::log(5.0) / (4.0 * s);
  const double b = (std::log(1.0 / 3.0) + std::log(1.0 / 15.0)) / 2.0;
  p.at(lm::names::kHead).data = {0.0f, 0.0f, static_cast<float>(cw), static_cast<float>(-cw)};
  p.at(lm::names::kOutputBias).data = {0.0f, static_cast<float>(b)};
  const lm::TokenSequence a{{0, 1}, 1}, bb{{1, 1}, 1};
  CHECK(perplexity(p, a) == doctest::Approx(4.0).epsilon(1e-5));
  CHECK(perplexity(p, bb) == doctest::Approx(16.0).epsilon(1e-5));
  std::vector<lm::TokenSequence> two = {a, bb};
  CHECK(median_perplexity(p, two) == doctest::Approx(10.0).epsilon(1e-5));
  CHECK_THROWS_AS(median_perplexity(p, {}), ParameterError);
}

TEST_CASE("bands") {
  CHECK(std::string(tpr_band(0.95)) == "high");
  CHECK(std::string(tpr_band(0.9)) == "high");
  CHECK(std::string(tpr_band(0.85)) == "mid");
  CHECK(std::string(tpr_band(0.5)) == "low");
}

TEST_CASE("durability suite: unaltered rows, detection power and reproducibility") {
  Fixture fx;
  const auto cfg = fx.config();
  const auto in = fx.inputs({&fx.unremovable, &fx.gaussmark, &fx.kgw, &fx.kth});
  const auto report = run_durability_suite(cfg, in);
  REQUIRE(report.rows.size() == 4);
  for (const auto& r : report.rows) {
    CHECK(r.modification == "unaltered");
    CHECK(r.status == "ok");
    CHECK(r.n_positives == 30);
    CHECK(r.n_negatives == 30);
    INFO(r.scheme);
    CHECK(r.tpr_at(0.05) >= 0.9);
    CHECK(r.median_ppl > 1.0);
    CHECK(r.seeds.contains("positives"));
  }
  // Reproduction from the same config and seeds is bit-exact.
  CHECK(run_durability_suite(cfg, in).to_json() == report.to_json());
  auto par = cfg;
  par.workers = 3;
  CHECK(run_durability_suite(par, in).to_json() == report.to_json());

  std::ostringstream csv, summary;
  report.write_csv(csv);
  report.write_summary(summary);
  CHECK(csv.str().rfind("domain,scheme,modification,status,tpr@0.01,threshold@0.01,tpr@0.05", 0) == 0);
  CHECK(summary.str().find("high") != std::string::npos);
  CHECK(report.to_json()["table"]["broad"]["kgw"]["unaltered"]["band"] == "high");
}

TEST_CASE("durability suite: modifications, failures and resume") {
  Fixture fx;
  auto cfg = fx.config();
  cfg.modifications = {mod::spec_from_json({{"kind", "quantize"}, {"bits", 8}, {"group_size", 8}}),
                       mod::spec_from_json({{"kind", "merge"}, {"t", 1.0}}),
                       mod::spec_from_json({{"kind", "merge"}, {"t", 0.5}, {"partner", "missing"}})};
  const auto dir = testing::temp_path("suite_resume");
  std::filesystem::remove_all(dir);
  cfg.run_dir = dir;
  std::vector<std::string> log;
  cfg.log = [&log](const std::string& s) { log.push_back(s); };
  const auto in = fx.inputs({&fx.unremovable});
  const auto report = run_durability_suite(cfg, in);
  REQUIRE(report.rows.size() == 4);
  CHECK(report.rows[0].modification == "unaltered");
  CHECK(report.rows[1].status == "ok");
  // t = 1 replaces the model by the base: the mark is gone.
  CHECK(report.rows[2].status == "ok");
  CHECK(report.rows[2].tpr_at(0.05) <= 0.3);
  CHECK(report.rows[3].status == "failed");
  CHECK(report.rows[3].error.find("missing") != std::string::npos);

  log.clear();
  const auto again = run_durability_suite(cfg, in);
  CHECK(again.to_json() == report.to_json());
  CHECK(again.rows[0].status == "cached");
  CHECK(again.rows[3].status == "failed");
  CHECK(std::none_of(log.begin(), log.end(), [](const std::string& s) { return s.rfind("applying quantize", 0) == 0; }));

  // Negatives come from the modified base: thresholds differ across cells.
  CHECK(report.rows[0].negatives != report.rows[1].negatives);
  std::filesystem::remove_all(dir);
}

TEST_CASE("domain evaluation and human negatives") {
  Fixture fx;
  auto cfg = fx.config();
  auto in = fx.inputs({&fx.kgw});
  in.domains.push_back({"math", &fx.math});
  const auto report = domain_eval(cfg, in);
  REQUIRE(report.rows.size() == 2);
  CHECK(report.rows[0].domain == "broad");
  CHECK(report.rows[1].domain == "math");
  CHECK(report.find("kgw", "unaltered", "math") == &report.rows[1]);

  // An unwatermarked "scheme" is detected at roughly the FPR in both domains.
  Scheme null_kgw = fx.kgw;
  null_kgw.name = "kgw-null";
  null_kgw.kind = SchemeKind::kKgwDistilled;
  auto big = cfg;
  big.n_prompts = 55;
  in.schemes = {&null_kgw};
  for (const auto& r : domain_eval(big, in).rows) CHECK(r.tpr_at(0.05) <= 0.25);

  auto human = cfg;
  human.negative_source = "human";
  in.schemes = {&fx.kgw};
  in.domains = {{"broad", &fx.broad}};
  const auto hr = run_durability_suite(human, in);
  CHECK(hr.rows[0].seeds["negatives"].is_null());
  CHECK(hr.rows[0].tpr_at(0.05) >= 0.9);
  CHECK_THROWS_AS(domain_eval(cfg, in), ParameterError);
}

TEST_CASE("distillation scaling sweep bookkeeping") {
  Fixture fx;
  ScalingConfig sc;
  sc.kgw = {21, 0.25, 2.0, 1};
  sc.distill.batch_size = 2;
  sc.distill.seq_len = 24;
  sc.distill.lr = 1e-3;
  sc.distill.warmup_steps = 0;
  sc.distill.prompt_len = 4;
  sc.token_budgets = {0, 96};
  sc.suite = fx.config();
  sc.suite.modifications = {mod::spec_from_json({{"kind", "quantize"}, {"bits", 8}, {"group_size", "per-row"}})};
  const auto in = fx.inputs({});

  const auto pre = distill_scaling_sweep(sc, fx.base, in);
  CHECK(pre.report.rows.size() == 4);
  CHECK(pre.distill.at(0).log.empty());
  CHECK(pre.distill.at(96).log.size() == 2);
  // No distillation: the student is the base, so KGW detection is at chance.
  CHECK(pre.report.find("kgw-d@0", "unaltered")->tpr_at(0.05) <= 0.3);

  sc.init = "random";
  const auto rnd = distill_scaling_sweep(sc, fx.base, in);
  for (const auto& [budget, log] : rnd.audit) {
    for (const auto& e : log) CHECK_FALSE(e.saw_unwatermarked_text);
  }
  CHECK(rnd.audit.at(96).back().data_source == "watermarked-teacher");
  CHECK(rnd.report.provenance["distillation"]["init"] == "random");
  sc.init = "warm";
  CHECK_THROWS_AS(distill_scaling_sweep(sc, fx.base, in), ParameterError);
}

TEST_CASE("gaussmark grid search") {
  Fixture fx;
  auto cfg = fx.config();
  const auto res = gaussmark_grid_search(fx.base, {"blocks.0.mlp.up", "blocks.0.attn.wv"}, {0.01, 0.5}, 3, cfg,
                                         {"broad", &fx.broad});
  REQUIRE(res.points.size() == 4);
  CHECK(res.base_ppl > 1.0);
  CHECK(std::any_of(res.points.begin(), res.points.end(), [&](const GridPoint& p) {
    return p.target == res.best.target && p.sigma == res.best.sigma;
  }));
  for (const auto& p : res.points) {
    if (p.median_ppl <= res.base_ppl * 1.1) CHECK(p.tpr <= res.best.tpr);
  }
}
