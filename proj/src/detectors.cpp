// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wmlab/detectors.hpp"

#include <cmath>
#include <limits>
#include <ostream>

#include <fmt/format.h>

#include "wmlab/error.hpp"
#include "wmlab/lm/model.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/stats.hpp"

namespace wmlab::detect {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

size_t first_scored(const TokenSequence& text) { return text.split_point; }

void require_tokens(int64_t have, int64_t need, const char* scheme) {
  if (have < need) {
    throw InsufficientEvidence(fmt::format("{} detection needs at least {} scored tokens, got {}", scheme, need, have));
  }
}

}  // namespace

void apply_calibration(DetectionResult& result, const NullCalibration& null, double fpr) {
  const double tau = stats::empirical_threshold(null.negatives, fpr);
  result.threshold = std::nextafter(tau, kInf);
  result.decision = result.statistic > tau;
  result.threshold_mode = "empirical";
  result.extras["calibration_fpr"] = fpr;
  result.extras["calibration_negatives"] = static_cast<double>(null.negatives.size());
}

DetectionResult detect_kgw(const TokenSequence& text, const wm::KgwParams& params, const KgwDetectOptions& options) {
  params.validate(options.vocab_size);
  text.validate(options.vocab_size);
  const size_t from = text.split_point > 0 ? text.split_point : std::min<size_t>(params.k, text.size());
  const auto T = static_cast<int64_t>(text.size() - from);
  require_tokens(T, options.min_tokens, "KGW");

  wm::KgwPartitioner part(params, options.vocab_size);
  int64_t green = 0;
  for (size_t t = from; t < text.size(); ++t) {
    green += part.green(std::span<const int>(text.tokens.data(), t))[static_cast<size_t>(text.tokens[t])];
  }
  const double gamma = static_cast<double>(params.green_count(options.vocab_size)) / options.vocab_size;
  const double z = (static_cast<double>(green) - gamma * T) / std::sqrt(T * gamma * (1.0 - gamma));

  DetectionResult r;
  r.scheme = "kgw";
  r.statistic = z;
  r.tokens_scored = T;
  r.threshold = stats::normal_upper_quantile(options.alpha);
  r.decision = z >= r.threshold;
  const double p_normal = stats::normal_tail(z);
  r.p_value = T < 50 ? stats::binomial_upper_tail(green, T, gamma) : p_normal;
  r.extras["green"] = static_cast<double>(green);
  r.extras["gamma"] = gamma;
  r.extras["p_normal"] = p_normal;
  return r;
}

double kth_alignment_cost(std::span<const int> tokens, const KeyFn& xi, int n_key, int shift) {
  double cost = 0.0;
  for (size_t t = 0; t < tokens.size(); ++t) {
    const int col = static_cast<int>((t + static_cast<size_t>(shift)) % static_cast<size_t>(n_key));
    cost += std::log1p(-xi(tokens[t], col));
  }
  return cost;
}

double kth_alignment_cost(std::span<const int> tokens, const wm::KthKey& key, int shift) {
  return kth_alignment_cost(tokens, [&key](int tok, int col) { return key.at(tok, col); }, key.n_key, shift);
}

double kth_levenshtein_cost(std::span<const int> tokens, const KeyFn& xi, int n_key, int shift, double indel_cost) {
  const size_t m = tokens.size();
  // Rolling rows of the (m + 1) x (m + 1) DP table.
  std::vector<double> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = j == 0 ? 0.0 : static_cast<double>(j) * indel_cost;
  for (size_t i = 1; i <= m; ++i) {
    cur[0] = static_cast<double>(i) * indel_cost;
    for (size_t j = 1; j <= m; ++j) {
      const int col = static_cast<int>((j - 1 + static_cast<size_t>(shift)) % static_cast<size_t>(n_key));
      const double match = prev[j - 1] + std::log1p(-xi(tokens[i - 1], col));
      cur[j] = std::min({match, prev[j] + indel_cost, cur[j - 1] + indel_cost});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double kth_min_cost(std::span<const int> tokens, const KeyFn& xi, int n_key, KthMode mode, double indel_cost) {
  double best = kInf;
  if (mode == KthMode::kShiftMin) {
    // Cache log(1 - xi) per (position, column) so each shift is m additions.
    const size_t m = tokens.size();
    std::vector<double> c(m * static_cast<size_t>(n_key));
    for (size_t t = 0; t < m; ++t) {
      for (int col = 0; col < n_key; ++col) c[t * n_key + col] = std::log1p(-xi(tokens[t], col));
    }
    for (int s = 0; s < n_key; ++s) {
      double cost = 0.0;
      for (size_t t = 0; t < m; ++t) cost += c[t * n_key + (t + static_cast<size_t>(s)) % static_cast<size_t>(n_key)];
      best = std::min(best, cost);
    }
    return best;
  }
  for (int s = 0; s < n_key; ++s) best = std::min(best, kth_levenshtein_cost(tokens, xi, n_key, s, indel_cost));
  return best;
}

DetectionResult detect_kth(const TokenSequence& text, const wm::KthKey& key, const KthDetectOptions& options) {
  if (options.n_permutations < 99) throw ParameterError("KTH permutation test needs n_permutations >= 99");
  if (options.mode == KthMode::kLevenshtein && !(options.indel_cost > 0.0)) {
    throw ParameterError("indel_cost must be > 0");
  }
  text.validate(key.vocab_size);
  const std::span<const int> tokens(text.tokens.data() + first_scored(text), text.size() - first_scored(text));
  require_tokens(static_cast<int64_t>(tokens.size()), options.min_tokens, "KTH");

  const KeyFn true_key = [&key](int tok, int col) { return key.at(tok, col); };
  const double observed = kth_min_cost(tokens, true_key, key.n_key, options.mode, options.indel_cost);

  std::vector<double> null(static_cast<size_t>(options.n_permutations));
  for (int b = 0; b < options.n_permutations; ++b) {
    const uint64_t seed = derive_seed(derive_seed(options.permutation_seed, "kth-null"), static_cast<uint64_t>(b));
    const int V = key.vocab_size;
    const KeyFn fresh = [seed, V](int tok, int col) { return wm::kth_key_entry(seed, V, tok, col); };
    null[static_cast<size_t>(b)] = kth_min_cost(tokens, fresh, key.n_key, options.mode, options.indel_cost);
  }
  int64_t at_or_below = 0;
  for (double c : null) at_or_below += c <= observed;

  DetectionResult r;
  r.scheme = "kth";
  r.statistic = -observed;
  r.tokens_scored = static_cast<int64_t>(tokens.size());
  r.p_value = (1.0 + static_cast<double>(at_or_below)) / (1.0 + options.n_permutations);
  r.threshold_mode = "permutation";
  // p <= alpha  <=>  at most K null costs at or below the observed cost.
  const auto K = static_cast<int64_t>(std::floor(options.alpha * (1.0 + options.n_permutations) + 1e-9)) - 1;
  std::sort(null.begin(), null.end());
  if (K < 0) {
    r.threshold = kInf;
  } else if (K >= options.n_permutations) {
    r.threshold = -kInf;
  } else {
    r.threshold = std::nextafter(-null[static_cast<size_t>(K)], kInf);
  }
  r.decision = *r.p_value <= options.alpha;
  r.extras["min_cost"] = observed;
  r.extras["n_permutations"] = options.n_permutations;
  r.extras["indel_cost"] = options.mode == KthMode::kLevenshtein ? options.indel_cost : kInf;
  return r;
}

DetectionResult detect_unremovable(const TokenSequence& text, const wm::GaussianMark& mark,
                                   const ZDetectOptions& options) {
  if (mark.scheme != wm::MarkScheme::kUnremovable) throw ParameterError("mark is not an Unremovable mark");
  if (!(mark.sigma > 0.0)) throw DegenerateStatistic("Unremovable detection needs sigma > 0");
  const auto V = static_cast<int>(mark.epsilon.numel());
  text.validate(V);
  const size_t from = first_scored(text);
  const auto T = static_cast<int64_t>(text.size() - from);
  require_tokens(T, 1, "Unremovable");
  double s = 0.0;
  for (size_t t = from; t < text.size(); ++t) s += mark.epsilon.data[static_cast<size_t>(text.tokens[t])];

  DetectionResult r;
  r.scheme = "unremovable";
  const double z = s / (mark.sigma * static_cast<double>(T));
  const double z_sqrt = s / (mark.sigma * std::sqrt(static_cast<double>(T)));
  r.statistic = z;
  r.tokens_scored = T;
  r.p_value = stats::normal_tail(z_sqrt);
  r.threshold = stats::normal_upper_quantile(options.alpha) / std::sqrt(static_cast<double>(T));
  r.decision = z >= r.threshold;
  r.extras["z_sqrt"] = z_sqrt;
  r.extras["eps_sum"] = s;
  return r;
}

DetectionResult detect_gaussmark(const TokenSequence& text, const ModelParams& params, const wm::GaussianMark& mark,
                                 const ZDetectOptions& options) {
  if (!(mark.sigma > 0.0)) throw DegenerateStatistic("GaussMark detection needs sigma > 0");
  mark.target.validate(params);
  if (params.at(mark.target.tensor_name).shape != mark.epsilon.shape) {
    throw ShapeError(fmt::format("mark epsilon shape {} does not match '{}'", shape_string(mark.epsilon.shape),
                                 mark.target.tensor_name));
  }
  const auto T = static_cast<int64_t>(text.size() - std::max<size_t>(1, text.split_point));
  require_tokens(T, 1, "GaussMark");
  const Tensor g = lm::grad_log_prob(params, text, mark.target);
  double dot = 0.0, gg = 0.0;
  for (size_t i = 0; i < g.data.size(); ++i) {
    dot += static_cast<double>(mark.epsilon.data[i]) * g.data[i];
    gg += static_cast<double>(g.data[i]) * g.data[i];
  }
  if (!(gg > 0.0)) throw DegenerateStatistic("gradient of the log-likelihood is zero on the marked tensor");

  DetectionResult r;
  r.scheme = "gaussmark";
  r.statistic = dot / (mark.sigma * std::sqrt(gg));
  r.tokens_scored = T;
  r.p_value = stats::normal_tail(r.statistic);
  r.threshold = stats::normal_upper_quantile(options.alpha);
  r.decision = r.statistic >= r.threshold;
  r.extras["grad_norm"] = std::sqrt(gg);
  return r;
}

void write_csv_header(std::ostream& out) {
  out << "text_id,scheme,statistic,p_value,threshold,decision,tokens_scored\n";
}

void write_csv_row(std::ostream& out, const std::string& text_id, const DetectionResult& r) {
  out << fmt::format("{},{},{:.17g},{},{:.17g},{},{}\n", text_id, r.scheme, r.statistic,
                     r.p_value ? fmt::format("{:.17g}", *r.p_value) : std::string(), r.threshold,
                     r.decision ? 1 : 0, r.tokens_scored);
}

nlohmann::json to_json(const DetectionResult& r) {
  nlohmann::json j{{"scheme", r.scheme},         {"statistic", r.statistic},
                   {"threshold", r.threshold},   {"decision", r.decision},
                   {"tokens_scored", r.tokens_scored}, {"threshold_mode", r.threshold_mode}};
  j["p_value"] = r.p_value ? nlohmann::json(*r.p_value) : nlohmann::json();
  nlohmann::json extras = nlohmann::json::object();
  for (const auto& [k, v] : r.extras) extras[k] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(fmt::format("{}", v));
  j["extras"] = extras;
  return j;
}

}  // namespace wmlab::detect
