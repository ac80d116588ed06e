// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wmlab/stats.hpp"

#include <algorithm>
#include <cmath>

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <fmt/format.h>

#include "wmlab/error.hpp"

namespace wmlab::stats {

double normal_tail(double z) {
  if (std::isnan(z)) throw ParameterError("normal_tail of NaN");
  if (std::isinf(z)) return z > 0 ? 0.0 : 1.0;
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

double normal_upper_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ParameterError(fmt::format("quantile level {} outside (0, 1)", p));
  return boost::math::quantile(boost::math::complement(boost::math::normal_distribution<double>(), p));
}

double binomial_upper_tail(int64_t k, int64_t n, double p) {
  if (n < 0 || !(p >= 0.0 && p <= 1.0)) throw ParameterError("invalid binomial parameters");
  if (k <= 0) return 1.0;
  if (k > n) return 0.0;
  const boost::math::binomial_distribution<double> dist(static_cast<double>(n), p);
  return boost::math::cdf(boost::math::complement(dist, static_cast<double>(k - 1)));
}

double chi_square_tail(double x, double df) {
  if (x <= 0.0) return 1.0;
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared_distribution<double>(df), x));
}

KsResult ks_uniform(std::span<const double> sample) {
  if (sample.empty()) throw ParameterError("KS test needs a nonempty sample");
  std::vector<double> x(sample.begin(), sample.end());
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double f = std::clamp(x[i], 0.0, 1.0);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - f, f - static_cast<double>(i) / n});
  }
  const double sn = std::sqrt(n);
  const double lambda = (sn + 0.12 + 0.11 / sn) * d;
  double p = 0.0;
  if (lambda < 0.2) {
    p = 1.0;
  } else {
    for (int k = 1; k <= 100; ++k) {
      const double term = std::exp(-2.0 * k * k * lambda * lambda);
      p += (k % 2 ? 2.0 : -2.0) * term;
      if (term < 1e-16) break;
    }
  }
  return {d, std::clamp(p, 0.0, 1.0)};
}

double empirical_threshold(std::span<const double> negatives, double fpr) {
  if (!(fpr > 0.0 && fpr < 1.0)) throw ParameterError(fmt::format("fpr {} outside (0, 1)", fpr));
  if (negatives.size() < 20) {
    throw InsufficientEvidence(fmt::format("need at least 20 negatives, got {}", negatives.size()));
  }
  std::vector<double> v(negatives.begin(), negatives.end());
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  // Scan candidate values in ascending order; #{neg > v[i]} = n - (index past the last copy of v[i]).
  for (size_t i = 0; i < v.size();) {
    size_t j = i;
    while (j < v.size() && v[j] == v[i]) ++j;
    if (static_cast<double>(v.size() - j) / n <= fpr) return v[i];
    i = j;
  }
  return v.back();
}

double median(std::vector<double> values) {
  if (values.empty()) throw ParameterError("median of an empty sample");
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double mean(std::span<const double> values) {
  if (values.empty()) throw ParameterError("mean of an empty sample");
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

double sample_variance(std::span<const double> values) {
  if (values.size() < 2) throw ParameterError("variance needs at least 2 values");
  const double m = mean(values);
  double s = 0.0;
  for (double v : values) s += (v - m) * (v - m);
  return s / static_cast<double>(values.size() - 1);
}

}  // namespace wmlab::stats
