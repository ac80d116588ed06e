// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Statistics shared by the detectors and the harness.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace wmlab::stats {

// 1 - Phi(z).
double normal_tail(double z);
// z with normal_tail(z) = p, for p in (0, 1).
double normal_upper_quantile(double p);

// P(X >= k) for X ~ Binomial(n, p).
double binomial_upper_tail(int64_t k, int64_t n, double p);

// Upper tail of chi-square(df) at x.
double chi_square_tail(double x, double df);

struct KsResult {
  double statistic = 0.0;  // sup |F_n - F|
  double p_value = 1.0;
};
// One-sample Kolmogorov-Smirnov test against Uniform(0, 1); the p-value uses
// the Kolmogorov limit with Stephens' finite-sample correction.
KsResult ks_uniform(std::span<const double> sample);

// Smallest negative-sample value tau with #{neg > tau} / n <= fpr.
// Throws InsufficientEvidence with fewer than 20 negatives and
// ParameterError unless 0 < fpr < 1.
double empirical_threshold(std::span<const double> negatives, double fpr);

double median(std::vector<double> values);
double mean(std::span<const double> values);
double sample_variance(std::span<const double> values);

}  // namespace wmlab::stats
