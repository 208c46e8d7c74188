// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Token / word / utterance uncertainty metrics, the utterance uncertainty
 * ratio, and the correlation statistics used by the analysis tooling.
 *
 * All functions here are pure; entropies are in nats and include the
 * terminal token's mass (next-token distributions span the full alphabet).
 */

#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "goat/core.hpp"

namespace goat {

/// Per-decoding-step record: the model's next-token distribution (before any
/// sampling filter) and the token actually sampled. One entry per emitted
/// token, the terminal step included.
struct StepwiseLog {
  struct Step {
    Distribution dist;
    Token sampled = 0;
  };
  std::vector<Step> steps;

  size_t size() const { return steps.size(); }
  bool empty() const { return steps.empty(); }
};

/// Half-open token span [begin, end).
struct Span {
  size_t begin = 0;
  size_t end = 0;

  size_t length() const { return end - begin; }
};

/// Mean token entropy over a half-open span. Throws on an empty or
/// out-of-range span.
double word_uncertainty(const StepwiseLog& log, Span span);

/// Mean token entropy over the whole sequence. Throws on an empty log.
double utterance_uncertainty(const StepwiseLog& log);

/// Mean of elementwise trained/baseline uncertainty ratios. Baseline entries
/// must be strictly positive; zero-uncertainty baselines are rejected rather
/// than guessed around.
double uur(std::span<const double> trained, std::span<const double> baseline);

/// Product-moment correlation. Requires length >= 2 and nonzero variance on
/// both sides.
double pearson(std::span<const double> xs, std::span<const double> ys);

/// Pearson over average-ranked data; ties receive their mean rank.
double spearman(std::span<const double> xs, std::span<const double> ys);

/// Least-squares line fit; returns (slope, intercept). Requires nonzero
/// x-variance.
std::pair<double, double> linreg(std::span<const double> xs, std::span<const double> ys);

using CorrelationStatistic =
    std::function<double(std::span<const double>, std::span<const double>)>;

/// Two-sided permutation p-value of `statistic` under shuffles of ys.
/// Uses the add-one estimator (count + 1) / (n_perm + 1); deterministic for
/// a fixed seed. n_perm must be >= 100.
double permutation_p_value(std::span<const double> xs, std::span<const double> ys,
                           const CorrelationStatistic& statistic, int n_perm,
                           std::uint64_t seed);

/// Average ranks (1-based) with ties assigned their mean rank.
std::vector<double> average_ranks(std::span<const double> xs);

}  // namespace goat
