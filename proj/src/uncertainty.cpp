// SPDX-License-Identifier: Apache-2.0

#include "goat/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace goat {

double word_uncertainty(const StepwiseLog& log, Span span) {
  if (span.begin >= span.end) throw ValidationError("empty span");
  if (span.end > log.size()) throw ValidationError("span exceeds log length");
  double sum = 0.0;
  for (size_t k = span.begin; k < span.end; ++k) sum += entropy(log.steps[k].dist);
  return sum / static_cast<double>(span.length());
}

double utterance_uncertainty(const StepwiseLog& log) {
  if (log.empty()) throw ValidationError("utterance_uncertainty of empty log");
  return word_uncertainty(log, Span{0, log.size()});
}

double uur(std::span<const double> trained, std::span<const double> baseline) {
  if (trained.size() != baseline.size()) throw ValidationError("uur: length mismatch");
  if (trained.empty()) throw ValidationError("uur: empty input");
  double sum = 0.0;
  for (size_t i = 0; i < trained.size(); ++i) {
    if (!(baseline[i] > 0.0)) {
      throw ValidationError("uur: baseline uncertainty must be positive (row " +
                            std::to_string(i) + ")");
    }
    sum += trained[i] / baseline[i];
  }
  return sum / static_cast<double>(trained.size());
}

namespace {

double mean(std::span<const double> xs) {
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

}  // namespace

double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ValidationError("pearson: length mismatch");
  if (xs.size() < 2) throw ValidationError("pearson: need at least two points");
  double mx = mean(xs), my = mean(ys);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw ValidationError("pearson: zero variance");
  double r = sxy / std::sqrt(sxx * syy);
  return std::clamp(r, -1.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> xs) {
  const size_t n = xs.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
    double r = 0.5 * static_cast<double>(i + j) + 1.0;  // mean of 1-based ranks i+1..j+1
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ValidationError("spearman: length mismatch");
  std::vector<double> rx = average_ranks(xs);
  std::vector<double> ry = average_ranks(ys);
  return pearson(rx, ry);
}

std::pair<double, double> linreg(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ValidationError("linreg: length mismatch");
  if (xs.size() < 2) throw ValidationError("linreg: need at least two points");
  double mx = mean(xs), my = mean(ys);
  double sxy = 0.0, sxx = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  if (sxx == 0.0) throw ValidationError("linreg: degenerate x");
  double slope = sxy / sxx;
  return {slope, my - slope * mx};
}

double permutation_p_value(std::span<const double> xs, std::span<const double> ys,
                           const CorrelationStatistic& statistic, int n_perm,
                           std::uint64_t seed) {
  if (n_perm < 100) throw ValidationError("permutation test needs n_perm >= 100");
  double observed = std::abs(statistic(xs, ys));
  std::vector<double> shuffled(ys.begin(), ys.end());
  Rng rng(mix64(seed));
  int at_least_as_extreme = 0;
  for (int p = 0; p < n_perm; ++p) {
    for (size_t i = shuffled.size(); i > 1; --i) {  // Fisher-Yates
      size_t j = static_cast<size_t>(rng.next_below(i));
      std::swap(shuffled[i - 1], shuffled[j]);
    }
    if (std::abs(statistic(xs, shuffled)) >= observed) ++at_least_as_extreme;
  }
  return static_cast<double>(at_least_as_extreme + 1) / static_cast<double>(n_perm + 1);
}

}  // namespace goat
