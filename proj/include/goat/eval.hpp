// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Exact enumeration oracle for terminal distributions, divergence measures,
 * token edit-distance error rates, and the noisy-copy benchmark.
 *
 * Everything here is exact at enumerable scale: the terminal-state space of
 * (vocab, max_len) is walked in lexicographic order and scored per sequence,
 * so alignment claims are checked against ground truth rather than sampled
 * estimates.
 */

#include <cstdint>
#include <string>
#include <vector>

#include "goat/core.hpp"
#include "goat/policy.hpp"
#include "goat/reward.hpp"
#include "goat/sampling.hpp"

namespace goat {

inline constexpr std::uint64_t kDefaultEnumerationBudget = 1'000'000;

/// Number of terminated sequences with at most max_len ordinary tokens.
std::uint64_t count_terminals(const Vocabulary& vocab, int max_len);

/// All terminated sequences with <= max_len ordinary tokens, ordered
/// lexicographically by their ordinary tokens. Refuses (with the required
/// budget in the message) when the count exceeds the budget.
std::vector<TokenSequence> enumerate_terminals(
    const Vocabulary& vocab, int max_len,
    std::uint64_t budget = kDefaultEnumerationBudget);

/// Log-probabilities of every terminal under policy / reference / the
/// sharpened target at temperature T, aligned with enumerate_terminals
/// order. Scoring is independent per terminal; rows are always emitted in
/// lexicographic order, so concurrent scoring merges deterministically.
///
/// target_log is kept unnormalized (reference_log / T): at T = 1 it is
/// bitwise the reference column. target_distribution() applies the
/// normalization.
struct TerminalTable {
  std::vector<TokenSequence> terminals;
  std::vector<double> policy_log;     ///< ln P(x) under the policy
  std::vector<double> reference_log;  ///< ln p_ref(x)
  std::vector<double> target_log;     ///< reference_log / T, unnormalized
};

TerminalTable build_terminal_table(const ParametricPolicy& policy, const RewardModel& rm,
                                   const Prompt& prompt, double T,
                                   std::uint64_t budget = kDefaultEnumerationBudget);

/// exp(log_prob_sequence) per terminal; sums to 1 within tolerance.
Distribution terminal_distribution(const ParametricPolicy& policy, const Prompt& prompt,
                                   std::uint64_t budget = kDefaultEnumerationBudget);

/// The alignment target: normalize_logs of (1/T) * reference log-probs. At
/// T = 1 the log values are bitwise equal to the reference's.
Distribution target_distribution(const RewardModel& rm, const Prompt& prompt, double T,
                                 std::uint64_t budget = kDefaultEnumerationBudget);

/// Total variation distance, 0.5 * sum |p - q|. Supports must match.
double total_variation(const Distribution& d1, const Distribution& d2);

/// KL(d1 || d2); requires d2 > 0 wherever d1 > 0.
double kl_divergence(const Distribution& d1, const Distribution& d2);

/// Levenshtein distance over ordinary tokens (terminal token stripped).
int edit_distance(const TokenSequence& a, const TokenSequence& b);

/// edit_distance / reference ordinary length. Throws on an empty reference.
double error_rate(const TokenSequence& hyp, const TokenSequence& ref);

// ---------------------------------------------------------------------------
// Noisy-copy benchmark
// ---------------------------------------------------------------------------

/// Synthetic task whose ground truth is an exact copy of the prompt. The
/// reference policy emits the correct next token with probability
/// (1 - eps_i) + eps_i / (|C|+1) and spreads eps_i uniformly over the rest;
/// per-prompt noise eps_i is drawn uniformly from [0, 2*eps) (capped below
/// 0.5) so that uncertainty varies across prompts the way error does.
struct SyntheticTask {
  Vocabulary vocab;
  int max_len = 0;
  int prompt_len = 0;
  double eps = 0.0;  ///< mean noise rate, in [0, 0.5)
  std::uint64_t seed = 0;
  std::vector<Prompt> prompts;
  std::vector<TokenSequence> targets;   ///< terminated copies of the prompts
  std::vector<double> prompt_eps;       ///< per-prompt noise actually applied

  void validate() const;
};

SyntheticTask make_noisy_copy_task(const Vocabulary& vocab, int prompt_len, double eps,
                                   int n_prompts, int max_len, std::uint64_t seed);

/// Tabular row source realizing the noisy-copy reference for a task.
class NoisyCopyRowSource : public RowSource {
 public:
  explicit NoisyCopyRowSource(SyntheticTask task);
  std::vector<double> row(const PolicyContext& ctx) const override;

  const SyntheticTask& task() const { return task_; }

 private:
  SyntheticTask task_;
};

/// Frozen noisy-copy reference over the task's prompts.
ReferenceModel make_noisy_copy_reference(const SyntheticTask& task);

struct PromptReport {
  std::uint64_t prompt_id = 0;
  double mean_error_rate = 0.0;
  double mean_uncertainty = 0.0;
  double exact_match_rate = 0.0;
};

struct BenchmarkReport {
  std::vector<PromptReport> per_prompt;
  double mean_error_rate = 0.0;
  double mean_uncertainty = 0.0;
  double exact_match_rate = 0.0;
  int n_samples_per_prompt = 0;
};

/// Samples n_samples generations per prompt and scores them against the
/// task's targets. Deterministic for a fixed seed (one derived RNG stream
/// per prompt).
BenchmarkReport run_hallucination_benchmark(const ParametricPolicy& policy,
                                            const SyntheticTask& task,
                                            const SamplerConfig& sampler, int n_samples,
                                            std::uint64_t seed);

}  // namespace goat
