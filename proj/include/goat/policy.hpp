// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Parameterized forward policies over next tokens, with exact
 * log-probabilities and analytic log-prob gradients.
 *
 * Two backends share one implementation:
 *  - tabular: rows keyed by (prompt id, full prefix). Exact, enumerable,
 *    used by the oracle checks.
 *  - k-gram: rows keyed by the last k tokens of the combined
 *    prompt-then-generated stream. Prompt identity is dropped so parameters
 *    are shared across prompts; this is what lets a trained policy
 *    generalize to held-out prompts.
 *
 * A policy never materializes its full (exponential) table. Unseen contexts
 * take their logits from a RowSource; the trained policy copies that row on
 * first touch, so training starts from the reference everywhere.
 */

#include <memory>
#include <unordered_map>
#include <vector>

#include "goat/core.hpp"

namespace goat {

enum class Backend { kTabular, kKGram };

/// Context a next-token distribution is conditioned on.
/// Tabular: prompt_key = prompt id, suffix = full generated prefix.
/// K-gram: prompt_key = kUnconditionalKey, suffix = last k tokens of
/// prompt tokens followed by the generated prefix.
struct PolicyContext {
  std::int64_t prompt_key = 0;
  std::vector<Token> suffix;

  bool operator==(const PolicyContext& other) const = default;
};

inline constexpr std::int64_t kUnconditionalKey = -1;

struct PolicyContextHash {
  size_t operator()(const PolicyContext& c) const {
    return static_cast<size_t>(hash_context(c.prompt_key, c.suffix));
  }
};

/// Deterministic generator of initial logits rows. Implementations must be
/// pure: the same context always yields the same row, independent of query
/// order, so lookups stay thread-safe and reproducible.
class RowSource {
 public:
  virtual ~RowSource() = default;
  /// Logits over the full alphabet (|C|+1 entries) for this context.
  virtual std::vector<double> row(const PolicyContext& ctx) const = 0;
};

/// I.i.d. zero-mean normal logits, derived from hash(seed, context) so the
/// row does not depend on when it is first queried.
class GaussianRowSource : public RowSource {
 public:
  GaussianRowSource(Vocabulary vocab, std::uint64_t seed, double sigma);
  std::vector<double> row(const PolicyContext& ctx) const override;

  std::uint64_t seed() const { return seed_; }
  double sigma() const { return sigma_; }

 private:
  Vocabulary vocab_;
  std::uint64_t seed_;
  double sigma_;
};

/// All-zero logits: uniform next-token distribution everywhere.
class UniformRowSource : public RowSource {
 public:
  explicit UniformRowSource(Vocabulary vocab) : vocab_(vocab) {}
  std::vector<double> row(const PolicyContext&) const override {
    return std::vector<double>(static_cast<size_t>(vocab_.alphabet_size()), 0.0);
  }

 private:
  Vocabulary vocab_;
};

/// Structural parameters of a policy (shared by reference and clone).
struct PolicySpec {
  Backend backend = Backend::kTabular;
  int context_order = 0;  ///< k for the k-gram backend; ignored for tabular
  int max_len = 0;        ///< cap on ordinary tokens before the terminal token is forced
  Vocabulary vocab;
};

/// Maps (prompt, prefix) to the context key under a spec's backend.
PolicyContext make_context(const PolicySpec& spec, const Prompt& prompt,
                           const TokenSequence& prefix);

/// Sparse gradient accumulator: context -> d(loss)/d(logits row).
using GradientTable =
    std::unordered_map<PolicyContext, std::vector<double>, PolicyContextHash>;

class ReferenceModel;

/// Softmax-logit policy over next tokens. Single-writer: mutation (gradient
/// application, lazy row insertion) must not race reads.
class ParametricPolicy {
 public:
  ParametricPolicy(PolicySpec spec, std::shared_ptr<const RowSource> base);

  const PolicySpec& spec() const { return spec_; }
  const Vocabulary& vocab() const { return spec_.vocab; }
  int max_len() const { return spec_.max_len; }

  /// Next-token distribution over the |C|+1 alphabet. At prefix length
  /// max_len the terminal token is forced with probability 1.
  /// Throws StateError for a terminated prefix.
  Distribution next_distribution(const Prompt& prompt, const TokenSequence& prefix) const;

  /// Log-probability of one transition. Forced terminal steps return 0.
  double step_log_prob(const Prompt& prompt, const TokenSequence& prefix, Token next) const;

  /// Sum of transition log-probs of a terminated sequence (terminal step
  /// included). Throws StateError if seq is not terminated.
  double log_prob_sequence(const Prompt& prompt, const TokenSequence& seq) const;

  /// grads[context][v] += weight * ([v == token] - p_v). Forced steps are a
  /// documented no-op; rows never touched stay absent from the table.
  void accumulate_grad_log_prob(const Prompt& prompt, const TokenSequence& prefix,
                                Token token, double weight, GradientTable& grads) const;

  /// Materializes (copying from the row source if needed) and returns the
  /// mutable logits row for a context. Trainer-only entry point.
  std::vector<double>& mutable_row(const PolicyContext& ctx);

  /// Logits row for a context; reads through to the row source without
  /// caching, so const access never mutates.
  std::vector<double> row(const PolicyContext& ctx) const;

  bool has_materialized_row(const PolicyContext& ctx) const {
    return rows_.find(ctx) != rows_.end();
  }
  const std::unordered_map<PolicyContext, std::vector<double>, PolicyContextHash>&
  materialized_rows() const {
    return rows_;
  }
  void set_row(const PolicyContext& ctx, std::vector<double> logits);

  std::shared_ptr<const RowSource> base() const { return base_; }

 private:
  PolicySpec spec_;
  std::shared_ptr<const RowSource> base_;
  std::unordered_map<PolicyContext, std::vector<double>, PolicyContextHash> rows_;
};

/// Frozen policy: computes rows on demand from its RowSource and never caches,
/// so concurrent reads need no synchronization.
class ReferenceModel {
 public:
  ReferenceModel(PolicySpec spec, std::shared_ptr<const RowSource> base)
      : policy_(std::move(spec), std::move(base)) {}

  const PolicySpec& spec() const { return policy_.spec(); }
  const Vocabulary& vocab() const { return policy_.vocab(); }
  int max_len() const { return policy_.max_len(); }

  Distribution next_distribution(const Prompt& prompt, const TokenSequence& prefix) const {
    return policy_.next_distribution(prompt, prefix);
  }
  double step_log_prob(const Prompt& prompt, const TokenSequence& prefix, Token next) const {
    return policy_.step_log_prob(prompt, prefix, next);
  }
  double log_prob_sequence(const Prompt& prompt, const TokenSequence& seq) const {
    return policy_.log_prob_sequence(prompt, seq);
  }
  std::shared_ptr<const RowSource> base() const { return policy_.base(); }

 private:
  ParametricPolicy policy_;  // holds no materialized rows
};

/// Trainable copy of the reference: identical distributions everywhere until
/// gradients are applied, and mutations never touch the reference.
ParametricPolicy clone_reference(const ReferenceModel& ref);

/// Softmax of a logits row.
Distribution softmax(std::span<const double> logits);

}  // namespace goat
