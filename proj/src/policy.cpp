// SPDX-License-Identifier: Apache-2.0

#include "goat/policy.hpp"

#include <algorithm>
#include <cmath>

namespace goat {

GaussianRowSource::GaussianRowSource(Vocabulary vocab, std::uint64_t seed, double sigma)
    : vocab_(vocab), seed_(seed), sigma_(sigma) {
  if (sigma < 0.0) throw ValidationError("reference sigma must be non-negative");
}

std::vector<double> GaussianRowSource::row(const PolicyContext& ctx) const {
  Rng rng(mix64(seed_ ^ hash_context(ctx.prompt_key, ctx.suffix)));
  std::vector<double> logits(static_cast<size_t>(vocab_.alphabet_size()));
  for (double& v : logits) v = sigma_ * rng.next_gaussian();
  return logits;
}

PolicyContext make_context(const PolicySpec& spec, const Prompt& prompt,
                           const TokenSequence& prefix) {
  PolicyContext ctx;
  if (spec.backend == Backend::kTabular) {
    ctx.prompt_key = static_cast<std::int64_t>(prompt.id);
    ctx.suffix.assign(prefix.tokens.begin(), prefix.tokens.end());
    return ctx;
  }
  // k-gram: last k tokens of prompt ++ prefix, prompt identity dropped
  ctx.prompt_key = kUnconditionalKey;
  const size_t k = static_cast<size_t>(spec.context_order);
  std::vector<Token> combined;
  combined.reserve(prompt.tokens.size() + prefix.tokens.size());
  combined.insert(combined.end(), prompt.tokens.begin(), prompt.tokens.end());
  combined.insert(combined.end(), prefix.tokens.begin(), prefix.tokens.end());
  const size_t start = combined.size() > k ? combined.size() - k : 0;
  ctx.suffix.assign(combined.begin() + static_cast<std::ptrdiff_t>(start), combined.end());
  return ctx;
}

Distribution softmax(std::span<const double> logits) {
  double lse = log_sum_exp(logits);
  std::vector<double> probs(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) probs[i] = std::exp(logits[i] - lse);
  return Distribution::from_probs(std::move(probs));
}

ParametricPolicy::ParametricPolicy(PolicySpec spec, std::shared_ptr<const RowSource> base)
    : spec_(std::move(spec)), base_(std::move(base)) {
  if (spec_.max_len < 0) throw ValidationError("max_len must be non-negative");
  if (spec_.backend == Backend::kKGram && spec_.context_order < 1) {
    throw ValidationError("k-gram backend requires context_order >= 1");
  }
}

std::vector<double> ParametricPolicy::row(const PolicyContext& ctx) const {
  auto it = rows_.find(ctx);
  if (it != rows_.end()) return it->second;
  return base_->row(ctx);
}

std::vector<double>& ParametricPolicy::mutable_row(const PolicyContext& ctx) {
  auto it = rows_.find(ctx);
  if (it != rows_.end()) return it->second;
  return rows_.emplace(ctx, base_->row(ctx)).first->second;
}

void ParametricPolicy::set_row(const PolicyContext& ctx, std::vector<double> logits) {
  if (logits.size() != static_cast<size_t>(spec_.vocab.alphabet_size())) {
    throw ValidationError("logits row has wrong width");
  }
  rows_[ctx] = std::move(logits);
}

Distribution ParametricPolicy::next_distribution(const Prompt& prompt,
                                                 const TokenSequence& prefix) const {
  if (prefix.terminated) throw StateError("next_distribution on a terminated prefix");
  if (prefix.ordinary_length() > spec_.max_len) {
    throw StateError("prefix longer than max_len");
  }
  if (prefix.ordinary_length() == spec_.max_len) {
    std::vector<double> one_hot(static_cast<size_t>(spec_.vocab.alphabet_size()), 0.0);
    one_hot[static_cast<size_t>(spec_.vocab.terminal_id())] = 1.0;
    return Distribution::from_probs(std::move(one_hot));
  }
  return softmax(row(make_context(spec_, prompt, prefix)));
}

double ParametricPolicy::step_log_prob(const Prompt& prompt, const TokenSequence& prefix,
                                       Token next) const {
  if (prefix.terminated) throw StateError("step_log_prob on a terminated prefix");
  if (!spec_.vocab.is_valid(next)) throw ValidationError("invalid next token");
  if (prefix.ordinary_length() == spec_.max_len) {
    if (!spec_.vocab.is_terminal(next)) {
      throw StateError("only the terminal token is legal at max_len");
    }
    return 0.0;  // forced step
  }
  std::vector<double> logits = row(make_context(spec_, prompt, prefix));
  return logits[static_cast<size_t>(next)] - log_sum_exp(logits);
}

double ParametricPolicy::log_prob_sequence(const Prompt& prompt,
                                           const TokenSequence& seq) const {
  if (!seq.terminated) throw StateError("log_prob_sequence requires a terminated sequence");
  if (seq.ordinary_length() > spec_.max_len) {
    throw StateError("sequence longer than max_len allows");
  }
  double total = 0.0;
  TokenSequence prefix;
  for (Token t : seq.tokens) {
    total += step_log_prob(prompt, prefix, t);
    if (!spec_.vocab.is_terminal(t)) prefix.append(t, spec_.vocab);
  }
  return total;
}

void ParametricPolicy::accumulate_grad_log_prob(const Prompt& prompt,
                                                const TokenSequence& prefix, Token token,
                                                double weight, GradientTable& grads) const {
  if (prefix.terminated) throw StateError("gradient step on a terminated prefix");
  if (!spec_.vocab.is_valid(token)) throw ValidationError("invalid token");
  if (prefix.ordinary_length() == spec_.max_len) return;  // forced step: no parameters
  if (weight == 0.0) return;

  PolicyContext ctx = make_context(spec_, prompt, prefix);
  std::vector<double> logits = row(ctx);
  double lse = log_sum_exp(logits);

  auto it = grads.find(ctx);
  if (it == grads.end()) {
    it = grads.emplace(ctx, std::vector<double>(logits.size(), 0.0)).first;
  }
  std::vector<double>& g = it->second;
  for (size_t v = 0; v < logits.size(); ++v) {
    double p_v = std::exp(logits[v] - lse);
    double indicator = (static_cast<Token>(v) == token) ? 1.0 : 0.0;
    g[v] += weight * (indicator - p_v);
  }
}

ParametricPolicy clone_reference(const ReferenceModel& ref) {
  return ParametricPolicy(ref.spec(), ref.base());
}

}  // namespace goat
