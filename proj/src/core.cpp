// SPDX-License-Identifier: Apache-2.0

#include "goat/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace goat {

Vocabulary::Vocabulary(int ordinary_tokens) : size(ordinary_tokens) {
  if (ordinary_tokens < 2) {
    throw ValidationError("vocabulary size must be >= 2, got " +
                          std::to_string(ordinary_tokens));
  }
}

TokenSequence TokenSequence::from_tokens(std::vector<Token> tokens, const Vocabulary& vocab) {
  TokenSequence seq;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (!vocab.is_valid(tokens[i])) {
      throw ValidationError("token " + std::to_string(tokens[i]) +
                            " out of range for alphabet of " +
                            std::to_string(vocab.alphabet_size()));
    }
    if (vocab.is_terminal(tokens[i]) && i + 1 != tokens.size()) {
      throw ValidationError("terminal token may only appear at the end");
    }
  }
  seq.terminated = !tokens.empty() && vocab.is_terminal(tokens.back());
  seq.tokens = std::move(tokens);
  return seq;
}

TokenSequence TokenSequence::prefix(std::vector<Token> ordinary, const Vocabulary& vocab) {
  for (Token t : ordinary) {
    if (!vocab.is_valid(t) || vocab.is_terminal(t)) {
      throw ValidationError("prefix may contain ordinary tokens only");
    }
  }
  TokenSequence seq;
  seq.tokens = std::move(ordinary);
  seq.terminated = false;
  return seq;
}

TokenSequence TokenSequence::terminal(std::vector<Token> ordinary, const Vocabulary& vocab) {
  TokenSequence seq = prefix(std::move(ordinary), vocab);
  seq.tokens.push_back(vocab.terminal_id());
  seq.terminated = true;
  return seq;
}

void TokenSequence::append(Token t, const Vocabulary& vocab) {
  if (terminated) throw StateError("cannot append to a terminated sequence");
  if (!vocab.is_valid(t)) {
    throw ValidationError("token " + std::to_string(t) + " out of range");
  }
  tokens.push_back(t);
  terminated = vocab.is_terminal(t);
}

Prompt Prompt::make(std::uint64_t id, std::vector<Token> tokens, const Vocabulary& vocab) {
  for (Token t : tokens) {
    if (!vocab.is_valid(t) || vocab.is_terminal(t)) {
      throw ValidationError("prompt may not contain the terminal token");
    }
  }
  return Prompt{id, std::move(tokens)};
}

TokenSequence Trajectory::state(int t, const Vocabulary& vocab) const {
  if (t < 0 || t > num_transitions()) {
    throw ValidationError("state index out of range");
  }
  std::vector<Token> toks(terminal.tokens.begin(), terminal.tokens.begin() + t);
  return TokenSequence::from_tokens(std::move(toks), vocab);
}

void Trajectory::validate(const Vocabulary& vocab) const {
  if (!terminal.terminated) throw StateError("trajectory must end in a terminated sequence");
  if (step_logprobs.size() != static_cast<size_t>(terminal.length())) {
    throw ValidationError("step_logprobs length must equal transition count");
  }
  TokenSequence check = TokenSequence::from_tokens(terminal.tokens, vocab);
  (void)check;
}

Distribution Distribution::from_probs(std::vector<double> probs,
                                      std::vector<std::string> labels) {
  Distribution d;
  d.probs = std::move(probs);
  d.labels = std::move(labels);
  d.validate();
  return d;
}

void Distribution::validate() const {
  if (probs.empty()) throw ValidationError("distribution must have at least one entry");
  if (!labels.empty() && labels.size() != probs.size()) {
    throw ValidationError("labels must be empty or match the support size");
  }
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw ValidationError("distribution entries must be non-negative");
    sum += p;
  }
  if (std::abs(sum - 1.0) > kNormalizationTolerance) {
    throw ValidationError("distribution not normalized: sum = " + std::to_string(sum));
  }
}

double entropy(const Distribution& d) {
  d.validate();
  double h = 0.0;
  for (double p : d.probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::max(h, 0.0);
}

double log_sum_exp(std::span<const double> xs) {
  if (xs.empty()) throw ValidationError("log_sum_exp of empty input");
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::max(m, x);
  if (!std::isfinite(m)) return m;  // all -inf (or a stray +inf) propagate
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

Distribution normalize_logs(std::span<const double> xs, std::vector<std::string> labels) {
  double lse = log_sum_exp(xs);
  std::vector<double> probs(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) probs[i] = std::exp(xs[i] - lse);
  return Distribution::from_probs(std::move(probs), std::move(labels));
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_context(std::int64_t prompt_key, std::span<const Token> suffix) {
  std::uint64_t h = mix64(static_cast<std::uint64_t>(prompt_key) ^ 0x5bf03635ULL);
  for (Token t : suffix) {
    h = mix64(h ^ static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)));
  }
  return h;
}

std::uint64_t Rng::next_u64() {
  state_ += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::next_below(std::uint64_t n) {
  if (n == 0) throw ValidationError("next_below(0)");
  // rejection sampling on the top of the range keeps the draw unbiased
  std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                        (std::numeric_limits<std::uint64_t>::max() % n);
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return v % n;
}

double Rng::next_gaussian() {
  // Box-Muller; u1 nudged away from 0 so the log is finite.
  double u1 = next_double();
  double u2 = next_double();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

size_t sample_index(const Distribution& d, Rng& rng) {
  double u = rng.next_double();
  double cum = 0.0;
  for (size_t i = 0; i < d.probs.size(); ++i) {
    cum += d.probs[i];
    if (u < cum) return i;
  }
  // u landed in the rounding slack past the final cumulative sum
  for (size_t i = d.probs.size(); i-- > 0;) {
    if (d.probs[i] > 0.0) return i;
  }
  return d.probs.size() - 1;
}

}  // namespace goat
