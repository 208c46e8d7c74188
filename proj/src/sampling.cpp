// SPDX-License-Identifier: Apache-2.0

#include "goat/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace goat {

void SamplerConfig::validate() const {
  if (!(decode_temperature > 0.0)) throw ValidationError("decode temperature must be > 0");
  if (top_k < 1) throw ValidationError("top_k must be >= 1");
  if (!(top_p > 0.0) || top_p > 1.0) throw ValidationError("top_p must lie in (0, 1]");
  if (rep_window < 1) throw ValidationError("rep_window must be >= 1");
}

SamplingStrategy parse_strategy(const std::string& name) {
  if (name == "rms") return SamplingStrategy::kRms;
  if (name == "lt-rms") return SamplingStrategy::kLtRms;
  if (name == "topk") return SamplingStrategy::kTopK;
  if (name == "topp") return SamplingStrategy::kTopP;
  if (name == "ras") return SamplingStrategy::kRas;
  throw ValidationError("unknown sampling strategy: " + name);
}

std::string strategy_name(SamplingStrategy s) {
  switch (s) {
    case SamplingStrategy::kRms: return "rms";
    case SamplingStrategy::kLtRms: return "lt-rms";
    case SamplingStrategy::kTopK: return "topk";
    case SamplingStrategy::kTopP: return "topp";
    case SamplingStrategy::kRas: return "ras";
  }
  throw ValidationError("unknown strategy enum");
}

Distribution apply_decode_temperature(const Distribution& d, double t) {
  if (!(t > 0.0)) throw ValidationError("decode temperature must be > 0");
  d.validate();
  std::vector<double> logs(d.probs.size());
  for (size_t i = 0; i < d.probs.size(); ++i) {
    logs[i] = d.probs[i] > 0.0 ? std::log(d.probs[i]) / t
                               : -std::numeric_limits<double>::infinity();
  }
  // -inf entries (zero probability) stay zero after renormalization
  double lse = log_sum_exp(logs);
  std::vector<double> probs(logs.size());
  for (size_t i = 0; i < logs.size(); ++i) {
    probs[i] = std::isfinite(logs[i]) ? std::exp(logs[i] - lse) : 0.0;
  }
  return Distribution::from_probs(std::move(probs), d.labels);
}

namespace {

/// Indices sorted by probability descending, ties by lower index.
std::vector<size_t> descending_order(const std::vector<double>& probs) {
  std::vector<size_t> order(probs.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return probs[a] > probs[b]; });
  return order;
}

Distribution keep_and_renormalize(const Distribution& d, const std::vector<bool>& keep) {
  double total = 0.0;
  for (size_t i = 0; i < d.probs.size(); ++i) {
    if (keep[i]) total += d.probs[i];
  }
  std::vector<double> probs(d.probs.size(), 0.0);
  for (size_t i = 0; i < d.probs.size(); ++i) {
    if (keep[i]) probs[i] = d.probs[i] / total;
  }
  return Distribution::from_probs(std::move(probs), d.labels);
}

}  // namespace

Distribution filter_top_k(const Distribution& d, int k) {
  if (k < 1) throw ValidationError("top_k must be >= 1");
  d.validate();
  if (static_cast<size_t>(k) >= d.probs.size()) return d;
  std::vector<size_t> order = descending_order(d.probs);
  std::vector<bool> keep(d.probs.size(), false);
  for (int i = 0; i < k; ++i) keep[order[static_cast<size_t>(i)]] = true;
  return keep_and_renormalize(d, keep);
}

Distribution filter_top_p(const Distribution& d, double p) {
  if (!(p > 0.0) || p > 1.0) throw ValidationError("top_p must lie in (0, 1]");
  d.validate();
  if (p == 1.0) return d;
  std::vector<size_t> order = descending_order(d.probs);
  std::vector<bool> keep(d.probs.size(), false);
  double cum = 0.0;
  for (size_t idx : order) {
    keep[idx] = true;
    cum += d.probs[idx];
    if (cum >= p) break;
  }
  return keep_and_renormalize(d, keep);
}

namespace {

Distribution filtered_distribution(const Distribution& raw, const SamplerConfig& cfg) {
  switch (cfg.strategy) {
    case SamplingStrategy::kRms: return raw;
    case SamplingStrategy::kLtRms: return apply_decode_temperature(raw, cfg.decode_temperature);
    case SamplingStrategy::kTopK: return filter_top_k(raw, cfg.top_k);
    case SamplingStrategy::kTopP: return filter_top_p(raw, cfg.top_p);
    case SamplingStrategy::kRas: return filter_top_p(filter_top_k(raw, cfg.top_k), cfg.top_p);
  }
  throw ValidationError("unknown strategy enum");
}

bool repeats_exceeded(const TokenSequence& prefix, Token candidate, int rep_window,
                      int rep_limit) {
  if (rep_limit <= 0) return false;
  int count = 0;
  const auto& toks = prefix.tokens;
  size_t start = toks.size() > static_cast<size_t>(rep_window)
                     ? toks.size() - static_cast<size_t>(rep_window)
                     : 0;
  for (size_t i = start; i < toks.size(); ++i) {
    if (toks[i] == candidate) ++count;
  }
  return count >= rep_limit;
}

}  // namespace

Token sample_next(const ParametricPolicy& policy, const Prompt& prompt,
                  const TokenSequence& prefix, const SamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  Distribution raw = policy.next_distribution(prompt, prefix);
  Distribution filtered = filtered_distribution(raw, cfg);
  Token tok = static_cast<Token>(sample_index(filtered, rng));
  if (cfg.strategy == SamplingStrategy::kRas &&
      repeats_exceeded(prefix, tok, cfg.rep_window, cfg.rep_limit)) {
    tok = static_cast<Token>(sample_index(raw, rng));  // single unfiltered redraw
  }
  return tok;
}

TokenSequence generate(const ParametricPolicy& policy, const Prompt& prompt,
                       const SamplerConfig& cfg, Rng& rng) {
  TokenSequence seq;
  while (!seq.terminated) {
    seq.append(sample_next(policy, prompt, seq, cfg, rng), policy.vocab());
  }
  return seq;
}

GenerationResult generate_logged(const ParametricPolicy& policy, const Prompt& prompt,
                                 const SamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  GenerationResult out;
  while (!out.sequence.terminated) {
    Distribution raw = policy.next_distribution(prompt, out.sequence);
    Distribution filtered = filtered_distribution(raw, cfg);
    Token tok = static_cast<Token>(sample_index(filtered, rng));
    if (cfg.strategy == SamplingStrategy::kRas &&
        repeats_exceeded(out.sequence, tok, cfg.rep_window, cfg.rep_limit)) {
      tok = static_cast<Token>(sample_index(raw, rng));
    }
    out.log.steps.push_back(StepwiseLog::Step{raw, tok});
    out.sequence.append(tok, policy.vocab());
  }
  return out;
}

}  // namespace goat
