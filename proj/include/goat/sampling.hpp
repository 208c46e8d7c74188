// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Decoding strategies: random multinomial (RMS), low-temperature RMS, top-k,
 * top-p, and repetition-aware sampling (RAS, top-k then top-p with a
 * repetition guard).
 *
 * Filters break ties by lower token index so draws are reproducible across
 * platforms. Each sampler owns its RNG stream; generation is pure over
 * (policy read, rng).
 */

#include "goat/core.hpp"
#include "goat/policy.hpp"
#include "goat/uncertainty.hpp"

namespace goat {

enum class SamplingStrategy { kRms, kLtRms, kTopK, kTopP, kRas };

struct SamplerConfig {
  SamplingStrategy strategy = SamplingStrategy::kRms;
  double decode_temperature = 1.0;  ///< decoding-time temperature, not the reward T
  int top_k = 1;
  double top_p = 1.0;
  int rep_window = 10;  ///< RAS: how far back to look for repeats
  int rep_limit = 3;    ///< RAS: repeats allowed before the redraw; <= 0 disables the guard
  std::uint64_t seed = 0;

  void validate() const;
};

SamplingStrategy parse_strategy(const std::string& name);
std::string strategy_name(SamplingStrategy s);

/// probs_i proportional to p_i^(1/t), renormalized. Computed in log space.
/// Throws ValidationError for t <= 0.
Distribution apply_decode_temperature(const Distribution& d, double t);

/// Keeps the k largest entries (ties to the lower index), renormalizes.
Distribution filter_top_k(const Distribution& d, int k);

/// Keeps the smallest descending-sorted prefix with cumulative mass >= p
/// (at least one entry; ties to the lower index), renormalizes.
Distribution filter_top_p(const Distribution& d, double p);

/// Draws the next token from the strategy-filtered distribution. Under RAS,
/// a draw that would extend a token already repeated rep_limit or more times
/// within the last rep_window positions is redrawn once from the unfiltered
/// multinomial.
Token sample_next(const ParametricPolicy& policy, const Prompt& prompt,
                  const TokenSequence& prefix, const SamplerConfig& cfg, Rng& rng);

/// Rolls sample_next from the empty prefix until the terminal token (forced
/// at max_len). Always returns a terminated sequence.
TokenSequence generate(const ParametricPolicy& policy, const Prompt& prompt,
                       const SamplerConfig& cfg, Rng& rng);

/// As generate(), but also records the model's unfiltered next-token
/// distribution and the sampled token at every step.
struct GenerationResult {
  TokenSequence sequence;
  StepwiseLog log;
};
GenerationResult generate_logged(const ParametricPolicy& policy, const Prompt& prompt,
                                 const SamplerConfig& cfg, Rng& rng);

}  // namespace goat
