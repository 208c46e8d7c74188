// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Core vocabulary, sequence, trajectory and finite-distribution types, plus
 * the log-space numerics the rest of the library is built on.
 *
 * All probability arithmetic in reward and loss paths happens in log space;
 * sequence-level products underflow doubles long before toy scales are
 * interesting, so raw-probability products are deliberately not offered.
 */

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace goat {

/// Input violated a documented precondition (bad value, bad shape).
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

/// Operation applied to an object in the wrong state (e.g. terminated prefix).
class StateError : public std::runtime_error {
 public:
  explicit StateError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Vocabulary and sequences
// ---------------------------------------------------------------------------

using Token = std::int32_t;

/// Discrete action alphabet: ordinary tokens 0..size-1 plus the terminal
/// token, which by convention is the last index (id == size).
struct Vocabulary {
  int size = 0;  ///< count of ordinary tokens, >= 2

  explicit Vocabulary(int ordinary_tokens);
  Vocabulary() = default;

  int terminal_id() const { return size; }
  int alphabet_size() const { return size + 1; }
  bool is_terminal(Token t) const { return t == size; }
  bool is_valid(Token t) const { return t >= 0 && t <= size; }
};

/// Token sequence; terminated iff the last token is the terminal token.
/// The terminal token appears at most once and only at the end.
struct TokenSequence {
  std::vector<Token> tokens;
  bool terminated = false;

  TokenSequence() = default;

  /// Builds a sequence from raw tokens, validating terminal placement.
  static TokenSequence from_tokens(std::vector<Token> tokens, const Vocabulary& vocab);
  /// Unterminated sequence of ordinary tokens.
  static TokenSequence prefix(std::vector<Token> ordinary, const Vocabulary& vocab);
  /// Terminated sequence: ordinary tokens followed by the terminal token.
  static TokenSequence terminal(std::vector<Token> ordinary, const Vocabulary& vocab);

  /// Number of ordinary tokens (terminal token excluded).
  int ordinary_length() const {
    return static_cast<int>(tokens.size()) - (terminated ? 1 : 0);
  }
  /// Number of tokens including the terminal token if present.
  int length() const { return static_cast<int>(tokens.size()); }

  void append(Token t, const Vocabulary& vocab);

  /// Ordinary tokens only (drops the trailing terminal token if present).
  std::span<const Token> ordinary() const {
    return std::span<const Token>(tokens.data(), static_cast<size_t>(ordinary_length()));
  }

  bool operator==(const TokenSequence& other) const = default;
};

/// Conditioning sequence. Empty tokens = unconditional mode. The terminal
/// token is forbidden.
struct Prompt {
  std::uint64_t id = 0;
  std::vector<Token> tokens;

  static Prompt make(std::uint64_t id, std::vector<Token> tokens, const Vocabulary& vocab);

  bool operator==(const Prompt& other) const = default;
};

/// One complete rollout: prompt, the terminated sequence it produced, and the
/// per-transition log-probabilities under the policy that generated it.
///
/// States are the prefixes of `terminal`: state t is the first t tokens, so
/// state 0 is empty, each state extends its predecessor by one token, and the
/// final state is terminated. Storing the terminal sequence keeps those
/// invariants true by construction.
struct Trajectory {
  Prompt prompt;
  TokenSequence terminal;            ///< terminated sequence
  std::vector<double> step_logprobs; ///< one entry per transition; forced terminal steps are 0

  /// Number of transitions (== terminal.length()).
  int num_transitions() const { return terminal.length(); }
  /// Prefix after t transitions.
  TokenSequence state(int t, const Vocabulary& vocab) const;

  void validate(const Vocabulary& vocab) const;
};

// ---------------------------------------------------------------------------
// Finite distributions
// ---------------------------------------------------------------------------

/// Probability vector over a finite support. Entries are non-negative and sum
/// to 1 within 1e-9. Labels are optional; when present they name the support
/// (used by the enumeration oracle to guard support mismatches).
struct Distribution {
  std::vector<double> probs;
  std::vector<std::string> labels;  ///< empty or same size as probs

  static Distribution from_probs(std::vector<double> probs,
                                 std::vector<std::string> labels = {});

  size_t size() const { return probs.size(); }
  void validate() const;
};

/// Tolerance used everywhere a distribution is checked for normalization.
inline constexpr double kNormalizationTolerance = 1e-9;

// ---------------------------------------------------------------------------
// Log-space numerics
// ---------------------------------------------------------------------------

/// Shannon entropy in nats, with the 0 * ln 0 = 0 convention.
/// Throws ValidationError for non-normalized input.
double entropy(const Distribution& d);

/// ln(sum exp(x_i)) via max-shift; exact for a single element.
/// Throws ValidationError on empty input.
double log_sum_exp(std::span<const double> xs);

/// Softmax in log space: probs_i = exp(x_i - log_sum_exp(xs)).
Distribution normalize_logs(std::span<const double> xs,
                            std::vector<std::string> labels = {});

// ---------------------------------------------------------------------------
// Deterministic RNG helpers
// ---------------------------------------------------------------------------

/// splitmix64: used to derive per-row / per-stream seeds from a base seed.
std::uint64_t mix64(std::uint64_t x);

/// Order-independent 64-bit hash of a context (prompt key + token suffix).
std::uint64_t hash_context(std::int64_t prompt_key, std::span<const Token> suffix);

/// Deterministic, platform-independent RNG (xoshiro-free: plain splitmix64
/// stream). Distribution draws are hand-rolled so identical seeds give
/// identical streams on every platform and standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53-bit resolution.
  double next_double();
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t next_below(std::uint64_t n);
  /// Standard normal via Box-Muller (one value per call, no caching).
  double next_gaussian();

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

/// Index drawn from a distribution by inverse-CDF walk.
size_t sample_index(const Distribution& d, Rng& rng);

}  // namespace goat
