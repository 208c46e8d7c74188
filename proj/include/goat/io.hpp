// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Operational shell: run configuration, corpus / checkpoint / metrics file
 * formats, and the end-to-end train driver the CLI wraps.
 *
 * Formats:
 *  - config: one JSON document, exhaustively validated (unknown keys are
 *    rejected at every level).
 *  - corpus: one example per line, "prompt ids<TAB>target ids"; '#' lines
 *    are comments.
 *  - checkpoint: binary, magic "GOATCKPT" + 1-byte version; little-endian
 *    64-bit payloads with length prefixes; rows stored in canonical order so
 *    save -> load -> save is byte-identical.
 *  - metrics: JSONL, one MetricsRecord per training step.
 */

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "goat/core.hpp"
#include "goat/eval.hpp"
#include "goat/policy.hpp"
#include "goat/reward.hpp"
#include "goat/sampling.hpp"
#include "goat/trainer.hpp"

#include <nlohmann/json_fwd.hpp>

namespace goat {

/// Bad configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Bad input data: corpus or checkpoint files (CLI exit code 3).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

enum class CheckpointErrorKind { kBadMagic, kUnsupportedVersion, kTruncated, kCorrupt };

class CheckpointError : public DataError {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what)
      : DataError(what), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct ReferenceSpec {
  std::string kind = "gaussian";  ///< "gaussian" or "noisy-copy"
  std::uint64_t seed = 0;
  // gaussian
  double sigma = 1.0;
  // noisy-copy
  double eps = 0.1;
  int prompt_len = 4;
  int n_prompts = 0;
};

struct RunConfig {
  int vocab_size = 4;
  int max_len = 5;
  std::string backend = "tabular";  ///< "tabular" or "kgram"
  int context_order = 0;
  std::uint64_t seed = 0;
  ReferenceSpec reference;
  TemperatureSchedule temperature;
  // lr_base is the production-scale rate; toy tabular runs scale it by
  // lr_multiplier. The floor is the effective maximum divided by
  // lr_end_divisor.
  double lr_base = 1e-5;
  double lr_multiplier = 100.0;
  double lr_end_divisor = 100.0;
  int warmup_steps = 20;
  int total_lro_steps = 1500;
  bool lr_fixed = false;
  int batch_size = 16;
  int total_steps = 3500;
  double exploration = 0.0;
  double grad_clip = 0.0;
  SubTBConfig subtb;
  int collapse_window = 50;
  double collapse_ratio = 0.5;
  SamplerConfig sampler;
  std::string corpus_path;
  std::string checkpoint_path;
  std::string metrics_path;
  bool deterministic_metrics = true;

  Vocabulary vocabulary() const { return Vocabulary(vocab_size); }
  LRSchedule lr_schedule() const;
  TrainPlan train_plan() const;
  PolicySpec policy_spec() const;
  void validate() const;
};

/// Parses and validates a config document. `preset` ("lro1500"/"lro2500")
/// applies the stock schedule lengths before explicit keys override them.
RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json run_config_to_json(const RunConfig& cfg);
/// Canonical (sorted-key) dump used in checkpoints.
std::string canonical_config_string(const RunConfig& cfg);

/// Builds the frozen reference named by the config. A noisy-copy reference
/// reconstructs its task from the config parameters alone.
std::shared_ptr<const ReferenceModel> build_reference(const RunConfig& cfg);
/// The synthetic task behind a noisy-copy reference config.
SyntheticTask task_from_config(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

struct CorpusExample {
  Prompt prompt;
  std::optional<TokenSequence> target;
};

/// Parses "prompt ids [TAB target ids]" lines; '#' lines and blank lines are
/// skipped. Prompt ids are assigned in file order. Failures report line and
/// column. Throws DataError.
std::vector<CorpusExample> parse_corpus(const std::filesystem::path& path,
                                        const Vocabulary& vocab);
void write_corpus(const std::filesystem::path& path,
                  const std::vector<CorpusExample>& examples);

std::vector<Prompt> corpus_prompts(const std::vector<CorpusExample>& examples);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
  std::uint8_t version = 1;
  std::string config_json;  ///< canonical config snapshot
  std::uint64_t step = 0;
  std::uint64_t rng_state = 0;
  std::uint64_t cursor = 0;
  CollapseDetector::State detector;
  std::vector<std::pair<PolicyContext, std::vector<double>>> policy_rows;
  std::vector<std::pair<PolicyContext, Trainer::AdamRow>> adam_rows;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// A checkpoint plus everything rebuilt from its config snapshot.
struct LoadedRun {
  RunConfig config;
  std::string config_json;
  std::shared_ptr<const ReferenceModel> reference;
  ParametricPolicy policy;
  Checkpoint checkpoint;
};
LoadedRun load_run(const std::filesystem::path& ckpt_path);

Checkpoint make_checkpoint(const RunConfig& cfg, const ParametricPolicy& policy,
                           const Trainer& trainer);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// One metrics.jsonl row. The timing fields are measured only when the run
/// opts out of deterministic metrics; the deterministic default writes null
/// so identically-seeded runs emit byte-identical files.
struct MetricsRecord {
  int step = 0;
  double loss = 0.0;
  double reward_temperature = 1.0;
  double learning_rate = 0.0;
  double mean_seq_len = 0.0;
  bool collapse = false;
  std::optional<double> wall_time_ms;
  std::optional<double> tokens_per_sec;
};

nlohmann::json metrics_to_json(const MetricsRecord& rec);

// ---------------------------------------------------------------------------
// Train driver
// ---------------------------------------------------------------------------

struct RunSummary {
  int steps = 0;
  double final_loss = 0.0;
  std::uint64_t total_tokens = 0;
  double elapsed_seconds = 0.0;
  double tokens_per_sec = 0.0;
  int collapse_events = 0;
};

/// Full training run: writes metrics.jsonl, a step-0 baseline checkpoint and
/// the final checkpoint into out_dir. Returns throughput for operator logs.
/// One call is one single-writer run; concurrent runs must target distinct
/// output directories (no cross-process locking).
RunSummary run_train(const RunConfig& cfg, const std::vector<CorpusExample>& corpus,
                     const std::filesystem::path& out_dir);

}  // namespace goat
