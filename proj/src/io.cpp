// SPDX-License-Identifier: Apache-2.0

#include "goat/io.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace goat {

using nlohmann::json;

LRSchedule RunConfig::lr_schedule() const {
  LRSchedule s;
  s.warmup_steps = warmup_steps;
  s.total_lro_steps = total_lro_steps;
  s.lr_max = lr_base * lr_multiplier;
  s.lr_end = s.lr_max / lr_end_divisor;
  s.fixed = lr_fixed;
  return s;
}

TrainPlan RunConfig::train_plan() const {
  TrainPlan p;
  p.batch_size = batch_size;
  p.total_steps = total_steps;
  p.seed = seed;
  p.exploration = exploration;
  p.grad_clip = grad_clip;
  return p;
}

PolicySpec RunConfig::policy_spec() const {
  PolicySpec spec;
  spec.backend = backend == "kgram" ? Backend::kKGram : Backend::kTabular;
  spec.context_order = context_order;
  spec.max_len = max_len;
  spec.vocab = vocabulary();
  return spec;
}

void RunConfig::validate() const {
  try {
    if (vocab_size < 2) throw ValidationError("vocab_size must be >= 2");
    if (max_len < 1) throw ValidationError("max_len must be >= 1");
    if (backend != "tabular" && backend != "kgram") {
      throw ValidationError("backend must be 'tabular' or 'kgram'");
    }
    if (backend == "kgram" && context_order < 1) {
      throw ValidationError("kgram backend requires context_order >= 1");
    }
    if (reference.kind != "gaussian" && reference.kind != "noisy-copy") {
      throw ValidationError("reference.kind must be 'gaussian' or 'noisy-copy'");
    }
    if (reference.kind == "noisy-copy") {
      if (reference.n_prompts < 1) {
        throw ValidationError("noisy-copy reference requires n_prompts >= 1");
      }
      if (backend != "tabular") {
        throw ValidationError("noisy-copy reference requires the tabular backend");
      }
      if (!(reference.eps >= 0.0) || reference.eps >= 0.5) {
        throw ValidationError("noisy-copy eps must lie in [0, 0.5)");
      }
      if (reference.prompt_len < 1 || reference.prompt_len > max_len) {
        throw ValidationError("noisy-copy prompt_len must lie in [1, max_len]");
      }
    }
    if (!(lr_multiplier > 0.0) || !(lr_end_divisor >= 1.0) || !(lr_base > 0.0)) {
      throw ValidationError("lr_base and lr_multiplier must be positive, lr_end_divisor >= 1");
    }
    temperature.validate();
    lr_schedule().validate();
    train_plan().validate(lr_schedule());
    subtb.validate();
    sampler.validate();
    CollapseDetector check(collapse_window, collapse_ratio);
    (void)check;
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
}

namespace {

void reject_unknown_keys(const json& obj, const std::vector<std::string>& allowed,
                         const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
  }
}

template <typename T>
void read_field(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) {
    try {
      out = obj.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
  }
}

void apply_preset(RunConfig& cfg, const std::string& preset) {
  if (preset == "lro1500") {
    cfg.total_lro_steps = 1500;
    cfg.temperature.decay_steps = 1500;
    cfg.total_steps = 3500;
  } else if (preset == "lro2500") {
    cfg.total_lro_steps = 2500;
    cfg.temperature.decay_steps = 2500;
    cfg.total_steps = 3500;
  } else {
    throw ConfigError("unknown preset '" + preset + "' (expected lro1500 or lro2500)");
  }
}

}  // namespace

RunConfig parse_run_config(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  reject_unknown_keys(doc,
                      {"preset", "vocab_size", "max_len", "backend", "context_order", "seed",
                       "reference", "temperature", "lr", "train", "subtb", "collapse",
                       "sampler", "paths", "deterministic_metrics"},
                      "config");
  RunConfig cfg;
  if (doc.contains("preset")) apply_preset(cfg, doc.at("preset").get<std::string>());
  read_field(doc, "vocab_size", cfg.vocab_size);
  read_field(doc, "max_len", cfg.max_len);
  read_field(doc, "backend", cfg.backend);
  read_field(doc, "context_order", cfg.context_order);
  read_field(doc, "seed", cfg.seed);
  read_field(doc, "deterministic_metrics", cfg.deterministic_metrics);

  cfg.reference.seed = cfg.seed;
  if (doc.contains("reference")) {
    const json& r = doc.at("reference");
    reject_unknown_keys(r, {"kind", "sigma", "seed", "eps", "prompt_len", "n_prompts"},
                        "reference");
    read_field(r, "kind", cfg.reference.kind);
    read_field(r, "sigma", cfg.reference.sigma);
    read_field(r, "seed", cfg.reference.seed);
    read_field(r, "eps", cfg.reference.eps);
    read_field(r, "prompt_len", cfg.reference.prompt_len);
    read_field(r, "n_prompts", cfg.reference.n_prompts);
  }
  if (doc.contains("temperature")) {
    const json& t = doc.at("temperature");
    reject_unknown_keys(t, {"t_start", "t_min", "decay_steps"}, "temperature");
    read_field(t, "t_start", cfg.temperature.t_start);
    read_field(t, "t_min", cfg.temperature.t_min);
    read_field(t, "decay_steps", cfg.temperature.decay_steps);
  }
  if (doc.contains("lr")) {
    const json& l = doc.at("lr");
    reject_unknown_keys(
        l, {"base", "multiplier", "end_divisor", "warmup_steps", "total_lro_steps", "fixed"},
        "lr");
    read_field(l, "base", cfg.lr_base);
    read_field(l, "multiplier", cfg.lr_multiplier);
    read_field(l, "end_divisor", cfg.lr_end_divisor);
    read_field(l, "warmup_steps", cfg.warmup_steps);
    read_field(l, "total_lro_steps", cfg.total_lro_steps);
    read_field(l, "fixed", cfg.lr_fixed);
  }
  if (doc.contains("train")) {
    const json& t = doc.at("train");
    reject_unknown_keys(t, {"batch_size", "total_steps", "exploration", "grad_clip"}, "train");
    read_field(t, "batch_size", cfg.batch_size);
    read_field(t, "total_steps", cfg.total_steps);
    read_field(t, "exploration", cfg.exploration);
    read_field(t, "grad_clip", cfg.grad_clip);
  }
  if (doc.contains("subtb")) {
    const json& s = doc.at("subtb");
    reject_unknown_keys(s, {"lambda", "include_terminal_only"}, "subtb");
    read_field(s, "lambda", cfg.subtb.lambda);
    read_field(s, "include_terminal_only", cfg.subtb.include_terminal_only);
  }
  if (doc.contains("collapse")) {
    const json& c = doc.at("collapse");
    reject_unknown_keys(c, {"window", "ratio_threshold"}, "collapse");
    read_field(c, "window", cfg.collapse_window);
    read_field(c, "ratio_threshold", cfg.collapse_ratio);
  }
  if (doc.contains("sampler")) {
    const json& s = doc.at("sampler");
    reject_unknown_keys(
        s, {"strategy", "decode_temperature", "top_k", "top_p", "rep_window", "rep_limit", "seed"},
        "sampler");
    std::string strategy = strategy_name(cfg.sampler.strategy);
    read_field(s, "strategy", strategy);
    try {
      cfg.sampler.strategy = parse_strategy(strategy);
    } catch (const ValidationError& e) {
      throw ConfigError(e.what());
    }
    read_field(s, "decode_temperature", cfg.sampler.decode_temperature);
    read_field(s, "top_k", cfg.sampler.top_k);
    read_field(s, "top_p", cfg.sampler.top_p);
    read_field(s, "rep_window", cfg.sampler.rep_window);
    read_field(s, "rep_limit", cfg.sampler.rep_limit);
    read_field(s, "seed", cfg.sampler.seed);
  }
  if (doc.contains("paths")) {
    const json& p = doc.at("paths");
    reject_unknown_keys(p, {"corpus", "checkpoint", "metrics"}, "paths");
    read_field(p, "corpus", cfg.corpus_path);
    read_field(p, "checkpoint", cfg.checkpoint_path);
    read_field(p, "metrics", cfg.metrics_path);
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  return parse_run_config(doc);
}

json run_config_to_json(const RunConfig& cfg) {
  json doc;
  doc["vocab_size"] = cfg.vocab_size;
  doc["max_len"] = cfg.max_len;
  doc["backend"] = cfg.backend;
  doc["context_order"] = cfg.context_order;
  doc["seed"] = cfg.seed;
  doc["deterministic_metrics"] = cfg.deterministic_metrics;
  json ref;
  ref["kind"] = cfg.reference.kind;
  ref["sigma"] = cfg.reference.sigma;
  ref["seed"] = cfg.reference.seed;
  ref["eps"] = cfg.reference.eps;
  ref["prompt_len"] = cfg.reference.prompt_len;
  ref["n_prompts"] = cfg.reference.n_prompts;
  doc["reference"] = ref;
  doc["temperature"] = {{"t_start", cfg.temperature.t_start},
                        {"t_min", cfg.temperature.t_min},
                        {"decay_steps", cfg.temperature.decay_steps}};
  doc["lr"] = {{"base", cfg.lr_base},
               {"multiplier", cfg.lr_multiplier},
               {"end_divisor", cfg.lr_end_divisor},
               {"warmup_steps", cfg.warmup_steps},
               {"total_lro_steps", cfg.total_lro_steps},
               {"fixed", cfg.lr_fixed}};
  doc["train"] = {{"batch_size", cfg.batch_size},
                  {"total_steps", cfg.total_steps},
                  {"exploration", cfg.exploration},
                  {"grad_clip", cfg.grad_clip}};
  doc["subtb"] = {{"lambda", cfg.subtb.lambda},
                  {"include_terminal_only", cfg.subtb.include_terminal_only}};
  doc["collapse"] = {{"window", cfg.collapse_window}, {"ratio_threshold", cfg.collapse_ratio}};
  doc["sampler"] = {{"strategy", strategy_name(cfg.sampler.strategy)},
                    {"decode_temperature", cfg.sampler.decode_temperature},
                    {"top_k", cfg.sampler.top_k},
                    {"top_p", cfg.sampler.top_p},
                    {"rep_window", cfg.sampler.rep_window},
                    {"rep_limit", cfg.sampler.rep_limit},
                    {"seed", cfg.sampler.seed}};
  doc["paths"] = {{"corpus", cfg.corpus_path},
                  {"checkpoint", cfg.checkpoint_path},
                  {"metrics", cfg.metrics_path}};
  return doc;
}

std::string canonical_config_string(const RunConfig& cfg) {
  return run_config_to_json(cfg).dump();  // object keys are stored sorted
}

SyntheticTask task_from_config(const RunConfig& cfg) {
  if (cfg.reference.kind != "noisy-copy") {
    throw ConfigError("config does not describe a noisy-copy reference");
  }
  return make_noisy_copy_task(cfg.vocabulary(), cfg.reference.prompt_len, cfg.reference.eps,
                              cfg.reference.n_prompts, cfg.max_len, cfg.reference.seed);
}

std::shared_ptr<const ReferenceModel> build_reference(const RunConfig& cfg) {
  PolicySpec spec = cfg.policy_spec();
  if (cfg.reference.kind == "gaussian") {
    auto src =
        std::make_shared<GaussianRowSource>(spec.vocab, cfg.reference.seed, cfg.reference.sigma);
    return std::make_shared<ReferenceModel>(spec, src);
  }
  SyntheticTask task = task_from_config(cfg);
  return std::make_shared<ReferenceModel>(spec, std::make_shared<NoisyCopyRowSource>(task));
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

namespace {

[[noreturn]] void corpus_error(const std::filesystem::path& path, size_t line, size_t col,
                               const std::string& msg) {
  throw DataError(path.string() + ":" + std::to_string(line) + ":" + std::to_string(col) +
                  ": " + msg);
}

std::vector<Token> parse_token_run(const std::string& text, size_t base_col,
                                   const std::filesystem::path& path, size_t line,
                                   const Vocabulary& vocab, bool allow_terminal_at_end) {
  std::vector<Token> tokens;
  size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    if (i >= text.size()) break;
    size_t start = i;
    while (i < text.size() && text[i] != ' ') ++i;
    std::string word = text.substr(start, i - start);
    long value = 0;
    try {
      size_t used = 0;
      value = std::stol(word, &used);
      if (used != word.size()) throw std::invalid_argument(word);
    } catch (const std::exception&) {
      corpus_error(path, line, base_col + start + 1, "malformed integer '" + word + "'");
    }
    if (value < 0 || value > vocab.alphabet_size() - 1) {
      corpus_error(path, line, base_col + start + 1,
                   "token " + word + " out of range for vocabulary of " +
                       std::to_string(vocab.size));
    }
    tokens.push_back(static_cast<Token>(value));
  }
  for (size_t t = 0; t < tokens.size(); ++t) {
    if (vocab.is_terminal(tokens[t]) && !(allow_terminal_at_end && t + 1 == tokens.size())) {
      corpus_error(path, line, base_col + 1, "misplaced terminal token");
    }
  }
  return tokens;
}

}  // namespace

std::vector<CorpusExample> parse_corpus(const std::filesystem::path& path,
                                        const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file: " + path.string());
  std::vector<CorpusExample> out;
  std::string raw;
  size_t line_no = 0;
  std::uint64_t next_id = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    size_t first = raw.find_first_not_of(" \t\r");
    if (first == std::string::npos || raw[first] == '#') continue;
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();

    size_t tab = raw.find('\t');
    std::string prompt_part = tab == std::string::npos ? raw : raw.substr(0, tab);
    std::vector<Token> prompt_tokens =
        parse_token_run(prompt_part, 0, path, line_no, vocab, /*allow_terminal_at_end=*/false);

    CorpusExample ex;
    ex.prompt = Prompt::make(next_id++, std::move(prompt_tokens), vocab);
    if (tab != std::string::npos) {
      std::string target_part = raw.substr(tab + 1);
      std::vector<Token> target_tokens = parse_token_run(target_part, tab + 1, path, line_no,
                                                         vocab, /*allow_terminal_at_end=*/true);
      if (!target_tokens.empty() && vocab.is_terminal(target_tokens.back())) {
        target_tokens.pop_back();
      }
      ex.target = TokenSequence::terminal(std::move(target_tokens), vocab);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

void write_corpus(const std::filesystem::path& path,
                  const std::vector<CorpusExample>& examples) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open corpus file for writing: " + path.string());
  for (const CorpusExample& ex : examples) {
    std::string line;
    for (Token t : ex.prompt.tokens) {
      if (!line.empty()) line += ' ';
      line += std::to_string(t);
    }
    if (ex.target) {
      line += '\t';
      bool first = true;
      for (Token t : ex.target->ordinary()) {
        if (!first) line += ' ';
        line += std::to_string(t);
        first = false;
      }
    }
    out << line << '\n';
  }
}

std::vector<Prompt> corpus_prompts(const std::vector<CorpusExample>& examples) {
  std::vector<Prompt> prompts;
  prompts.reserve(examples.size());
  for (const CorpusExample& ex : examples) prompts.push_back(ex.prompt);
  return prompts;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'G', 'O', 'A', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kVersion = 1;

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    u64(bits);
  }
  void bytes(const void* data, size_t n) {
    const char* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void f64_vec(const std::vector<double>& v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> f64_vec() {
    std::uint64_t n = u64();
    if (n > remaining() / 8) {
      throw CheckpointError(CheckpointErrorKind::kTruncated,
                            "checkpoint truncated inside a float vector");
    }
    std::vector<double> v(n);
    for (auto& x : v) x = f64();
    return v;
  }
  size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(size_t n) {
    if (remaining() < n) {
      throw CheckpointError(CheckpointErrorKind::kTruncated, "checkpoint file is truncated");
    }
  }
  std::string data_;
  size_t pos_ = 0;
};

void write_context(Writer& w, const PolicyContext& ctx) {
  w.i64(ctx.prompt_key);
  w.u64(ctx.suffix.size());
  for (Token t : ctx.suffix) w.u64(static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)));
}

PolicyContext read_context(Reader& r) {
  PolicyContext ctx;
  ctx.prompt_key = r.i64();
  std::uint64_t n = r.u64();
  if (n > r.remaining() / 8) {
    throw CheckpointError(CheckpointErrorKind::kTruncated,
                          "checkpoint truncated inside a context");
  }
  ctx.suffix.resize(n);
  for (auto& t : ctx.suffix) t = static_cast<Token>(static_cast<std::uint32_t>(r.u64()));
  return ctx;
}

bool context_less(const PolicyContext& a, const PolicyContext& b) {
  if (a.prompt_key != b.prompt_key) return a.prompt_key < b.prompt_key;
  return std::lexicographical_compare(a.suffix.begin(), a.suffix.end(), b.suffix.begin(),
                                      b.suffix.end());
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (ckpt.version != kVersion) {
    throw CheckpointError(CheckpointErrorKind::kUnsupportedVersion,
                          "cannot save checkpoint version " + std::to_string(ckpt.version));
  }
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u8(ckpt.version);
  w.u64(ckpt.config_json.size());
  w.bytes(ckpt.config_json.data(), ckpt.config_json.size());
  w.u64(ckpt.step);
  w.u64(ckpt.rng_state);
  w.u64(ckpt.cursor);
  w.u8(ckpt.detector.baseline.has_value() ? 1 : 0);
  w.f64(ckpt.detector.baseline.value_or(0.0));
  w.f64_vec(ckpt.detector.pending);
  w.f64_vec(ckpt.detector.recent);

  auto policy_rows = ckpt.policy_rows;
  std::sort(policy_rows.begin(), policy_rows.end(),
            [](const auto& a, const auto& b) { return context_less(a.first, b.first); });
  w.u64(policy_rows.size());
  for (const auto& [ctx, logits] : policy_rows) {
    write_context(w, ctx);
    w.f64_vec(logits);
  }

  auto adam_rows = ckpt.adam_rows;
  std::sort(adam_rows.begin(), adam_rows.end(),
            [](const auto& a, const auto& b) { return context_less(a.first, b.first); });
  w.u64(adam_rows.size());
  for (const auto& [ctx, row] : adam_rows) {
    write_context(w, ctx);
    w.f64_vec(row.m);
    w.f64_vec(row.v);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
  out.write(w.str().data(), static_cast<std::streamsize>(w.str().size()));
  if (!out) throw DataError("short write to checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  Reader r(ss.str());

  std::string magic = r.bytes(sizeof kMagic);
  if (std::memcmp(magic.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError(CheckpointErrorKind::kBadMagic, "not a checkpoint file (bad magic)");
  }
  Checkpoint ckpt;
  ckpt.version = r.u8();
  if (ckpt.version != kVersion) {
    throw CheckpointError(CheckpointErrorKind::kUnsupportedVersion,
                          "unsupported checkpoint version " + std::to_string(ckpt.version));
  }
  std::uint64_t cfg_len = r.u64();
  ckpt.config_json = r.bytes(cfg_len);
  ckpt.step = r.u64();
  ckpt.rng_state = r.u64();
  ckpt.cursor = r.u64();
  bool has_baseline = r.u8() != 0;
  double baseline = r.f64();
  if (has_baseline) ckpt.detector.baseline = baseline;
  ckpt.detector.pending = r.f64_vec();
  ckpt.detector.recent = r.f64_vec();

  std::uint64_t n_rows = r.u64();
  ckpt.policy_rows.reserve(n_rows);
  for (std::uint64_t i = 0; i < n_rows; ++i) {
    PolicyContext ctx = read_context(r);
    std::vector<double> logits = r.f64_vec();
    ckpt.policy_rows.emplace_back(std::move(ctx), std::move(logits));
  }
  std::uint64_t n_adam = r.u64();
  ckpt.adam_rows.reserve(n_adam);
  for (std::uint64_t i = 0; i < n_adam; ++i) {
    PolicyContext ctx = read_context(r);
    Trainer::AdamRow row;
    row.m = r.f64_vec();
    row.v = r.f64_vec();
    ckpt.adam_rows.emplace_back(std::move(ctx), std::move(row));
  }
  if (r.remaining() != 0) {
    throw CheckpointError(CheckpointErrorKind::kCorrupt,
                          "trailing bytes after checkpoint payload");
  }
  return ckpt;
}

LoadedRun load_run(const std::filesystem::path& ckpt_path) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  json doc;
  try {
    doc = json::parse(ckpt.config_json);
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointErrorKind::kCorrupt,
                          "embedded config is not valid JSON: " + std::string(e.what()));
  }
  RunConfig cfg;
  try {
    cfg = parse_run_config(doc);
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointErrorKind::kCorrupt,
                          "embedded config is invalid: " + std::string(e.what()));
  }
  std::shared_ptr<const ReferenceModel> reference = build_reference(cfg);
  ParametricPolicy policy = clone_reference(*reference);
  const size_t width = static_cast<size_t>(cfg.vocabulary().alphabet_size());
  for (const auto& [ctx, logits] : ckpt.policy_rows) {
    if (logits.size() != width) {
      throw CheckpointError(CheckpointErrorKind::kCorrupt, "logits row has wrong width");
    }
    policy.set_row(ctx, logits);
  }
  for (const auto& [ctx, row] : ckpt.adam_rows) {
    if (row.m.size() != width || row.v.size() != width) {
      throw CheckpointError(CheckpointErrorKind::kCorrupt, "optimizer row has wrong width");
    }
  }
  return LoadedRun{std::move(cfg), ckpt.config_json, std::move(reference), std::move(policy),
                   std::move(ckpt)};
}

Checkpoint make_checkpoint(const RunConfig& cfg, const ParametricPolicy& policy,
                           const Trainer& trainer) {
  Checkpoint ckpt;
  ckpt.config_json = canonical_config_string(cfg);
  ckpt.step = static_cast<std::uint64_t>(trainer.step());
  ckpt.rng_state = trainer.rng_state();
  ckpt.cursor = trainer.corpus_cursor();
  ckpt.detector = trainer.detector().state();
  for (const auto& [ctx, logits] : policy.materialized_rows()) {
    ckpt.policy_rows.emplace_back(ctx, logits);
  }
  for (const auto& [ctx, row] : trainer.adam_rows()) {
    ckpt.adam_rows.emplace_back(ctx, row);
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

json metrics_to_json(const MetricsRecord& rec) {
  json row;
  row["step"] = rec.step;
  row["loss"] = rec.loss;
  row["reward_temperature"] = rec.reward_temperature;
  row["learning_rate"] = rec.learning_rate;
  row["mean_seq_len"] = rec.mean_seq_len;
  row["collapse"] = rec.collapse;
  if (rec.wall_time_ms) {
    row["wall_time_ms"] = *rec.wall_time_ms;
  } else {
    row["wall_time_ms"] = nullptr;
  }
  if (rec.tokens_per_sec) {
    row["tokens_per_sec"] = *rec.tokens_per_sec;
  } else {
    row["tokens_per_sec"] = nullptr;
  }
  return row;
}

// ---------------------------------------------------------------------------
// Train driver
// ---------------------------------------------------------------------------

RunSummary run_train(const RunConfig& cfg, const std::vector<CorpusExample>& corpus,
                     const std::filesystem::path& out_dir) {
  if (corpus.empty()) throw DataError("corpus is empty");
  std::filesystem::create_directories(out_dir);

  std::shared_ptr<const ReferenceModel> reference = build_reference(cfg);
  if (cfg.reference.kind == "noisy-copy") {
    // The reference's copy targets are rebuilt from config parameters; the
    // corpus must describe the same prompts or rewards would be nonsense.
    SyntheticTask task = task_from_config(cfg);
    if (corpus.size() > task.prompts.size()) {
      throw DataError("corpus has more prompts than the noisy-copy reference");
    }
    for (size_t i = 0; i < corpus.size(); ++i) {
      if (corpus[i].prompt.tokens != task.prompts[i].tokens) {
        throw DataError("corpus prompt " + std::to_string(i) +
                        " does not match the noisy-copy task (regenerate with gen-corpus)");
      }
    }
  }

  ParametricPolicy policy = clone_reference(*reference);
  RewardModel rm(reference, cfg.temperature);
  Trainer trainer(cfg.train_plan(), cfg.lr_schedule(), cfg.subtb,
                  CollapseDetector(cfg.collapse_window, cfg.collapse_ratio));
  std::vector<Prompt> prompts = corpus_prompts(corpus);

  save_checkpoint(out_dir / "baseline.goat", make_checkpoint(cfg, policy, trainer));

  std::ofstream metrics(out_dir / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw DataError("cannot open metrics file for writing");

  RunSummary summary;
  auto t0 = std::chrono::steady_clock::now();
  auto step_start = t0;
  for (int step = 0; step < cfg.total_steps; ++step) {
    StepMetrics sm = trainer.train_step(policy, rm, prompts);
    auto now = std::chrono::steady_clock::now();
    MetricsRecord rec;
    rec.step = sm.step;
    rec.loss = sm.loss;
    rec.reward_temperature = sm.reward_temperature;
    rec.learning_rate = sm.learning_rate;
    rec.mean_seq_len = sm.mean_seq_len;
    rec.collapse = sm.collapse;
    if (!cfg.deterministic_metrics) {
      double ms = std::chrono::duration<double, std::milli>(now - step_start).count();
      rec.wall_time_ms = ms;
      rec.tokens_per_sec = ms > 0.0 ? sm.tokens_generated / (ms / 1000.0) : 0.0;
    }
    step_start = now;
    metrics << metrics_to_json(rec).dump() << '\n';
    summary.final_loss = sm.loss;
    summary.total_tokens += static_cast<std::uint64_t>(sm.tokens_generated);
    if (sm.collapse) ++summary.collapse_events;
  }
  metrics.close();

  summary.steps = cfg.total_steps;
  summary.elapsed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  summary.tokens_per_sec =
      summary.elapsed_seconds > 0.0 ? summary.total_tokens / summary.elapsed_seconds : 0.0;

  save_checkpoint(out_dir / "checkpoint.goat", make_checkpoint(cfg, policy, trainer));

  json sj;
  sj["steps"] = summary.steps;
  sj["final_loss"] = summary.final_loss;
  sj["total_tokens"] = summary.total_tokens;
  sj["elapsed_seconds"] = summary.elapsed_seconds;
  sj["tokens_per_sec"] = summary.tokens_per_sec;
  sj["collapse_events"] = summary.collapse_events;
  std::ofstream sf(out_dir / "summary.json", std::ios::trunc);
  sf << sj.dump(2) << '\n';
  return summary;
}

}  // namespace goat
