// SPDX-License-Identifier: Apache-2.0

#include "goat/eval.hpp"

#include <algorithm>
#include <cmath>

namespace goat {

std::uint64_t count_terminals(const Vocabulary& vocab, int max_len) {
  std::uint64_t total = 0;
  std::uint64_t level = 1;
  for (int l = 0; l <= max_len; ++l) {
    total += level;
    level *= static_cast<std::uint64_t>(vocab.size);
  }
  return total;
}

std::vector<TokenSequence> enumerate_terminals(const Vocabulary& vocab, int max_len,
                                               std::uint64_t budget) {
  std::uint64_t required = count_terminals(vocab, max_len);
  if (required > budget) {
    throw ValidationError("enumeration budget exceeded: need " + std::to_string(required) +
                          " terminals, budget is " + std::to_string(budget));
  }
  std::vector<TokenSequence> out;
  out.reserve(required);
  std::vector<Token> stack;
  // depth-first emission in lexicographic order of the ordinary tokens
  auto emit = [&](auto&& self) -> void {
    out.push_back(TokenSequence::terminal(stack, vocab));
    if (static_cast<int>(stack.size()) < max_len) {
      for (Token t = 0; t < vocab.size; ++t) {
        stack.push_back(t);
        self(self);
        stack.pop_back();
      }
    }
  };
  emit(emit);
  return out;
}

namespace {

std::string sequence_label(const TokenSequence& seq) {
  std::string s;
  for (Token t : seq.ordinary()) {
    if (!s.empty()) s += ' ';
    s += std::to_string(t);
  }
  return s;
}

}  // namespace

TerminalTable build_terminal_table(const ParametricPolicy& policy, const RewardModel& rm,
                                   const Prompt& prompt, double T, std::uint64_t budget) {
  if (!(T > 0.0) || T > 1.0) throw ValidationError("temperature must lie in (0, 1]");
  TerminalTable table;
  table.terminals = enumerate_terminals(policy.vocab(), policy.max_len(), budget);
  table.policy_log.reserve(table.terminals.size());
  table.reference_log.reserve(table.terminals.size());
  table.target_log.reserve(table.terminals.size());
  for (const TokenSequence& x : table.terminals) {
    table.policy_log.push_back(policy.log_prob_sequence(prompt, x));
    double ref = rm.reference().log_prob_sequence(prompt, x);
    table.reference_log.push_back(ref);
    table.target_log.push_back(ref / T);
  }
  return table;
}

Distribution terminal_distribution(const ParametricPolicy& policy, const Prompt& prompt,
                                   std::uint64_t budget) {
  std::vector<TokenSequence> terminals =
      enumerate_terminals(policy.vocab(), policy.max_len(), budget);
  std::vector<double> probs;
  std::vector<std::string> labels;
  probs.reserve(terminals.size());
  labels.reserve(terminals.size());
  for (const TokenSequence& x : terminals) {
    probs.push_back(std::exp(policy.log_prob_sequence(prompt, x)));
    labels.push_back(sequence_label(x));
  }
  return Distribution::from_probs(std::move(probs), std::move(labels));
}

Distribution target_distribution(const RewardModel& rm, const Prompt& prompt, double T,
                                 std::uint64_t budget) {
  if (!(T > 0.0) || T > 1.0) throw ValidationError("temperature must lie in (0, 1]");
  const ReferenceModel& ref = rm.reference();
  std::vector<TokenSequence> terminals =
      enumerate_terminals(ref.vocab(), ref.max_len(), budget);
  std::vector<double> logs;
  std::vector<std::string> labels;
  logs.reserve(terminals.size());
  labels.reserve(terminals.size());
  for (const TokenSequence& x : terminals) {
    logs.push_back(ref.log_prob_sequence(prompt, x) / T);
    labels.push_back(sequence_label(x));
  }
  return normalize_logs(logs, std::move(labels));
}

namespace {

void check_same_support(const Distribution& d1, const Distribution& d2) {
  if (d1.size() != d2.size()) throw ValidationError("distribution support size mismatch");
  if (!d1.labels.empty() && !d2.labels.empty() && d1.labels != d2.labels) {
    throw ValidationError("distribution support labels mismatch");
  }
}

}  // namespace

double total_variation(const Distribution& d1, const Distribution& d2) {
  check_same_support(d1, d2);
  double sum = 0.0;
  for (size_t i = 0; i < d1.size(); ++i) sum += std::abs(d1.probs[i] - d2.probs[i]);
  return 0.5 * sum;
}

double kl_divergence(const Distribution& d1, const Distribution& d2) {
  check_same_support(d1, d2);
  double kl = 0.0;
  for (size_t i = 0; i < d1.size(); ++i) {
    if (d1.probs[i] > 0.0) {
      if (!(d2.probs[i] > 0.0)) {
        throw ValidationError("KL undefined: d2 has zero mass where d1 does not");
      }
      kl += d1.probs[i] * std::log(d1.probs[i] / d2.probs[i]);
    }
  }
  return std::max(kl, 0.0);
}

int edit_distance(const TokenSequence& a, const TokenSequence& b) {
  std::span<const Token> x = a.ordinary();
  std::span<const Token> y = b.ordinary();
  const size_t n = x.size(), m = y.size();
  std::vector<int> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= m; ++j) {
      int sub = prev[j - 1] + (x[i - 1] == y[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double error_rate(const TokenSequence& hyp, const TokenSequence& ref) {
  if (ref.ordinary_length() == 0) throw ValidationError("error_rate: empty reference");
  return static_cast<double>(edit_distance(hyp, ref)) /
         static_cast<double>(ref.ordinary_length());
}

// ---------------------------------------------------------------------------
// Noisy-copy task
// ---------------------------------------------------------------------------

void SyntheticTask::validate() const {
  if (!(eps >= 0.0) || eps >= 0.5) throw ValidationError("noise rate must lie in [0, 0.5)");
  if (prompt_len < 1) throw ValidationError("prompt_len must be >= 1");
  if (max_len < prompt_len) throw ValidationError("max_len must admit a full copy");
  if (prompts.size() != targets.size() || prompts.size() != prompt_eps.size()) {
    throw ValidationError("task arrays out of sync");
  }
}

SyntheticTask make_noisy_copy_task(const Vocabulary& vocab, int prompt_len, double eps,
                                   int n_prompts, int max_len, std::uint64_t seed) {
  if (n_prompts < 1) throw ValidationError("need at least one prompt");
  SyntheticTask task;
  task.vocab = vocab;
  task.max_len = max_len;
  task.prompt_len = prompt_len;
  task.eps = eps;
  task.seed = seed;
  Rng rng(mix64(seed ^ 0x6e6f697379ULL));
  const double eps_cap = 0.499;
  for (int i = 0; i < n_prompts; ++i) {
    std::vector<Token> toks(static_cast<size_t>(prompt_len));
    for (Token& t : toks) {
      t = static_cast<Token>(rng.next_below(static_cast<std::uint64_t>(vocab.size)));
    }
    task.prompts.push_back(Prompt::make(static_cast<std::uint64_t>(i), toks, vocab));
    task.targets.push_back(TokenSequence::terminal(toks, vocab));
    double e = eps > 0.0 ? std::min(2.0 * eps * rng.next_double(), eps_cap) : 0.0;
    task.prompt_eps.push_back(e);
  }
  task.validate();
  return task;
}

NoisyCopyRowSource::NoisyCopyRowSource(SyntheticTask task) : task_(std::move(task)) {
  task_.validate();
}

std::vector<double> NoisyCopyRowSource::row(const PolicyContext& ctx) const {
  if (ctx.prompt_key < 0 ||
      static_cast<size_t>(ctx.prompt_key) >= task_.prompts.size()) {
    throw ValidationError("noisy-copy reference queried with unknown prompt id " +
                          std::to_string(ctx.prompt_key));
  }
  const Prompt& prompt = task_.prompts[static_cast<size_t>(ctx.prompt_key)];
  const double e = task_.prompt_eps[static_cast<size_t>(ctx.prompt_key)];
  const int alphabet = task_.vocab.alphabet_size();
  const size_t t = ctx.suffix.size();  // tabular context: suffix == full prefix
  Token correct = t < prompt.tokens.size() ? prompt.tokens[t]
                                           : static_cast<Token>(task_.vocab.terminal_id());
  std::vector<double> logits(static_cast<size_t>(alphabet));
  const double off = e / static_cast<double>(alphabet);
  for (int v = 0; v < alphabet; ++v) {
    double p = (v == correct) ? (1.0 - e) + off : off;
    logits[static_cast<size_t>(v)] =
        p > 0.0 ? std::log(p) : -745.0;  // ln(DBL_MIN)-ish floor for e == 0
  }
  return logits;
}

ReferenceModel make_noisy_copy_reference(const SyntheticTask& task) {
  PolicySpec spec;
  spec.backend = Backend::kTabular;
  spec.context_order = 0;
  spec.max_len = task.max_len;
  spec.vocab = task.vocab;
  return ReferenceModel(spec, std::make_shared<NoisyCopyRowSource>(task));
}

BenchmarkReport run_hallucination_benchmark(const ParametricPolicy& policy,
                                            const SyntheticTask& task,
                                            const SamplerConfig& sampler, int n_samples,
                                            std::uint64_t seed) {
  if (n_samples < 1) throw ValidationError("n_samples must be >= 1");
  if (policy.vocab().size != task.vocab.size) {
    throw ValidationError("policy and task must share a vocabulary");
  }
  BenchmarkReport report;
  report.n_samples_per_prompt = n_samples;
  for (size_t i = 0; i < task.prompts.size(); ++i) {
    const Prompt& prompt = task.prompts[i];
    Rng rng(mix64(seed ^ mix64(prompt.id + 1)));
    PromptReport pr;
    pr.prompt_id = prompt.id;
    for (int s = 0; s < n_samples; ++s) {
      GenerationResult gen = generate_logged(policy, prompt, sampler, rng);
      pr.mean_error_rate += error_rate(gen.sequence, task.targets[i]);
      pr.mean_uncertainty += utterance_uncertainty(gen.log);
      if (gen.sequence == task.targets[i]) pr.exact_match_rate += 1.0;
    }
    pr.mean_error_rate /= n_samples;
    pr.mean_uncertainty /= n_samples;
    pr.exact_match_rate /= n_samples;
    report.per_prompt.push_back(pr);
    report.mean_error_rate += pr.mean_error_rate;
    report.mean_uncertainty += pr.mean_uncertainty;
    report.exact_match_rate += pr.exact_match_rate;
  }
  const double n = static_cast<double>(task.prompts.size());
  report.mean_error_rate /= n;
  report.mean_uncertainty /= n;
  report.exact_match_rate /= n;
  return report;
}

}  // namespace goat
