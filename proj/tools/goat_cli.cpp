// SPDX-License-Identifier: Apache-2.0

//
// goat — train, sample, analyze and benchmark subtrajectory-balance aligned
// token policies on enumerable toy instances.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 runtime invariant
// violation. Every error path prints "error[<code>]: <message>" to stderr.
//

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "goat/eval.hpp"
#include "goat/io.hpp"
#include "goat/trainer.hpp"
#include "goat/uncertainty.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitInvariant = 4;

struct CliError {
  int code;
  std::string tag;
  std::string message;
};

goat::SamplerConfig sampler_from_flags(const std::string& strategy, double temp, int top_k,
                                       double top_p, std::uint64_t seed) {
  goat::SamplerConfig cfg;
  cfg.strategy = goat::parse_strategy(strategy);
  cfg.decode_temperature = temp;
  if (top_k > 0) cfg.top_k = top_k;
  if (top_p > 0.0) cfg.top_p = top_p;
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

std::string format_sequence(const goat::TokenSequence& seq) {
  std::string line;
  for (goat::Token t : seq.ordinary()) {
    if (!line.empty()) line += ' ';
    line += std::to_string(t);
  }
  return line;
}

// ---------------------------------------------------------------------------
// train / ablate
// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& corpus_path,
              const std::string& out_dir, const std::string& ablation) {
  goat::RunConfig cfg = goat::load_run_config(config_path);
  if (!ablation.empty()) {
    if (ablation == "tb") {
      cfg.subtb.include_terminal_only = true;
    } else if (ablation == "no-rtd") {
      cfg.temperature.t_start = cfg.temperature.t_min;  // constant minimum temperature
    } else if (ablation == "no-lro") {
      cfg.lr_fixed = true;
    } else {
      throw goat::ConfigError("unknown ablation mode '" + ablation +
                              "' (expected tb, no-rtd or no-lro)");
    }
    cfg.validate();
  }
  std::string corpus_file = corpus_path.empty() ? cfg.corpus_path : corpus_path;
  std::vector<goat::CorpusExample> corpus;
  if (!corpus_file.empty()) {
    corpus = goat::parse_corpus(corpus_file, cfg.vocabulary());
  } else if (cfg.reference.kind == "gaussian") {
    // unconditional run: a single empty prompt
    corpus.push_back(goat::CorpusExample{goat::Prompt{}, std::nullopt});
  } else {
    throw goat::ConfigError("no corpus given (flag or config path)");
  }
  goat::RunSummary summary = goat::run_train(cfg, corpus, out_dir);
  std::cerr << "trained " << summary.steps << " steps, final loss " << summary.final_loss
            << ", " << static_cast<long long>(summary.tokens_per_sec) << " tokens/s, "
            << summary.collapse_events << " collapse-flagged steps\n";
  std::cout << (fs::path(out_dir) / "checkpoint.goat").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

int cmd_sample(const std::string& ckpt, const std::string& strategy, double temp, int top_k,
               double top_p, int n, std::uint64_t seed) {
  goat::LoadedRun run = goat::load_run(ckpt);
  goat::SamplerConfig sampler = sampler_from_flags(strategy, temp, top_k, top_p, seed);
  goat::Rng rng(goat::mix64(seed));
  goat::Prompt prompt;  // unconditional unless the run has a noisy-copy task
  std::vector<goat::Prompt> prompts;
  if (run.config.reference.kind == "noisy-copy") {
    prompts = goat::task_from_config(run.config).prompts;
  } else {
    prompts.push_back(prompt);
  }
  for (int i = 0; i < n; ++i) {
    const goat::Prompt& p = prompts[static_cast<size_t>(i) % prompts.size()];
    goat::TokenSequence seq = goat::generate(run.policy, p, sampler, rng);
    std::cout << format_sequence(seq) << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------------

int cmd_oracle(const std::string& ckpt, double temp, std::uint64_t budget) {
  goat::LoadedRun run = goat::load_run(ckpt);
  goat::RewardModel rm(run.reference, run.config.temperature);
  std::vector<goat::Prompt> prompts;
  if (run.config.reference.kind == "noisy-copy") {
    prompts = goat::task_from_config(run.config).prompts;
  } else {
    prompts.push_back(goat::Prompt{});
  }
  json out;
  double worst_tv = 0.0, worst_kl = 0.0, mean_tv = 0.0, mean_kl = 0.0;
  for (const goat::Prompt& p : prompts) {
    goat::Distribution policy_dist = goat::terminal_distribution(run.policy, p, budget);
    goat::Distribution target = goat::target_distribution(rm, p, temp, budget);
    double tv = goat::total_variation(policy_dist, target);
    double kl = goat::kl_divergence(policy_dist, target);
    mean_tv += tv;
    mean_kl += kl;
    worst_tv = std::max(worst_tv, tv);
    worst_kl = std::max(worst_kl, kl);
  }
  mean_tv /= static_cast<double>(prompts.size());
  mean_kl /= static_cast<double>(prompts.size());
  out["temperature"] = temp;
  out["prompts"] = prompts.size();
  out["mean_tv"] = mean_tv;
  out["mean_kl"] = mean_kl;
  out["max_tv"] = worst_tv;
  out["max_kl"] = worst_kl;
  std::cout << out.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

int cmd_analyze(const std::string& ckpt_a, const std::string& ckpt_b,
                const std::string& corpus_path, const std::string& out_dir, int n_samples,
                std::uint64_t seed, int n_perm) {
  goat::LoadedRun trained = goat::load_run(ckpt_a);
  goat::LoadedRun baseline = goat::load_run(ckpt_b);
  auto corpus = goat::parse_corpus(corpus_path, trained.config.vocabulary());
  if (corpus.empty()) throw goat::DataError("analysis corpus is empty");
  fs::create_directories(out_dir);

  goat::SamplerConfig sampler;  // RMS; uncertainty wants the raw model distribution
  std::vector<double> unc_trained, unc_baseline, err_trained;
  bool have_targets = true;
  std::ofstream csv(fs::path(out_dir) / "uncertainty.csv");
  std::ofstream jsonl(fs::path(out_dir) / "uncertainty.jsonl");
  csv << "prompt_id,uncertainty_trained,uncertainty_baseline,error_rate_trained\n";
  for (const goat::CorpusExample& ex : corpus) {
    // common random numbers: identical checkpoints give identical samples,
    // so self-analysis reports UUR of exactly 1
    goat::Rng rng_a(goat::mix64(seed ^ goat::mix64(ex.prompt.id + 1)));
    goat::Rng rng_b(goat::mix64(seed ^ goat::mix64(ex.prompt.id + 1)));
    double ua = 0.0, ub = 0.0, er = 0.0;
    for (int s = 0; s < n_samples; ++s) {
      goat::GenerationResult ga = goat::generate_logged(trained.policy, ex.prompt, sampler, rng_a);
      goat::GenerationResult gb =
          goat::generate_logged(baseline.policy, ex.prompt, sampler, rng_b);
      ua += goat::utterance_uncertainty(ga.log);
      ub += goat::utterance_uncertainty(gb.log);
      if (ex.target) {
        er += goat::error_rate(ga.sequence, *ex.target);
      } else {
        have_targets = false;
      }
    }
    ua /= n_samples;
    ub /= n_samples;
    er /= n_samples;
    unc_trained.push_back(ua);
    unc_baseline.push_back(ub);
    err_trained.push_back(er);
    csv << ex.prompt.id << ',' << ua << ',' << ub << ',' << (ex.target ? std::to_string(er) : "")
        << "\n";
    json row;
    row["prompt_id"] = ex.prompt.id;
    row["uncertainty_trained"] = ua;
    row["uncertainty_baseline"] = ub;
    if (ex.target) {
      row["error_rate_trained"] = er;
    } else {
      row["error_rate_trained"] = nullptr;
    }
    jsonl << row.dump() << "\n";
  }

  json out;
  out["n_prompts"] = corpus.size();
  out["n_samples_per_prompt"] = n_samples;
  out["uur"] = goat::uur(unc_trained, unc_baseline);
  if (have_targets) {
    auto pearson_stat = [](std::span<const double> a, std::span<const double> b) {
      return goat::pearson(a, b);
    };
    auto spearman_stat = [](std::span<const double> a, std::span<const double> b) {
      return goat::spearman(a, b);
    };
    json corr;
    corr["pearson"] = goat::pearson(unc_trained, err_trained);
    corr["pearson_p"] =
        goat::permutation_p_value(unc_trained, err_trained, pearson_stat, n_perm, seed);
    corr["spearman"] = goat::spearman(unc_trained, err_trained);
    corr["spearman_p"] =
        goat::permutation_p_value(unc_trained, err_trained, spearman_stat, n_perm, seed + 1);
    auto [slope, intercept] = goat::linreg(unc_trained, err_trained);
    corr["linreg_slope"] = slope;
    corr["linreg_intercept"] = intercept;
    out["uncertainty_vs_error"] = corr;
  }
  std::ofstream report(fs::path(out_dir) / "analysis.json");
  report << out.dump(2) << "\n";
  std::cout << out.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

int cmd_bench(const std::string& ckpt_a, const std::string& ckpt_b, const std::string& task_kind,
              double eps, int n_samples, std::uint64_t seed, const std::string& out_path,
              const std::string& strategy) {
  if (task_kind != "noisy-copy") {
    throw goat::ConfigError("unknown task '" + task_kind + "' (only noisy-copy is available)");
  }
  goat::LoadedRun trained = goat::load_run(ckpt_a);
  goat::LoadedRun baseline = goat::load_run(ckpt_b);
  if (trained.config.reference.kind != "noisy-copy") {
    throw goat::ConfigError("checkpoint was not trained against a noisy-copy reference");
  }
  if (eps >= 0.0 && std::abs(eps - trained.config.reference.eps) > 1e-12) {
    throw goat::ConfigError("--eps does not match the checkpoint's task (" +
                            std::to_string(trained.config.reference.eps) + ")");
  }
  goat::SyntheticTask task = goat::task_from_config(trained.config);
  goat::SamplerConfig sampler;
  sampler.strategy = goat::parse_strategy(strategy);
  goat::BenchmarkReport ra =
      goat::run_hallucination_benchmark(trained.policy, task, sampler, n_samples, seed);
  goat::BenchmarkReport rb =
      goat::run_hallucination_benchmark(baseline.policy, task, sampler, n_samples, seed);

  auto report_json = [](const goat::BenchmarkReport& r) {
    json j;
    j["mean_error_rate"] = r.mean_error_rate;
    j["mean_uncertainty"] = r.mean_uncertainty;
    j["exact_match_rate"] = r.exact_match_rate;
    j["n_samples_per_prompt"] = r.n_samples_per_prompt;
    return j;
  };
  json out;
  out["task"] = "noisy-copy";
  out["eps"] = task.eps;
  out["n_prompts"] = task.prompts.size();
  out["aligned"] = report_json(ra);
  out["baseline"] = report_json(rb);
  out["relative_error_change"] =
      rb.mean_error_rate > 0.0 ? (ra.mean_error_rate - rb.mean_error_rate) / rb.mean_error_rate
                               : 0.0;
  if (!out_path.empty()) {
    fs::path p(out_path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p);
    f << out.dump(2) << "\n";
    // per-prompt scatter rows (uncertainty vs error) next to the report
    std::ofstream csv(p.parent_path() / "bench_scatter.csv");
    csv << "prompt_id,model,mean_uncertainty,mean_error_rate,exact_match_rate\n";
    for (const auto& pr : ra.per_prompt) {
      csv << pr.prompt_id << ",aligned," << pr.mean_uncertainty << ',' << pr.mean_error_rate
          << ',' << pr.exact_match_rate << "\n";
    }
    for (const auto& pr : rb.per_prompt) {
      csv << pr.prompt_id << ",baseline," << pr.mean_uncertainty << ',' << pr.mean_error_rate
          << ',' << pr.exact_match_rate << "\n";
    }
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gen-corpus
// ---------------------------------------------------------------------------

int cmd_gen_corpus(const std::string& kind, int n, std::uint64_t seed, int vocab_size,
                   int prompt_len, int max_len, double eps, const std::string& out_path) {
  if (kind != "noisy-copy") {
    throw goat::ConfigError("unknown corpus kind '" + kind + "'");
  }
  goat::Vocabulary vocab(vocab_size);
  goat::SyntheticTask task =
      goat::make_noisy_copy_task(vocab, prompt_len, eps, n, max_len, seed);
  std::vector<goat::CorpusExample> examples;
  for (size_t i = 0; i < task.prompts.size(); ++i) {
    examples.push_back(goat::CorpusExample{task.prompts[i], task.targets[i]});
  }
  if (out_path.empty() || out_path == "-") {
    for (const auto& ex : examples) {
      std::cout << format_sequence(goat::TokenSequence::prefix(ex.prompt.tokens, vocab)) << '\t'
                << format_sequence(*ex.target) << "\n";
    }
  } else {
    goat::write_corpus(out_path, examples);
    std::cerr << "wrote " << examples.size() << " examples to " << out_path << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GFlowNet-style subtrajectory-balance alignment toolkit"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "run a training plan");
  std::string train_config, train_corpus, train_out = "out";
  train->add_option("--config", train_config, "JSON run config")->required();
  train->add_option("--corpus", train_corpus, "corpus file (overrides config path)");
  train->add_option("--out", train_out, "output directory");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "rerun train with an ablation switch");
  std::string ab_config, ab_corpus, ab_out = "out-ablate", ab_mode;
  ablate->add_option("--config", ab_config, "JSON run config")->required();
  ablate->add_option("--corpus", ab_corpus, "corpus file (overrides config path)");
  ablate->add_option("--out", ab_out, "output directory");
  ablate->add_option("--mode", ab_mode, "tb | no-rtd | no-lro")->required();

  // sample
  auto* sample = app.add_subcommand("sample", "generate sequences from a checkpoint");
  std::string s_ckpt, s_strategy = "rms";
  double s_temp = 1.0, s_top_p = 1.0;
  int s_top_k = 0, s_n = 10;
  std::uint64_t s_seed = 0;
  sample->add_option("--ckpt", s_ckpt, "checkpoint")->required();
  sample->add_option("--strategy", s_strategy, "rms | lt-rms | topk | topp | ras");
  sample->add_option("--temp", s_temp, "decode temperature");
  sample->add_option("--top-k", s_top_k, "top-k cutoff");
  sample->add_option("--top-p", s_top_p, "top-p mass");
  sample->add_option("--n", s_n, "number of sequences");
  sample->add_option("--seed", s_seed, "rng seed");

  // oracle
  auto* oracle = app.add_subcommand("oracle", "exact TV/KL against the sharpened target");
  std::string o_ckpt;
  double o_temp = 0.825;
  std::uint64_t o_budget = goat::kDefaultEnumerationBudget;
  oracle->add_option("--ckpt", o_ckpt, "checkpoint")->required();
  oracle->add_option("--temp", o_temp, "target temperature");
  oracle->add_option("--budget", o_budget, "enumeration budget");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "uncertainty and correlation analytics");
  std::string an_ckpt, an_baseline, an_corpus, an_out = "analysis";
  int an_samples = 4, an_perm = 10000;
  std::uint64_t an_seed = 0;
  analyze->add_option("--ckpt", an_ckpt, "trained checkpoint")->required();
  analyze->add_option("--baseline", an_baseline, "baseline checkpoint")->required();
  analyze->add_option("--corpus", an_corpus, "prompts to analyze")->required();
  analyze->add_option("--out", an_out, "output directory");
  analyze->add_option("--n-samples", an_samples, "generations per prompt");
  analyze->add_option("--n-perm", an_perm, "permutations for p-values");
  analyze->add_option("--seed", an_seed, "rng seed");

  // bench
  auto* bench = app.add_subcommand("bench", "hallucination benchmark report");
  std::string b_ckpt, b_baseline, b_task = "noisy-copy", b_out, b_strategy = "rms";
  double b_eps = -1.0;
  int b_samples = 8;
  std::uint64_t b_seed = 0;
  bench->add_option("--ckpt", b_ckpt, "aligned checkpoint")->required();
  bench->add_option("--baseline", b_baseline, "baseline checkpoint")->required();
  bench->add_option("--task", b_task, "benchmark task");
  bench->add_option("--eps", b_eps, "task noise rate (must match the checkpoint)");
  bench->add_option("--n-samples", b_samples, "generations per prompt");
  bench->add_option("--seed", b_seed, "rng seed");
  bench->add_option("--out", b_out, "report path (JSON)");
  bench->add_option("--strategy", b_strategy, "sampling strategy for the benchmark");

  // gen-corpus
  auto* gen = app.add_subcommand("gen-corpus", "write a synthetic corpus");
  std::string g_kind = "noisy-copy", g_out;
  int g_n = 100, g_vocab = 4, g_prompt_len = 4, g_max_len = 6;
  double g_eps = 0.1;
  std::uint64_t g_seed = 0;
  gen->add_option("--kind", g_kind, "corpus kind");
  gen->add_option("--n", g_n, "number of prompts");
  gen->add_option("--seed", g_seed, "rng seed");
  gen->add_option("--vocab", g_vocab, "vocabulary size");
  gen->add_option("--prompt-len", g_prompt_len, "prompt length");
  gen->add_option("--max-len", g_max_len, "max ordinary tokens per sequence");
  gen->add_option("--eps", g_eps, "mean noise rate");
  gen->add_option("--out", g_out, "output file ('-' for stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() != 0) std::cerr << "error[usage]: " << e.what() << "\n";
    return app.exit(e);
  }

  try {
    if (train->parsed()) return cmd_train(train_config, train_corpus, train_out, "");
    if (ablate->parsed()) return cmd_train(ab_config, ab_corpus, ab_out, ab_mode);
    if (sample->parsed())
      return cmd_sample(s_ckpt, s_strategy, s_temp, s_top_k, s_top_p, s_n, s_seed);
    if (oracle->parsed()) return cmd_oracle(o_ckpt, o_temp, o_budget);
    if (analyze->parsed())
      return cmd_analyze(an_ckpt, an_baseline, an_corpus, an_out, an_samples, an_seed, an_perm);
    if (bench->parsed())
      return cmd_bench(b_ckpt, b_baseline, b_task, b_eps, b_samples, b_seed, b_out, b_strategy);
    if (gen->parsed())
      return cmd_gen_corpus(g_kind, g_n, g_seed, g_vocab, g_prompt_len, g_max_len, g_eps, g_out);
  } catch (const goat::ConfigError& e) {
    std::cerr << "error[config]: " << e.what() << "\n";
    return kExitConfig;
  } catch (const goat::DataError& e) {
    std::cerr << "error[data]: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error[invariant]: " << e.what() << "\n";
    return kExitInvariant;
  }
  return 0;
}
