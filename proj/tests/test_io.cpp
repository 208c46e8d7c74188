// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <unistd.h>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "goat/io.hpp"

using namespace goat;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("goat_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig tiny_config() {
  json doc;
  doc["vocab_size"] = 3;
  doc["max_len"] = 3;
  doc["seed"] = 11;
  doc["temperature"] = {{"decay_steps", 40}};
  doc["lr"] = {{"warmup_steps", 5}, {"total_lro_steps", 40}, {"multiplier", 100.0}};
  doc["train"] = {{"batch_size", 4}, {"total_steps", 60}};
  return parse_run_config(doc);
}

}  // namespace

TEST_CASE("corpus parsing") {
  TempDir dir;
  Vocabulary vocab(6);
  fs::path file = dir.path / "corpus.txt";

  SUBCASE("basic line with target") {
    std::ofstream(file) << "1 2 3\t4 5\n";
    auto examples = parse_corpus(file, vocab);
    REQUIRE(examples.size() == 1);
    CHECK(examples[0].prompt.tokens == std::vector<Token>{1, 2, 3});
    REQUIRE(examples[0].target.has_value());
    CHECK(examples[0].target->ordinary_length() == 2);
    CHECK(examples[0].target->tokens == std::vector<Token>{4, 5, 6});  // auto-terminated
  }

  SUBCASE("comments and blank lines are skipped, ids follow file order") {
    std::ofstream(file) << "# header\n\n0 1\n# middle\n2 3\t1\n";
    auto examples = parse_corpus(file, vocab);
    REQUIRE(examples.size() == 2);
    CHECK(examples[0].prompt.id == 0);
    CHECK(examples[1].prompt.id == 1);
    CHECK(!examples[0].target.has_value());
  }

  SUBCASE("malformed integer reports line and column") {
    std::ofstream(file) << "0 1\n2 x3 4\n";
    try {
      parse_corpus(file, vocab);
      FAIL("expected parse error");
    } catch (const DataError& e) {
      std::string msg = e.what();
      CHECK(msg.find(":2:") != std::string::npos);   // line 2
      CHECK(msg.find("x3") != std::string::npos);
    }
  }

  SUBCASE("token out of range rejected") {
    std::ofstream(file) << "0 9\n";
    CHECK_THROWS_AS(parse_corpus(file, vocab), DataError);
  }

  SUBCASE("misplaced terminal token rejected") {
    std::ofstream(file) << "0 6 1\n";  // terminal id inside the prompt
    CHECK_THROWS_AS(parse_corpus(file, vocab), DataError);
    std::ofstream(file) << "0 1\t6 2\n";  // terminal id not at the target end
    CHECK_THROWS_AS(parse_corpus(file, vocab), DataError);
    std::ofstream(file) << "0 1\t2 6\n";  // trailing terminal id is fine
    CHECK(parse_corpus(file, vocab).size() == 1);
  }

  SUBCASE("write then parse is the identity on random examples") {
    Rng rng(50);
    std::vector<CorpusExample> examples;
    for (int i = 0; i < 1000; ++i) {
      std::vector<Token> prompt_toks;
      int plen = 1 + static_cast<int>(rng.next_below(5));
      for (int k = 0; k < plen; ++k) {
        prompt_toks.push_back(static_cast<Token>(rng.next_below(6)));
      }
      CorpusExample ex;
      ex.prompt = Prompt::make(static_cast<std::uint64_t>(i), prompt_toks, vocab);
      if (rng.next_below(2) == 0) {
        std::vector<Token> target_toks;
        int tlen = static_cast<int>(rng.next_below(4));
        for (int k = 0; k < tlen; ++k) {
          target_toks.push_back(static_cast<Token>(rng.next_below(6)));
        }
        ex.target = TokenSequence::terminal(target_toks, vocab);
      }
      examples.push_back(ex);
    }
    write_corpus(file, examples);
    auto parsed = parse_corpus(file, vocab);
    REQUIRE(parsed.size() == examples.size());
    for (size_t i = 0; i < parsed.size(); ++i) {
      CHECK(parsed[i].prompt.tokens == examples[i].prompt.tokens);
      CHECK(parsed[i].target.has_value() == examples[i].target.has_value());
      if (parsed[i].target) CHECK(parsed[i].target->tokens == examples[i].target->tokens);
    }
  }
}

TEST_CASE("run config validation") {
  SUBCASE("unknown top-level key rejected") {
    json doc;
    doc["vocab_size"] = 4;
    doc["wat"] = 1;
    CHECK_THROWS_AS(parse_run_config(doc), ConfigError);
  }
  SUBCASE("unknown nested key rejected") {
    json doc;
    doc["temperature"] = {{"t_start", 1.0}, {"bogus", 2}};
    CHECK_THROWS_AS(parse_run_config(doc), ConfigError);
  }
  SUBCASE("component invariants re-validated at load") {
    json doc;
    doc["vocab_size"] = 1;
    CHECK_THROWS_AS(parse_run_config(doc), ConfigError);
    doc = json{};
    doc["temperature"] = {{"t_min", 1.5}};
    CHECK_THROWS_AS(parse_run_config(doc), ConfigError);
    doc = json{};
    doc["train"] = {{"total_steps", 10}};  // < total_lro_steps
    CHECK_THROWS_AS(parse_run_config(doc), ConfigError);
  }
  SUBCASE("presets pin the schedule horizons") {
    json doc;
    doc["preset"] = "lro2500";
    RunConfig cfg = parse_run_config(doc);
    CHECK(cfg.total_lro_steps == 2500);
    CHECK(cfg.temperature.decay_steps == 2500);
    CHECK(cfg.temperature.t_min == 0.825);
    CHECK(cfg.lr_base == 1e-5);
    doc["preset"] = "nope";
    CHECK_THROWS_AS(parse_run_config(doc), ConfigError);
  }
  SUBCASE("config json round-trips through the parser") {
    RunConfig cfg = tiny_config();
    RunConfig again = parse_run_config(run_config_to_json(cfg));
    CHECK(canonical_config_string(cfg) == canonical_config_string(again));
  }
}

TEST_CASE("checkpoint round trip") {
  TempDir dir;
  RunConfig cfg = tiny_config();
  auto reference = build_reference(cfg);
  ParametricPolicy policy = clone_reference(*reference);
  RewardModel rm(reference, cfg.temperature);
  Trainer trainer(cfg.train_plan(), cfg.lr_schedule(), cfg.subtb,
                  CollapseDetector(cfg.collapse_window, cfg.collapse_ratio));
  std::vector<Prompt> prompts{Prompt{}};
  for (int step = 0; step < 50; ++step) trainer.train_step(policy, rm, prompts);

  fs::path p1 = dir.path / "a.goat";
  save_checkpoint(p1, make_checkpoint(cfg, policy, trainer));

  SUBCASE("loaded policies are pointwise identical") {
    LoadedRun run = load_run(p1);
    CHECK(run.checkpoint.step == 50);
    for (const TokenSequence& x :
         enumerate_terminals(policy.vocab(), policy.max_len())) {
      CHECK(run.policy.log_prob_sequence(Prompt{}, x) ==
            policy.log_prob_sequence(Prompt{}, x));
    }
  }

  SUBCASE("save -> load -> save is byte-identical") {
    LoadedRun run = load_run(p1);
    fs::path p2 = dir.path / "b.goat";
    save_checkpoint(p2, run.checkpoint);
    CHECK(slurp(p1) == slurp(p2));
  }

  SUBCASE("truncation is detected as truncation") {
    std::string buf = slurp(p1);
    std::ofstream(dir.path / "t.goat", std::ios::binary)
        << buf.substr(0, buf.size() / 2);
    try {
      load_checkpoint(dir.path / "t.goat");
      FAIL("expected truncation error");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointErrorKind::kTruncated);
    }
  }

  SUBCASE("bad magic is its own error kind") {
    std::string buf = slurp(p1);
    buf[0] = 'X';
    std::ofstream(dir.path / "m.goat", std::ios::binary) << buf;
    try {
      load_checkpoint(dir.path / "m.goat");
      FAIL("expected magic error");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointErrorKind::kBadMagic);
    }
  }

  SUBCASE("bumped version byte is rejected") {
    std::string buf = slurp(p1);
    buf[8] = 2;
    std::ofstream(dir.path / "v.goat", std::ios::binary) << buf;
    try {
      load_checkpoint(dir.path / "v.goat");
      FAIL("expected version error");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointErrorKind::kUnsupportedVersion);
    }
  }

  SUBCASE("a restored trainer continues bit-identically") {
    LoadedRun run = load_run(p1);
    ParametricPolicy resumed = clone_reference(*run.reference);
    for (const auto& [ctx, logits] : run.checkpoint.policy_rows) {
      resumed.set_row(ctx, logits);
    }
    std::unordered_map<PolicyContext, Trainer::AdamRow, PolicyContextHash> adam;
    for (const auto& [ctx, row] : run.checkpoint.adam_rows) adam.emplace(ctx, row);
    Trainer fresh(cfg.train_plan(), cfg.lr_schedule(), cfg.subtb,
                  CollapseDetector(cfg.collapse_window, cfg.collapse_ratio));
    fresh.restore(static_cast<int>(run.checkpoint.step), run.checkpoint.rng_state,
                  run.checkpoint.cursor, std::move(adam), run.checkpoint.detector);

    RewardModel rm2(run.reference, run.config.temperature);
    for (int step = 0; step < 10; ++step) {
      StepMetrics a = trainer.train_step(policy, rm, prompts);
      StepMetrics b = fresh.train_step(resumed, rm2, prompts);
      CHECK(a.step == b.step);
      CHECK(a.loss == b.loss);
      CHECK(a.mean_seq_len == b.mean_seq_len);
    }
  }
}

TEST_CASE("metrics records") {
  MetricsRecord rec;
  rec.step = 3;
  rec.loss = 1.5;
  rec.reward_temperature = 0.9;
  rec.learning_rate = 1e-4;
  rec.mean_seq_len = 2.25;
  rec.collapse = false;

  json row = metrics_to_json(rec);
  CHECK(row.size() == 8);  // the exact MetricsRecord field set
  CHECK(row.at("step") == 3);
  CHECK(row.at("wall_time_ms").is_null());
  CHECK(row.at("tokens_per_sec").is_null());

  rec.wall_time_ms = 12.5;
  rec.tokens_per_sec = 800.0;
  row = metrics_to_json(rec);
  CHECK(row.at("wall_time_ms") == 12.5);
  CHECK(row.at("tokens_per_sec") == 800.0);
}

TEST_CASE("run_train end to end") {
  TempDir dir;
  RunConfig cfg = tiny_config();
  std::vector<CorpusExample> corpus{CorpusExample{Prompt{}, std::nullopt}};

  SUBCASE("identical seeds produce byte-identical metrics") {
    run_train(cfg, corpus, dir.path / "r1");
    run_train(cfg, corpus, dir.path / "r2");
    CHECK(slurp(dir.path / "r1/metrics.jsonl") == slurp(dir.path / "r2/metrics.jsonl"));
    CHECK(slurp(dir.path / "r1/checkpoint.goat") == slurp(dir.path / "r2/checkpoint.goat"));
  }

  SUBCASE("metrics rows are valid json with the exact field set") {
    run_train(cfg, corpus, dir.path / "r");
    std::ifstream in(dir.path / "r/metrics.jsonl");
    std::string line;
    int rows = 0;
    int prev_step = -1;
    while (std::getline(in, line)) {
      json row = json::parse(line);
      CHECK(row.size() == 8);
      for (const char* key : {"step", "loss", "reward_temperature", "learning_rate",
                              "mean_seq_len", "collapse", "wall_time_ms", "tokens_per_sec"}) {
        CHECK(row.contains(key));
      }
      CHECK(row.at("step").get<int>() > prev_step);  // strictly increasing
      prev_step = row.at("step").get<int>();
      ++rows;
    }
    CHECK(rows == cfg.total_steps);
  }

  SUBCASE("opting out of deterministic metrics records real timing") {
    RunConfig timed = cfg;
    timed.deterministic_metrics = false;
    run_train(timed, corpus, dir.path / "t");
    std::ifstream in(dir.path / "t/metrics.jsonl");
    std::string line;
    REQUIRE(std::getline(in, line));
    json row = json::parse(line);
    CHECK(!row.at("wall_time_ms").is_null());
    CHECK(row.at("wall_time_ms").get<double>() >= 0.0);
    CHECK(!row.at("tokens_per_sec").is_null());
  }

  SUBCASE("baseline checkpoint preserves the reference terminal distribution") {
    run_train(cfg, corpus, dir.path / "r");
    LoadedRun base = load_run(dir.path / "r/baseline.goat");
    ParametricPolicy fresh = clone_reference(*base.reference);
    Distribution a = terminal_distribution(base.policy, Prompt{});
    Distribution b = terminal_distribution(fresh, Prompt{});
    CHECK(total_variation(a, b) == 0.0);
  }
}
