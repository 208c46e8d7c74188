// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <map>
#include <memory>
#include <vector>

#include <doctest.h>

#include "goat/core.hpp"
#include "goat/eval.hpp"
#include "goat/sampling.hpp"

using namespace goat;

namespace {

ParametricPolicy fixed_policy(int vocab_size, int max_len, std::uint64_t seed) {
  PolicySpec spec;
  spec.backend = Backend::kTabular;
  spec.max_len = max_len;
  spec.vocab = Vocabulary(vocab_size);
  return ParametricPolicy(spec, std::make_shared<GaussianRowSource>(spec.vocab, seed, 1.0));
}

}  // namespace

TEST_CASE("decode temperature") {
  Distribution d = Distribution::from_probs({0.2, 0.8});
  SUBCASE("t = 1 is the identity") {
    Distribution out = apply_decode_temperature(d, 1.0);
    CHECK(out.probs[0] == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(out.probs[1] == doctest::Approx(0.8).epsilon(1e-12));
  }
  SUBCASE("t = 0.5 squares and renormalizes") {
    Distribution out = apply_decode_temperature(d, 0.5);
    CHECK(out.probs[0] == doctest::Approx(0.04 / 0.68).epsilon(1e-12));
    CHECK(out.probs[1] == doctest::Approx(0.64 / 0.68).epsilon(1e-12));
  }
  SUBCASE("tiny t degenerates into greedy") {
    Distribution g = apply_decode_temperature(Distribution::from_probs({0.1, 0.9}), 1e-6);
    CHECK(g.probs[1] == doctest::Approx(1.0).epsilon(1e-9));
  }
  SUBCASE("t <= 0 rejected") {
    CHECK_THROWS_AS(apply_decode_temperature(d, 0.0), ValidationError);
    CHECK_THROWS_AS(apply_decode_temperature(d, -1.0), ValidationError);
  }
  SUBCASE("entropy non-increasing as t decreases") {
    Distribution x = Distribution::from_probs({0.1, 0.3, 0.6});
    double prev = entropy(x);
    for (double t : {0.8, 0.5, 0.2, 0.05}) {
      double h = entropy(apply_decode_temperature(x, t));
      CHECK(h <= prev + 1e-12);
      prev = h;
    }
  }
}

TEST_CASE("top-k filter") {
  Distribution d = Distribution::from_probs({0.2, 0.5, 0.3});
  SUBCASE("k covering the support is the identity") {
    Distribution out = filter_top_k(d, 3);
    for (size_t i = 0; i < 3; ++i) CHECK(out.probs[i] == d.probs[i]);
    out = filter_top_k(d, 10);
    for (size_t i = 0; i < 3; ++i) CHECK(out.probs[i] == d.probs[i]);
  }
  SUBCASE("k = 1 is one-hot on the mode") {
    Distribution out = filter_top_k(d, 1);
    CHECK(out.probs[1] == 1.0);
    CHECK(out.probs[0] == 0.0);
  }
  SUBCASE("k = 2 renormalizes the kept entries") {
    Distribution out = filter_top_k(d, 2);
    CHECK(out.probs[0] == 0.0);
    CHECK(out.probs[1] == doctest::Approx(0.625).epsilon(1e-12));
    CHECK(out.probs[2] == doctest::Approx(0.375).epsilon(1e-12));
  }
  SUBCASE("ties break to the lower index") {
    Distribution tie = Distribution::from_probs({0.4, 0.4, 0.2});
    Distribution out = filter_top_k(tie, 1);
    CHECK(out.probs[0] == 1.0);
  }
}

TEST_CASE("top-p filter") {
  Distribution d = Distribution::from_probs({0.6, 0.3, 0.1});
  SUBCASE("p = 1 is the identity") {
    Distribution out = filter_top_p(d, 1.0);
    for (size_t i = 0; i < 3; ++i) CHECK(out.probs[i] == d.probs[i]);
  }
  SUBCASE("p = 0.5 keeps only the head") {
    Distribution out = filter_top_p(d, 0.5);
    CHECK(out.probs[0] == 1.0);
  }
  SUBCASE("p = 0.8 keeps two entries") {
    Distribution out = filter_top_p(d, 0.8);
    CHECK(out.probs[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(out.probs[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(out.probs[2] == 0.0);
  }
  SUBCASE("always keeps at least one entry") {
    Distribution out = filter_top_p(d, 1e-9);
    CHECK(out.probs[0] == 1.0);
  }
}

TEST_CASE("filters produce valid distributions and combined support shrinks") {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> logs(7);
    for (double& x : logs) x = 2.0 * rng.next_gaussian();
    Distribution d = normalize_logs(logs);
    int k = 1 + static_cast<int>(rng.next_below(7));
    double p = 0.2 + 0.8 * rng.next_double();
    Distribution dk = filter_top_k(d, k);
    Distribution dp = filter_top_p(d, p);
    Distribution both = filter_top_p(filter_top_k(d, k), p);
    dk.validate();
    dp.validate();
    both.validate();
    for (size_t i = 0; i < d.size(); ++i) {
      if (both.probs[i] > 0.0) {
        CHECK(dk.probs[i] > 0.0);  // combined support within top-k support
      }
    }
  }
}

TEST_CASE("sample_next basics") {
  ParametricPolicy policy = fixed_policy(3, 4, 77);
  Prompt prompt;
  SamplerConfig cfg;
  cfg.strategy = SamplingStrategy::kTopK;
  cfg.top_k = 1;

  SUBCASE("one-hot filtered distribution always returns that token") {
    Distribution d = policy.next_distribution(prompt, TokenSequence{});
    size_t argmax = 0;
    for (size_t i = 1; i < d.size(); ++i) {
      if (d.probs[i] > d.probs[argmax]) argmax = i;
    }
    Rng rng(1);
    for (int i = 0; i < 50; ++i) {
      CHECK(sample_next(policy, prompt, TokenSequence{}, cfg, rng) ==
            static_cast<Token>(argmax));
    }
  }

  SUBCASE("seeded runs reproduce") {
    SamplerConfig rms;
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) {
      CHECK(sample_next(policy, prompt, TokenSequence{}, rms, a) ==
            sample_next(policy, prompt, TokenSequence{}, rms, b));
    }
  }
}

TEST_CASE("empirical frequencies match the filtered distribution") {
  ParametricPolicy policy = fixed_policy(4, 6, 3);
  Prompt prompt;
  TokenSequence empty;
  Distribution raw = policy.next_distribution(prompt, empty);

  struct Case {
    SamplerConfig cfg;
    Distribution expected;
  };
  std::vector<Case> cases;
  {
    SamplerConfig c;
    cases.push_back({c, raw});
    c = SamplerConfig{};
    c.strategy = SamplingStrategy::kLtRms;
    c.decode_temperature = 0.7;
    cases.push_back({c, apply_decode_temperature(raw, 0.7)});
    c = SamplerConfig{};
    c.strategy = SamplingStrategy::kTopK;
    c.top_k = 3;
    cases.push_back({c, filter_top_k(raw, 3)});
    c = SamplerConfig{};
    c.strategy = SamplingStrategy::kTopP;
    c.top_p = 0.8;
    cases.push_back({c, filter_top_p(raw, 0.8)});
    c = SamplerConfig{};
    c.strategy = SamplingStrategy::kRas;
    c.top_k = 3;
    c.top_p = 0.9;
    c.rep_limit = 0;  // guard off: pure topk+topp on an empty prefix
    cases.push_back({c, filter_top_p(filter_top_k(raw, 3), 0.9)});
  }

  const int n_draws = 200000;
  for (const Case& c : cases) {
    Rng rng(99);
    std::vector<int> counts(raw.size(), 0);
    for (int i = 0; i < n_draws; ++i) {
      ++counts[static_cast<size_t>(sample_next(policy, prompt, empty, c.cfg, rng))];
    }
    for (size_t v = 0; v < raw.size(); ++v) {
      double p = c.expected.probs[v];
      double freq = static_cast<double>(counts[v]) / n_draws;
      double sigma = std::sqrt(p * (1.0 - p) / n_draws);
      CHECK(std::abs(freq - p) <= 3.0 * sigma + 1e-12);
    }
  }
}

TEST_CASE("generate always terminates and honors the cap") {
  SUBCASE("policy that always emits the terminal token") {
    PolicySpec spec;
    spec.backend = Backend::kTabular;
    spec.max_len = 8;
    spec.vocab = Vocabulary(2);
    class TerminalSource : public RowSource {
     public:
      std::vector<double> row(const PolicyContext&) const override {
        return {-745.0, -745.0, 0.0};
      }
    };
    ParametricPolicy policy(spec, std::make_shared<TerminalSource>());
    Rng rng(1);
    TokenSequence seq = generate(policy, Prompt{}, SamplerConfig{}, rng);
    CHECK(seq.terminated);
    CHECK(seq.ordinary_length() == 0);
  }

  SUBCASE("max_len cap is respected across many generations") {
    ParametricPolicy policy = fixed_policy(4, 3, 5);
    Rng rng(2);
    for (int i = 0; i < 500; ++i) {
      TokenSequence seq = generate(policy, Prompt{}, SamplerConfig{}, rng);
      CHECK(seq.terminated);
      CHECK(seq.ordinary_length() <= 3);
    }
  }

  SUBCASE("RAS outputs always terminate") {
    ParametricPolicy policy = fixed_policy(3, 12, 8);
    SamplerConfig cfg;
    cfg.strategy = SamplingStrategy::kRas;
    cfg.top_k = 2;
    cfg.top_p = 0.9;
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
      TokenSequence seq = generate(policy, Prompt{}, cfg, rng);
      CHECK(seq.terminated);
    }
  }
}

TEST_CASE("RAS repetition guard redraws from the unfiltered distribution") {
  // Raw distribution splits mass between tokens 0 and 1; top-k-1 filtering
  // would always emit token 0. With token 0 already repeated three times in
  // the window, the guard must redraw unfiltered, so token 1 appears.
  PolicySpec spec;
  spec.backend = Backend::kTabular;
  spec.max_len = 16;
  spec.vocab = Vocabulary(2);
  class SplitSource : public RowSource {
   public:
    std::vector<double> row(const PolicyContext&) const override {
      return {std::log(0.6), std::log(0.35), std::log(0.05)};
    }
  };
  ParametricPolicy policy(spec, std::make_shared<SplitSource>());
  Prompt prompt;
  TokenSequence repeated = TokenSequence::prefix({0, 0, 0}, spec.vocab);

  SamplerConfig ras;
  ras.strategy = SamplingStrategy::kRas;
  ras.top_k = 1;
  ras.top_p = 1.0;

  Rng rng(5);
  int non_mode = 0;
  for (int i = 0; i < 2000; ++i) {
    if (sample_next(policy, prompt, repeated, ras, rng) != 0) ++non_mode;
  }
  // redraw happens on every draw here; unfiltered non-mode mass is 0.4
  CHECK(non_mode > 600);

  SUBCASE("guard disabled leaves pure top-k behavior") {
    ras.rep_limit = 0;
    Rng rng2(5);
    for (int i = 0; i < 200; ++i) {
      CHECK(sample_next(policy, prompt, repeated, ras, rng2) == 0);
    }
  }

  SUBCASE("short repetition history does not trigger the guard") {
    TokenSequence two = TokenSequence::prefix({0, 0}, spec.vocab);
    Rng rng3(6);
    for (int i = 0; i < 200; ++i) {
      CHECK(sample_next(policy, prompt, two, ras, rng3) == 0);
    }
  }
}

TEST_CASE("RMS generation frequencies match exact enumeration") {
  // 4-token vocabulary, max_len 4 instance
  ParametricPolicy policy = fixed_policy(4, 4, 12);
  Prompt prompt;
  Distribution exact = terminal_distribution(policy, prompt);
  std::vector<TokenSequence> terminals = enumerate_terminals(policy.vocab(), policy.max_len());

  std::map<std::vector<Token>, size_t> index;
  for (size_t i = 0; i < terminals.size(); ++i) index[terminals[i].tokens] = i;

  const int n_draws = 100000;
  std::vector<double> freq(terminals.size(), 0.0);
  Rng rng(7);
  for (int i = 0; i < n_draws; ++i) {
    TokenSequence seq = generate(policy, prompt, SamplerConfig{}, rng);
    freq[index.at(seq.tokens)] += 1.0;
  }
  for (double& f : freq) f /= n_draws;
  double tv = 0.0;
  for (size_t i = 0; i < freq.size(); ++i) tv += std::abs(freq[i] - exact.probs[i]);
  CHECK(0.5 * tv <= 0.02);
}

TEST_CASE("generate_logged records the raw model distribution per step") {
  ParametricPolicy policy = fixed_policy(3, 5, 44);
  Prompt prompt;
  SamplerConfig cfg;
  cfg.strategy = SamplingStrategy::kTopK;
  cfg.top_k = 1;
  Rng rng(11);
  GenerationResult out = generate_logged(policy, prompt, cfg, rng);
  CHECK(out.log.size() == static_cast<size_t>(out.sequence.length()));
  // logged distributions are the unfiltered ones
  TokenSequence prefix;
  for (const auto& step : out.log.steps) {
    Distribution raw = policy.next_distribution(prompt, prefix);
    for (size_t i = 0; i < raw.size(); ++i) CHECK(raw.probs[i] == step.dist.probs[i]);
    if (!policy.vocab().is_terminal(step.sampled)) prefix.append(step.sampled, policy.vocab());
  }
}
