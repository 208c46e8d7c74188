// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <memory>
#include <vector>

#include <doctest.h>

#include "goat/core.hpp"
#include "goat/eval.hpp"
#include "goat/policy.hpp"

using namespace goat;

namespace {

PolicySpec tabular_spec(int vocab_size, int max_len) {
  PolicySpec spec;
  spec.backend = Backend::kTabular;
  spec.max_len = max_len;
  spec.vocab = Vocabulary(vocab_size);
  return spec;
}

ReferenceModel gaussian_reference(int vocab_size, int max_len, std::uint64_t seed,
                                  double sigma = 1.0) {
  PolicySpec spec = tabular_spec(vocab_size, max_len);
  return ReferenceModel(spec, std::make_shared<GaussianRowSource>(spec.vocab, seed, sigma));
}

}  // namespace

TEST_CASE("softmax of zero logits is uniform over the full alphabet") {
  PolicySpec spec = tabular_spec(3, 4);
  ParametricPolicy policy(spec, std::make_shared<UniformRowSource>(spec.vocab));
  Prompt prompt;
  Distribution d = policy.next_distribution(prompt, TokenSequence{});
  REQUIRE(d.size() == 4);
  for (double p : d.probs) CHECK(p == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("forced termination at max_len") {
  PolicySpec spec = tabular_spec(3, 2);
  ParametricPolicy policy(spec, std::make_shared<UniformRowSource>(spec.vocab));
  Prompt prompt;
  TokenSequence prefix = TokenSequence::prefix({0, 1}, spec.vocab);
  Distribution d = policy.next_distribution(prompt, prefix);
  CHECK(d.probs[3] == 1.0);
  CHECK(d.probs[0] == 0.0);

  TokenSequence done = TokenSequence::terminal({0}, spec.vocab);
  CHECK_THROWS_AS(policy.next_distribution(prompt, done), StateError);
}

TEST_CASE("softmax ratios follow the logits") {
  PolicySpec spec = tabular_spec(3, 4);
  ParametricPolicy policy(spec, std::make_shared<UniformRowSource>(spec.vocab));
  PolicyContext ctx = make_context(spec, Prompt{}, TokenSequence{});
  policy.set_row(ctx, {std::log(1.0), std::log(2.0), std::log(3.0), std::log(4.0)});
  Distribution d = policy.next_distribution(Prompt{}, TokenSequence{});
  CHECK(d.probs[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(d.probs[1] == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(d.probs[2] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(d.probs[3] == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("log_prob_sequence under the uniform policy") {
  PolicySpec spec = tabular_spec(3, 8);
  ParametricPolicy policy(spec, std::make_shared<UniformRowSource>(spec.vocab));
  Prompt prompt;
  TokenSequence seq = TokenSequence::terminal({0, 2}, spec.vocab);
  CHECK(policy.log_prob_sequence(prompt, seq) ==
        doctest::Approx(3.0 * std::log(0.25)).epsilon(1e-12));
  TokenSequence empty = TokenSequence::terminal({}, spec.vocab);
  CHECK(policy.log_prob_sequence(prompt, empty) ==
        doctest::Approx(std::log(0.25)).epsilon(1e-12));
  TokenSequence open = TokenSequence::prefix({0}, spec.vocab);
  CHECK_THROWS_AS(policy.log_prob_sequence(prompt, open), StateError);
}

TEST_CASE("terminal probabilities sum to one by exhaustive enumeration") {
  ReferenceModel ref = gaussian_reference(3, 4, 2024);
  ParametricPolicy policy = clone_reference(ref);
  Prompt prompt;
  double total = 0.0;
  for (const TokenSequence& x : enumerate_terminals(policy.vocab(), policy.max_len())) {
    total += std::exp(policy.log_prob_sequence(prompt, x));
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("every next_distribution is normalized") {
  ReferenceModel ref = gaussian_reference(4, 5, 7);
  ParametricPolicy policy = clone_reference(ref);
  Prompt prompt = Prompt::make(3, {1, 2}, policy.vocab());
  Rng rng(11);
  TokenSequence prefix;
  for (int step = 0; step < 5; ++step) {
    Distribution d = policy.next_distribution(prompt, prefix);
    double sum = 0.0;
    for (double p : d.probs) sum += p;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    prefix.append(static_cast<Token>(rng.next_below(static_cast<std::uint64_t>(policy.vocab().size))),
                  policy.vocab());
  }
}

TEST_CASE("gradient accumulation basics") {
  ReferenceModel ref = gaussian_reference(3, 4, 5);
  ParametricPolicy policy = clone_reference(ref);
  Prompt prompt;
  TokenSequence prefix = TokenSequence::prefix({1}, policy.vocab());
  GradientTable grads;

  SUBCASE("zero weight leaves the table untouched") {
    policy.accumulate_grad_log_prob(prompt, prefix, 2, 0.0, grads);
    CHECK(grads.empty());
  }

  SUBCASE("forced step is a no-op") {
    TokenSequence full = TokenSequence::prefix({0, 1, 2, 0}, policy.vocab());
    policy.accumulate_grad_log_prob(prompt, full, policy.vocab().terminal_id(), 1.0, grads);
    CHECK(grads.empty());
  }

  SUBCASE("near one-hot policy has vanishing gradient at the hot token") {
    PolicyContext ctx = make_context(policy.spec(), prompt, prefix);
    policy.set_row(ctx, {50.0, 0.0, 0.0, 0.0});
    policy.accumulate_grad_log_prob(prompt, prefix, 0, 1.0, grads);
    for (double g : grads.at(ctx)) CHECK(std::abs(g) < 1e-12);
  }

  SUBCASE("gradient row is indicator minus probabilities") {
    policy.accumulate_grad_log_prob(prompt, prefix, 2, 0.7, grads);
    PolicyContext ctx = make_context(policy.spec(), prompt, prefix);
    Distribution d = policy.next_distribution(prompt, prefix);
    const std::vector<double>& g = grads.at(ctx);
    for (size_t v = 0; v < g.size(); ++v) {
      double expected = 0.7 * ((v == 2 ? 1.0 : 0.0) - d.probs[v]);
      CHECK(g[v] == doctest::Approx(expected).epsilon(1e-12));
    }
  }
}

TEST_CASE("analytic gradient matches finite differences of log_prob_sequence") {
  ReferenceModel ref = gaussian_reference(3, 4, 99);
  ParametricPolicy policy = clone_reference(ref);
  Prompt prompt;
  TokenSequence seq = TokenSequence::terminal({1, 0, 2}, policy.vocab());

  GradientTable grads;
  TokenSequence prefix;
  for (Token t : seq.tokens) {
    policy.accumulate_grad_log_prob(prompt, prefix, t, 1.0, grads);
    if (!policy.vocab().is_terminal(t)) prefix.append(t, policy.vocab());
  }

  const double h = 1e-5;
  for (auto& [ctx, grow] : grads) {
    for (size_t v = 0; v < grow.size(); ++v) {
      std::vector<double> base = policy.row(ctx);
      std::vector<double> up = base, down = base;
      up[v] += h;
      down[v] -= h;
      policy.set_row(ctx, up);
      double f_up = policy.log_prob_sequence(prompt, seq);
      policy.set_row(ctx, down);
      double f_down = policy.log_prob_sequence(prompt, seq);
      policy.set_row(ctx, base);
      double fd = (f_up - f_down) / (2.0 * h);
      CHECK(grow[v] == doctest::Approx(fd).epsilon(1e-5));
    }
  }
}

TEST_CASE("clone_reference matches the reference and is isolated") {
  ReferenceModel ref = gaussian_reference(4, 6, 31337);
  ParametricPolicy policy = clone_reference(ref);
  Rng rng(8);

  // 100 random contexts agree exactly
  for (int trial = 0; trial < 100; ++trial) {
    Prompt prompt = Prompt::make(rng.next_below(5), {}, policy.vocab());
    std::vector<Token> toks;
    int len = static_cast<int>(rng.next_below(6));
    for (int i = 0; i < len; ++i) {
      toks.push_back(static_cast<Token>(rng.next_below(4)));
    }
    TokenSequence prefix = TokenSequence::prefix(toks, policy.vocab());
    Distribution a = policy.next_distribution(prompt, prefix);
    Distribution b = ref.next_distribution(prompt, prefix);
    for (size_t i = 0; i < a.size(); ++i) CHECK(a.probs[i] == b.probs[i]);
  }

  // perturbing the clone leaves the reference untouched
  Prompt prompt;
  TokenSequence prefix = TokenSequence::prefix({0}, policy.vocab());
  PolicyContext ctx = make_context(policy.spec(), prompt, prefix);
  Distribution before = ref.next_distribution(prompt, prefix);
  std::vector<double>& row = policy.mutable_row(ctx);
  row[0] += 5.0;
  Distribution after = ref.next_distribution(prompt, prefix);
  for (size_t i = 0; i < before.size(); ++i) CHECK(before.probs[i] == after.probs[i]);
  CHECK(policy.next_distribution(prompt, prefix).probs[0] != before.probs[0]);
}

TEST_CASE("k-gram with a long window matches tabular on distinct prompts") {
  // With k >= prompt length + max_len the k-gram suffix is the whole
  // prompt ++ prefix stream, which identifies the tabular context as long as
  // prompts are distinct token vectors.
  Vocabulary vocab(3);
  const int max_len = 3;
  const std::uint64_t seed = 555;

  PolicySpec tab = tabular_spec(3, max_len);
  PolicySpec kgram;
  kgram.backend = Backend::kKGram;
  kgram.context_order = 2 + max_len;
  kgram.max_len = max_len;
  kgram.vocab = vocab;

  // Row sources keyed on different context shapes must produce the same
  // distributions; drive both from the k-gram keying so rows coincide.
  auto src = std::make_shared<GaussianRowSource>(vocab, seed, 1.0);
  ParametricPolicy tab_policy(tab, std::make_shared<UniformRowSource>(vocab));
  ParametricPolicy kgram_policy(kgram, src);

  std::vector<Prompt> prompts = {Prompt::make(0, {0, 1}, vocab), Prompt::make(1, {2, 2}, vocab)};
  // mirror the k-gram rows into the tabular policy
  for (const Prompt& prompt : prompts) {
    std::vector<TokenSequence> prefixes;
    for (const TokenSequence& x : enumerate_terminals(vocab, max_len)) {
      std::vector<Token> ord(x.ordinary().begin(), x.ordinary().end());
      prefixes.push_back(TokenSequence::prefix(ord, vocab));
    }
    for (const TokenSequence& prefix : prefixes) {
      if (prefix.ordinary_length() == max_len) continue;
      PolicyContext kctx = make_context(kgram, prompt, prefix);
      PolicyContext tctx = make_context(tab, prompt, prefix);
      tab_policy.set_row(tctx, src->row(kctx));
    }
  }

  for (const Prompt& prompt : prompts) {
    for (const TokenSequence& x : enumerate_terminals(vocab, max_len)) {
      CHECK(tab_policy.log_prob_sequence(prompt, x) ==
            doctest::Approx(kgram_policy.log_prob_sequence(prompt, x)).epsilon(1e-12));
    }
  }
}

TEST_CASE("k-gram context drops prompt identity but keeps prompt content") {
  PolicySpec spec;
  spec.backend = Backend::kKGram;
  spec.context_order = 3;
  spec.max_len = 5;
  spec.vocab = Vocabulary(4);

  Prompt a = Prompt::make(0, {1, 2, 3}, spec.vocab);
  Prompt b = Prompt::make(9, {1, 2, 3}, spec.vocab);  // same content, different id
  TokenSequence prefix = TokenSequence::prefix({0}, spec.vocab);
  CHECK(make_context(spec, a, prefix) == make_context(spec, b, prefix));

  // differs inside the k-window
  Prompt c = Prompt::make(0, {1, 3, 3}, spec.vocab);
  CHECK(!(make_context(spec, a, prefix) == make_context(spec, c, prefix)));
  // a difference outside the window is invisible by design
  Prompt d = Prompt::make(0, {2, 2, 3}, spec.vocab);
  CHECK(make_context(spec, a, prefix) == make_context(spec, d, prefix));

  // suffix is the last k of prompt ++ prefix
  PolicyContext ctx = make_context(spec, a, prefix);
  CHECK(ctx.suffix == std::vector<Token>{2, 3, 0});
  CHECK(ctx.prompt_key == kUnconditionalKey);
}
