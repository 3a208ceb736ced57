#include <gtest/gtest.h>

#include "stub_model.hpp"
#include "support.hpp"

using namespace pguard;
using testing_support::StubScenario;

TEST(CombinedScore, Examples) {
  const std::vector<double> a{0.8}, b{0.6, 0.9999}, c{0.2, 0.4, 0.6};
  EXPECT_NEAR(combined_score(a, 0.5), 0.4, 1e-15);
  EXPECT_EQ(combined_score(b, 0.0), 0.0);
  EXPECT_NEAR(combined_score(c, 0.5), 0.2, 1e-15);
  EXPECT_THROW(combined_score(std::vector<double>{}, 0.5), std::invalid_argument);
}

TEST(Decide, Examples) {
  EXPECT_EQ(decide(0.9, 0.8, {0.5, 0.7}), Decision::Redacted);
  EXPECT_EQ(decide(0.3, std::nullopt, {0.5, 0.7}), Decision::Retain);
  EXPECT_EQ(decide(0.9, 0.7, {0.5, 0.7}), Decision::Retain);
  EXPECT_EQ(decide(0.5, 0.9, {0.5, 0.7}), Decision::Retain);
  EXPECT_THROW(decide(0.9, std::nullopt, {0.5, 0.7}), std::logic_error);
  EXPECT_THROW(Thresholds({1.5, 0.5}).validate(), std::invalid_argument);
}

TEST(Engine, ScriptedStepsThreeToFiveRedacted) {
  StubScenario sc;
  sc.prompt = {1, 7};
  sc.model.prompt_len = 2;
  sc.model.script = {10, 11, 12, 13, 14, 15, 16, 17};
  sc.s.assign(9, 0.1);
  sc.r.assign(8, 0.2);
  for (std::size_t k : {3, 4, 5}) {
    sc.s[k] = 0.9;
    sc.r[k] = 0.95;
  }
  sc.s[6] = 0.9;  // activator fires, router disagrees
  const auto out = sc.run({0.5, 0.5}, 20);
  ASSERT_EQ(out.raw.size(), 8u);
  EXPECT_EQ(out.raw, sc.model.script);
  for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(!out.rendered[k].has_value(), k >= 3 && k <= 5) << k;
  EXPECT_EQ(sc.router_calls, 4u);
  EXPECT_FALSE(out.events[0].r.has_value());
  EXPECT_NEAR(*out.events[4].r_hat, 0.9 * 0.95, 1e-15);
  EXPECT_EQ(out.events[6].decision, Decision::Retain);
}

TEST(Engine, RandomStubInvariants) {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const auto sc = StubScenario::random(rng);
    const Thresholds th{rng.uniform(), rng.uniform()};
    const std::size_t max_len = 1 + rng.below(30);
    const auto out = sc.run(th, max_len);
    EXPECT_EQ(out.raw, greedy_generate(sc.model, sc.prompt, max_len)) << trial;
    std::size_t expected_calls = 0;
    for (std::size_t k = 0; k < out.raw.size(); ++k) {
      const bool should = sc.s[k] > th.tau && sc.r[k] > th.xi;
      EXPECT_EQ(!out.rendered[k].has_value(), should) << trial << ":" << k;
      EXPECT_EQ(out.events[k].step, k);
      EXPECT_EQ(out.events[k].token, out.raw[k]);
      expected_calls += sc.s[k] > th.tau;
    }
    EXPECT_EQ(sc.router_calls, expected_calls) << trial;
    EXPECT_EQ(sc.future_leaks, 0u) << trial;
  }
}

TEST(Engine, ThresholdMonotonicity) {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const auto sc = StubScenario::random(rng);
    auto redacted = [&](double tau, double xi) {
      const auto out = sc.run({tau, xi}, 40);
      std::vector<bool> m;
      for (const auto& t : out.rendered) m.push_back(!t.has_value());
      return m;
    };
    for (int i = 0; i < 10; ++i)
      for (int j = 0; j < 10; ++j) {
        const auto base = redacted(i / 10.0, j / 10.0);
        if (i < 9) {
          const auto up = redacted((i + 1) / 10.0, j / 10.0);
          for (std::size_t k = 0; k < base.size(); ++k) EXPECT_LE(up[k], base[k]);
        }
        if (j < 9) {
          const auto up = redacted(i / 10.0, (j + 1) / 10.0);
          for (std::size_t k = 0; k < base.size(); ++k) EXPECT_LE(up[k], base[k]);
        }
      }
  }
}

TEST(Engine, StopsAtEosContextLimitAndBudget) {
  StubScenario sc;
  sc.prompt = {1};
  sc.model.script = {5, 6, Tokenizer::kEos, 7};
  sc.s.assign(5, 0.0);
  sc.r.assign(4, 0.0);
  EXPECT_EQ(sc.run({0.5, 0.5}, 10).raw, (std::vector<TokenId>{5, 6}));
  EXPECT_EQ(sc.run({0.5, 0.5}, 1).raw, (std::vector<TokenId>{5}));
  sc.model.limit = 2;
  EXPECT_EQ(sc.run({0.5, 0.5}, 10).raw, (std::vector<TokenId>{5}));
  EXPECT_THROW(sc.run({0.5, 0.5}, 0), std::invalid_argument);
  sc.prompt.clear();
  EXPECT_THROW(sc.run({0.5, 0.5}, 3), std::invalid_argument);
}

namespace {

// Trace whose hidden state is (x, 0): a one-unit bank then reads σ(c·x).
HiddenTrace make_trace(const std::vector<TokenId>& tokens, const std::vector<double>& xs) {
  std::vector<TraceRecord> recs;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    Vec logits(32);
    logits[i + 1 < tokens.size() ? tokens[i + 1] : Tokenizer::kEos] = 1.0;
    recs.push_back({tokens[i], Vec{xs[i], 0.0}, logits});
  }
  return HiddenTrace(recs);
}

ActivatorBank linear_bank(double c) {
  ActivatorBank bank;
  bank.activators.emplace_back(2, 1, 0);
  bank.activators[0].A(0, 0) = 1.0;
  bank.activators[0].B(0, 0) = 1.0;
  bank.activators[0].v[0] = c;
  return bank;
}

RouterParams small_router() {
  RouterConfig c;
  c.d_model = 2;
  c.n_heads = 1;
  c.ffn_dim = 4;
  c.window = 1;
  Rng rng(5);
  return init_router(c, rng);
}

}  // namespace

TEST(Engine, QuietBankMatchesGreedyOnTrace) {
  const std::vector<TokenId> toks{1, 8, 9, 10, 11, 12};
  const auto trace = make_trace(toks, {1, 1, 1, 1, 1, 1});
  const auto out = moderate_stream(trace, linear_bank(-40.0), small_router(), {1}, {0.5, 0.5}, 10);
  EXPECT_EQ(out.raw, (std::vector<TokenId>{8, 9, 10, 11, 12}));
  for (const auto& t : out.rendered) EXPECT_TRUE(t.has_value());
  for (const auto& e : out.events) EXPECT_FALSE(e.r.has_value());
  EXPECT_EQ(out.raw, greedy_generate(trace, std::vector<TokenId>{1}, 10));
}

TEST(Engine, ZeroThresholdsRedactEverything) {
  const std::vector<TokenId> toks{1, 8, 9, 10};
  const auto trace = make_trace(toks, {-3, 2, 0.5, 7});
  const auto out = moderate_stream(trace, linear_bank(1.0), small_router(), {1}, {0.0, 0.0}, 10);
  ASSERT_EQ(out.rendered.size(), 3u);
  for (const auto& t : out.rendered) EXPECT_FALSE(t.has_value());
  const auto twice = moderate_stream(trace, linear_bank(1.0), small_router(), {1}, {0.0, 0.0}, 10);
  EXPECT_EQ(out, twice);
  Rng rng(1);
  const auto wide = init_activator_bank(1, 4, 2, rng);
  EXPECT_THROW(moderate_stream(trace, wide, small_router(), {1}, {0.5, 0.5}, 3), DimensionError);
}

TEST(Render, CollapseAndPlain) {
  const Tokenizer tok(std::vector<std::string>{"hi", "there", "x"});
  const TokenId hi = tok.encode("hi")[0], there = tok.encode("there")[0], x = tok.encode("x")[0];
  ModeratedOutput out;
  out.raw = {hi, x, x, there};
  out.rendered = {hi, std::nullopt, std::nullopt, there};
  EXPECT_EQ(render(out, tok, true), "hi [REDACTED] there");
  EXPECT_EQ(render(out, tok, false), "hi [REDACTED] [REDACTED] there");
  out.rendered = {hi, x, x, there};
  EXPECT_EQ(render(out, tok, true), tok.decode(out.raw));
}

TEST(Events, JsonRoundTrip) {
  const ModerationEvent a{3, 17, 0.75, 0.5, 0.375, Decision::Redacted};
  const ModerationEvent b{4, 18, 0.25, std::nullopt, std::nullopt, Decision::Retain};
  EXPECT_EQ(event_from_json(to_json(a)), a);
  EXPECT_EQ(event_from_json(to_json(b)), b);
  EXPECT_TRUE(to_json(b)["r"].is_null());
  auto j = to_json(a);
  j["decision"] = "MAYBE";
  EXPECT_THROW(event_from_json(j), std::invalid_argument);
}
