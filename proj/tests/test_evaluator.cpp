#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "logcomp/evaluator.hpp"
#include "logcomp/experiments.hpp"

using namespace logcomp;

namespace {

ModelConfig small(int m, int L, int vocab = 320) {
  ModelConfig c;
  c.d = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_mlp = 16;
  c.m = m;
  c.L = L;
  c.vocab_size = vocab;
  return c;
}

// Zero parameters give zero logits, i.e. the uniform distribution.
void zero_all(const Model& model) {
  for (auto p : model.params().list()) p.tensor.mutable_value().fill(0.0);
}

Corpus counted(std::size_t n_tokens, long long n_words, std::uint64_t seed) {
  Rng rng(seed);
  Corpus c;
  for (std::size_t i = 0; i < n_tokens; ++i) c.token_ids.push_back(static_cast<std::int32_t>(rng.below(256)));
  c.n_words = n_words;
  return c;
}

}  // namespace

TEST(Evaluator, UniformModelPerplexities) {
  Model model(small(8, 0), 1);
  zero_all(model);
  const auto r = evaluate(model, counted(21, 10, 1));  // 20 scored tokens
  EXPECT_EQ(r.n_tokens, 20);
  EXPECT_NEAR(r.raw_ppl, 320.0, 320.0 * 1e-12);
  EXPECT_NEAR(r.per_word_ppl, 102400.0, 102400.0 * 1e-11);
  EXPECT_NEAR(r.total_ce, 20 * std::log(320.0), 1e-10);
}

TEST(Evaluator, WordsEqualTokensGivesEqualPerplexities) {
  const auto r = make_report(37.5, 25, 25);
  EXPECT_EQ(r.raw_ppl, r.per_word_ppl);
  const auto fewer = make_report(37.5, 25, 10);
  EXPECT_GE(fewer.per_word_ppl, fewer.raw_ppl);
  EXPECT_THROW(make_report(1.0, 0, 1), ConfigError);
}

TEST(Evaluator, WindowSizeInvariantWhenHistoryFitsInWindow) {
  // 30 tokens fit inside one window for both m = 32 and m = 64.
  Model wide(small(64, 0, 256), 3);
  Model narrow(small(32, 0, 256), 4);
  const auto wp = wide.params().list();
  auto np = narrow.params().list();
  for (std::size_t i = 0; i < wp.size(); ++i) {
    if (np[i].name == "position_embedding") {
      for (std::size_t r = 0; r < 32; ++r)
        for (std::size_t c = 0; c < 8; ++c) np[i].tensor.mutable_value()(r, c) = wp[i].tensor.value()(r, c);
    } else {
      np[i].tensor.mutable_value() = wp[i].tensor.value();
    }
  }
  const auto corpus = counted(30, 6, 5);
  std::vector<double> lw, ln;
  EvalOptions ow, on;
  ow.log_probs = &lw;
  on.log_probs = &ln;
  const auto rw = evaluate(wide, corpus, ow);
  const auto rn = evaluate(narrow, corpus, on);
  ASSERT_EQ(lw.size(), 29u);
  EXPECT_EQ(lw, ln);
  EXPECT_EQ(rw.total_ce, rn.total_ce);
}

TEST(Evaluator, DumpedLogProbsReproduceReport) {
  Model model(small(16, 5, 256), 6);
  const auto corpus = counted(300, 60, 7);
  std::vector<double> lps;
  EvalOptions opts;
  opts.log_probs = &lps;
  const auto r = evaluate(model, corpus, opts);
  ASSERT_EQ(lps.size(), 299u);
  const double total = -std::accumulate(lps.begin(), lps.end(), 0.0);
  const double raw = std::exp(total / static_cast<double>(lps.size()));
  EXPECT_NEAR(raw, r.raw_ppl, 1e-10 * r.raw_ppl);
  EXPECT_EQ(r.n_words, 60);
}

TEST(Evaluator, PartialPassProratesWords) {
  Model model(small(10, 0, 256), 6);
  const auto corpus = counted(101, 50, 8);
  EvalOptions opts;
  opts.max_windows = 4;
  const auto r = evaluate(model, corpus, opts);
  EXPECT_EQ(r.n_tokens, 40);
  EXPECT_EQ(r.n_words, 20);
}

TEST(Evaluator, LeavesParametersUntouched) {
  Model model(small(16, 5, 256), 9);
  std::vector<Matrix> before;
  for (const auto& p : model.params().list()) before.push_back(p.tensor.value());
  evaluate(model, counted(200, 20, 10));
  const auto after = model.params().list();
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(after[i].tensor.value(), before[i]);
}

TEST(Evaluator, EmptyCorpusRejected) {
  Model model(small(8, 0), 1);
  EXPECT_THROW(evaluate(model, Corpus{}), ConfigError);
}

TEST(Evaluator, FingerprintTracksConfig) {
  EXPECT_EQ(config_fingerprint(small(8, 3)), config_fingerprint(small(8, 3)));
  EXPECT_NE(config_fingerprint(small(8, 3)), config_fingerprint(small(8, 4)));
}

TEST(LagTask, Deterministic) {
  const auto a = synthetic_lag_task(80, 16, 5000, 42);
  const auto b = synthetic_lag_task(80, 16, 5000, 42);
  const auto c = synthetic_lag_task(80, 16, 5000, 43);
  EXPECT_EQ(a.token_ids, b.token_ids);
  EXPECT_NE(a.token_ids, c.token_ids);
  EXPECT_EQ(a.n_words, 5000);
  EXPECT_THROW(synthetic_lag_task(5000, 16, 5000, 1), ConfigError);
  EXPECT_THROW(synthetic_lag_task(0, 16, 5000, 1), ConfigError);
}

TEST(LagTask, MarginalIsUniform) {
  const int V = 16;
  const auto c = synthetic_lag_task(7, V, 200000, 11);
  std::vector<double> counts(V);
  for (auto t : c.token_ids) counts[static_cast<std::size_t>(t)] += 1;
  const double expected = 200000.0 / V;
  double chi2 = 0;
  for (double n : counts) chi2 += (n - expected) * (n - expected) / expected;
  // Copies make samples dependent, which inflates variance by about
  // (1 + 0.9) / (1 - 0.9) = 19; the 0.01 critical value for 15 dof is 30.58.
  EXPECT_LT(chi2 / 19.0, 30.58);
}

TEST(LagTask, CopyRateAndInformedEntropy) {
  const int V = 16, lag = 5;
  const auto c = synthetic_lag_task(lag, V, 200000, 12);
  // Oracle predictor: 0.9 + 0.1/V on the token `lag` back, 0.1/V elsewhere.
  double ce = 0;
  long long hits = 0;
  for (std::size_t t = lag; t < c.size(); ++t) {
    const bool hit = c.token_ids[t] == c.token_ids[t - lag];
    hits += hit;
    ce -= std::log(hit ? 0.9 + 0.1 / V : 0.1 / V);
  }
  const double n = static_cast<double>(c.size() - lag);
  EXPECT_NEAR(static_cast<double>(hits) / n, 0.9 + 0.1 / V, 0.003);
  EXPECT_NEAR(ce / n, lag_task_informed_entropy(V), 0.01);
  // Closed form written out directly.
  const double hit = 0.9 + 0.1 / V, miss = 0.1 / V;
  EXPECT_NEAR(lag_task_informed_entropy(V), -hit * std::log(hit) - (V - 1) * miss * std::log(miss), 1e-15);
  EXPECT_EQ(lag_task_floor_entropy(V), std::log(16.0));
  EXPECT_LT(lag_task_informed_entropy(V), lag_task_floor_entropy(V));
}

TEST(Compare, RejectsMismatchedPairs) {
  auto si = small(8, 3, 64);
  auto dc = si;
  dc.variant = Variant::delta_control;
  EXPECT_NO_THROW(require_matched_pair(si, dc));
  dc.d_mlp = 32;
  EXPECT_THROW(require_matched_pair(si, dc), ConfigError);
  EXPECT_THROW(require_matched_pair(si, si), ConfigError);
}

TEST(Compare, IdenticalVariantHasZeroDifference) {
  const auto corpus = synthetic_lag_task(3, 16, 600, 1);
  const auto valid = synthetic_lag_task(3, 16, 200, 2, Split::valid);
  auto cfg = small(8, 3, 64);
  TrainConfig tc;
  tc.total_steps = 3;
  tc.warmup_steps = 1;
  tc.tokens_per_step = 16;
  tc.eval_windows = 2;
  const double a = train_and_score(cfg, corpus, valid, tc);
  const double b = train_and_score(cfg, corpus, valid, tc);
  ComparisonRow row{3, 1, a, b};
  EXPECT_EQ(row.difference(), 0.0);
  EXPECT_FALSE(row.compression_wins());
}

TEST(Compare, CsvLayout) {
  Comparison cmp;
  cmp.rows.push_back({5, 1, 1.5, 2.0});
  std::ostringstream out;
  cmp.write_csv(out);
  EXPECT_EQ(out.str(), "L,seed,scale_invariant_ce,delta_control_ce,difference,compression_wins\n5,1,1.5,2,-0.5,true\n");
  EXPECT_TRUE(cmp.compression_wins_all());
}
