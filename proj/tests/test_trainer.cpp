#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "logcomp/trainer.hpp"

using namespace logcomp;

namespace {

TrainConfig paper_schedule() {
  TrainConfig c;
  c.peak_lr = 6e-4;
  c.final_lr = 6e-5;
  c.warmup_steps = 700;
  c.total_steps = 10000;
  return c;
}

NamedParam scalar_param(double w, double g, bool decay) {
  auto t = ad::Tensor::leaf(Matrix(1, 1, w), true);
  t.mutable_grad()(0, 0) = g;
  return {"w", t, decay};
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.d = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_mlp = 16;
  c.m = 8;
  c.L = 4;
  c.vocab_size = 64;
  return c;
}

TrainConfig tiny_train(int total) {
  TrainConfig t;
  t.peak_lr = 3e-3;
  t.final_lr = 3e-4;
  t.warmup_steps = 2;
  t.total_steps = total;
  t.tokens_per_step = 24;
  t.eval_interval = 3;
  t.eval_windows = 4;
  t.seed = 99;
  return t;
}

Corpus random_corpus(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Corpus c;
  for (std::size_t i = 0; i < n; ++i) c.token_ids.push_back(static_cast<std::int32_t>(rng.below(40)));
  c.n_words = static_cast<long long>(n / 4);
  return c;
}

}  // namespace

TEST(Schedule, PaperValues) {
  const auto c = paper_schedule();
  EXPECT_DOUBLE_EQ(lr_schedule(700, c), 6e-4);
  EXPECT_NEAR(lr_schedule(10000, c), 6e-5, 1e-18);
  EXPECT_NEAR(lr_schedule(700 + (10000 - 700) / 2, c), 3.3e-4, 1e-15);
  EXPECT_EQ(lr_schedule(20000, c), 6e-5);
  EXPECT_EQ(lr_schedule(0, c), 0.0);
  EXPECT_DOUBLE_EQ(lr_schedule(350, c), 3e-4);
}

TEST(Schedule, MonotoneAfterWarmup) {
  const auto c = paper_schedule();
  double prev = lr_schedule(700, c);
  for (long long s = 701; s <= 10500; ++s) {
    const double lr = lr_schedule(s, c);
    ASSERT_LE(lr, prev) << s;
    prev = lr;
  }
}

TEST(Schedule, ConfigInvariants) {
  auto c = paper_schedule();
  c.final_lr = 1e-3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = paper_schedule();
  c.warmup_steps = c.total_steps;
  EXPECT_THROW(c.validate(), ConfigError);
  c = paper_schedule();
  c.clip_norm = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(AdamW, DecayOnlyUpdate) {
  TrainConfig c;
  c.weight_decay = 0.1;
  const std::vector<NamedParam> ps{scalar_param(1.0, 0.0, true)};
  AdamWState st;
  adamw_step(ps, st, 0.1, c);
  EXPECT_DOUBLE_EQ(ps[0].tensor.value()(0, 0), 0.99);
}

TEST(AdamW, NoDecayOnExemptParams) {
  TrainConfig c;
  c.weight_decay = 0.1;
  const std::vector<NamedParam> ps{scalar_param(1.0, 0.0, false)};
  AdamWState st;
  adamw_step(ps, st, 0.1, c);
  EXPECT_EQ(ps[0].tensor.value()(0, 0), 1.0);
}

TEST(AdamW, ConstantGradientStepsBySignTimesLr) {
  TrainConfig c;
  c.weight_decay = 0.0;
  c.eps = 1e-12;
  for (double g : {3.0, -0.25}) {
    const std::vector<NamedParam> ps{scalar_param(0.0, g, true)};
    AdamWState st;
    double prev = 0.0;
    for (int s = 0; s < 50; ++s) {
      adamw_step(ps, st, 0.01, c);
      const double w = ps[0].tensor.value()(0, 0);
      EXPECT_NEAR(w - prev, -std::copysign(0.01, g), 1e-12);
      prev = w;
    }
  }
}

TEST(AdamW, RejectsNonFiniteGradient) {
  TrainConfig c;
  const std::vector<NamedParam> ps{scalar_param(1.0, NAN, true)};
  AdamWState st;
  EXPECT_THROW(adamw_step(ps, st, 0.1, c), NumericError);
  EXPECT_EQ(ps[0].tensor.value()(0, 0), 1.0);
}

TEST(AdamW, QuadraticMatchesScalarReference) {
  // loss = 0.5 Σ a_i (w_i − b_i)², gradients written by hand.
  const std::vector<double> a{1.0, 4.0, 0.25}, b{2.0, -1.0, 0.5};
  TrainConfig c;
  c.peak_lr = 0.05;
  c.final_lr = 0.005;
  c.warmup_steps = 10;
  c.total_steps = 100;
  c.weight_decay = 0.01;
  auto w = ad::Tensor::leaf(Matrix(1, 3, std::vector<double>{-3.0, 4.0, 6.0}), true);
  const std::vector<NamedParam> ps{{"w", w, true}};
  AdamWState st;

  std::vector<double> rw{-3.0, 4.0, 6.0}, rm(3), rv(3);
  const auto loss_of = [&](const std::vector<double>& x) {
    double l = 0;
    for (int i = 0; i < 3; ++i) l += 0.5 * a[i] * (x[i] - b[i]) * (x[i] - b[i]);
    return l;
  };
  double prev_loss = loss_of(rw);
  for (int step = 1; step <= 100; ++step) {
    for (int i = 0; i < 3; ++i) w.mutable_grad()(0, i) = a[i] * (w.value()(0, i) - b[i]);
    const double lr = lr_schedule(step, c);
    adamw_step(ps, st, lr, c);
    for (int i = 0; i < 3; ++i) {
      const double g = a[i] * (rw[i] - b[i]);
      rm[i] = 0.9 * rm[i] + 0.1 * g;
      rv[i] = 0.95 * rv[i] + 0.05 * g * g;
      const double mh = rm[i] / (1 - std::pow(0.9, step));
      const double vh = rv[i] / (1 - std::pow(0.95, step));
      rw[i] = rw[i] - lr * (mh / (std::sqrt(vh) + 1e-8)) - lr * 0.01 * rw[i];
    }
    for (int i = 0; i < 3; ++i) ASSERT_NEAR(w.value()(0, i), rw[i], 1e-12) << "step " << step;
    const double l = loss_of(rw);
    if (step > c.warmup_steps) EXPECT_LT(l, prev_loss) << "step " << step;
    prev_loss = l;
  }
}

TEST(Clip, ScalesDownLargeNorm) {
  Matrix g1(1, 2, std::vector<double>{1.2, 0.0}), g2(1, 1, std::vector<double>{1.6});
  std::vector<Matrix*> gs{&g1, &g2};
  EXPECT_DOUBLE_EQ(clip_gradients(gs, 1.0), 2.0);
  EXPECT_DOUBLE_EQ(g1(0, 0), 0.6);
  EXPECT_DOUBLE_EQ(g2(0, 0), 0.8);
}

TEST(Clip, LeavesSmallNormAlone) {
  Matrix g(1, 2, std::vector<double>{0.3, 0.4});
  std::vector<Matrix*> gs{&g};
  EXPECT_DOUBLE_EQ(clip_gradients(gs, 1.0), 0.5);
  EXPECT_EQ(g, Matrix(1, 2, std::vector<double>{0.3, 0.4}));
}

TEST(Clip, PostNormIsMinOfPreNormAndClip) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix g(4, 5);
    for (auto& v : g.data()) v = rng.normal(0, 0.5);
    const Matrix before = g;
    std::vector<Matrix*> gs{&g};
    const double pre = clip_gradients(gs, 1.0);
    double post = 0;
    for (double v : g.data()) post += v * v;
    EXPECT_NEAR(std::sqrt(post), std::min(pre, 1.0), 1e-12);
    // Direction preserved.
    const double s = g(0, 0) / before(0, 0);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g.data()[i], s * before.data()[i], 1e-12);
  }
}

TEST(Trainer, ResumeIsBitIdentical) {
  const auto train = random_corpus(600, 1), valid = random_corpus(100, 2);
  const auto tc = tiny_train(8);

  Model full_model(tiny_model(), tc.seed);
  Trainer full(full_model, train, &valid, tc);
  std::vector<double> full_losses;
  for (int s = 0; s < 8; ++s) full_losses.push_back(full.train_step());

  const auto dir = std::filesystem::temp_directory_path() / "logcomp_test_resume";
  std::filesystem::create_directories(dir);
  {
    Model m(tiny_model(), tc.seed);
    Trainer t(m, train, &valid, tc);
    for (int s = 0; s < 5; ++s) EXPECT_EQ(t.train_step(), full_losses[static_cast<std::size_t>(s)]);
    write_checkpoint(dir / "mid.ckpt", t.checkpoint());
  }
  Model resumed_model(tiny_model(), 12345);  // different init, overwritten by resume
  Trainer resumed(resumed_model, train, &valid, tc);
  resumed.resume(read_checkpoint(dir / "mid.ckpt"));
  EXPECT_EQ(resumed.step(), 5);
  for (int s = 5; s < 8; ++s) EXPECT_EQ(resumed.train_step(), full_losses[static_cast<std::size_t>(s)]);
  const auto a = full_model.params().list(), b = resumed_model.params().list();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].tensor.value(), b[i].tensor.value()) << a[i].name;
  std::filesystem::remove_all(dir);
}

TEST(Trainer, ResumeRejectsOtherConfig) {
  const auto train = random_corpus(300, 1);
  const auto tc = tiny_train(4);
  Model m(tiny_model(), 1);
  Trainer t(m, train, nullptr, tc);
  auto other = tiny_model();
  other.L = 5;
  Model m2(other, 1);
  Trainer t2(m2, train, nullptr, tc);
  EXPECT_THROW(t.resume(t2.checkpoint()), ConfigError);
}

TEST(Trainer, RunWritesMetricsAndCheckpoints) {
  const auto train = random_corpus(600, 3), valid = random_corpus(100, 4);
  const auto tc = tiny_train(7);
  const auto dir = std::filesystem::temp_directory_path() / "logcomp_test_run";
  std::filesystem::remove_all(dir);
  Model model(tiny_model(), tc.seed);
  Trainer trainer(model, train, &valid, tc, dir);
  const auto result = trainer.run();
  ASSERT_EQ(result.history.size(), 7u);
  EXPECT_TRUE(std::filesystem::exists(dir / "best.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "last.ckpt"));
  std::ifstream log(dir / "metrics.jsonl");
  std::string line;
  int lines = 0, with_val = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    ++lines;
    EXPECT_EQ(j["step"].get<int>(), lines);
    EXPECT_TRUE(std::isfinite(j["train_loss"].get<double>()));
    if (!j["val_loss"].is_null()) {
      ++with_val;
      EXPECT_NEAR(j["val_ppl"].get<double>(), std::exp(j["val_loss"].get<double>()), 1e-9);
    }
  }
  EXPECT_EQ(lines, 7);
  EXPECT_EQ(with_val, 3);  // steps 3, 6 and the final step 7
  const auto last = read_checkpoint(dir / "last.ckpt");
  EXPECT_EQ(last.header.at("train.step"), "7");
  EXPECT_NE(last.find("adam.m/token_embedding"), nullptr);
  for (const auto& p : model.params().list()) EXPECT_TRUE(p.tensor.value().all_finite());
  std::filesystem::remove_all(dir);
}

TEST(Trainer, SeedDeterminism) {
  const auto train = random_corpus(400, 5);
  const auto run = [&](std::uint64_t seed) {
    auto tc = tiny_train(3);
    tc.seed = seed;
    Model m(tiny_model(), seed);
    Trainer t(m, train, nullptr, tc);
    t.run();
    return m.params().token_embedding.value();
  };
  EXPECT_EQ(run(7), run(7));
  EXPECT_NE(run(7), run(8));
}

TEST(Trainer, DeltaControlUsesSameLoop) {
  const auto train = random_corpus(400, 6);
  auto cfg = tiny_model();
  cfg.variant = Variant::delta_control;
  Model m(cfg, 1);
  Trainer t(m, train, nullptr, tiny_train(3));
  const auto r = t.run();
  EXPECT_EQ(r.history.size(), 3u);
  EXPECT_TRUE(std::isfinite(r.history.back().train_loss));
}
