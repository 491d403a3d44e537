#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "gradcheck.hpp"
#include "logcomp/compressor.hpp"
#include "logcomp/random.hpp"
#include "logcomp/tensor.hpp"

using namespace logcomp;
using namespace logcomp::ad;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (auto& v : m.data()) v = rng.normal(0, scale);
  return m;
}

// Runs `build` once with gradients, then checks every input by central differences.
template <typename Build>
check::GradCheckResult check_op(std::vector<std::pair<std::string, Tensor>> inputs, Build build, double h = 1e-5) {
  for (auto& [name, t] : inputs) t.zero_grad();
  {
    Tape tape;
    tape.backward(build(tape));
  }
  std::vector<Matrix> analytic;
  for (auto& [name, t] : inputs) analytic.push_back(t.grad());
  return check::finite_difference_check(
      [&] {
        Tape tape;
        return build(tape).item();
      },
      inputs, analytic, h);
}

}  // namespace

TEST(Tensor, SoftmaxOfZerosIsUniform) {
  Tape tape;
  const auto y = softmax_lastdim(tape, Tensor::leaf(Matrix(1, 3)));
  for (double v : y.value().data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Tensor, MaskedSoftmaxZeroesDisallowed) {
  Tape tape;
  const std::vector<std::uint8_t> allowed{1, 0, 1, 0, 0, 1};
  const auto y = softmax_lastdim(tape, Tensor::leaf(Matrix(2, 3, 4.0)), allowed);
  EXPECT_EQ(y.value()(0, 1), 0.0);
  EXPECT_NEAR(y.value()(0, 0), 0.5, 1e-15);
  EXPECT_EQ(y.value()(1, 2), 1.0);
  const std::vector<std::uint8_t> none{0, 0, 0};
  EXPECT_THROW(softmax_lastdim(tape, Tensor::leaf(Matrix(1, 3)), none), ConfigError);
}

TEST(Tensor, CrossEntropyOfUniformLogitsIsLogV) {
  for (int V : {2, 16, 320}) {
    Tape tape;
    const std::vector<std::int32_t> targets{0, V - 1};
    const std::vector<std::uint8_t> mask{1, 1};
    const auto loss = masked_cross_entropy(tape, Tensor::leaf(Matrix(2, static_cast<std::size_t>(V))), targets, mask);
    EXPECT_NEAR(loss.item(), std::log(static_cast<double>(V)), 1e-12);
  }
}

TEST(Tensor, CrossEntropyRejectsBadInput) {
  Tape tape;
  const auto logits = Tensor::leaf(Matrix(2, 4));
  const std::vector<std::int32_t> targets{1, 2};
  const std::vector<std::uint8_t> none{0, 0};
  EXPECT_THROW(masked_cross_entropy(tape, logits, targets, none), ConfigError);
  const std::vector<std::int32_t> oob{1, 4};
  const std::vector<std::uint8_t> all{1, 1};
  EXPECT_THROW(masked_cross_entropy(tape, logits, oob, all), ConfigError);
}

TEST(Tensor, CrossEntropyIgnoresMaskedPaddingTargets) {
  Tape tape;
  const std::vector<std::int32_t> targets{1, 999};
  const std::vector<std::uint8_t> mask{1, 0};
  Rng rng(1);
  const auto logits = Tensor::leaf(random_matrix(2, 4, rng), true);
  const auto loss = masked_cross_entropy(tape, logits, targets, mask);
  tape.backward(loss);
  for (double g : logits.grad().row(1)) EXPECT_EQ(g, 0.0);
}

TEST(Tensor, IdentityMatmul) {
  Rng rng(2);
  const Matrix x = random_matrix(3, 4, rng);
  Matrix eye(4, 4);
  for (std::size_t i = 0; i < 4; ++i) eye(i, i) = 1;
  Tape tape;
  EXPECT_EQ(matmul(tape, Tensor::leaf(x), Tensor::leaf(eye)).value(), x);
  EXPECT_THROW(matmul(tape, Tensor::leaf(x), Tensor::leaf(x)), ConfigError);
}

TEST(Tensor, SquareGradientAtThree) {
  auto x = Tensor::leaf(Matrix(1, 1, 3.0), true);
  Tape tape;
  const auto y = sum(tape, mul(tape, x, x));
  EXPECT_EQ(y.item(), 9.0);
  tape.backward(y);
  EXPECT_EQ(x.grad()(0, 0), 6.0);
}

TEST(Tensor, CrossEntropyGradientIsSoftmaxMinusOneHot) {
  Rng rng(3);
  auto z = Tensor::leaf(random_matrix(1, 5, rng), true);
  Tape tape;
  const std::vector<std::int32_t> target{2};
  const std::vector<std::uint8_t> mask{1};
  tape.backward(masked_cross_entropy(tape, z, target, mask));
  double s = 0;
  for (double v : z.value().data()) s += std::exp(v);
  for (std::size_t c = 0; c < 5; ++c) {
    const double expected = std::exp(z.value()(0, c)) / s - (c == 2 ? 1.0 : 0.0);
    EXPECT_NEAR(z.grad()(0, c), expected, 1e-14);
  }
}

TEST(Tensor, BackwardRequiresScalar) {
  Tape tape;
  EXPECT_THROW(tape.backward(Tensor::leaf(Matrix(2, 1), true)), ConfigError);
}

TEST(Tensor, GradientsAccumulateAcrossUses) {
  auto x = Tensor::leaf(Matrix(1, 2, std::vector<double>{1.5, -2}), true);
  Tape tape;
  const auto y = sum(tape, add(tape, x, scale(tape, x, 3.0)));
  tape.backward(y);
  EXPECT_EQ(x.grad()(0, 0), 4.0);
  EXPECT_EQ(x.grad()(0, 1), 4.0);
}

class OpGradient : public ::testing::Test {
 protected:
  Rng rng{77};
  Tensor probe(std::size_t r, std::size_t c) { return Tensor::leaf(random_matrix(r, c, rng)); }
  // Reduces an arbitrary output to a scalar with fixed random weights.
  static Tensor reduce(Tape& tape, const Tensor& y, const Tensor& w) { return sum(tape, mul(tape, y, w)); }
};

TEST_F(OpGradient, Matmul) {
  auto a = Tensor::leaf(random_matrix(3, 4, rng), true);
  auto b = Tensor::leaf(random_matrix(4, 2, rng), true);
  const auto w = probe(3, 2);
  const auto r = check_op({{"a", a}, {"b", b}}, [&](Tape& t) { return reduce(t, matmul(t, a, b), w); });
  EXPECT_LE(r.max_rel_error, 1e-6) << r.worst;
}

TEST_F(OpGradient, MatmulNT) {
  auto a = Tensor::leaf(random_matrix(3, 4, rng), true);
  auto b = Tensor::leaf(random_matrix(5, 4, rng), true);
  const auto w = probe(3, 5);
  const auto r = check_op({{"a", a}, {"b", b}}, [&](Tape& t) { return reduce(t, matmul_nt(t, a, b), w); });
  EXPECT_LE(r.max_rel_error, 1e-6) << r.worst;
}

TEST_F(OpGradient, AddRowAndScale) {
  auto a = Tensor::leaf(random_matrix(3, 4, rng), true);
  auto b = Tensor::leaf(random_matrix(1, 4, rng), true);
  const auto w = probe(3, 4);
  const auto r = check_op({{"a", a}, {"bias", b}},
                          [&](Tape& t) { return reduce(t, scale(t, add_row(t, a, b), -1.3), w); });
  EXPECT_LE(r.max_rel_error, 1e-6) << r.worst;
}

TEST_F(OpGradient, Gelu) {
  auto a = Tensor::leaf(random_matrix(4, 5, rng, 2.0), true);
  const auto w = probe(4, 5);
  const auto r = check_op({{"a", a}}, [&](Tape& t) { return reduce(t, gelu(t, a), w); });
  EXPECT_LE(r.max_rel_error, 1e-6) << r.worst;
}

TEST_F(OpGradient, GeluMatchesTanhFormula) {
  Tape tape;
  const auto y = gelu(tape, Tensor::leaf(Matrix(1, 3, std::vector<double>{-1.0, 0.0, 2.0})));
  const auto ref = [](double x) {
    return 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x)));
  };
  EXPECT_NEAR(y.value()(0, 0), ref(-1.0), 1e-15);
  EXPECT_EQ(y.value()(0, 1), 0.0);
  EXPECT_NEAR(y.value()(0, 2), ref(2.0), 1e-15);
}

TEST_F(OpGradient, MaskedSoftmax) {
  auto a = Tensor::leaf(random_matrix(3, 3, rng), true);
  const std::vector<std::uint8_t> causal{1, 0, 0, 1, 1, 0, 1, 1, 1};
  const auto w = probe(3, 3);
  const auto r = check_op({{"a", a}}, [&](Tape& t) { return reduce(t, softmax_lastdim(t, a, causal), w); });
  EXPECT_LE(r.max_rel_error, 1e-6) << r.worst;
}

TEST_F(OpGradient, LayerNorm) {
  auto a = Tensor::leaf(random_matrix(3, 6, rng), true);
  auto g = Tensor::leaf(random_matrix(1, 6, rng), true);
  auto b = Tensor::leaf(random_matrix(1, 6, rng), true);
  const auto w = probe(3, 6);
  const auto r = check_op({{"x", a}, {"gain", g}, {"bias", b}},
                          [&](Tape& t) { return reduce(t, layernorm_lastdim(t, a, g, b), w); });
  EXPECT_LE(r.max_rel_error, 1e-6) << r.worst;
}

TEST_F(OpGradient, GatherRowsRepeatedIds) {
  auto table = Tensor::leaf(random_matrix(5, 3, rng), true);
  const std::vector<std::int32_t> ids{4, 0, 4, 2};
  const auto w = probe(4, 3);
  const auto r = check_op({{"table", table}}, [&](Tape& t) { return reduce(t, gather_rows(t, table, ids), w); });
  EXPECT_LE(r.max_rel_error, 1e-6) << r.worst;
  Tape tape;
  const std::vector<std::int32_t> bad{5};
  EXPECT_THROW(gather_rows(tape, table, bad), ConfigError);
}

TEST_F(OpGradient, SlicesAndConcats) {
  auto a = Tensor::leaf(random_matrix(4, 6, rng), true);
  auto b = Tensor::leaf(random_matrix(2, 6, rng), true);
  const auto w = probe(6, 6);
  const auto r = check_op({{"a", a}, {"b", b}}, [&](Tape& t) {
    auto left = slice_cols(t, a, 0, 2);
    auto right = slice_cols(t, a, 2, 4);
    auto swapped = concat_cols(t, {right, left});
    auto stacked = concat_rows(t, swapped, b);
    auto top = slice_rows(t, stacked, 1, 5);
    return reduce(t, concat_rows(t, slice_rows(t, stacked, 0, 1), top), w);
  });
  EXPECT_LE(r.max_rel_error, 1e-6) << r.worst;
}

TEST_F(OpGradient, CrossEntropy) {
  auto z = Tensor::leaf(random_matrix(4, 7, rng), true);
  const std::vector<std::int32_t> targets{3, 0, 6, 2};
  const std::vector<std::uint8_t> mask{1, 0, 1, 1};
  const auto r = check_op({{"logits", z}}, [&](Tape& t) { return masked_cross_entropy(t, z, targets, mask); });
  EXPECT_LE(r.max_rel_error, 1e-6) << r.worst;
}

TEST_F(OpGradient, AttentionBlock) {
  // One masked self-attention head followed by an MLP, composed from primitives.
  const std::size_t n = 5, d = 4;
  auto x = Tensor::leaf(random_matrix(n, d, rng), true);
  auto wq = Tensor::leaf(random_matrix(d, d, rng, 0.5), true);
  auto wk = Tensor::leaf(random_matrix(d, d, rng, 0.5), true);
  auto wv = Tensor::leaf(random_matrix(d, d, rng, 0.5), true);
  auto w1 = Tensor::leaf(random_matrix(d, 8, rng, 0.5), true);
  auto w2 = Tensor::leaf(random_matrix(8, d, rng, 0.5), true);
  auto g = Tensor::leaf(Matrix(1, d, 1.0), true);
  auto b = Tensor::leaf(Matrix(1, d), true);
  std::vector<std::uint8_t> mask(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) mask[i * n + j] = 1;
  const auto w = probe(n, d);
  const auto r = check_op({{"x", x}, {"wq", wq}, {"wk", wk}, {"wv", wv}, {"w1", w1}, {"w2", w2}, {"g", g}, {"b", b}},
                          [&](Tape& t) {
                            auto h = layernorm_lastdim(t, x, g, b);
                            auto q = matmul(t, h, wq), k = matmul(t, h, wk), v = matmul(t, h, wv);
                            auto att = softmax_lastdim(t, scale(t, matmul_nt(t, q, k), 0.5), mask);
                            auto y = add(t, x, matmul(t, att, v));
                            y = add(t, y, matmul(t, gelu(t, matmul(t, y, w1)), w2));
                            return reduce(t, y, w);
                          });
  EXPECT_LE(r.max_rel_error, 1e-6) << r.worst;
}

TEST(Tensor, ForwardBackwardIsDeterministic) {
  const auto run = [] {
    Rng rng(5);
    auto a = Tensor::leaf(random_matrix(6, 6, rng), true);
    auto b = Tensor::leaf(random_matrix(6, 6, rng), true);
    Tape tape;
    auto y = sum(tape, gelu(tape, matmul(tape, a, b)));
    tape.backward(y);
    return std::make_pair(y.item(), a.grad());
  };
  const auto first = run();
  const auto second = run();
  EXPECT_EQ(first.first, second.first);
  EXPECT_EQ(first.second, second.second);
}

TEST(Tensor, NoRecordWithoutGradients) {
  Tape tape;
  auto y = matmul(tape, Tensor::leaf(Matrix(2, 2, 1.0)), Tensor::leaf(Matrix(2, 2, 1.0)));
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
}
