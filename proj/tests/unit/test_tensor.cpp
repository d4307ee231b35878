#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "uetrack/gradcheck.hpp"
#include "uetrack/nn.hpp"
#include "uetrack/ops.hpp"

using namespace uetrack;

namespace {

bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace

TEST(Tensor, ShapeMatchesData) {
  Tensor t = Tensor::zeros({2, 3, 4});
  EXPECT_EQ(t.numel(), 24);
  EXPECT_EQ(t.buffer().size(), 24u);
  EXPECT_THROW(Tensor::from_values({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
}

TEST(Tensor, SoftmaxOfZerosIsUniform) {
  Tensor y = softmax(Tensor::zeros({3}), 0);
  for (double v : y.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-7);
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = randn({4, 7, 5}, rng, 5.0);
    for (int axis = 0; axis < 3; ++axis) {
      Tensor s = sum(softmax(x, axis), axis);
      for (double v : s.values()) EXPECT_NEAR(v, 1.0, 1e-6);
      for (double v : softmax(x, axis).values()) EXPECT_GE(v, 0.0);
    }
  }
}

TEST(Tensor, InvalidAxisThrows) {
  EXPECT_THROW(softmax(Tensor::zeros({2, 3}), 2), ShapeError);
  EXPECT_THROW(sum(Tensor::zeros({2, 3}), -3), ShapeError);
}

TEST(Tensor, IdentityMatmul) {
  Rng rng(1);
  Tensor a = randn({3, 3}, rng);
  Tensor eye = Tensor::from_values({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(matmul(eye, a).values(), a.values());
}

TEST(Tensor, MatmulShapeErrorNamesShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2, 3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4, 5]"), std::string::npos);
  }
}

TEST(Tensor, BatchedMatmulMatchesLoop) {
  Rng rng(2);
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      Tensor a = randn(ta ? Shape{2, 4, 3} : Shape{2, 3, 4}, rng, 1.0, Dtype::f64);
      Tensor b = randn(tb ? Shape{2, 5, 4} : Shape{2, 4, 5}, rng, 1.0, Dtype::f64);
      Tensor c = matmul(a, b, ta, tb);
      ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
      for (int n = 0; n < 2; ++n)
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 5; ++j) {
            double acc = 0;
            for (int k = 0; k < 4; ++k) {
              const double av = ta ? a.value(n * 12 + k * 3 + i) : a.value(n * 12 + i * 4 + k);
              const double bv = tb ? b.value(n * 20 + j * 4 + k) : b.value(n * 20 + k * 5 + j);
              acc += av * bv;
            }
            EXPECT_NEAR(c.value(n * 15 + i * 5 + j), acc, 1e-12);
          }
    }
}

TEST(Tensor, ConvLocalSums) {
  std::vector<double> v(16);
  for (int i = 0; i < 16; ++i) v[i] = i;
  Tensor x = Tensor::from_values({1, 4, 4, 1}, v);
  Tensor w = Tensor::full({2, 2, 1, 1}, 1.0);
  Tensor y = conv2d(x, w, Tensor(), 2);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 2, 1}));
  for (int oy = 0; oy < 2; ++oy)
    for (int ox = 0; ox < 2; ++ox) {
      double s = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) s += v[(oy * 2 + dy) * 4 + ox * 2 + dx];
      EXPECT_DOUBLE_EQ(y.value(oy * 2 + ox), s);
    }
}

TEST(Tensor, BackwardSquareSum) {
  Tensor x = Tensor::from_values({3}, {1, 2, 3});
  x.set_requires_grad(true);
  sum(mul(x, x)).backward();
  EXPECT_EQ(x.grad_values(), (std::vector<double>{2, 4, 6}));
}

TEST(Tensor, BackwardAccumulates) {
  Tensor x = Tensor::from_values({3}, {1, 2, 3});
  x.set_requires_grad(true);
  Tensor loss = sum(mul(x, x));
  loss.backward();
  loss.backward();
  EXPECT_EQ(x.grad_values(), (std::vector<double>{4, 8, 12}));
}

TEST(Tensor, BackwardNeedsScalar) {
  Tensor x = Tensor::zeros({3});
  x.set_requires_grad(true);
  EXPECT_THROW(mul(x, x).backward(), ShapeError);
}

TEST(Tensor, SoftmaxCrossEntropyGradientPattern) {
  Tensor logits = Tensor::zeros({5}, Dtype::f64);
  logits.set_requires_grad(true);
  Tensor onehot = Tensor::from_values({5}, {0, 0, 1, 0, 0}, Dtype::f64);
  neg(sum(mul(log_softmax(logits, 0), onehot))).backward();
  auto g = logits.grad_values();
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(g[i], 0.2 - (i == 2 ? 1.0 : 0.0), 1e-12);
}

TEST(Tensor, MatmulGeluChainMatchesFiniteDifferences) {
  DtypeScope scope(Dtype::f64);
  Rng rng(5);
  Tensor a = randn({3, 3}, rng);
  Tensor w = randn({3, 3}, rng);
  a.set_requires_grad(true);
  w.set_requires_grad(true);
  double err = finite_diff_check([&] { return sum(gelu(matmul(gelu(matmul(a, w)), w))); }, {a, w}, 1e-4);
  EXPECT_LT(err, 1e-6);
}

TEST(Tensor, ReshapeTransposeRoundTripBitExact) {
  Rng rng(7);
  Tensor x = randn({2, 3, 4}, rng);
  Tensor y = transpose(transpose(reshape(reshape(x, {6, 4}), {2, 3, 4}), 0, 2), 0, 2);
  EXPECT_EQ(std::memcmp(x.data<float>().data(), y.data<float>().data(), 24 * sizeof(float)), 0);
  Tensor p = permute(permute(x, {2, 0, 1}), {1, 2, 0});
  EXPECT_EQ(p.values(), x.values());
}

TEST(Tensor, DeterministicUnderSeed) {
  auto run = [] {
    Rng rng(11);
    Tensor x = randn({4, 6}, rng);
    Tensor w = randn({6, 5}, rng);
    return softmax(gelu(matmul(x, w)), 1).values();
  };
  EXPECT_EQ(run(), run());
}

TEST(Tensor, NoGradGuardSkipsGraph) {
  Tensor x = Tensor::from_values({2}, {1, 2});
  x.set_requires_grad(true);
  NoGradGuard guard;
  EXPECT_FALSE(mul(x, x).requires_grad());
}

TEST(Tensor, FlopCountDependsOnShapeOnly) {
  Rng rng(1);
  std::uint64_t first = 0;
  for (int i = 0; i < 5; ++i) {
    Tensor a = randn({4, 8}, rng), b = randn({8, 3}, rng);
    FlopScope scope;
    softmax(matmul(a, b), 1);
    if (i == 0) first = scope.elapsed();
    EXPECT_EQ(scope.elapsed(), first);
  }
  EXPECT_GT(first, 0u);
}

TEST(Tensor, FiniteDiffOfSumIsExact) {
  Rng rng(2);
  Tensor x = randn({7}, rng, 1.0, Dtype::f64);
  EXPECT_LT(finite_diff_check([](const Tensor& t) { return sum(t); }, x, 1e-4), 1e-10);
}

TEST(Tensor, CorruptedBackwardIsDetected) {
  DtypeScope scope(Dtype::f64);
  Rng rng(3);
  Tensor x = rand_uniform({6}, rng, 0.5, 1.5);
  x.set_requires_grad(true);
  // Square with a backward rule that forgets the factor 2.
  auto bad_square = [](const Tensor& t) {
    Buffer out(t.dtype(), t.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out.set(i, t.value(i) * t.value(i));
    return Tensor::make_result("bad_square", t.shape(), std::move(out), {t}, [t](const Buffer& g, std::span<Buffer*> gin) {
      if (!gin[0]) return;
      for (std::size_t i = 0; i < g.size(); ++i) gin[0]->set(i, gin[0]->get(i) + g.get(i) * t.value(i));
    });
  };
  double err = finite_diff_check([&] { return sum(bad_square(x)); }, {x}, 1e-4);
  EXPECT_GT(err, 1e-2);
}

TEST(Tensor, LeafGradsFinite) {
  Rng rng(4);
  Tensor x = randn({3, 4}, rng, 3.0);
  Tensor g = Tensor::full({4}, 1.0), b = Tensor::zeros({4});
  x.set_requires_grad(true);
  sum(log(add_scalar(sigmoid(layer_norm(x, g, b)), 1e-3))).backward();
  EXPECT_TRUE(all_finite(x.grad_values()));
}

TEST(Tensor, SliceConcatRoundTrip) {
  Rng rng(8);
  Tensor x = randn({3, 5, 2}, rng);
  Tensor y = concat({slice(x, 1, 0, 2), slice(x, 1, 2, 5)}, 1);
  EXPECT_EQ(y.values(), x.values());
  EXPECT_THROW(slice(x, 1, 3, 6), ShapeError);
}

TEST(Tensor, ExpandRepeats) {
  Tensor x = Tensor::from_values({1, 2}, {1, 2});
  Tensor y = expand(x, {3, 2});
  EXPECT_EQ(y.values(), (std::vector<double>{1, 2, 1, 2, 1, 2}));
  EXPECT_THROW(expand(Tensor::zeros({2, 2}), {3, 2}), ShapeError);
}

TEST(Tensor, AvgPoolDivisibility) {
  Tensor x = Tensor::from_values({4, 1}, {1, 3, 0, 2});
  EXPECT_EQ(avg_pool1d(x, 2, 0).values(), (std::vector<double>{2, 1}));
  EXPECT_THROW(avg_pool1d(x, 3, 0), ShapeError);
}

TEST(Tensor, StraightThroughForwardIsHard) {
  Tensor hard = Tensor::from_values({2}, {1, 0});
  Tensor soft = Tensor::from_values({2}, {0.7, 0.3});
  soft.set_requires_grad(true);
  Tensor y = straight_through(hard, soft);
  EXPECT_EQ(y.values(), hard.values());
  sum(mul(y, Tensor::from_values({2}, {2, 3}))).backward();
  EXPECT_EQ(soft.grad_values(), (std::vector<double>{2, 3}));
}
