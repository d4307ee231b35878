#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "uetrack/gradcheck.hpp"
#include "uetrack/losses.hpp"
#include "uetrack/ops.hpp"

using namespace uetrack;
using namespace uetrack::loss;

namespace {

// Scalar-loop penalty-reduced focal loss, one sample.
double focal_oracle(const std::vector<double>& p, const std::vector<double>& g) {
  double total = 0;
  int npos = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], kProbClamp, 1 - kProbClamp);
    if (g[i] == 1.0) {
      total += (1 - q) * (1 - q) * std::log(q);
      ++npos;
    } else {
      total += std::pow(1 - g[i], 4) * q * q * std::log(1 - q);
    }
  }
  return -total / std::max(npos, 1);
}

struct Leaves {
  Tensor score_logits, offset, size, task, feats;
};

Leaves random_leaves(int B, int g, int d, Rng& rng, Dtype dt = Dtype::f64) {
  Leaves l{randn({B, g, g}, rng, 1.0, dt), randn({B, g, g, 2}, rng, 1.0, dt), randn({B, g, g, 2}, rng, 1.0, dt),
           randn({B, 5}, rng, 1.0, dt), randn({B, g * g, d}, rng, 1.0, dt)};
  for (Tensor* t : {&l.score_logits, &l.offset, &l.size, &l.task, &l.feats}) t->set_requires_grad(true);
  return l;
}

model::Prediction predict(const Leaves& l) {
  model::Prediction p;
  p.score_logits = l.score_logits;
  p.score_map = sigmoid(l.score_logits);
  p.offset = sigmoid(l.offset);
  p.size = sigmoid(l.size);
  p.task_logits = l.task;
  p.search_features = l.feats;
  return p;
}

Targets random_targets(int B, int g, int res, Rng& rng, Dtype dt = Dtype::f64) {
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<BBox> boxes;
  std::vector<int> labels;
  for (int b = 0; b < B; ++b) {
    boxes.push_back({u(rng) * res, u(rng) * res, 8 + u(rng) * res / 3, 8 + u(rng) * res / 3});
    labels.push_back(b % 5);
  }
  return make_targets(boxes, labels, res, g, dt);
}

}  // namespace

TEST(Targets, GaussianPeakAtGtCell) {
  Targets t = make_targets({BBox{40, 72, 30, 20}}, {2}, 128, 8);
  EXPECT_EQ(t.cells[0], 4 * 8 + 2);
  EXPECT_EQ(t.gt_map.value(t.cells[0]), 1.0);
  int ones = 0;
  for (double v : t.gt_map.values()) ones += v == 1.0;
  EXPECT_EQ(ones, 1);
  const double sigma = std::max(1.0, 20.0 / 16 / 3);
  EXPECT_NEAR(t.gt_map.value(t.cells[0] + 1), std::exp(-1 / (2 * sigma * sigma)), 1e-6);
  EXPECT_EQ(t.norm_boxes.values(), (std::vector<double>{40.0 / 128, 72.0 / 128, 30.0 / 128, 20.0 / 128}));
}

TEST(Focal, PerfectPredictionNearZero) {
  std::vector<double> onehot(16, 0.0);
  onehot[5] = 1.0;
  Tensor m = Tensor::from_values({1, 4, 4}, onehot, Dtype::f64);
  EXPECT_LT(focal_loss(m, m).item(), 1e-4);
}

TEST(Focal, HalfEverywhereOnTwoByTwo) {
  Tensor s = Tensor::full({1, 2, 2}, 0.5, Dtype::f64);
  Tensor g = Tensor::from_values({1, 2, 2}, {1, 0, 0, 0}, Dtype::f64);
  const double v = focal_loss(s, g).item();
  EXPECT_NEAR(v, focal_oracle({0.5, 0.5, 0.5, 0.5}, {1, 0, 0, 0}), 1e-12);
  EXPECT_NEAR(v, std::log(2.0), 1e-12);
  Tensor g2 = Tensor::from_values({1, 2, 2}, {1, 0.6, 0.6, 0.3}, Dtype::f64);
  EXPECT_NEAR(focal_loss(s, g2).item(), focal_oracle({0.5, 0.5, 0.5, 0.5}, {1, 0.6, 0.6, 0.3}), 1e-12);
}

TEST(Focal, MatchesOracleOnRandomMaps) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Targets t = random_targets(3, 6, 96, rng);
    Tensor s = rand_uniform({3, 6, 6}, rng, 0.0, 1.0, Dtype::f64);
    Tensor f = focal_loss(s, t.gt_map);
    for (int b = 0; b < 3; ++b) {
      std::vector<double> p(36), g(36);
      for (int i = 0; i < 36; ++i) {
        p[i] = s.value(b * 36 + i);
        g[i] = t.gt_map.value(b * 36 + i);
      }
      EXPECT_NEAR(f.value(b), focal_oracle(p, g), 1e-10);
      EXPECT_GE(f.value(b), 0.0);
    }
  }
}

TEST(Focal, DecreasesAsPeakScoreRises) {
  Tensor g = Tensor::from_values({1, 2, 2}, {1, 0.5, 0.2, 0}, Dtype::f64);
  double prev = 1e9;
  for (double peak = 0.05; peak < 1.0; peak += 0.05) {
    const double v = focal_loss(Tensor::from_values({1, 2, 2}, {peak, 0.3, 0.2, 0.1}, Dtype::f64), g).item();
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(Focal, ShapeMismatchThrows) { EXPECT_THROW(focal_loss(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 4})), ShapeError); }

TEST(Giou, Examples) {
  BBox a = BBox::from_corners(0, 0, 1, 1), b = BBox::from_corners(2, 2, 3, 3);
  EXPECT_NEAR(giou(a, b), -7.0 / 9.0, 1e-12);
  EXPECT_NEAR(giou_loss(a, b), 1 + 7.0 / 9.0, 1e-12);
  EXPECT_NEAR(giou(a, a), 1.0, 1e-12);
  EXPECT_NEAR(giou_loss(a, a), 0.0, 1e-12);
  BBox outer = BBox::from_corners(-1, -1, 3, 2), inner = BBox::from_corners(0, 0, 1, 1);
  EXPECT_NEAR(giou(inner, outer), iou(inner, outer), 1e-12);
  EXPECT_THROW(giou(BBox{0, 0, 0, 1}, a), std::invalid_argument);
}

TEST(Giou, TensorMatchesScalar) {
  Rng rng(4);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<double> pv, gv;
  std::vector<BBox> pb, gb;
  for (int i = 0; i < 50; ++i) {
    BBox p{u(rng), u(rng), u(rng), u(rng)}, g{u(rng), u(rng), u(rng), u(rng)};
    pb.push_back(p);
    gb.push_back(g);
    for (double v : {p.cx, p.cy, p.w, p.h}) pv.push_back(v);
    for (double v : {g.cx, g.cy, g.w, g.h}) gv.push_back(v);
  }
  Tensor l = giou_loss(Tensor::from_values({50, 4}, pv, Dtype::f64), Tensor::from_values({50, 4}, gv, Dtype::f64));
  for (int i = 0; i < 50; ++i) {
    EXPECT_NEAR(l.value(i), giou_loss(pb[i], gb[i]), 1e-12);
    EXPECT_GE(l.value(i), 0.0);
    EXPECT_LT(l.value(i), 2.0);
  }
}

TEST(L1, Examples) {
  BBox a{0.5, 0.5, 0.2, 0.2}, b{0.5, 0.5, 0.4, 0.2};
  EXPECT_NEAR(l1_loss(a, b), 0.05, 1e-12);
  EXPECT_EQ(l1_loss(a, b), l1_loss(b, a));
  EXPECT_EQ(l1_loss(a, a), 0.0);
  Tensor t = l1_loss(Tensor::from_values({1, 4}, {0.5, 0.5, 0.2, 0.2}, Dtype::f64),
                     Tensor::from_values({1, 4}, {0.5, 0.5, 0.4, 0.2}, Dtype::f64));
  EXPECT_NEAR(t.item(), 0.05, 1e-12);
}

TEST(TaskCe, Examples) {
  EXPECT_NEAR(task_ce(Tensor::zeros({1, 5}, Dtype::f64), {3}).item(), std::log(5.0), 1e-12);
  EXPECT_LT(task_ce(Tensor::from_values({1, 5}, {0, 0, 50, 0, 0}, Dtype::f64), {2}).item(), 1e-12);
  Tensor a = Tensor::from_values({1, 5}, {0.3, -1, 2, 0.7, 0.1}, Dtype::f64);
  Tensor b = Tensor::from_values({1, 5}, {2, 0.7, 0.3, 0.1, -1}, Dtype::f64);
  EXPECT_NEAR(task_ce(a, {1}).item(), task_ce(b, {4}).item(), 1e-12);
  EXPECT_THROW(task_ce(a, {5}), std::invalid_argument);
}

TEST(Kl, Examples) {
  Rng rng(5);
  Tensor s = randn({2, 3, 3}, rng, 1.0, Dtype::f64);
  EXPECT_NEAR(kl_distill(s, s).values()[0], 0.0, 1e-12);
  Tensor t = Tensor::from_values({1, 2, 2}, {1000, 0, 0, 0}, Dtype::f64);
  Tensor st = Tensor::zeros({1, 2, 2}, Dtype::f64);
  EXPECT_NEAR(kl_distill(st, t).item(), std::log(4.0), 1e-12);
  for (int i = 0; i < 20; ++i) {
    Tensor a = randn({3, 4, 4}, rng, 2.0, Dtype::f64), b = randn({3, 4, 4}, rng, 2.0, Dtype::f64);
    for (double v : kl_distill(a, b).values()) EXPECT_GE(v, -1e-12);
  }
  EXPECT_THROW(kl_distill(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 3, 3})), ShapeError);
}

TEST(Kl, TeacherReceivesNoGradient) {
  Rng rng(6);
  Tensor s = randn({2, 3, 3}, rng), t = randn({2, 3, 3}, rng);
  s.set_requires_grad(true);
  t.set_requires_grad(true);
  sum(kl_distill(s, t)).backward();
  EXPECT_TRUE(s.has_grad());
  EXPECT_FALSE(t.has_grad());
}

TEST(FeatureMimic, Examples) {
  DtypeScope scope(Dtype::f64);
  Tensor s = Tensor::zeros({1, 2, 2}, Dtype::f64), t = Tensor::full({1, 2, 2}, 1.0, Dtype::f64);
  EXPECT_NEAR(feature_mimic(s, t, nullptr).item(), 1.0, 1e-12);
  EXPECT_EQ(feature_mimic(t, t, nullptr).item(), 0.0);
  Rng rng(7);
  Tensor a = randn({2, 5, 3}, rng, 1.0, Dtype::f64);
  Tensor b = randn({2, 5, 3}, rng, 1.0, Dtype::f64);
  Tensor zero = Tensor::zeros({2, 5, 3}, Dtype::f64);
  auto base = feature_mimic(zero, b, nullptr).values();
  auto twice = feature_mimic(zero, scale(b, 2.0), nullptr).values();
  for (int i = 0; i < 2; ++i) EXPECT_NEAR(twice[i], 4 * base[i], 1e-12);
  ParamStore ps;
  Linear identity(ps, "ad", 3, 3, rng);
  testutil::set_values(ps.get("ad.weight"), {1, 0, 0, 0, 1, 0, 0, 0, 1});
  testutil::fill(ps.get("ad.bias"), 0.0);
  EXPECT_NEAR(feature_mimic(a, a, &identity).values()[0], 0.0, 1e-6);
  EXPECT_THROW(feature_mimic(Tensor::zeros({1, 3, 2}), Tensor::zeros({1, 4, 2}), nullptr), ShapeError);
}

TEST(StudentLoss, AlphaZeroIsBaseObjective) {
  Rng rng(8);
  LossWeights w;
  Leaves ls = random_leaves(3, 4, 6, rng), lt = random_leaves(3, 4, 6, rng);
  Targets t = random_targets(3, 4, 64, rng);
  Terms terms = distill_terms(predict(ls), predict(lt), t, nullptr, w);
  const double a0 = student_loss(terms, {0, 0, 0}, w).item();
  EXPECT_EQ(a0, mean(base_objective(terms, w)).item());
  Terms plain = base_terms(predict(ls), t);
  EXPECT_EQ(student_loss(plain, {}, w).item(), a0);
  EXPECT_THROW(student_loss(terms, {0, 0.5, 1}, w), std::invalid_argument);
}

TEST(StudentLoss, AlphaZeroLeavesDistillPathsWithoutGradient) {
  Rng rng(9);
  LossWeights w;
  Leaves ls = random_leaves(2, 4, 6, rng), lt = random_leaves(2, 4, 6, rng);
  Targets t = random_targets(2, 4, 64, rng);
  student_loss(distill_terms(predict(ls), predict(lt), t, nullptr, w), {0, 0}, w).backward();
  auto g_distill = ls.score_logits.grad_values();
  auto g_feat = ls.feats.grad_values();
  for (Tensor* x : {&ls.score_logits, &ls.offset, &ls.size, &ls.task, &ls.feats}) x->clear_grad();
  student_loss(base_terms(predict(ls), t), {}, w).backward();
  EXPECT_EQ(g_distill, ls.score_logits.grad_values());
  for (double v : g_feat) EXPECT_EQ(v, 0.0);
}

TEST(StudentLoss, IdenticalTeacherAddsNothing) {
  Rng rng(10);
  LossWeights w;
  Leaves ls = random_leaves(3, 4, 6, rng);
  Targets t = random_targets(3, 4, 64, rng);
  Terms terms = distill_terms(predict(ls), predict(ls), t, nullptr, w);
  EXPECT_NEAR(student_loss(terms, {1, 1, 1}, w).item(), student_loss(terms, {0, 0, 0}, w).item(), 1e-6);
}

TEST(StudentLoss, HandSummedAndLinearInAlpha) {
  Rng rng(11);
  LossWeights w;
  for (int trial = 0; trial < 10; ++trial) {
    Leaves ls = random_leaves(4, 4, 6, rng), lt = random_leaves(4, 4, 6, rng);
    Targets t = random_targets(4, 4, 64, rng);
    Terms terms = distill_terms(predict(ls), predict(lt), t, nullptr, w);
    std::vector<double> alpha = {1, 0, 1, 1};
    double hand = 0, distill_mean = 0;
    for (int b = 0; b < 4; ++b) {
      const double base = terms.focal.value(b) + w.giou * terms.giou.value(b) + w.l1 * terms.l1.value(b) + terms.task.value(b);
      const double dist = w.kd * terms.kd.value(b) + w.feat * terms.feat.value(b);
      hand += base + alpha[b] * dist;
      distill_mean += dist;
    }
    EXPECT_NEAR(student_loss(terms, alpha, w).item(), hand / 4, 1e-6);
    const double l1 = student_loss(terms, {1, 1, 1, 1}, w).item(), l0 = student_loss(terms, {0, 0, 0, 0}, w).item();
    EXPECT_NEAR(l1 - l0, distill_mean / 4, 1e-6);
  }
}

TEST(LossGrads, FiniteDifferences) {
  std::vector<GradCase> cases;
  Rng trng(12);
  Targets t = random_targets(2, 3, 48, trng, Dtype::f32);
  Tensor gt32 = t.gt_map;
  cases.push_back({"focal", {{2, 3, 3}}, [gt32](auto& in) { return focal_loss(in[0], gt32.cast(in[0].dtype())); }, 0.05, 0.95});
  cases.push_back({"giou", {{3, 4}, {3, 4}}, [](auto& in) { return giou_loss(in[0], in[1]); }, 0.2, 1.0});
  cases.push_back({"l1", {{3, 4}, {3, 4}}, [](auto& in) { return l1_loss(in[0], in[1]); }, 0.0, 1.0});
  cases.push_back({"task_ce", {{3, 5}}, [](auto& in) { return task_ce(in[0], {0, 4, 2}); }, -2.0, 2.0});
  // Teacher sides are constants: they carry no gradient by design.
  Tensor t33 = randn({2, 3, 3}, trng, 1.5, Dtype::f32), t22 = randn({2, 2, 2}, trng, 1.5, Dtype::f32);
  Tensor feat = randn({2, 3, 4}, trng, 1.0, Dtype::f32);
  cases.push_back({"kl_distill", {{2, 3, 3}}, [t33](auto& in) { return kl_distill(in[0], t33.cast(in[0].dtype())); }, -2.0, 2.0});
  cases.push_back({"kl_distill_t2", {{2, 2, 2}}, [t22](auto& in) { return kl_distill(in[0], t22.cast(in[0].dtype()), 2.0); }, -2.0, 2.0});
  cases.push_back({"feature_mimic", {{2, 3, 4}}, [feat](auto& in) { return feature_mimic(in[0], feat.cast(in[0].dtype()), nullptr); }});
  for (const auto& c : cases) {
    // GIoU is piecewise smooth; seed 13 puts a min/max kink inside the stencil.
    const std::uint64_t seed = c.name == "giou" ? 14 : 13;
    EXPECT_LT(check_problem(make_problem(c, seed), 64), 1e-6) << c.name;
    EXPECT_LT(check_problem(make_problem(c, seed), 32), 1e-3) << c.name;
  }
}

TEST(LossGrads, StudentLossThroughPrediction) {
  auto factory = [](Dtype dt) {
    Rng rng(14);
    auto draw = [&](Shape s) {
      Tensor x = randn(s, rng, 1.0, Dtype::f32).cast(dt);
      x.set_requires_grad(true);
      return x;
    };
    Leaves ls{draw({2, 3, 3}), draw({2, 3, 3, 2}), draw({2, 3, 3, 2}), draw({2, 5}), draw({2, 9, 4})};
    Leaves lt{draw({2, 3, 3}), draw({2, 3, 3, 2}), draw({2, 3, 3, 2}), draw({2, 5}), draw({2, 9, 4})};
    Targets t = make_targets({BBox{10, 20, 12, 9}, BBox{30, 8, 14, 20}}, {1, 3}, 48, 3, dt);
    std::vector<Tensor> wrt{ls.score_logits, ls.offset, ls.size, ls.task, ls.feats};
    return GradProblem{[ls, lt, t] {
                         LossWeights w;
                         return student_loss(distill_terms(predict(ls), predict(lt), t, nullptr, w), {1, 0}, w);
                       },
                       wrt};
  };
  EXPECT_LT(check_problem(factory, 64), 1e-6);
  EXPECT_LT(check_problem(factory, 32), 1e-3);
}
