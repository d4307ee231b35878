#include "uetrack/tad.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace uetrack::tad {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

Tensor mix(const Tensor& teacher, const Tensor& student, const Tensor& alpha) {
  Shape s = teacher.shape();
  Shape a_shape(s.size(), 1);
  a_shape[0] = s[0];
  Tensor a = expand(reshape(alpha, a_shape), s);
  Tensor one_minus_a = add_scalar(neg(a), 1.0);
  return add(mul(a, teacher.detach()), mul(one_minus_a, student.detach()));
}

double batch_mean(const Tensor& t) { return t.defined() ? mean(t.detach()).item() : 0.0; }

bool any_grad(const ParamStore& ps) {
  for (const auto& p : ps.params())
    if (p.tensor.has_grad()) return true;
  return false;
}

}  // namespace

AdaptiveNet::AdaptiveNet(int student_dim, int teacher_dim, int hidden, std::uint64_t seed, double tau) : tau_(tau) {
  Rng rng(seed);
  fc1_ = Linear(params_, "adaptive.fc1", student_dim + teacher_dim, hidden, rng);
  fc2_ = Linear(params_, "adaptive.fc2", hidden, 2, rng);
}

Tensor AdaptiveNet::logits(const Tensor& student_feat, const Tensor& teacher_feat) const {
  if (student_feat.rank() != 3 || teacher_feat.rank() != 3 || student_feat.dim(0) != teacher_feat.dim(0) ||
      student_feat.dim(1) != teacher_feat.dim(1))
    throw ShapeError("adaptive net: token counts differ: " + shape_str(student_feat.shape()) + " vs " +
                     shape_str(teacher_feat.shape()));
  Tensor fused = concat({mean(student_feat.detach(), 1), mean(teacher_feat.detach(), 1)}, 1);
  return fc2_(relu(fc1_(fused)));
}

GateDecision gate_from_logits(const Tensor& logits, std::uint64_t seed, bool train, double tau) {
  if (logits.rank() != 2 || logits.dim(1) != 2) throw ShapeError("gate: expected [B, 2] logits, got " + shape_str(logits.shape()));
  const auto B = logits.dim(0);
  GateDecision d;
  d.logits = logits;
  std::vector<double> noise(static_cast<std::size_t>(B * 2), 0.0);
  for (std::int64_t b = 0; b < B; ++b) {
    const std::uint64_t s = splitmix(seed ^ splitmix(static_cast<std::uint64_t>(b) + 1));
    d.sample_seeds.push_back(s);
    if (!train) continue;
    Rng rng(s);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int k = 0; k < 2; ++k) {
      const double u = std::clamp(u01(rng), 1e-12, 1.0 - 1e-12);
      noise[b * 2 + k] = -std::log(-std::log(u));
    }
  }
  Tensor pert = train ? add(logits, Tensor::from_values(logits.shape(), noise, logits.dtype())) : logits;
  Tensor soft = softmax(scale(pert, 1.0 / (train ? tau : 1.0)), 1);
  std::vector<double> hard(static_cast<std::size_t>(B * 2), 0.0);
  for (std::int64_t b = 0; b < B; ++b) {
    const int k = pert.value(b * 2 + 1) > pert.value(b * 2) ? 1 : 0;
    hard[b * 2 + k] = 1.0;
    d.alpha.push_back(k == kDistillClass ? 1.0 : 0.0);
  }
  d.onehot = straight_through(Tensor::from_values(logits.shape(), hard, logits.dtype()), soft);
  return d;
}

GateDecision gate(const Tensor& student_feat, const Tensor& teacher_feat, const AdaptiveNet& net, std::uint64_t seed,
                  bool train) {
  return gate_from_logits(net.logits(student_feat, teacher_feat), seed, train, net.tau());
}

model::Prediction surrogate_prediction(const model::Prediction& teacher, const model::Prediction& student,
                                       const Tensor& alpha) {
  model::Prediction p;
  p.score_logits = mix(teacher.score_logits, student.score_logits, alpha);
  p.score_map = mix(teacher.score_map, student.score_map, alpha);
  p.offset = mix(teacher.offset, student.offset, alpha);
  p.size = mix(teacher.size, student.size, alpha);
  p.task_logits = mix(teacher.task_logits, student.task_logits, alpha);
  return p;
}

Tensor adaptive_loss(const model::Prediction& pred_a, const loss::Targets& t, const LossWeights& w) {
  return mean(loss::base_objective(loss::base_terms(pred_a, t), w));
}

Distiller::Distiller(const model::Tracker& teacher_, AdaptiveNet& net_, int student_dim, std::uint64_t seed,
                     GateMode mode_)
    : teacher(&teacher_), net(&net_), mode(mode_) {
  Rng rng(seed);
  adapter = Linear(adapter_params, "adapter", student_dim, teacher_.config().dim, rng);
}

std::vector<Parameter> student_parameters(model::Tracker& student, Distiller& d) {
  std::vector<Parameter> ps = student.params().params();
  for (const auto& p : d.adapter_params.params()) ps.push_back(p);
  return ps;
}

void assert_frozen(const model::Tracker& teacher) {
  for (const auto& p : teacher.params().params())
    if (p.tensor.requires_grad() || p.tensor.has_grad())
      throw std::logic_error("teacher parameter " + p.name + " is not frozen");
}

StepMetrics train_step(const Batch& batch, model::Tracker& student, Distiller& d, optim::AdamW& opt_s,
                       optim::AdamW& opt_a, std::uint64_t step_seed, double lr_scale) {
  assert_frozen(*d.teacher);
  const LossWeights& w = student.config().weights;
  model::Prediction pt;
  {
    NoGradGuard ng;
    pt = d.teacher->forward(batch.input);
  }
  opt_s.zero_grad();
  opt_a.zero_grad();
  model::Prediction ps = student.forward(batch.input);
  const auto B = ps.score_map.dim(0);

  GateDecision g;
  std::vector<double> alpha(static_cast<std::size_t>(B), d.mode == GateMode::force_on ? 1.0 : 0.0);
  if (d.mode == GateMode::learned) {
    g = gate(ps.search_features, pt.search_features, *d.net, step_seed, true);
    alpha = g.alpha;
  }

  StepMetrics m;
  loss::Terms terms = loss::distill_terms(ps, pt, batch.targets, &d.adapter, w);
  Tensor ls = loss::student_loss(terms, alpha, w);
  ls.backward();
  m.separation_ok = !any_grad(d.net->params());
  opt_s.step(lr_scale);
  opt_s.zero_grad();

  m.student_loss = ls.item();
  m.focal = batch_mean(terms.focal);
  m.giou = batch_mean(terms.giou);
  m.l1 = batch_mean(terms.l1);
  m.task = batch_mean(terms.task);
  m.kd = batch_mean(terms.kd);
  m.feat = batch_mean(terms.feat);
  double rate = 0;
  for (double a : alpha) rate += a;
  m.distill_rate = rate / static_cast<double>(B);

  if (d.mode == GateMode::learned) {
    Tensor a_col = reshape(slice(g.onehot, 1, kDistillClass, kDistillClass + 1), {B});
    Tensor la = adaptive_loss(surrogate_prediction(pt, ps, a_col), batch.targets, w);
    la.backward();
    m.separation_ok = m.separation_ok && !any_grad(student.params()) && !any_grad(d.adapter_params);
    opt_a.step(lr_scale);
    opt_a.zero_grad();
    m.adaptive_loss = la.item();
  }
  return m;
}

StepMetrics baseline_step(const Batch& batch, model::Tracker& student, optim::AdamW& opt, double lr_scale) {
  const LossWeights& w = student.config().weights;
  opt.zero_grad();
  model::Prediction ps = student.forward(batch.input);
  loss::Terms terms = loss::base_terms(ps, batch.targets);
  Tensor ls = loss::student_loss(terms, {}, w);
  ls.backward();
  opt.step(lr_scale);
  opt.zero_grad();
  StepMetrics m;
  m.student_loss = ls.item();
  m.focal = batch_mean(terms.focal);
  m.giou = batch_mean(terms.giou);
  m.l1 = batch_mean(terms.l1);
  m.task = batch_mean(terms.task);
  return m;
}

}  // namespace uetrack::tad
