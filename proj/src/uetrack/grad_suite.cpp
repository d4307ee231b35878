#include <memory>

#include "uetrack/gradcheck.hpp"
#include "uetrack/harness.hpp"
#include "uetrack/losses.hpp"
#include "uetrack/model.hpp"
#include "uetrack/tad.hpp"
#include "uetrack/tpmoe.hpp"

namespace uetrack::harness {

namespace {

// Values representable in f32, so the 32- and 64-bit instances compute the same function.
void assign(Tensor t, const std::vector<double>& v) {
  dispatch(t.dtype(), [&]<class T>() {
    auto dst = t.mutable_buffer().span<T>();
    for (std::size_t i = 0; i < v.size(); ++i) dst[i] = static_cast<T>(static_cast<float>(v[i]));
  });
}

void round_params(const ParamStore& ps) {
  for (const auto& p : ps.params()) assign(p.tensor, p.tensor.values());
}

Tensor leaf(const Shape& s, Rng& rng, double stddev, Dtype dt) {
  Tensor x = randn(s, rng, stddev, Dtype::f32).cast(dt);
  x.set_requires_grad(true);
  return x;
}

Tensor weights_like(const Shape& s, Rng& rng, Dtype dt) { return randn(s, rng, 1.0, Dtype::f32).cast(dt); }

std::vector<Tensor> with_params(std::vector<Tensor> wrt, const ParamStore& ps) {
  for (const auto& p : ps.params()) {
    Tensor t = p.tensor;
    t.set_requires_grad(true);
    wrt.push_back(t);
  }
  return wrt;
}

TrackerConfig tiny_config() {
  TrackerConfig c;
  c.layers = 1;
  c.moe_layers = {1};
  c.experts = 2;
  c.dim = 8;
  c.heads = 2;
  c.template_res = 16;
  c.search_res = 32;
  return c;
}

struct Owner {
  ParamStore ps;
  moe::ExpertBank bank;
  model::Block block;
  model::CenterHead head;
  Linear adapter;
};

GradProblem tpmoe_problem(Dtype dt) {
  DtypeScope scope(dt);
  auto o = std::make_shared<Owner>();
  Rng rng(101);
  o->bank = moe::make_bank(o->ps, "moe", 8, 4, 2, 8, rng);
  assign(o->bank.embed_proj, randn(o->bank.embed_proj.shape(), rng, 1.0, Dtype::f64).values());
  round_params(o->ps);
  Tensor x = leaf({8, 4}, rng, 1.0, dt);
  Tensor w = weights_like({8, 4}, rng, dt);
  return {[o, x, w] { return sum(mul(moe::tpmoe_forward(x, o->bank), w)); }, with_params({x}, o->ps)};
}

GradProblem block_problem(Dtype dt) {
  DtypeScope scope(dt);
  auto o = std::make_shared<Owner>();
  const TrackerConfig c = tiny_config();
  Rng rng(102);
  o->block = model::Block(o->ps, "block", c, true, rng);
  round_params(o->ps);
  Tensor x = leaf({1, c.sequence_length(), c.dim}, rng, 1.0, dt);
  Tensor w = weights_like({1, c.sequence_length(), c.dim}, rng, dt);
  return {[o, x, w] { return sum(mul(o->block(x), w)); }, with_params({x}, o->ps)};
}

GradProblem head_problem(Dtype dt) {
  DtypeScope scope(dt);
  auto o = std::make_shared<Owner>();
  Rng rng(103);
  o->head = model::CenterHead(o->ps, "head", 8, rng);
  round_params(o->ps);
  Tensor g = leaf({1, 3, 3, 8}, rng, 1.0, dt);
  Tensor w1 = weights_like({1, 3, 3}, rng, dt), w2 = weights_like({1, 3, 3, 2}, rng, dt),
         w3 = weights_like({1, 3, 3, 2}, rng, dt);
  return {[o, g, w1, w2, w3] {
            const model::Prediction p = o->head(g);
            return add(add(sum(mul(p.score_map, w1)), sum(mul(p.offset, w2))), sum(mul(p.size, w3)));
          },
          with_params({g}, o->ps)};
}

struct Leaves {
  Tensor score_logits, offset, size, task, feats;
};

Leaves leaves(int B, int g, int d, Rng& rng, Dtype dt) {
  return {leaf({B, g, g}, rng, 1.0, dt), leaf({B, g, g, 2}, rng, 1.0, dt), leaf({B, g, g, 2}, rng, 1.0, dt),
          leaf({B, 5}, rng, 1.0, dt), leaf({B, g * g, d}, rng, 1.0, dt)};
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

loss::Targets targets(Dtype dt) {
  return loss::make_targets({BBox{10, 20, 12, 9}, BBox{30, 8, 14, 20}}, {1, 3}, 48, 3, dt);
}

GradProblem student_loss_problem(Dtype dt) {
  DtypeScope scope(dt);
  auto o = std::make_shared<Owner>();
  Rng rng(104);
  o->adapter = Linear(o->ps, "adapter", 4, 6, rng);
  round_params(o->ps);
  Leaves ls = leaves(2, 3, 4, rng, dt), lt = leaves(2, 3, 6, rng, dt);
  const loss::Targets t = targets(dt);
  return {[o, ls, lt, t] {
            LossWeights w;
            w.feat = 0.5;
            return loss::student_loss(loss::distill_terms(predict(ls), predict(lt), t, &o->adapter, w), {1, 0}, w);
          },
          with_params({ls.score_logits, ls.offset, ls.size, ls.task, ls.feats}, o->ps)};
}

GradProblem adaptive_loss_problem(Dtype dt) {
  DtypeScope scope(dt);
  Rng rng(105);
  Leaves ls = leaves(2, 3, 4, rng, dt), lt = leaves(2, 3, 4, rng, dt);
  Tensor alpha = rand_uniform({2}, rng, 0.1, 0.9, Dtype::f32).cast(dt);
  alpha.set_requires_grad(true);
  const loss::Targets t = targets(dt);
  return {[ls, lt, alpha, t] {
            return tad::adaptive_loss(tad::surrogate_prediction(predict(lt), predict(ls), alpha), t, LossWeights{});
          },
          {alpha}};
}

}  // namespace

std::vector<GradResult> grad_suite(int bits) {
  std::vector<GradResult> out;
  auto run = [&](const std::string& name, const GradProblemFactory& f) { out.push_back({name, check_problem(f, bits)}); };
  run("tpmoe_forward", tpmoe_problem);
  run("backbone_block", block_problem);
  run("center_head", head_problem);

  Rng trng(106);
  const loss::Targets t = loss::make_targets({BBox{10, 30, 14, 12}, BBox{40, 20, 20, 16}}, {0, 2}, 48, 3, Dtype::f32);
  const Tensor gt = t.gt_map;
  const Tensor t33 = randn({2, 3, 3}, trng, 1.5, Dtype::f32);
  const Tensor feat = randn({2, 3, 4}, trng, 1.0, Dtype::f32);
  std::vector<GradCase> cases;
  cases.push_back({"focal_loss", {{2, 3, 3}}, [gt](auto& in) { return loss::focal_loss(in[0], gt.cast(in[0].dtype())); }, 0.05, 0.95});
  cases.push_back({"giou_loss", {{3, 4}, {3, 4}}, [](auto& in) { return loss::giou_loss(in[0], in[1]); }, 0.2, 1.0});
  cases.push_back({"l1_loss", {{3, 4}, {3, 4}}, [](auto& in) { return loss::l1_loss(in[0], in[1]); }, 0.0, 1.0});
  cases.push_back({"task_ce", {{3, 5}}, [](auto& in) { return loss::task_ce(in[0], {0, 4, 2}); }, -2.0, 2.0});
  cases.push_back({"kl_distill", {{2, 3, 3}}, [t33](auto& in) { return loss::kl_distill(in[0], t33.cast(in[0].dtype())); }, -2.0, 2.0});
  cases.push_back({"feature_mimic", {{2, 3, 4}}, [feat](auto& in) { return loss::feature_mimic(in[0], feat.cast(in[0].dtype()), nullptr); }});
  for (const auto& c : cases) run(c.name, make_problem(c, 107));
  run("student_loss", student_loss_problem);
  run("adaptive_loss", adaptive_loss_problem);
  return out;
}

}  // namespace uetrack::harness
