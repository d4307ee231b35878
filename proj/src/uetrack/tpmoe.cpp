#include "uetrack/tpmoe.hpp"

#include <cmath>
#include <thread>

namespace uetrack::moe {

ExpertBank make_bank(ParamStore& ps, const std::string& name, int l1, int dim, int experts, int l2, Rng& rng, int ratio,
                     bool scale_similarity) {
  if (experts < 1) throw ShapeError("make_bank: experts must be >= 1");
  if (l1 < experts) throw ShapeError("make_bank: L1 = " + std::to_string(l1) + " is smaller than E = " + std::to_string(experts));
  if (l2 < experts || l2 % experts != 0)
    throw ShapeError("make_bank: L2 = " + std::to_string(l2) + " is not divisible by E = " + std::to_string(experts));
  ExpertBank bank;
  bank.experts = experts;
  bank.l1 = l1;
  bank.l2 = l2;
  bank.dim = dim;
  bank.ratio = ratio;
  bank.scale_similarity = scale_similarity;
  const int agg = l1 / experts;
  bank.embed_proj = ps.uniform(name + ".embed_proj", {l2, agg}, std::sqrt(6.0 / (agg + l2)), rng);
  for (int e = 0; e < experts; ++e) {
    const std::string en = name + ".expert" + std::to_string(e);
    bank.ffn.push_back({Linear(ps, en + ".w1", dim, ratio * dim, rng), Linear(ps, en + ".w2", ratio * dim, dim, rng)});
  }
  return bank;
}

Tensor local_aggregate(const Tensor& t_in, int experts) {
  if (t_in.rank() < 2) throw ShapeError("local_aggregate: expected [.., L1, D], got " + shape_str(t_in.shape()));
  const auto l1 = t_in.dim(-2);
  if (experts < 1 || l1 % experts != 0)
    throw ShapeError("local_aggregate: L1 = " + std::to_string(l1) + " is not divisible by E = " + std::to_string(experts));
  return avg_pool1d(t_in, experts, -2);
}

Tensor expert_embed(const Tensor& agg, const ExpertBank& bank) {
  if (agg.rank() < 2 || agg.dim(-2) != bank.embed_proj.dim(1))
    throw ShapeError("expert_embed: aggregated tokens " + shape_str(agg.shape()) + " do not match projection " +
                     shape_str(bank.embed_proj.shape()));
  return matmul(bank.embed_proj, agg);
}

Routing route(const Tensor& t_in, const Tensor& t_e, bool scale_similarity) {
  if (t_in.dim(-1) != t_e.dim(-1))
    throw ShapeError("route: token dims differ: " + shape_str(t_in.shape()) + " vs " + shape_str(t_e.shape()));
  Routing r;
  r.similarity = matmul(t_in, t_e, false, true);
  if (scale_similarity) r.similarity = scale(r.similarity, 1.0 / std::sqrt(static_cast<double>(t_in.dim(-1))));
  r.dispatch = softmax(r.similarity, -2);
  r.combine = softmax(r.similarity, -1);
  return r;
}

Tensor dispatch_tokens(const Routing& routing, const Tensor& t_in, int experts) {
  const auto l2 = routing.dispatch.dim(-1);
  if (experts < 1 || l2 % experts != 0)
    throw ShapeError("dispatch_tokens: L2 = " + std::to_string(l2) + " is not divisible by E = " + std::to_string(experts));
  Tensor slots = matmul(routing.dispatch, t_in, true, false);
  Shape s = slots.shape();
  s.pop_back();
  s.pop_back();
  s.push_back(experts);
  s.push_back(l2 / experts);
  s.push_back(t_in.dim(-1));
  return reshape(slots, s);
}

Tensor experts_forward(const Tensor& t_a, const ExpertBank& bank) {
  if (t_a.rank() < 3 || t_a.dim(-3) != bank.experts)
    throw ShapeError("experts_forward: expected " + std::to_string(bank.experts) + " groups, got " + shape_str(t_a.shape()));
  const int axis = t_a.rank() - 3;
  Shape group_shape = t_a.shape();
  group_shape.erase(group_shape.begin() + axis);
  std::vector<Tensor> outs(bank.experts);
  auto run = [&](int e) { outs[e] = bank.ffn[e](reshape(slice(t_a, axis, e, e + 1), group_shape)); };
  if (bank.parallel && bank.experts > 1) {
    const bool grad = grad_enabled();
    std::vector<std::thread> pool;
    for (int e = 0; e < bank.experts; ++e)
      pool.emplace_back([&, e] {
        if (grad) {
          run(e);
        } else {
          NoGradGuard ng;
          run(e);
        }
      });
    for (auto& t : pool) t.join();
  } else {
    for (int e = 0; e < bank.experts; ++e) run(e);
  }
  // Merge in fixed group order regardless of schedule.
  return concat(outs, -2);
}

Tensor combine_tokens(const Routing& routing, const Tensor& o_e) {
  if (routing.combine.dim(-1) != o_e.dim(-2))
    throw ShapeError("combine_tokens: combine " + shape_str(routing.combine.shape()) + " vs expert outputs " +
                     shape_str(o_e.shape()));
  return matmul(routing.combine, o_e);
}

Tensor tpmoe_forward(const Tensor& t_in, const ExpertBank& bank) {
  if (t_in.rank() < 2 || t_in.dim(-1) != bank.dim || t_in.dim(-2) != bank.l1)
    throw ShapeError("tpmoe_forward: tokens " + shape_str(t_in.shape()) + " do not match bank L1 = " +
                     std::to_string(bank.l1) + ", D = " + std::to_string(bank.dim));
  const int used = bank.aggregated_tokens() * bank.experts;
  Tensor pooled_src = used == bank.l1 ? t_in : slice(t_in, -2, 0, used);
  Tensor t_e = expert_embed(local_aggregate(pooled_src, bank.experts), bank);
  Routing r = route(t_in, t_e, bank.scale_similarity);
  return combine_tokens(r, experts_forward(dispatch_tokens(r, t_in, bank.experts), bank));
}

}  // namespace uetrack::moe
