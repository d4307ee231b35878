#pragma once

#include <string>
#include <vector>

#include "uetrack/nn.hpp"

namespace uetrack::moe {

/// Two-layer GELU feed-forward network D -> r*D -> D.
struct ExpertFFN {
  Linear fc1, fc2;
  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }
};

/// Token-pooling MoE parameters. Token inputs are [L1, D] or [B, L1, D].
struct ExpertBank {
  int experts = 0;
  int l1 = 0;
  int l2 = 0;
  int dim = 0;
  int ratio = 4;
  bool scale_similarity = false;
  bool parallel = false;
  Tensor embed_proj;  // [L2, L1' / E], L1' = largest multiple of E not above L1
  std::vector<ExpertFFN> ffn;

  int aggregated_tokens() const { return l1 / experts; }
};

ExpertBank make_bank(ParamStore& ps, const std::string& name, int l1, int dim, int experts, int l2, Rng& rng,
                     int ratio = 4, bool scale_similarity = false);

struct Routing {
  Tensor similarity;  // S [.., L1, L2]
  Tensor dispatch;    // softmax over L1
  Tensor combine;     // softmax over L2
};

/// Mean over consecutive groups of E tokens: [.., L1, D] -> [.., L1/E, D].
Tensor local_aggregate(const Tensor& t_in, int experts);
/// t_e = W * agg: [.., L1/E, D] -> [.., L2, D].
Tensor expert_embed(const Tensor& agg, const ExpertBank& bank);
Routing route(const Tensor& t_in, const Tensor& t_e, bool scale_similarity = false);
/// Slots dispatch^T * t_in, split into E contiguous groups: [.., E, L2/E, D].
Tensor dispatch_tokens(const Routing& routing, const Tensor& t_in, int experts);
/// Group i through expert i, regrouped in order: [.., L2, D].
Tensor experts_forward(const Tensor& t_a, const ExpertBank& bank);
/// combine * o_e: [.., L1, D].
Tensor combine_tokens(const Routing& routing, const Tensor& o_e);

/// Full block (without the host residual). When L1 is not a multiple of E,
/// only the first floor(L1/E)*E tokens feed the expert embedding; routing
/// uses every token.
Tensor tpmoe_forward(const Tensor& t_in, const ExpertBank& bank);

}  // namespace uetrack::moe
