#include "uetrack/model.hpp"

#include <cmath>
#include <numbers>

namespace uetrack::model {

Attention::Attention(ParamStore& ps, const std::string& name, int dim, int heads, Rng& rng) : heads_(heads) {
  qkv_ = Linear(ps, name + ".qkv", dim, 3 * dim, rng);
  proj_ = Linear(ps, name + ".proj", dim, dim, rng);
}

Tensor Attention::operator()(const Tensor& x) const {
  const auto B = x.dim(0), L = x.dim(1), D = x.dim(2), hd = D / heads_;
  Tensor qkv = permute(reshape(qkv_(x), {B, L, 3, heads_, hd}), {2, 0, 3, 1, 4});  // [3, B, H, L, hd]
  const Shape s{B, heads_, L, hd};
  Tensor q = reshape(slice(qkv, 0, 0, 1), s);
  Tensor k = reshape(slice(qkv, 0, 1, 2), s);
  Tensor v = reshape(slice(qkv, 0, 2, 3), s);
  Tensor att = softmax(scale(matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(hd))), -1);
  Tensor y = reshape(permute(matmul(att, v), {0, 2, 1, 3}), {B, L, D});
  return proj_(y);
}

Block::Block(ParamStore& ps, const std::string& name, const TrackerConfig& cfg, bool moe, Rng& rng) {
  norm1_ = LayerNorm(ps, name + ".norm1", cfg.dim);
  attn_ = Attention(ps, name + ".attn", cfg.dim, cfg.heads, rng);
  norm2_ = LayerNorm(ps, name + ".norm2", cfg.dim);
  if (moe) {
    auto bank = moe::make_bank(ps, name + ".tpmoe", cfg.sequence_length(), cfg.dim, cfg.experts, cfg.expert_tokens(), rng,
                               cfg.mlp_ratio, cfg.scale_similarity);
    bank.parallel = cfg.parallel_experts;
    mlp_ = std::move(bank);
  } else {
    mlp_ = FeedForward{Linear(ps, name + ".ffn.fc1", cfg.dim, cfg.mlp_ratio * cfg.dim, rng),
                       Linear(ps, name + ".ffn.fc2", cfg.mlp_ratio * cfg.dim, cfg.dim, rng)};
  }
}

Tensor Block::operator()(const Tensor& x) const {
  Tensor h = add(x, attn_(norm1_(x)));
  Tensor n = norm2_(h);
  Tensor m = std::visit(
      [&](const auto& mlp) {
        if constexpr (std::is_same_v<std::decay_t<decltype(mlp)>, moe::ExpertBank>)
          return moe::tpmoe_forward(n, mlp);
        else
          return mlp(n);
      },
      mlp_);
  return add(h, m);
}

CenterHead::CenterHead(ParamStore& ps, const std::string& name, int dim, Rng& rng) {
  const int c = dim / 2;
  auto branch = [&](const std::string& b, int out) {
    Branch br{Conv2d(ps, name + "." + b + ".conv1", dim, c, 3, 1, 1, rng),
              Conv2d(ps, name + "." + b + ".conv2", c, c / 2, 3, 1, 1, rng),
              Conv2d(ps, name + "." + b + ".conv3", c / 2, out, 1, 1, 0, rng)};
    return br;
  };
  score_ = branch("score", 1);
  offset_ = branch("offset", 2);
  size_ = branch("size", 2);
  // Prior of ~0.1 foreground probability per cell.
  score_.c3.bias.mutable_buffer().fill(-2.19);
}

Prediction CenterHead::operator()(const Tensor& grid) const {
  Prediction p;
  const Shape map{grid.dim(0), grid.dim(1), grid.dim(2)};
  p.score_logits = reshape(score_(grid), map);
  p.score_map = sigmoid(p.score_logits);
  p.offset = sigmoid(offset_(grid));
  p.size = sigmoid(size_(grid));
  return p;
}

TaskHead::TaskHead(ParamStore& ps, const std::string& name, int dim, Rng& rng) {
  fc_ = Linear(ps, name, dim, kNumModalities, rng);
}

Tracker::Tracker(const TrackerConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  patch_ = tokens::PatchEmbed(params_, "backbone.patch_embed", cfg_.dim, rng);
  const int nz = cfg_.template_grid() * cfg_.template_grid();
  const int nx = cfg_.search_grid() * cfg_.search_grid();
  pos_ = tokens::make_position_tables(params_, "backbone.pos", nz, nx, cfg_.dim, rng);
  lang_ = tokens::LanguageEmbed(params_, "lang_proj", cfg_.dim, rng);
  for (int i = 0; i < cfg_.layers; ++i)
    blocks_.emplace_back(params_, "backbone.block" + std::to_string(i), cfg_, cfg_.is_moe_layer(i + 1), rng);
  norm_ = LayerNorm(params_, "backbone.norm", cfg_.dim);
  head_ = CenterHead(params_, "head", cfg_.dim, rng);
  task_ = TaskHead(params_, "task_head", cfg_.dim, rng);
}

tokens::TokenSequence Tracker::tokenize(const ModelInput& input) const {
  if (input.template_images.dim(1) != cfg_.template_res || input.search_images.dim(1) != cfg_.search_res)
    throw ShapeError("tracker: input resolutions " + shape_str(input.template_images.shape()) + " / " +
                     shape_str(input.search_images.shape()) + " do not match the configuration");
  if (static_cast<std::int64_t>(input.texts.size()) != input.search_images.dim(0))
    throw ShapeError("tracker: one text per sample required");
  Tensor z = patch_(input.template_images);
  Tensor x = patch_(input.search_images);
  Tensor l = lang_(input.texts, input.search_images.dtype());
  return tokens::assemble(z, x, l, pos_);
}

Tensor Tracker::encode(const tokens::TokenSequence& seq) const {
  if (seq.tokens.dim(2) != cfg_.dim || seq.tokens.dim(1) != cfg_.sequence_length())
    throw ShapeError("tracker: sequence " + shape_str(seq.tokens.shape()) + " does not match the model");
  Tensor h = seq.tokens;
  for (const auto& b : blocks_) h = b(h);
  return norm_(h);
}

Prediction Tracker::forward(const tokens::TokenSequence& seq) const {
  Tensor feats = encode(seq);
  Tensor search = slice(feats, 1, seq.len_template, seq.len_template + seq.len_search);
  const int g = cfg_.search_grid();
  Prediction p = head_(reshape(search, {search.dim(0), g, g, cfg_.dim}));
  p.search_features = search;
  p.task_logits = task_(mean(feats, 1));
  return p;
}

Prediction Tracker::forward(const ModelInput& input) const { return forward(tokenize(input)); }

void Tracker::set_parallel_experts(bool on) {
  for (auto& b : blocks_)
    if (auto* bank = b.bank()) bank->parallel = on;
}

std::vector<double> hanning_window(int n) {
  std::vector<double> h(n);
  for (int k = 0; k < n; ++k) h[k] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * (k + 1) / (n + 1)));
  std::vector<double> w(std::size_t(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) w[std::size_t(i) * n + j] = h[i] * h[j];
  return w;
}

BBox decode_box(const Prediction& pred, int b, int search_res, const std::vector<double>* window) {
  const auto gh = pred.score_map.dim(1), gw = pred.score_map.dim(2);
  const std::int64_t cells = gh * gw;
  if (window && static_cast<std::int64_t>(window->size()) != cells)
    throw ShapeError("decode_box: window does not match the score map");
  std::int64_t best = 0;
  double best_v = -1;
  for (std::int64_t i = 0; i < cells; ++i) {
    double v = pred.score_map.value(b * cells + i);
    if (window) v *= (*window)[i];
    if (v > best_v) {
      best_v = v;
      best = i;
    }
  }
  const auto row = best / gw, col = best % gw;
  const double stride = static_cast<double>(search_res) / static_cast<double>(gw);
  const std::int64_t o = (b * cells + best) * 2;
  BBox box;
  box.cx = (static_cast<double>(col) + pred.offset.value(o)) * stride;
  box.cy = (static_cast<double>(row) + pred.offset.value(o + 1)) * stride;
  box.w = pred.size.value(o) * search_res;
  box.h = pred.size.value(o + 1) * search_res;
  return box;
}

}  // namespace uetrack::model
