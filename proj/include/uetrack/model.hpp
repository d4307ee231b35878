#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "uetrack/bbox.hpp"
#include "uetrack/config.hpp"
#include "uetrack/tokenizer.hpp"
#include "uetrack/tpmoe.hpp"

namespace uetrack::model {

struct Prediction {
  Tensor score_logits;     // [B, h, w] pre-sigmoid
  Tensor score_map;        // [B, h, w] in [0, 1]
  Tensor offset;           // [B, h, w, 2] sub-cell offset (x, y) in [0, 1]
  Tensor size;             // [B, h, w, 2] (w, h) as a fraction of the search crop
  Tensor task_logits;      // [B, 5]
  Tensor search_features;  // [B, Lx, D]
};

struct ModelInput {
  Tensor template_images;  // [B, Hz, Wz, 6]
  Tensor search_images;    // [B, Hx, Wx, 6]
  std::vector<std::string> texts;
};

class Attention {
 public:
  Attention() = default;
  Attention(ParamStore& ps, const std::string& name, int dim, int heads, Rng& rng);
  Tensor operator()(const Tensor& x) const;

 private:
  Linear qkv_, proj_;
  int heads_ = 1;
};

struct FeedForward {
  Linear fc1, fc2;
  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }
};

/// Pre-norm transformer block; the FFN may be replaced by a TP-MoE bank.
class Block {
 public:
  Block() = default;
  Block(ParamStore& ps, const std::string& name, const TrackerConfig& cfg, bool moe, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  bool is_moe() const { return std::holds_alternative<moe::ExpertBank>(mlp_); }
  moe::ExpertBank* bank() { return std::get_if<moe::ExpertBank>(&mlp_); }

 private:
  LayerNorm norm1_, norm2_;
  Attention attn_;
  std::variant<FeedForward, moe::ExpertBank> mlp_;
};

/// Score, offset and size branches, each conv3x3-ReLU-conv3x3-ReLU-conv1x1.
class CenterHead {
 public:
  CenterHead() = default;
  CenterHead(ParamStore& ps, const std::string& name, int dim, Rng& rng);
  /// grid [B, h, w, D] -> prediction maps (search_features and task_logits left empty)
  Prediction operator()(const Tensor& grid) const;

 private:
  struct Branch {
    Conv2d c1, c2, c3;
    Tensor operator()(const Tensor& x) const { return c3(relu(c2(relu(c1(x))))); }
  };
  Branch score_, offset_, size_;
};

class TaskHead {
 public:
  TaskHead() = default;
  TaskHead(ParamStore& ps, const std::string& name, int dim, Rng& rng);
  /// pooled [B, D] -> [B, 5]
  Tensor operator()(const Tensor& pooled) const { return fc_(pooled); }

 private:
  Linear fc_;
};

class Tracker {
 public:
  Tracker(const TrackerConfig& cfg, std::uint64_t seed);
  Tracker(const Tracker&) = delete;
  Tracker& operator=(const Tracker&) = delete;

  const TrackerConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::int64_t parameter_count() const { return params_.numel(); }

  tokens::TokenSequence tokenize(const ModelInput& input) const;
  /// Transformer blocks and the final norm: [B, L, D] -> [B, L, D].
  Tensor encode(const tokens::TokenSequence& seq) const;
  Prediction forward(const tokens::TokenSequence& seq) const;
  Prediction forward(const ModelInput& input) const;

  void set_parallel_experts(bool on);
  std::vector<Block>& blocks() { return blocks_; }

 private:
  TrackerConfig cfg_;
  ParamStore params_;
  tokens::PatchEmbed patch_;
  tokens::PositionTables pos_;
  tokens::LanguageEmbed lang_;
  std::vector<Block> blocks_;
  LayerNorm norm_;
  CenterHead head_;
  TaskHead task_;
};

/// n x n separable window, 0.5 (1 - cos(2 pi k / (n + 1))) for k = 1..n; row-major.
std::vector<double> hanning_window(int n);

/// Box of sample `b` in search-crop pixels. `window` multiplies the score map.
BBox decode_box(const Prediction& pred, int b, int search_res, const std::vector<double>* window = nullptr);

}  // namespace uetrack::model
