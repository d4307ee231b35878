#pragma once

#include <cstdint>
#include <vector>

#include "uetrack/bbox.hpp"
#include "uetrack/config.hpp"
#include "uetrack/model.hpp"

namespace uetrack::loss {

inline constexpr double kProbClamp = 1e-4;

/// Ground truth for a batch, boxes in search-crop pixels.
struct Targets {
  std::vector<BBox> boxes;          // search-crop pixels
  std::vector<int> labels;          // modality index 0..4
  std::vector<std::int64_t> cells;  // flat index of the gt center cell
  Tensor gt_map;                    // [B, h, w] Gaussian, exactly 1 at the gt cell
  Tensor norm_boxes;                // [B, 4] (cx, cy, w, h) / search_res
  int grid = 0;
  int search_res = 0;
};

Targets make_targets(const std::vector<BBox>& boxes, const std::vector<int>& labels, int search_res, int grid,
                     Dtype dtype = default_dtype());

/// Penalty-reduced focal loss (alpha 2, beta 4) per sample, normalized by
/// the positive count: [B, h, w] x2 -> [B].
Tensor focal_loss(const Tensor& score_map, const Tensor& gt_map);

/// 1 - GIoU per row for [B, 4] boxes in (cx, cy, w, h).
Tensor giou_loss(const Tensor& pred, const Tensor& gt);
double giou_loss(const BBox& a, const BBox& b);

/// Mean absolute difference over the 4 coordinates, per row: [B, 4] -> [B].
Tensor l1_loss(const Tensor& pred, const Tensor& gt);
double l1_loss(const BBox& a, const BBox& b);

/// Softmax cross-entropy per row: [B, 5] -> [B].
Tensor task_ce(const Tensor& logits, const std::vector<int>& labels);

/// KL(p || q) per row with constant p [B, N] and differentiable log q [B, N].
Tensor kl_divergence(const Tensor& p, const Tensor& log_q);
/// KL between teacher and student cell distributions (softmax of score
/// logits over cells, temperature t). The teacher side carries no gradient.
Tensor kl_distill(const Tensor& student_logits, const Tensor& teacher_logits, double temperature = 1.0);

/// Mean squared error per sample after an optional adapter on the student
/// features: [B, L, Ds], [B, L, Dt] -> [B].
Tensor feature_mimic(const Tensor& student, const Tensor& teacher, const Linear* adapter);

/// Predicted normalized box at each sample's gt cell: [B, 4].
Tensor boxes_at_cells(const model::Prediction& pred, const Targets& t);

struct Terms {
  Tensor focal, giou, l1, task;  // [B] each
  Tensor kd, feat;               // [B] each, undefined without a teacher
};

Terms base_terms(const model::Prediction& pred, const Targets& t);
Terms distill_terms(const model::Prediction& student, const model::Prediction& teacher, const Targets& t,
                    const Linear* adapter, const LossWeights& w);

/// Per-sample L_c + lg L_g + ll1 L_l1 + L_t.
Tensor base_objective(const Terms& terms, const LossWeights& w);

/// mean_b [base_b + alpha_b (lkd kd_b + lf feat_b)], alpha treated as a constant.
Tensor student_loss(const Terms& terms, const std::vector<double>& alpha, const LossWeights& w);

}  // namespace uetrack::loss
