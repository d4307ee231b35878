#include "uetrack/losses.hpp"

#include <algorithm>
#include <cmath>

namespace uetrack::loss {

namespace {

Tensor one_minus(const Tensor& x) { return add_scalar(neg(x), 1.0); }

Tensor col(const Tensor& boxes, int c) { return slice(boxes, 1, c, c + 1); }

Tensor row_sum(const Tensor& x) { return sum(reshape(x, {x.dim(0), -1}), 1); }

Tensor constant_like(const std::vector<double>& v, const Shape& shape, Dtype dtype) {
  return Tensor::from_values(shape, v, dtype);
}

}  // namespace

Targets make_targets(const std::vector<BBox>& boxes, const std::vector<int>& labels, int search_res, int grid,
                     Dtype dtype) {
  if (boxes.size() != labels.size()) throw ShapeError("make_targets: boxes and labels differ in length");
  Targets t;
  t.boxes = boxes;
  t.labels = labels;
  t.grid = grid;
  t.search_res = search_res;
  const double stride = static_cast<double>(search_res) / grid;
  const auto B = static_cast<std::int64_t>(boxes.size());
  std::vector<double> map(static_cast<std::size_t>(B * grid * grid), 0.0), norm;
  for (std::int64_t b = 0; b < B; ++b) {
    const BBox& box = boxes[b];
    if (!box.valid()) throw std::invalid_argument("make_targets: degenerate gt box");
    const int cx = std::clamp(static_cast<int>(std::floor(box.cx / stride)), 0, grid - 1);
    const int cy = std::clamp(static_cast<int>(std::floor(box.cy / stride)), 0, grid - 1);
    t.cells.push_back(static_cast<std::int64_t>(cy) * grid + cx);
    const double sigma = std::max(1.0, std::min(box.w, box.h) / stride / 3.0);
    for (int y = 0; y < grid; ++y)
      for (int x = 0; x < grid; ++x) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        map[static_cast<std::size_t>((b * grid + y) * grid + x)] = std::exp(-d2 / (2 * sigma * sigma));
      }
    for (double v : {box.cx, box.cy, box.w, box.h}) norm.push_back(v / search_res);
  }
  t.gt_map = constant_like(map, {B, grid, grid}, dtype);
  t.norm_boxes = constant_like(norm, {B, 4}, dtype);
  return t;
}

Tensor focal_loss(const Tensor& score_map, const Tensor& gt_map) {
  if (score_map.shape() != gt_map.shape())
    throw ShapeError("focal_loss: shape mismatch " + shape_str(score_map.shape()) + " vs " + shape_str(gt_map.shape()));
  const auto B = score_map.dim(0);
  const auto n = score_map.numel() / B;
  std::vector<double> pos(static_cast<std::size_t>(score_map.numel())), negw(pos.size()), inv_pos(static_cast<std::size_t>(B));
  for (std::int64_t b = 0; b < B; ++b) {
    double count = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const double g = gt_map.value(b * n + i);
      const bool is_pos = g == 1.0;
      pos[b * n + i] = is_pos ? 1.0 : 0.0;
      negw[b * n + i] = is_pos ? 0.0 : std::pow(1.0 - g, 4);
      count += is_pos;
    }
    inv_pos[b] = 1.0 / std::max(count, 1.0);
  }
  const Dtype dt = score_map.dtype();
  Tensor p = clamp(score_map, kProbClamp, 1.0 - kProbClamp);
  Tensor q = one_minus(p);
  Tensor pos_t = mul(mul(square(q), log(p)), constant_like(pos, score_map.shape(), dt));
  Tensor neg_t = mul(mul(square(p), log(q)), constant_like(negw, score_map.shape(), dt));
  Tensor per = neg(row_sum(add(pos_t, neg_t)));
  return mul(per, constant_like(inv_pos, {B}, dt));
}

Tensor giou_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape() || pred.rank() != 2 || pred.dim(1) != 4)
    throw ShapeError("giou_loss: expected matching [B, 4] boxes, got " + shape_str(pred.shape()) + " and " +
                     shape_str(gt.shape()));
  auto corners = [](const Tensor& b) {
    Tensor cx = col(b, 0), cy = col(b, 1), hw = scale(col(b, 2), 0.5), hh = scale(col(b, 3), 0.5);
    return std::array<Tensor, 4>{sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)};
  };
  auto a = corners(pred), g = corners(gt);
  Tensor iw = relu(sub(minimum(a[2], g[2]), maximum(a[0], g[0])));
  Tensor ih = relu(sub(minimum(a[3], g[3]), maximum(a[1], g[1])));
  Tensor inter = mul(iw, ih);
  Tensor area_a = mul(col(pred, 2), col(pred, 3));
  Tensor area_g = mul(col(gt, 2), col(gt, 3));
  Tensor uni = sub(add(area_a, area_g), inter);
  Tensor cw = sub(maximum(a[2], g[2]), minimum(a[0], g[0]));
  Tensor ch = sub(maximum(a[3], g[3]), minimum(a[1], g[1]));
  Tensor c = mul(cw, ch);
  Tensor giou = sub(div(inter, uni), div(sub(c, uni), c));
  return reshape(one_minus(giou), {pred.dim(0)});
}

double giou_loss(const BBox& a, const BBox& b) { return 1.0 - giou(a, b); }

Tensor l1_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape()) throw ShapeError("l1_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  return mean(abs(sub(pred, gt)), 1);
}

double l1_loss(const BBox& a, const BBox& b) {
  return (std::abs(a.cx - b.cx) + std::abs(a.cy - b.cy) + std::abs(a.w - b.w) + std::abs(a.h - b.h)) / 4.0;
}

Tensor task_ce(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<std::int64_t>(labels.size()))
    throw ShapeError("task_ce: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  const auto C = logits.dim(1);
  std::vector<double> onehot(static_cast<std::size_t>(logits.numel()), 0.0);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] < 0 || labels[b] >= C) throw std::invalid_argument("task_ce: label " + std::to_string(labels[b]) + " out of range");
    onehot[b * C + labels[b]] = 1.0;
  }
  return neg(sum(mul(log_softmax(logits, 1), constant_like(onehot, logits.shape(), logits.dtype())), 1));
}

Tensor kl_divergence(const Tensor& p, const Tensor& log_q) {
  if (p.shape() != log_q.shape() || p.rank() != 2)
    throw ShapeError("kl_divergence: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(log_q.shape()));
  const auto B = p.dim(0), N = p.dim(1);
  std::vector<double> neg_entropy(static_cast<std::size_t>(B), 0.0);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < N; ++i) {
      const double v = p.value(b * N + i);
      if (v > 0) neg_entropy[b] += v * std::log(v);
    }
  Tensor p_const = p.detach();
  Tensor cross = sum(mul(p_const, log_q), 1);
  return sub(constant_like(neg_entropy, {B}, p.dtype()), cross);
}

Tensor kl_distill(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
  if (student_logits.shape() != teacher_logits.shape())
    throw ShapeError("kl_distill: shape mismatch " + shape_str(student_logits.shape()) + " vs " +
                     shape_str(teacher_logits.shape()));
  const auto B = student_logits.dim(0);
  Tensor s = reshape(student_logits, {B, -1});
  Tensor t = reshape(teacher_logits.detach(), {B, -1});
  Tensor p;
  {
    NoGradGuard ng;
    p = softmax(scale(t, 1.0 / temperature), 1);
  }
  Tensor kl = kl_divergence(p, log_softmax(scale(s, 1.0 / temperature), 1));
  return temperature == 1.0 ? kl : scale(kl, temperature * temperature);
}

Tensor feature_mimic(const Tensor& student, const Tensor& teacher, const Linear* adapter) {
  if (student.rank() != 3 || teacher.rank() != 3 || student.dim(0) != teacher.dim(0) || student.dim(1) != teacher.dim(1))
    throw ShapeError("feature_mimic: token counts differ: " + shape_str(student.shape()) + " vs " + shape_str(teacher.shape()));
  Tensor s = adapter ? (*adapter)(student) : student;
  if (s.shape() != teacher.shape())
    throw ShapeError("feature_mimic: adapted features " + shape_str(s.shape()) + " vs teacher " + shape_str(teacher.shape()));
  return mean(reshape(square(sub(s, teacher.detach())), {s.dim(0), -1}), 1);
}

Tensor boxes_at_cells(const model::Prediction& pred, const Targets& t) {
  const auto B = pred.offset.dim(0);
  const auto cells = pred.offset.dim(1) * pred.offset.dim(2);
  std::vector<std::int64_t> rows(static_cast<std::size_t>(B));
  std::vector<double> base(static_cast<std::size_t>(B * 2));
  const auto g = pred.offset.dim(2);
  for (std::int64_t b = 0; b < B; ++b) {
    rows[b] = b * cells + t.cells[b];
    base[b * 2] = static_cast<double>(t.cells[b] % g) / g;
    base[b * 2 + 1] = static_cast<double>(t.cells[b] / g) / g;
  }
  Tensor off = index_select(reshape(pred.offset, {B * cells, 2}), rows);
  Tensor size = index_select(reshape(pred.size, {B * cells, 2}), rows);
  Tensor center = add(scale(off, 1.0 / static_cast<double>(g)), constant_like(base, {B, 2}, off.dtype()));
  return concat({center, size}, 1);
}

Terms base_terms(const model::Prediction& pred, const Targets& t) {
  Terms terms;
  terms.focal = focal_loss(pred.score_map, t.gt_map);
  Tensor boxes = boxes_at_cells(pred, t);
  terms.giou = giou_loss(boxes, t.norm_boxes);
  terms.l1 = l1_loss(boxes, t.norm_boxes);
  terms.task = task_ce(pred.task_logits, t.labels);
  return terms;
}

Terms distill_terms(const model::Prediction& student, const model::Prediction& teacher, const Targets& t,
                    const Linear* adapter, const LossWeights& w) {
  Terms terms = base_terms(student, t);
  terms.kd = kl_distill(student.score_logits, teacher.score_logits, w.kd_temperature);
  terms.feat = feature_mimic(student.search_features, teacher.search_features, adapter);
  return terms;
}

Tensor base_objective(const Terms& terms, const LossWeights& w) {
  return add(add(add(terms.focal, scale(terms.giou, w.giou)), scale(terms.l1, w.l1)), terms.task);
}

Tensor student_loss(const Terms& terms, const std::vector<double>& alpha, const LossWeights& w) {
  Tensor base = base_objective(terms, w);
  if (!terms.kd.defined()) return mean(base);
  if (static_cast<std::int64_t>(alpha.size()) != base.dim(0))
    throw ShapeError("student_loss: " + std::to_string(alpha.size()) + " gate values for batch " + std::to_string(base.dim(0)));
  for (double a : alpha)
    if (a != 0.0 && a != 1.0) throw std::invalid_argument("student_loss: alpha must be 0 or 1");
  Tensor distill = add(scale(terms.kd, w.kd), scale(terms.feat, w.feat));
  Tensor a = Tensor::from_values({base.dim(0)}, alpha, base.dtype());
  return mean(add(base, mul(a, distill)));
}

}  // namespace uetrack::loss
