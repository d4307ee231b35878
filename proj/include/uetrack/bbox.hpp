#pragma once

#include <stdexcept>

namespace uetrack {

/// Axis-aligned box, center form, pixels.
struct BBox {
  double cx = 0, cy = 0, w = 0, h = 0;

  double x0() const { return cx - w / 2; }
  double y0() const { return cy - h / 2; }
  double x1() const { return cx + w / 2; }
  double y1() const { return cy + h / 2; }
  double area() const { return w * h; }
  bool valid() const { return w > 0 && h > 0; }

  static BBox from_corners(double x0, double y0, double x1, double y1) {
    return {(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0};
  }
};

double iou(const BBox& a, const BBox& b);
/// IoU minus the empty fraction of the tightest enclosing box; in (-1, 1].
double giou(const BBox& a, const BBox& b);

}  // namespace uetrack
