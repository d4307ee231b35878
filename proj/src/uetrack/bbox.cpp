#include "uetrack/bbox.hpp"

#include <algorithm>
#include <string>

namespace uetrack {

namespace {

double intersection(const BBox& a, const BBox& b) {
  const double iw = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double ih = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  return iw * ih;
}

}  // namespace

double iou(const BBox& a, const BBox& b) {
  const double inter = intersection(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double giou(const BBox& a, const BBox& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("giou: boxes need positive width and height");
  const double inter = intersection(a, b);
  const double uni = a.area() + b.area() - inter;
  const double cw = std::max(a.x1(), b.x1()) - std::min(a.x0(), b.x0());
  const double ch = std::max(a.y1(), b.y1()) - std::min(a.y0(), b.y0());
  const double c = cw * ch;
  return inter / uni - (c - uni) / c;
}

}  // namespace uetrack
