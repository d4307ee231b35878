#pragma once

#include <vector>

#include "uetrack/nn.hpp"

namespace testutil {

inline void set_values(uetrack::Tensor t, const std::vector<double>& v) {
  auto& b = t.mutable_buffer();
  for (std::size_t i = 0; i < v.size(); ++i) b.set(i, v[i]);
}

inline void fill(uetrack::Tensor t, double v) { t.mutable_buffer().fill(v); }

inline double max_abs(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testutil
