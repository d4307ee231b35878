#pragma once

#include <string>
#include <vector>

#include "uetrack/nn.hpp"

namespace uetrack::optim {

struct AdamWConfig {
  double lr_backbone = 5e-4;
  double lr_rest = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // global norm; 0 disables
  bool allow_missing_grad = false;
};

/// Parameters whose name starts with "backbone." use lr_backbone.
class AdamW {
 public:
  AdamW(std::vector<Parameter> params, AdamWConfig cfg);

  /// One decoupled-weight-decay update; `lr_scale` multiplies both rates.
  void step(double lr_scale = 1.0);
  void zero_grad();
  double lr_for(const std::string& name) const;
  long steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  /// Global gradient norm observed at the last step (before clipping).
  double last_grad_norm() const { return last_norm_; }

 private:
  std::vector<Parameter> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamWConfig cfg_;
  long t_ = 0;
  double last_norm_ = 0;
};

}  // namespace uetrack::optim
