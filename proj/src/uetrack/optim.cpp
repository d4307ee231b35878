#include "uetrack/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace uetrack::optim {

AdamW::AdamW(std::vector<Parameter> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
  }
}

double AdamW::lr_for(const std::string& name) const {
  return name.rfind("backbone.", 0) == 0 ? cfg_.lr_backbone : cfg_.lr_rest;
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.clear_grad();
}

void AdamW::step(double lr_scale) {
  ++t_;
  double sq = 0;
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) {
      if (!cfg_.allow_missing_grad) throw std::runtime_error("AdamW: parameter " + p.name + " has no gradient");
      continue;
    }
    const Buffer& g = p.tensor.grad();
    dispatch(g.dtype(), [&]<class T>() {
      for (T x : g.span<T>()) sq += static_cast<double>(x) * static_cast<double>(x);
    });
  }
  last_norm_ = std::sqrt(sq);
  const double clip = cfg_.grad_clip > 0 && last_norm_ > cfg_.grad_clip ? cfg_.grad_clip / last_norm_ : 1.0;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& t = params_[k].tensor;
    if (!t.has_grad()) continue;
    const double lr = lr_for(params_[k].name) * lr_scale;
    const Buffer& g = t.grad();
    Buffer& w = t.mutable_buffer();
    double* m = m_[k].data();
    double* v = v_[k].data();
    const double b1 = cfg_.beta1, b2 = cfg_.beta2, decay = lr * cfg_.weight_decay, eps = cfg_.eps;
    dispatch(w.dtype(), [&]<class T>() {
      const T* gs = g.span<T>().data();
      T* ws = w.span<T>().data();
      const std::size_t n = w.size();
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = static_cast<double>(gs[i]) * clip;
        double wi = static_cast<double>(ws[i]);
        wi -= decay * wi;
        m[i] = b1 * m[i] + (1 - b1) * gi;
        v[i] = b2 * v[i] + (1 - b2) * gi * gi;
        wi -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        ws[i] = static_cast<T>(wi);
      }
    });
  }
}

}  // namespace uetrack::optim
