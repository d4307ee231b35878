#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "uetrack/ops.hpp"
#include "uetrack/tensor.hpp"

namespace uetrack {

using Rng = std::mt19937_64;

struct Parameter {
  std::string name;
  Tensor tensor;
};

/// Owns the named trainable tensors of a model. Names are unique.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor value);
  Tensor normal(const std::string& name, Shape shape, double stddev, Rng& rng);
  Tensor uniform(const std::string& name, Shape shape, double bound, Rng& rng);
  Tensor constant(const std::string& name, Shape shape, double value);

  const std::vector<Parameter>& params() const { return params_; }
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::int64_t numel() const;
  void zero_grad();
  void clear_grad();
  void set_requires_grad(bool on);
  /// Order-sensitive hash of every parameter's bits.
  std::uint64_t checksum() const;

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng, bool bias = true);
  /// x [..., in] -> [..., out]
  Tensor operator()(const Tensor& x) const;

  Tensor weight, bias;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, std::int64_t dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

  Tensor gamma, beta;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore& ps, const std::string& name, std::int64_t in, std::int64_t out, int kernel, int stride, int padding,
         Rng& rng);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }

  Tensor weight, bias;
  int stride = 1, padding = 0;
};

/// Random tensor helpers (values drawn in double, then stored in `dtype`).
Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, Dtype dtype = default_dtype());
Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi, Dtype dtype = default_dtype());

}  // namespace uetrack
