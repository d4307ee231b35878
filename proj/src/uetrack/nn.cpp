#include "uetrack/nn.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace uetrack {

Tensor randn(Shape shape, Rng& rng, double stddev, Dtype dtype) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_values(std::move(shape), v, dtype);
}

Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi, Dtype dtype) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_values(std::move(shape), v, dtype);
}

Tensor ParamStore::add(const std::string& name, Tensor value) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  value.set_requires_grad(true);
  index_[name] = params_.size();
  params_.push_back({name, value});
  return value;
}

Tensor ParamStore::normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
  return add(name, randn(std::move(shape), rng, stddev));
}

Tensor ParamStore::uniform(const std::string& name, Shape shape, double bound, Rng& rng) {
  return add(name, rand_uniform(std::move(shape), rng, -bound, bound));
}

Tensor ParamStore::constant(const std::string& name, Shape shape, double value) {
  return add(name, Tensor::full(std::move(shape), value));
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return params_[it->second].tensor;
}

std::int64_t ParamStore::numel() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void ParamStore::clear_grad() {
  for (auto& p : params_) p.tensor.clear_grad();
}

void ParamStore::set_requires_grad(bool on) {
  for (auto& p : params_) p.tensor.set_requires_grad(on);
}

std::uint64_t ParamStore::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& p : params_) {
    mix(p.name.data(), p.name.size());
    dispatch(p.tensor.dtype(), [&]<class T>() {
      auto s = p.tensor.data<T>();
      mix(s.data(), s.size_bytes());
    });
  }
  return h;
}

Linear::Linear(ParamStore& ps, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng, bool with_bias) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  weight = ps.uniform(name + ".weight", {in, out}, bound, rng);
  if (with_bias) bias = ps.constant(name + ".bias", {out}, 0.0);
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x.rank() == 1 ? reshape(x, {1, x.dim(0)}) : x, weight);
  if (x.rank() == 1) y = reshape(y, {weight.dim(1)});
  return bias.defined() ? bias_add(y, bias) : y;
}

LayerNorm::LayerNorm(ParamStore& ps, const std::string& name, std::int64_t dim) {
  gamma = ps.constant(name + ".gamma", {dim}, 1.0);
  beta = ps.constant(name + ".beta", {dim}, 0.0);
}

Conv2d::Conv2d(ParamStore& ps, const std::string& name, std::int64_t in, std::int64_t out, int kernel, int stride_,
               int padding_, Rng& rng)
    : stride(stride_), padding(padding_) {
  const double fan_in = static_cast<double>(in * kernel * kernel);
  weight = ps.normal(name + ".weight", {kernel, kernel, in, out}, std::sqrt(2.0 / fan_in), rng);
  bias = ps.constant(name + ".bias", {out}, 0.0);
}

}  // namespace uetrack
