#include "uetrack/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_map>
#include <unordered_set>
#include <utility>

namespace uetrack {

namespace detail {

struct GradFn {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::shared_ptr<Buffer> data;
  bool requires_grad = false;
  Buffer grad;
  std::shared_ptr<GradFn> grad_fn;
};

}  // namespace detail

namespace {

Dtype g_default_dtype = Dtype::f32;
thread_local bool t_grad_enabled = true;
std::atomic<std::uint64_t> g_flops{0};

}  // namespace

const char* to_string(Dtype dtype) { return dtype == Dtype::f32 ? "f32" : "f64"; }

Dtype default_dtype() { return g_default_dtype; }
void set_default_dtype(Dtype dtype) { g_default_dtype = dtype; }

DtypeScope::DtypeScope(Dtype dtype) : previous_(g_default_dtype) { g_default_dtype = dtype; }
DtypeScope::~DtypeScope() { g_default_dtype = previous_; }

bool grad_enabled() { return t_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::uint64_t flop_count() { return g_flops.load(std::memory_order_relaxed); }
void add_flops(std::uint64_t n) { g_flops.fetch_add(n, std::memory_order_relaxed); }
void reset_flop_count() { g_flops.store(0); }

FlopScope::FlopScope() : start_(flop_count()) {}
std::uint64_t FlopScope::elapsed() const { return flop_count() - start_; }

// ---------------------------------------------------------------- Buffer

Buffer::Buffer(Dtype dtype, std::size_t n) {
  if (dtype == Dtype::f32)
    storage_ = std::vector<float>(n, 0.0f);
  else
    storage_ = std::vector<double>(n, 0.0);
}

std::size_t Buffer::size() const {
  return std::visit([](const auto& v) { return v.size(); }, storage_);
}

double Buffer::get(std::size_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v[i]); }, storage_);
}

void Buffer::set(std::size_t i, double value) {
  std::visit([&](auto& v) { v[i] = static_cast<typename std::decay_t<decltype(v)>::value_type>(value); }, storage_);
}

void Buffer::fill(double value) {
  std::visit([&](auto& v) { std::fill(v.begin(), v.end(), static_cast<typename std::decay_t<decltype(v)>::value_type>(value)); },
             storage_);
}

void Buffer::add(const Buffer& other) {
  if (other.dtype() != dtype() || other.size() != size()) throw ShapeError("Buffer::add: mismatched buffers");
  dispatch(dtype(), [&]<class T>() {
    auto dst = span<T>();
    auto src = other.span<T>();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  });
}

// ---------------------------------------------------------------- Tensor

Tensor Tensor::from_buffer(Shape shape, Buffer buffer) {
  if (static_cast<std::int64_t>(buffer.size()) != shape_numel(shape))
    throw ShapeError("buffer of " + std::to_string(buffer.size()) + " elements does not fit shape " + shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::make_shared<Buffer>(std::move(buffer));
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, Dtype dtype) {
  auto n = static_cast<std::size_t>(shape_numel(shape));
  return from_buffer(std::move(shape), Buffer(dtype, n));
}

Tensor Tensor::full(Shape shape, double value, Dtype dtype) {
  auto n = static_cast<std::size_t>(shape_numel(shape));
  Buffer b(dtype, n);
  b.fill(value);
  return from_buffer(std::move(shape), std::move(b));
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, Dtype dtype) {
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
    throw ShapeError(std::to_string(values.size()) + " values do not fit shape " + shape_str(shape));
  Buffer b(dtype, values.size());
  for (std::size_t i = 0; i < values.size(); ++i) b.set(i, values[i]);
  return from_buffer(std::move(shape), std::move(b));
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values, Dtype dtype) {
  return from_values(std::move(shape), std::span<const double>(values.begin(), values.size()), dtype);
}

Tensor Tensor::scalar(double value, Dtype dtype) { return full({}, value, dtype); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r)
    throw ShapeError("axis " + std::to_string(axis) + " is invalid for shape " + shape_str(shape()));
  return impl_->shape[static_cast<std::size_t>(a)];
}

std::int64_t Tensor::numel() const { return shape_numel(impl_->shape); }
Dtype Tensor::dtype() const { return impl_->data->dtype(); }
const Buffer& Tensor::buffer() const { return *impl_->data; }

Buffer& Tensor::mutable_buffer() {
  if (impl_->grad_fn) throw std::logic_error("mutable_buffer() on a non-leaf tensor");
  return *impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return buffer().get(0);
}

double Tensor::value(std::int64_t flat_index) const { return buffer().get(static_cast<std::size_t>(flat_index)); }

std::vector<double> Tensor::values() const {
  std::vector<double> out(static_cast<std::size_t>(numel()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = buffer().get(i);
  return out;
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (impl_->grad_fn) throw std::logic_error("set_requires_grad() on a non-leaf tensor");
  impl_->requires_grad = on;
  if (!on) impl_->grad = Buffer();
  return *this;
}

bool Tensor::is_leaf() const { return impl_->grad_fn == nullptr; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }

const Buffer& Tensor::grad() const {
  if (impl_->grad.empty()) throw std::logic_error("tensor has no gradient");
  return impl_->grad;
}

std::vector<double> Tensor::grad_values() const {
  const Buffer& g = grad();
  std::vector<double> out(g.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = g.get(i);
  return out;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) impl_->grad.fill(0.0);
}

void Tensor::clear_grad() { impl_->grad = Buffer(); }

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::cast(Dtype dtype) const {
  const Buffer& src = buffer();
  Buffer b(dtype, src.size());
  for (std::size_t i = 0; i < src.size(); ++i) b.set(i, src.get(i));
  return from_buffer(shape(), std::move(b));
}

Tensor Tensor::clone() const { return from_buffer(shape(), buffer()); }

std::shared_ptr<Buffer> Tensor::storage() const { return impl_->data; }

Tensor Tensor::make_result(const char* op, Shape shape, Buffer data, std::vector<Tensor> inputs, BackwardFn fn) {
  return make_result(op, std::move(shape), std::make_shared<Buffer>(std::move(data)), std::move(inputs), std::move(fn));
}

Tensor Tensor::make_result(const char* op, Shape shape, std::shared_ptr<Buffer> data, std::vector<Tensor> inputs,
                           BackwardFn fn) {
  if (static_cast<std::int64_t>(data->size()) != shape_numel(shape))
    throw ShapeError(std::string(op) + ": buffer does not fit shape " + shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  Tensor out(std::move(impl));
  if (!t_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.impl_->requires_grad;
  if (!any) return out;
  auto gf = std::make_shared<detail::GradFn>();
  gf->op = op;
  gf->backward = std::move(fn);
  gf->inputs.reserve(inputs.size());
  for (auto& in : inputs) gf->inputs.push_back(std::move(in.impl_));
  out.impl_->grad_fn = std::move(gf);
  out.impl_->requires_grad = true;
  return out;
}

void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  if (!impl_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->grad_fn && next < node->grad_fn->inputs.size()) {
      detail::TensorImpl* child = node->grad_fn->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<detail::TensorImpl*, Buffer> grads;
  {
    Buffer seed(dtype(), 1);
    seed.fill(1.0);
    grads.emplace(impl_.get(), std::move(seed));
  }

  auto slot_for = [&](detail::TensorImpl* t) -> Buffer* {
    if (!t->requires_grad) return nullptr;
    if (!t->grad_fn) {
      if (t->grad.empty()) t->grad = Buffer(t->data->dtype(), t->data->size());
      return &t->grad;
    }
    auto it = grads.find(t);
    if (it == grads.end()) it = grads.emplace(t, Buffer(t->data->dtype(), t->data->size())).first;
    return &it->second;
  };

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* node = *it;
    if (!node->grad_fn) {
      if (node == impl_.get()) {
        if (node->grad.empty()) node->grad = Buffer(node->data->dtype(), 1);
        node->grad.add(grads.at(node));
      }
      continue;
    }
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    Buffer gout = std::move(found->second);
    grads.erase(found);
    std::vector<Buffer*> gin;
    gin.reserve(node->grad_fn->inputs.size());
    for (auto& in : node->grad_fn->inputs) gin.push_back(slot_for(in.get()));
    node->grad_fn->backward(gout, gin);
  }
}

}  // namespace uetrack
