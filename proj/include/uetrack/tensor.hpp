#pragma once

// Dense row-major tensor with tape-based reverse-mode autodiff.
//
// A Tensor is a cheap handle onto shared, immutable storage. Every op that
// runs while gradients are enabled records a GradFn pointing at its inputs;
// the graph lives exactly as long as the handles that reach it.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace uetrack {

enum class Dtype { f32, f64 };

const char* to_string(Dtype dtype);

/// Dtype used for newly created tensors. f64 is meant for gradient checking.
Dtype default_dtype();
void set_default_dtype(Dtype dtype);

class DtypeScope {
 public:
  explicit DtypeScope(Dtype dtype);
  ~DtypeScope();
  DtypeScope(const DtypeScope&) = delete;
  DtypeScope& operator=(const DtypeScope&) = delete;

 private:
  Dtype previous_;
};

/// Gradient recording is thread-local so inference sessions can run
/// concurrently with a NoGradGuard each.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Floating-point operation counter. Every primitive adds a count derived
// purely from operand shapes.
std::uint64_t flop_count();
void add_flops(std::uint64_t n);
void reset_flop_count();

class FlopScope {
 public:
  FlopScope();
  std::uint64_t elapsed() const;

 private:
  std::uint64_t start_;
};

/// Flat typed storage; exactly one of the two vectors is live.
class Buffer {
 public:
  Buffer() = default;
  Buffer(Dtype dtype, std::size_t n);

  Dtype dtype() const { return storage_.index() == 0 ? Dtype::f32 : Dtype::f64; }
  std::size_t size() const;
  bool empty() const { return size() == 0; }

  template <class T>
  std::span<T> span() {
    return std::span<T>(std::get<std::vector<T>>(storage_));
  }
  template <class T>
  std::span<const T> span() const {
    return std::span<const T>(std::get<std::vector<T>>(storage_));
  }

  double get(std::size_t i) const;
  void set(std::size_t i, double v);
  void fill(double v);
  /// this += other, elementwise.
  void add(const Buffer& other);

 private:
  std::variant<std::vector<float>, std::vector<double>> storage_;
};

template <class F>
decltype(auto) dispatch(Dtype dtype, F&& f) {
  if (dtype == Dtype::f32) return f.template operator()<float>();
  return f.template operator()<double>();
}

namespace detail {
struct TensorImpl;
}

class Tensor;

/// Backward rule: accumulate into `grad_inputs[i]` (null when input i needs no gradient).
using BackwardFn = std::function<void(const Buffer& grad_output, std::span<Buffer*> grad_inputs)>;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, Dtype dtype = default_dtype());
  static Tensor full(Shape shape, double value, Dtype dtype = default_dtype());
  static Tensor from_values(Shape shape, std::span<const double> values, Dtype dtype = default_dtype());
  static Tensor from_values(Shape shape, std::initializer_list<double> values, Dtype dtype = default_dtype());
  static Tensor from_buffer(Shape shape, Buffer buffer);
  static Tensor scalar(double value, Dtype dtype = default_dtype());

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  /// Negative axes count from the back.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const;
  Dtype dtype() const;

  const Buffer& buffer() const;
  /// In-place access for optimizers and checkpoint loading; leaves only.
  Buffer& mutable_buffer();
  template <class T>
  std::span<const T> data() const {
    return buffer().span<T>();
  }

  double item() const;
  double value(std::int64_t flat_index) const;
  std::vector<double> values() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  const Buffer& grad() const;
  std::vector<double> grad_values() const;
  void zero_grad();
  void clear_grad();

  Tensor detach() const;
  Tensor cast(Dtype dtype) const;
  Tensor clone() const;

  void backward() const;

  /// Internal: builds an op result, recording the graph edge when needed.
  static Tensor make_result(const char* op, Shape shape, Buffer data, std::vector<Tensor> inputs, BackwardFn fn);
  static Tensor make_result(const char* op, Shape shape, std::shared_ptr<Buffer> data, std::vector<Tensor> inputs,
                            BackwardFn fn);

  /// Shared handle on the underlying storage (used by view-style ops).
  std::shared_ptr<Buffer> storage() const;

  const detail::TensorImpl* id() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

}  // namespace uetrack
