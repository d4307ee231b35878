#include "uetrack/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>

namespace uetrack {

namespace {

using i64 = std::int64_t;

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw ShapeError(std::string(op) + ": invalid axis " + std::to_string(axis) + " for rank " + std::to_string(rank));
  return a;
}

void check_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.dtype() != b.dtype())
    throw ShapeError(std::string(op) + ": dtype mismatch " + to_string(a.dtype()) + " vs " + to_string(b.dtype()));
}

struct AxisView {
  i64 outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, int axis) {
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= shape[i];
  v.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

std::vector<i64> contiguous_strides(const Shape& shape) {
  std::vector<i64> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) s[i] = s[i + 1] * shape[i + 1];
  return s;
}

// Visits every element of `shape` in row-major order, tracking the matching
// offset into a strided input.
template <class F>
void strided_walk(const Shape& shape, const std::vector<i64>& in_strides, F&& f) {
  const i64 n = shape_numel(shape);
  if (n == 0) return;
  const int r = static_cast<int>(shape.size());
  if (r == 0) {
    f(0, 0);
    return;
  }
  std::vector<i64> idx(r, 0);
  i64 off = 0;
  const i64 last = shape[r - 1];
  const i64 last_stride = in_strides[r - 1];
  for (i64 o = 0; o < n;) {
    i64 lo = off;
    for (i64 j = 0; j < last; ++j, ++o, lo += last_stride) f(o, lo);
    for (int d = r - 2; d >= 0; --d) {
      ++idx[d];
      off += in_strides[d];
      if (idx[d] < shape[d]) break;
      off -= in_strides[d] * shape[d];
      idx[d] = 0;
    }
  }
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[m x n] += op(A) * op(B); op(X) = X^T when the flag is set.
template <class T>
void gemm_acc(const T* A, bool ta, const T* B, bool tb, T* C, i64 m, i64 n, i64 k) {
  Eigen::Map<const RowMat<T>> a(A, ta ? k : m, ta ? m : k);
  Eigen::Map<const RowMat<T>> b(B, tb ? n : k, tb ? k : n);
  Eigen::Map<RowMat<T>> c(C, m, n);
  if (!ta && !tb)
    c.noalias() += a * b;
  else if (ta && !tb)
    c.noalias() += a.transpose() * b;
  else if (!ta && tb)
    c.noalias() += a * b.transpose();
  else
    c.noalias() += a.transpose() * b.transpose();
}

template <class Fwd, class Bwd>
Tensor unary_op(const char* name, const Tensor& x, std::uint64_t flops_per, Fwd fwd, Bwd bwd) {
  const auto n = static_cast<std::size_t>(x.numel());
  auto out = std::make_shared<Buffer>(x.dtype(), n);
  dispatch(x.dtype(), [&]<class T>() {
    auto xs = x.data<T>();
    auto ys = out->span<T>();
    for (std::size_t i = 0; i < n; ++i) ys[i] = fwd(xs[i]);
  });
  add_flops(flops_per * n);
  std::weak_ptr<Buffer> weak_out = out;
  return Tensor::make_result(name, x.shape(), out, {x}, [x, weak_out, bwd](const Buffer& g, std::span<Buffer*> gin) {
    if (!gin[0]) return;
    auto y = weak_out.lock();
    dispatch(x.dtype(), [&]<class T>() {
      auto xs = x.data<T>();
      auto ys = y->span<T>();
      auto gs = g.span<T>();
      auto dx = gin[0]->span<T>();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += bwd(xs[i], ys[i], gs[i]);
    });
  });
}

}  // namespace

// ------------------------------------------------------------ elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  check_same(a, b, "add");
  Buffer out(a.dtype(), a.numel());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>(), y = b.data<T>();
    auto z = out.span<T>();
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] + y[i];
  });
  add_flops(a.numel());
  return Tensor::make_result("add", a.shape(), std::move(out), {a, b}, [](const Buffer& g, std::span<Buffer*> gin) {
    if (gin[0]) gin[0]->add(g);
    if (gin[1]) gin[1]->add(g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same(a, b, "sub");
  Buffer out(a.dtype(), a.numel());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>(), y = b.data<T>();
    auto z = out.span<T>();
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] - y[i];
  });
  add_flops(a.numel());
  return Tensor::make_result("sub", a.shape(), std::move(out), {a, b}, [](const Buffer& g, std::span<Buffer*> gin) {
    if (gin[0]) gin[0]->add(g);
    if (gin[1]) {
      dispatch(g.dtype(), [&]<class T>() {
        auto gs = g.span<T>();
        auto d = gin[1]->span<T>();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] -= gs[i];
      });
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same(a, b, "mul");
  Buffer out(a.dtype(), a.numel());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>(), y = b.data<T>();
    auto z = out.span<T>();
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] * y[i];
  });
  add_flops(a.numel());
  return Tensor::make_result("mul", a.shape(), std::move(out), {a, b}, [a, b](const Buffer& g, std::span<Buffer*> gin) {
    dispatch(g.dtype(), [&]<class T>() {
      auto gs = g.span<T>();
      auto x = a.data<T>(), y = b.data<T>();
      if (gin[0]) {
        auto d = gin[0]->span<T>();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gs[i] * y[i];
      }
      if (gin[1]) {
        auto d = gin[1]->span<T>();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gs[i] * x[i];
      }
    });
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same(a, b, "div");
  Buffer out(a.dtype(), a.numel());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>(), y = b.data<T>();
    auto z = out.span<T>();
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] / y[i];
  });
  add_flops(a.numel());
  return Tensor::make_result("div", a.shape(), std::move(out), {a, b}, [a, b](const Buffer& g, std::span<Buffer*> gin) {
    dispatch(g.dtype(), [&]<class T>() {
      auto gs = g.span<T>();
      auto x = a.data<T>(), y = b.data<T>();
      if (gin[0]) {
        auto d = gin[0]->span<T>();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gs[i] / y[i];
      }
      if (gin[1]) {
        auto d = gin[1]->span<T>();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] -= gs[i] * x[i] / (y[i] * y[i]);
      }
    });
  });
}

namespace {

Tensor select_binary(const char* name, const Tensor& a, const Tensor& b, bool take_max) {
  check_same(a, b, name);
  Buffer out(a.dtype(), a.numel());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>(), y = b.data<T>();
    auto z = out.span<T>();
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = take_max ? std::max(x[i], y[i]) : std::min(x[i], y[i]);
  });
  add_flops(a.numel());
  return Tensor::make_result(name, a.shape(), std::move(out), {a, b},
                             [a, b, take_max](const Buffer& g, std::span<Buffer*> gin) {
                               dispatch(g.dtype(), [&]<class T>() {
                                 auto gs = g.span<T>();
                                 auto x = a.data<T>(), y = b.data<T>();
                                 for (std::size_t i = 0; i < gs.size(); ++i) {
                                   const bool first = take_max ? x[i] >= y[i] : x[i] <= y[i];
                                   Buffer* dst = first ? gin[0] : gin[1];
                                   if (dst) dst->span<T>()[i] += gs[i];
                                 }
                               });
                             });
}

}  // namespace

Tensor maximum(const Tensor& a, const Tensor& b) { return select_binary("maximum", a, b, true); }
Tensor minimum(const Tensor& a, const Tensor& b) { return select_binary("minimum", a, b, false); }

Tensor scale(const Tensor& x, double s) {
  return unary_op(
      "scale", x, 1, [s](auto v) { return static_cast<decltype(v)>(v * s); },
      [s](auto, auto, auto g) { return static_cast<decltype(g)>(g * s); });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary_op(
      "add_scalar", x, 1, [s](auto v) { return static_cast<decltype(v)>(v + s); }, [](auto, auto, auto g) { return g; });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      "neg", x, 1, [](auto v) { return -v; }, [](auto, auto, auto g) { return -g; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, 1, [](auto v) { return std::exp(v); }, [](auto, auto y, auto g) { return g * y; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      "log", x, 1, [](auto v) { return std::log(v); }, [](auto v, auto, auto g) { return g / v; });
}

Tensor square(const Tensor& x) {
  return unary_op(
      "square", x, 1, [](auto v) { return v * v; }, [](auto v, auto, auto g) { return 2 * v * g; });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      "abs", x, 1, [](auto v) { return std::abs(v); },
      [](auto v, auto, auto g) { return v > 0 ? g : (v < 0 ? -g : decltype(g)(0)); });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, 1, [](auto v) { return v > 0 ? v : decltype(v)(0); },
      [](auto v, auto, auto g) { return v > 0 ? g : decltype(g)(0); });
}

Tensor gelu(const Tensor& x) {
  return unary_op(
      "gelu", x, 8,
      [](auto v) {
        using T = decltype(v);
        return static_cast<T>(0.5) * v * (static_cast<T>(1) + std::erf(v * static_cast<T>(std::numbers::sqrt2 / 2)));
      },
      [](auto v, auto, auto g) {
        using T = decltype(v);
        const T cdf = static_cast<T>(0.5) * (static_cast<T>(1) + std::erf(v * static_cast<T>(std::numbers::sqrt2 / 2)));
        const T pdf = std::exp(static_cast<T>(-0.5) * v * v) * static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
        return g * (cdf + v * pdf);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      "sigmoid", x, 4,
      [](auto v) {
        using T = decltype(v);
        return v >= 0 ? static_cast<T>(1) / (static_cast<T>(1) + std::exp(-v))
                      : std::exp(v) / (static_cast<T>(1) + std::exp(v));
      },
      [](auto, auto y, auto g) { return g * y * (static_cast<decltype(y)>(1) - y); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary_op(
      "clamp", x, 1,
      [lo, hi](auto v) {
        using T = decltype(v);
        return std::clamp(v, static_cast<T>(lo), static_cast<T>(hi));
      },
      [lo, hi](auto v, auto, auto g) {
        using T = decltype(v);
        return (v >= static_cast<T>(lo) && v <= static_cast<T>(hi)) ? g : static_cast<T>(0);
      });
}

Tensor bias_add(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.rank() < 1 || x.dim(-1) != bias.dim(0))
    throw ShapeError("bias_add: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(bias.shape()));
  if (x.dtype() != bias.dtype()) throw ShapeError("bias_add: dtype mismatch");
  const i64 n = bias.dim(0);
  const i64 rows = x.numel() / n;
  Buffer out(x.dtype(), x.numel());
  dispatch(x.dtype(), [&]<class T>() {
    auto xs = x.data<T>(), bs = bias.data<T>();
    auto z = out.span<T>();
    for (i64 r = 0; r < rows; ++r)
      for (i64 j = 0; j < n; ++j) z[r * n + j] = xs[r * n + j] + bs[j];
  });
  add_flops(x.numel());
  return Tensor::make_result("bias_add", x.shape(), std::move(out), {x, bias},
                             [n, rows](const Buffer& g, std::span<Buffer*> gin) {
                               if (gin[0]) gin[0]->add(g);
                               if (gin[1]) {
                                 dispatch(g.dtype(), [&]<class T>() {
                                   auto gs = g.span<T>();
                                   auto db = gin[1]->span<T>();
                                   for (i64 r = 0; r < rows; ++r)
                                     for (i64 j = 0; j < n; ++j) db[j] += gs[r * n + j];
                                 });
                               }
                             });
}

Tensor expand(const Tensor& x, const Shape& shape) {
  const int r = static_cast<int>(shape.size());
  const int xr = x.rank();
  if (xr > r) throw ShapeError("expand: cannot expand " + shape_str(x.shape()) + " to " + shape_str(shape));
  const auto xs = contiguous_strides(x.shape());
  std::vector<i64> strides(r, 0);
  for (int i = 0; i < r; ++i) {
    const int xi = i - (r - xr);
    if (xi < 0) continue;
    const i64 d = x.shape()[xi];
    if (d == shape[i])
      strides[i] = d == 1 ? 0 : xs[xi];
    else if (d != 1)
      throw ShapeError("expand: cannot expand " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Buffer out(x.dtype(), shape_numel(shape));
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.span<T>();
    strided_walk(shape, strides, [&](i64 o, i64 i) { dst[o] = src[i]; });
  });
  return Tensor::make_result("expand", shape, std::move(out), {x}, [shape, strides](const Buffer& g, std::span<Buffer*> gin) {
    if (!gin[0]) return;
    dispatch(g.dtype(), [&]<class T>() {
      auto gs = g.span<T>();
      auto d = gin[0]->span<T>();
      strided_walk(shape, strides, [&](i64 o, i64 i) { d[i] += gs[o]; });
    });
  });
}

// ------------------------------------------------------------ reductions

Tensor sum(const Tensor& x) {
  Buffer out(x.dtype(), 1);
  dispatch(x.dtype(), [&]<class T>() {
    T acc = 0;
    for (T v : x.data<T>()) acc += v;
    out.span<T>()[0] = acc;
  });
  add_flops(x.numel());
  return Tensor::make_result("sum", {}, std::move(out), {x}, [](const Buffer& g, std::span<Buffer*> gin) {
    if (!gin[0]) return;
    dispatch(g.dtype(), [&]<class T>() {
      const T gv = g.span<T>()[0];
      for (T& d : gin[0]->span<T>()) d += gv;
    });
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  const int a = normalize_axis(axis, x.rank(), "sum");
  const AxisView v = axis_view(x.shape(), a);
  Shape out_shape = x.shape();
  if (keepdim)
    out_shape[a] = 1;
  else
    out_shape.erase(out_shape.begin() + a);
  Buffer out(x.dtype(), v.outer * v.inner);
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.span<T>();
    for (i64 o = 0; o < v.outer; ++o)
      for (i64 j = 0; j < v.n; ++j)
        for (i64 i = 0; i < v.inner; ++i) dst[o * v.inner + i] += src[(o * v.n + j) * v.inner + i];
  });
  add_flops(x.numel());
  return Tensor::make_result("sum_axis", out_shape, std::move(out), {x}, [v](const Buffer& g, std::span<Buffer*> gin) {
    if (!gin[0]) return;
    dispatch(g.dtype(), [&]<class T>() {
      auto gs = g.span<T>();
      auto d = gin[0]->span<T>();
      for (i64 o = 0; o < v.outer; ++o)
        for (i64 j = 0; j < v.n; ++j)
          for (i64 i = 0; i < v.inner; ++i) d[(o * v.n + j) * v.inner + i] += gs[o * v.inner + i];
    });
  });
}

Tensor mean(const Tensor& x, int axis, bool keepdim) {
  const double n = static_cast<double>(x.dim(normalize_axis(axis, x.rank(), "mean")));
  return scale(sum(x, axis, keepdim), 1.0 / n);
}

// ------------------------------------------------------------ layout

Tensor reshape(const Tensor& x, const Shape& shape) {
  Shape s = shape;
  i64 known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1 in " + shape_str(shape));
      infer = static_cast<int>(i);
    } else {
      known *= s[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0)
      throw ShapeError("reshape: cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    s[infer] = x.numel() / known;
  }
  if (shape_numel(s) != x.numel())
    throw ShapeError("reshape: cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  return Tensor::make_result("reshape", s, x.storage(), {x}, [](const Buffer& g, std::span<Buffer*> gin) {
    if (gin[0]) gin[0]->add(g);
  });
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r) throw ShapeError("permute: axes do not match rank of " + shape_str(x.shape()));
  std::vector<bool> seen(r, false);
  for (int a : axes) {
    if (a < 0 || a >= r || seen[a]) throw ShapeError("permute: invalid axis list for " + shape_str(x.shape()));
    seen[a] = true;
  }
  const auto xs = contiguous_strides(x.shape());
  Shape out_shape(r);
  std::vector<i64> strides(r);
  for (int i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[axes[i]];
    strides[i] = xs[axes[i]];
  }
  Buffer out(x.dtype(), x.numel());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.span<T>();
    strided_walk(out_shape, strides, [&](i64 o, i64 i) { dst[o] = src[i]; });
  });
  return Tensor::make_result("permute", out_shape, std::move(out), {x},
                             [out_shape, strides](const Buffer& g, std::span<Buffer*> gin) {
                               if (!gin[0]) return;
                               dispatch(g.dtype(), [&]<class T>() {
                                 auto gs = g.span<T>();
                                 auto d = gin[0]->span<T>();
                                 strided_walk(out_shape, strides, [&](i64 o, i64 i) { d[i] += gs[o]; });
                               });
                             });
}

Tensor transpose(const Tensor& x, int axis_a, int axis_b) {
  const int a = normalize_axis(axis_a, x.rank(), "transpose");
  const int b = normalize_axis(axis_b, x.rank(), "transpose");
  std::vector<int> axes(x.rank());
  for (int i = 0; i < x.rank(); ++i) axes[i] = i;
  std::swap(axes[a], axes[b]);
  return permute(x, axes);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int a = normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[a] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (static_cast<int>(s.size()) != parts[0].rank() || p.dtype() != parts[0].dtype())
      throw ShapeError("concat: incompatible parts " + shape_str(parts[0].shape()) + " vs " + shape_str(s));
    for (int i = 0; i < p.rank(); ++i)
      if (i != a && s[i] != parts[0].shape()[i])
        throw ShapeError("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(s));
    out_shape[a] += s[a];
  }
  const AxisView ov = axis_view(out_shape, a);
  std::vector<i64> sizes, offsets;
  i64 off = 0;
  for (const auto& p : parts) {
    sizes.push_back(p.shape()[a]);
    offsets.push_back(off);
    off += p.shape()[a];
  }
  Buffer out(parts[0].dtype(), shape_numel(out_shape));
  dispatch(out.dtype(), [&]<class T>() {
    auto dst = out.span<T>();
    for (std::size_t k = 0; k < parts.size(); ++k) {
      auto src = parts[k].data<T>();
      const i64 block = sizes[k] * ov.inner;
      for (i64 o = 0; o < ov.outer; ++o)
        std::copy_n(src.data() + o * block, block, dst.data() + (o * ov.n + offsets[k]) * ov.inner);
    }
  });
  return Tensor::make_result("concat", out_shape, std::move(out), parts,
                             [ov, sizes, offsets](const Buffer& g, std::span<Buffer*> gin) {
                               dispatch(g.dtype(), [&]<class T>() {
                                 auto gs = g.span<T>();
                                 for (std::size_t k = 0; k < gin.size(); ++k) {
                                   if (!gin[k]) continue;
                                   auto d = gin[k]->span<T>();
                                   const i64 block = sizes[k] * ov.inner;
                                   for (i64 o = 0; o < ov.outer; ++o) {
                                     const T* s = gs.data() + (o * ov.n + offsets[k]) * ov.inner;
                                     T* t = d.data() + o * block;
                                     for (i64 i = 0; i < block; ++i) t[i] += s[i];
                                   }
                                 }
                               });
                             });
}

Tensor slice(const Tensor& x, int axis, i64 start, i64 end) {
  const int a = normalize_axis(axis, x.rank(), "slice");
  const i64 n = x.shape()[a];
  if (start < 0 || end > n || start > end)
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(end) + ") out of bounds for axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  const AxisView v = axis_view(x.shape(), a);
  Shape out_shape = x.shape();
  out_shape[a] = end - start;
  const i64 len = end - start;
  Buffer out(x.dtype(), shape_numel(out_shape));
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.span<T>();
    for (i64 o = 0; o < v.outer; ++o)
      std::copy_n(src.data() + (o * v.n + start) * v.inner, len * v.inner, dst.data() + o * len * v.inner);
  });
  return Tensor::make_result("slice", out_shape, std::move(out), {x}, [v, start, len](const Buffer& g, std::span<Buffer*> gin) {
    if (!gin[0]) return;
    dispatch(g.dtype(), [&]<class T>() {
      auto gs = g.span<T>();
      auto d = gin[0]->span<T>();
      for (i64 o = 0; o < v.outer; ++o) {
        const T* s = gs.data() + o * len * v.inner;
        T* t = d.data() + (o * v.n + start) * v.inner;
        for (i64 i = 0; i < len * v.inner; ++i) t[i] += s[i];
      }
    });
  });
}

Tensor index_select(const Tensor& x, std::span<const i64> indices) {
  if (x.rank() < 1) throw ShapeError("index_select: scalar input");
  const i64 rows = x.dim(0);
  const i64 row = x.numel() / std::max<i64>(rows, 1);
  for (i64 idx : indices)
    if (idx < 0 || idx >= rows) throw ShapeError("index_select: index " + std::to_string(idx) + " out of range");
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<i64>(indices.size());
  std::vector<i64> idx(indices.begin(), indices.end());
  Buffer out(x.dtype(), shape_numel(out_shape));
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.span<T>();
    for (std::size_t k = 0; k < idx.size(); ++k) std::copy_n(src.data() + idx[k] * row, row, dst.data() + k * row);
  });
  return Tensor::make_result("index_select", out_shape, std::move(out), {x}, [idx, row](const Buffer& g, std::span<Buffer*> gin) {
    if (!gin[0]) return;
    dispatch(g.dtype(), [&]<class T>() {
      auto gs = g.span<T>();
      auto d = gin[0]->span<T>();
      for (std::size_t k = 0; k < idx.size(); ++k)
        for (i64 j = 0; j < row; ++j) d[idx[k] * row + j] += gs[k * row + j];
    });
  });
}

Tensor index_scatter(const Tensor& src, std::span<const i64> indices, i64 rows) {
  if (src.rank() < 1 || src.dim(0) != static_cast<i64>(indices.size()))
    throw ShapeError("index_scatter: " + std::to_string(indices.size()) + " indices for source " + shape_str(src.shape()));
  const i64 row = src.dim(0) == 0 ? 0 : src.numel() / src.dim(0);
  for (i64 idx : indices)
    if (idx < 0 || idx >= rows) throw ShapeError("index_scatter: index " + std::to_string(idx) + " out of range");
  Shape out_shape = src.shape();
  out_shape[0] = rows;
  std::vector<i64> idx(indices.begin(), indices.end());
  Buffer out(src.dtype(), shape_numel(out_shape));
  dispatch(src.dtype(), [&]<class T>() {
    auto s = src.data<T>();
    auto d = out.span<T>();
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (i64 j = 0; j < row; ++j) d[idx[k] * row + j] += s[k * row + j];
  });
  return Tensor::make_result("index_scatter", out_shape, std::move(out), {src}, [idx, row](const Buffer& g, std::span<Buffer*> gin) {
    if (!gin[0]) return;
    dispatch(g.dtype(), [&]<class T>() {
      auto gs = g.span<T>();
      auto d = gin[0]->span<T>();
      for (std::size_t k = 0; k < idx.size(); ++k)
        for (i64 j = 0; j < row; ++j) d[k * row + j] += gs[idx[k] * row + j];
    });
  });
}

// ------------------------------------------------------------ matmul

Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.dtype() != b.dtype()) throw ShapeError("matmul: dtype mismatch");
  const i64 a0 = a.dim(-2), a1 = a.dim(-1), b0 = b.dim(-2), b1 = b.dim(-1);
  const i64 M = ta ? a1 : a0, K = ta ? a0 : a1;
  const i64 Kb = tb ? b1 : b0, N = tb ? b0 : b1;
  if (K != Kb)
    throw ShapeError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  const bool a_shared = a.rank() == 2 && b.rank() > 2;
  const bool b_shared = b.rank() == 2;
  if (!a_shared && !b_shared && batch_a != batch_b)
    throw ShapeError("matmul: batch shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Shape& batch = a_shared ? batch_b : batch_a;
  const i64 nb = shape_numel(batch);
  Shape out_shape = batch;
  out_shape.push_back(M);
  out_shape.push_back(N);

  // A batch of activations times one shared weight collapses into one GEMM.
  const bool fold = b_shared && !ta && nb > 1;
  const i64 batches = fold ? 1 : nb;
  const i64 Mf = fold ? nb * M : M;
  const i64 sa = a_shared ? 0 : Mf * K;
  const i64 sb = b_shared ? 0 : K * N;
  const i64 sc = Mf * N;

  Buffer out(a.dtype(), shape_numel(out_shape));
  dispatch(a.dtype(), [&]<class T>() {
    const T* A = a.data<T>().data();
    const T* B = b.data<T>().data();
    T* C = out.span<T>().data();
    for (i64 i = 0; i < batches; ++i) gemm_acc<T>(A + i * sa, ta, B + i * sb, tb, C + i * sc, Mf, N, K);
  });
  add_flops(static_cast<std::uint64_t>(2 * nb * M * N * K));

  return Tensor::make_result(
      "matmul", out_shape, std::move(out), {a, b},
      [a, b, ta, tb, batches, Mf, N, K, sa, sb, sc](const Buffer& g, std::span<Buffer*> gin) {
        dispatch(g.dtype(), [&]<class T>() {
          const T* A = a.data<T>().data();
          const T* B = b.data<T>().data();
          const T* G = g.span<T>().data();
          if (gin[0]) {
            T* dA = gin[0]->span<T>().data();
            for (i64 i = 0; i < batches; ++i) {
              if (!ta)
                gemm_acc<T>(G + i * sc, false, B + i * sb, !tb, dA + i * sa, Mf, K, N);
              else
                gemm_acc<T>(B + i * sb, tb, G + i * sc, true, dA + i * sa, K, Mf, N);
            }
          }
          if (gin[1]) {
            T* dB = gin[1]->span<T>().data();
            for (i64 i = 0; i < batches; ++i) {
              if (!tb)
                gemm_acc<T>(A + i * sa, !ta, G + i * sc, false, dB + i * sb, K, N, Mf);
              else
                gemm_acc<T>(G + i * sc, true, A + i * sa, ta, dB + i * sb, N, K, Mf);
            }
          }
        });
        add_flops(static_cast<std::uint64_t>(4 * batches * Mf * N * K));
      });
}

// ------------------------------------------------------------ softmax family

Tensor softmax(const Tensor& x, int axis) {
  const int a = normalize_axis(axis, x.rank(), "softmax");
  const AxisView v = axis_view(x.shape(), a);
  auto out = std::make_shared<Buffer>(x.dtype(), x.numel());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out->span<T>();
    for (i64 o = 0; o < v.outer; ++o)
      for (i64 i = 0; i < v.inner; ++i) {
        const i64 base = o * v.n * v.inner + i;
        T mx = -std::numeric_limits<T>::infinity();
        for (i64 j = 0; j < v.n; ++j) mx = std::max(mx, src[base + j * v.inner]);
        T total = 0;
        for (i64 j = 0; j < v.n; ++j) {
          const T e = std::exp(src[base + j * v.inner] - mx);
          dst[base + j * v.inner] = e;
          total += e;
        }
        const T inv = static_cast<T>(1) / total;
        for (i64 j = 0; j < v.n; ++j) dst[base + j * v.inner] *= inv;
      }
  });
  add_flops(4 * x.numel());
  std::weak_ptr<Buffer> weak_out = out;
  return Tensor::make_result("softmax", x.shape(), out, {x}, [v, weak_out](const Buffer& g, std::span<Buffer*> gin) {
    if (!gin[0]) return;
    auto y_buf = weak_out.lock();
    dispatch(g.dtype(), [&]<class T>() {
      auto y = y_buf->span<T>();
      auto gs = g.span<T>();
      auto d = gin[0]->span<T>();
      for (i64 o = 0; o < v.outer; ++o)
        for (i64 i = 0; i < v.inner; ++i) {
          const i64 base = o * v.n * v.inner + i;
          T dot = 0;
          for (i64 j = 0; j < v.n; ++j) dot += gs[base + j * v.inner] * y[base + j * v.inner];
          for (i64 j = 0; j < v.n; ++j) {
            const i64 k = base + j * v.inner;
            d[k] += y[k] * (gs[k] - dot);
          }
        }
    });
  });
}

Tensor log_softmax(const Tensor& x, int axis) {
  const int a = normalize_axis(axis, x.rank(), "log_softmax");
  const AxisView v = axis_view(x.shape(), a);
  auto out = std::make_shared<Buffer>(x.dtype(), x.numel());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out->span<T>();
    for (i64 o = 0; o < v.outer; ++o)
      for (i64 i = 0; i < v.inner; ++i) {
        const i64 base = o * v.n * v.inner + i;
        T mx = -std::numeric_limits<T>::infinity();
        for (i64 j = 0; j < v.n; ++j) mx = std::max(mx, src[base + j * v.inner]);
        T total = 0;
        for (i64 j = 0; j < v.n; ++j) total += std::exp(src[base + j * v.inner] - mx);
        const T lse = mx + std::log(total);
        for (i64 j = 0; j < v.n; ++j) dst[base + j * v.inner] = src[base + j * v.inner] - lse;
      }
  });
  add_flops(4 * x.numel());
  std::weak_ptr<Buffer> weak_out = out;
  return Tensor::make_result("log_softmax", x.shape(), out, {x}, [v, weak_out](const Buffer& g, std::span<Buffer*> gin) {
    if (!gin[0]) return;
    auto y_buf = weak_out.lock();
    dispatch(g.dtype(), [&]<class T>() {
      auto y = y_buf->span<T>();
      auto gs = g.span<T>();
      auto d = gin[0]->span<T>();
      for (i64 o = 0; o < v.outer; ++o)
        for (i64 i = 0; i < v.inner; ++i) {
          const i64 base = o * v.n * v.inner + i;
          T total = 0;
          for (i64 j = 0; j < v.n; ++j) total += gs[base + j * v.inner];
          for (i64 j = 0; j < v.n; ++j) {
            const i64 k = base + j * v.inner;
            d[k] += gs[k] - std::exp(y[k]) * total;
          }
        }
    });
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1 || gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != x.dim(-1) || beta.dim(0) != x.dim(-1))
    throw ShapeError("layer_norm: shape mismatch " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()) +
                     " and beta " + shape_str(beta.shape()));
  const i64 n = x.dim(-1);
  const i64 rows = x.numel() / n;
  Buffer out(x.dtype(), x.numel());
  auto xhat = std::make_shared<Buffer>(x.dtype(), x.numel());
  auto rstd = std::make_shared<Buffer>(x.dtype(), rows);
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto gm = gamma.data<T>(), bt = beta.data<T>();
    auto dst = out.span<T>();
    auto xh = xhat->span<T>();
    auto rs = rstd->span<T>();
    for (i64 r = 0; r < rows; ++r) {
      const T* row = src.data() + r * n;
      T mu = 0;
      for (i64 j = 0; j < n; ++j) mu += row[j];
      mu /= static_cast<T>(n);
      T var = 0;
      for (i64 j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= static_cast<T>(n);
      const T inv = static_cast<T>(1) / std::sqrt(var + static_cast<T>(eps));
      rs[r] = inv;
      for (i64 j = 0; j < n; ++j) {
        const T h = (row[j] - mu) * inv;
        xh[r * n + j] = h;
        dst[r * n + j] = h * gm[j] + bt[j];
      }
    }
  });
  add_flops(8 * x.numel());
  return Tensor::make_result(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [gamma, xhat, rstd, n, rows](const Buffer& g, std::span<Buffer*> gin) {
        dispatch(g.dtype(), [&]<class T>() {
          auto gs = g.span<T>();
          auto xh = xhat->span<T>();
          auto rs = rstd->span<T>();
          auto gm = gamma.data<T>();
          if (gin[1]) {
            auto dg = gin[1]->span<T>();
            for (i64 r = 0; r < rows; ++r)
              for (i64 j = 0; j < n; ++j) dg[j] += gs[r * n + j] * xh[r * n + j];
          }
          if (gin[2]) {
            auto db = gin[2]->span<T>();
            for (i64 r = 0; r < rows; ++r)
              for (i64 j = 0; j < n; ++j) db[j] += gs[r * n + j];
          }
          if (gin[0]) {
            auto dx = gin[0]->span<T>();
            for (i64 r = 0; r < rows; ++r) {
              T m1 = 0, m2 = 0;
              for (i64 j = 0; j < n; ++j) {
                const T gh = gs[r * n + j] * gm[j];
                m1 += gh;
                m2 += gh * xh[r * n + j];
              }
              m1 /= static_cast<T>(n);
              m2 /= static_cast<T>(n);
              for (i64 j = 0; j < n; ++j) {
                const T gh = gs[r * n + j] * gm[j];
                dx[r * n + j] += rs[r] * (gh - m1 - xh[r * n + j] * m2);
              }
            }
          }
        });
      });
}

// ------------------------------------------------------------ conv / pool

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  if (x.rank() != 4 || weight.rank() != 4 || x.dim(3) != weight.dim(2))
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(3)))
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  const i64 B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const i64 kh = weight.dim(0), kw = weight.dim(1), O = weight.dim(3);
  const i64 Ho = (H + 2 * padding - kh) / stride + 1;
  const i64 Wo = (W + 2 * padding - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: kernel larger than input " + shape_str(x.shape()));
  const i64 rows = B * Ho * Wo;
  const i64 cols_w = kh * kw * C;

  auto cols = std::make_shared<Buffer>(x.dtype(), rows * cols_w);
  Buffer out(x.dtype(), rows * O);
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto cl = cols->span<T>();
    for (i64 b = 0; b < B; ++b)
      for (i64 oy = 0; oy < Ho; ++oy)
        for (i64 ox = 0; ox < Wo; ++ox) {
          T* row = cl.data() + ((b * Ho + oy) * Wo + ox) * cols_w;
          for (i64 ky = 0; ky < kh; ++ky) {
            const i64 iy = oy * stride + ky - padding;
            for (i64 kx = 0; kx < kw; ++kx) {
              const i64 ix = ox * stride + kx - padding;
              T* dst = row + (ky * kw + kx) * C;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              std::copy_n(src.data() + ((b * H + iy) * W + ix) * C, C, dst);
            }
          }
        }
    T* o = out.span<T>().data();
    gemm_acc<T>(cl.data(), false, weight.data<T>().data(), false, o, rows, O, cols_w);
    if (bias.defined()) {
      auto bs = bias.data<T>();
      for (i64 r = 0; r < rows; ++r)
        for (i64 j = 0; j < O; ++j) o[r * O + j] += bs[j];
    }
  });
  add_flops(static_cast<std::uint64_t>(2 * rows * O * cols_w));

  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor::make_result(
      "conv2d", {B, Ho, Wo, O}, std::move(out), inputs,
      [weight, cols, B, H, W, C, kh, kw, O, Ho, Wo, rows, cols_w, stride, padding](const Buffer& g, std::span<Buffer*> gin) {
        dispatch(g.dtype(), [&]<class T>() {
          const T* G = g.span<T>().data();
          const T* cl = cols->span<T>().data();
          if (gin[1]) gemm_acc<T>(cl, true, G, false, gin[1]->span<T>().data(), cols_w, O, rows);
          if (gin.size() > 2 && gin[2]) {
            auto db = gin[2]->span<T>();
            for (i64 r = 0; r < rows; ++r)
              for (i64 j = 0; j < O; ++j) db[j] += G[r * O + j];
          }
          if (gin[0]) {
            std::vector<T> dcols(static_cast<std::size_t>(rows * cols_w), T(0));
            gemm_acc<T>(G, false, weight.data<T>().data(), true, dcols.data(), rows, cols_w, O);
            auto dx = gin[0]->span<T>();
            for (i64 b = 0; b < B; ++b)
              for (i64 oy = 0; oy < Ho; ++oy)
                for (i64 ox = 0; ox < Wo; ++ox) {
                  const T* row = dcols.data() + ((b * Ho + oy) * Wo + ox) * cols_w;
                  for (i64 ky = 0; ky < kh; ++ky) {
                    const i64 iy = oy * stride + ky - padding;
                    if (iy < 0 || iy >= H) continue;
                    for (i64 kx = 0; kx < kw; ++kx) {
                      const i64 ix = ox * stride + kx - padding;
                      if (ix < 0 || ix >= W) continue;
                      const T* s = row + (ky * kw + kx) * C;
                      T* d = dx.data() + ((b * H + iy) * W + ix) * C;
                      for (i64 c = 0; c < C; ++c) d[c] += s[c];
                    }
                  }
                }
          }
        });
        add_flops(static_cast<std::uint64_t>(4 * rows * O * cols_w));
      });
}

Tensor avg_pool1d(const Tensor& x, int kernel, int axis) {
  const int a = normalize_axis(axis, x.rank(), "avg_pool1d");
  if (kernel < 1) throw ShapeError("avg_pool1d: kernel must be positive");
  const AxisView v = axis_view(x.shape(), a);
  if (v.n % kernel != 0)
    throw ShapeError("avg_pool1d: length " + std::to_string(v.n) + " is not divisible by kernel " + std::to_string(kernel));
  const i64 m = v.n / kernel;
  Shape out_shape = x.shape();
  out_shape[a] = m;
  Buffer out(x.dtype(), shape_numel(out_shape));
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.span<T>();
    const T inv = static_cast<T>(1) / static_cast<T>(kernel);
    for (i64 o = 0; o < v.outer; ++o)
      for (i64 j = 0; j < m; ++j)
        for (i64 i = 0; i < v.inner; ++i) {
          T acc = 0;
          for (int k = 0; k < kernel; ++k) acc += src[(o * v.n + j * kernel + k) * v.inner + i];
          dst[(o * m + j) * v.inner + i] = acc * inv;
        }
  });
  add_flops(x.numel());
  return Tensor::make_result("avg_pool1d", out_shape, std::move(out), {x}, [v, m, kernel](const Buffer& g, std::span<Buffer*> gin) {
    if (!gin[0]) return;
    dispatch(g.dtype(), [&]<class T>() {
      auto gs = g.span<T>();
      auto d = gin[0]->span<T>();
      const T inv = static_cast<T>(1) / static_cast<T>(kernel);
      for (i64 o = 0; o < v.outer; ++o)
        for (i64 j = 0; j < m; ++j)
          for (i64 i = 0; i < v.inner; ++i) {
            const T gv = gs[(o * m + j) * v.inner + i] * inv;
            for (int k = 0; k < kernel; ++k) d[(o * v.n + j * kernel + k) * v.inner + i] += gv;
          }
    });
  });
}

Tensor straight_through(const Tensor& hard, const Tensor& soft) {
  check_same(hard, soft, "straight_through");
  return Tensor::make_result("straight_through", hard.shape(), hard.buffer(), {hard, soft},
                             [](const Buffer& g, std::span<Buffer*> gin) {
                               if (gin[1]) gin[1]->add(g);
                             });
}

}  // namespace uetrack
