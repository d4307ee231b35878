#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "uetrack/tensor.hpp"

namespace uetrack {

/// Builds a scalar loss from the current values of some leaf tensors.
using LossFn = std::function<Tensor()>;

/// Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, floor), with a
/// fourth-order central difference and floor = max(1e-8, 1e-4 max |numeric|).
/// The leaves in `wrt` are perturbed in place and restored afterwards.
double finite_diff_check(const LossFn& f, const std::vector<Tensor>& wrt, double eps);

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps);

/// Analytic gradient from (f, wrt) compared with central differences of a
/// second, higher-precision instance (f_ref, wrt_ref) of the same function.
/// Used for 32-bit checks, where 32-bit differencing is dominated by rounding.
double finite_diff_check_ref(const LossFn& f, const std::vector<Tensor>& wrt, const LossFn& f_ref,
                             const std::vector<Tensor>& wrt_ref, double eps);

/// A loss plus the leaves it is differentiated against, built in one dtype.
struct GradProblem {
  LossFn loss;
  std::vector<Tensor> wrt;
};

/// Must build the same function (same seed) for either dtype.
using GradProblemFactory = std::function<GradProblem(Dtype)>;

inline constexpr double kCheckEps = 1e-4;

/// 64 bits: everything in f64. 32 bits: f32 analytic gradient against f64
/// central differences of the same problem.
double check_problem(const GradProblemFactory& factory, int bits);

/// Elementwise-style case: inputs drawn uniformly from [lo, hi], loss is a
/// fixed random weighting of f's output.
struct GradCase {
  std::string name;
  std::vector<Shape> shapes;
  std::function<Tensor(const std::vector<Tensor>&)> f;
  double lo = -1.0;
  double hi = 1.0;
};

GradProblemFactory make_problem(const GradCase& c, std::uint64_t seed);

}  // namespace uetrack
