#include "uetrack/gradcheck.hpp"

#include "uetrack/nn.hpp"
#include "uetrack/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace uetrack {

namespace {

std::vector<std::vector<double>> analytic_grads(const LossFn& f, const std::vector<Tensor>& wrt) {
  std::vector<Tensor> leaves = wrt;
  for (auto& t : leaves) t.clear_grad();
  f().backward();
  std::vector<std::vector<double>> out;
  for (auto& t : leaves) {
    out.push_back(t.has_grad() ? t.grad_values() : std::vector<double>(static_cast<std::size_t>(t.numel()), 0.0));
    t.clear_grad();
  }
  return out;
}

std::vector<std::vector<double>> numeric_grads(const LossFn& f, const std::vector<Tensor>& wrt, double eps) {
  NoGradGuard no_grad;
  std::vector<Tensor> leaves = wrt;
  std::vector<std::vector<double>> out;
  for (auto& t : leaves) {
    Buffer& buf = t.mutable_buffer();
    std::vector<double> g(buf.size());
    for (std::size_t i = 0; i < buf.size(); ++i) {
      const double orig = buf.get(i);
      auto at = [&](double d) {
        buf.set(i, orig + d);
        return f().item();
      };
      // Fourth-order central stencil.
      const double d1 = at(eps) - at(-eps), d2 = at(2 * eps) - at(-2 * eps);
      buf.set(i, orig);
      g[i] = (8 * d1 - d2) / (12 * eps);
    }
    out.push_back(std::move(g));
  }
  return out;
}

double compare(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& n) {
  // Coordinates far below the largest gradient are judged against that scale.
  double scale = 0;
  for (const auto& g : n)
    for (double v : g) scale = std::max(scale, std::abs(v));
  const double floor = std::max(1e-8, 1e-4 * scale);
  double worst = 0;
  for (std::size_t k = 0; k < a.size(); ++k)
    for (std::size_t i = 0; i < a[k].size(); ++i) {
      const double denom = std::max({std::abs(a[k][i]), std::abs(n[k][i]), floor});
      worst = std::max(worst, std::abs(a[k][i] - n[k][i]) / denom);
    }
  return worst;
}

}  // namespace

double finite_diff_check(const LossFn& f, const std::vector<Tensor>& wrt, double eps) {
  if (eps <= 0) throw std::invalid_argument("finite_diff_check: eps must be positive");
  for (const auto& t : wrt)
    if (!t.is_leaf() || !t.requires_grad()) throw std::invalid_argument("finite_diff_check: inputs must be grad leaves");
  return compare(analytic_grads(f, wrt), numeric_grads(f, wrt, eps));
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor leaf = x.is_leaf() ? x : x.detach();
  if (!leaf.requires_grad()) leaf.set_requires_grad(true);
  return finite_diff_check([&] { return f(leaf); }, std::vector<Tensor>{leaf}, eps);
}

double finite_diff_check_ref(const LossFn& f, const std::vector<Tensor>& wrt, const LossFn& f_ref,
                             const std::vector<Tensor>& wrt_ref, double eps) {
  if (eps <= 0) throw std::invalid_argument("finite_diff_check_ref: eps must be positive");
  if (wrt.size() != wrt_ref.size()) throw std::invalid_argument("finite_diff_check_ref: input lists differ");
  for (std::size_t i = 0; i < wrt.size(); ++i)
    if (wrt[i].shape() != wrt_ref[i].shape())
      throw ShapeError("finite_diff_check_ref: " + shape_str(wrt[i].shape()) + " vs " + shape_str(wrt_ref[i].shape()));
  return compare(analytic_grads(f, wrt), numeric_grads(f_ref, wrt_ref, eps));
}

double check_problem(const GradProblemFactory& factory, int bits) {
  if (bits == 64) {
    GradProblem p = factory(Dtype::f64);
    return finite_diff_check(p.loss, p.wrt, kCheckEps);
  }
  if (bits != 32) throw std::invalid_argument("check_problem: bits must be 32 or 64");
  GradProblem p = factory(Dtype::f32);
  GradProblem ref = factory(Dtype::f64);
  return finite_diff_check_ref(p.loss, p.wrt, ref.loss, ref.wrt, kCheckEps);
}

GradProblemFactory make_problem(const GradCase& c, std::uint64_t seed) {
  return [c, seed](Dtype dtype) {
    Rng rng(seed);
    std::vector<Tensor> inputs;
    for (const auto& s : c.shapes) {
      // Drawn in f32 precision so both dtypes see identical values.
      Tensor t = rand_uniform(s, rng, c.lo, c.hi, Dtype::f32).cast(dtype);
      t.set_requires_grad(true);
      inputs.push_back(t);
    }
    Tensor probe;
    {
      NoGradGuard ng;
      probe = c.f(inputs);
    }
    Tensor w = randn(probe.shape(), rng, 1.0, Dtype::f32).cast(dtype);
    auto f = c.f;
    return GradProblem{[f, inputs, w] { return sum(mul(f(inputs), w)); }, inputs};
  };
}

}  // namespace uetrack
