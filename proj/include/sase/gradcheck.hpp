#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "sase/autograd.hpp"

namespace sase {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_leaf = 0;   // which leaf holds the worst coordinate
  std::size_t worst_index = 0;  // flat index inside that leaf
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t one_sided = 0;  // coordinates whose central stencil straddled a kink
};

/// Kink handling for the numeric side.
enum class Stencil {
  Central,
  /// Central, except where it disagrees with the analytic value and exactly
  /// one side of x shows a slope jump within 2h: the second-order one-sided
  /// difference from the smooth side is used instead.
  KinkAware,
};

/// Compares backprop gradients of the scalar `f()` against central
/// differences of `ref()` over every coordinate of `ref_leaves`, with step
/// h_i = max(1e-5, 1e-5 |x_i|) and relative error
/// |a - n| / max(|a|, |n|, 1e-8). `ref` evaluates the same function at
/// precision R, which lets a wider type supply the numeric side.
template <class T, class R>
GradCheckResult grad_check_against(const std::function<Var<T>()>& f, const std::vector<Var<T>>& leaves,
                                   const std::function<Var<R>()>& ref, const std::vector<Var<R>>& ref_leaves,
                                   Stencil stencil = Stencil::Central, double tolerance = 1e-5) {
  if (leaves.size() != ref_leaves.size()) fail(ErrorKind::Value, "grad_check: leaf lists differ in length");
  for (const auto& leaf : leaves)
    if (!leaf.requires_grad() || !leaf.node()->leaf) fail(ErrorKind::Value, "grad_check: inputs must be leaves");
  for (std::size_t l = 0; l < leaves.size(); ++l)
    if (leaves[l].shape() != ref_leaves[l].shape()) fail(ErrorKind::Shape, "grad_check: reference leaf shape differs");

  std::vector<std::vector<T>> analytic;
  {
    for (const auto& leaf : leaves) leaf.node()->grad.assign(leaf.value().size(), T(0));
    Var<T> loss = f();
    if (loss.value().size() != 1) fail(ErrorKind::Shape, "grad_check: function is not scalar-valued");
    if (loss.requires_grad()) backprop(loss);
    for (const auto& leaf : leaves) analytic.push_back(leaf.node()->grad);
  }

  auto eval = [&] {
    NoGradGuard guard;
    Var<R> out = ref();
    if (out.value().size() != 1) fail(ErrorKind::Shape, "grad_check: function is not scalar-valued");
    return out.value()[0];
  };

  GradCheckResult res;
  const R f0 = stencil == Stencil::KinkAware ? eval() : R(0);
  for (std::size_t l = 0; l < ref_leaves.size(); ++l) {
    auto& data = ref_leaves[l].node()->value.storage();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const R x0 = data[i];
      const R h = std::max(R(1e-5), R(1e-5) * std::abs(x0));
      const R xp = x0 + h, xm = x0 - h;
      data[i] = xp;
      const R fp = eval();
      data[i] = xm;
      const R fm = eval();
      data[i] = x0;
      double num = static_cast<double>((fp - fm) / (xp - xm));
      const double an = static_cast<double>(analytic[l][i]);
      auto rel = [&](double n) { return std::abs(an - n) / std::max({std::abs(an), std::abs(n), 1e-8}); };
      if (stencil == Stencil::KinkAware && rel(num) > tolerance) {
        data[i] = x0 + 2 * h;
        const R fp2 = eval();
        data[i] = x0 - 2 * h;
        const R fm2 = eval();
        data[i] = x0;
        const R left_jump = std::abs((f0 - fm) - (fm - fm2));
        const R right_jump = std::abs((fp2 - fp) - (fp - f0));
        if (right_jump > 10 * left_jump) {
          num = static_cast<double>((3 * f0 - 4 * fm + fm2) / (2 * h));
          ++res.one_sided;
        } else if (left_jump > 10 * right_jump) {
          num = static_cast<double>((-3 * f0 + 4 * fp - fp2) / (2 * h));
          ++res.one_sided;
        }
      }
      const double err = rel(num);
      if (err > res.max_rel_error) {
        const auto kinks = res.one_sided;
        res = {err, l, i, an, num, kinks};
      }
    }
  }
  return res;
}

/// Same-precision form: f supplies both sides.
template <class T>
GradCheckResult grad_check(const std::function<Var<T>()>& f, const std::vector<Var<T>>& leaves) {
  return grad_check_against<T, T>(f, leaves, f, leaves);
}

/// Single-input form: checks d f(x) / dx.
template <class T>
GradCheckResult grad_check(const std::function<Var<T>(const Var<T>&)>& f, const Tensor<T>& x) {
  Var<T> leaf = Var<T>::leaf(x);
  return grad_check<T>(std::function<Var<T>()>([&] { return f(leaf); }), std::vector<Var<T>>{leaf});
}

}  // namespace sase
