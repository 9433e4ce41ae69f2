#pragma once

// Finite-difference verification of every candidate operation. Analytic
// gradients are taken in double; the central differences are evaluated on an
// identically parameterized long double instance.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sase/attention_ops.hpp"
#include "sase/gradcheck.hpp"
#include "sase/supernet.hpp"

namespace sase {

/// Magnitudes uniform in [lo, hi] with a random sign.
inline Tensor<double> signed_uniform(Shape s, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> mag(lo, hi);
  std::bernoulli_distribution sign(0.5);
  Tensor<double> t(s);
  for (auto& v : t.storage()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

struct OpGradientReport {
  OpFamily family;
  int kind;
  double max_rel_error = 0.0;
  int worst_trial = 0;
  GradCheckResult worst;
};

/// Gradient of the projected output sum_i r_i y_i w.r.t. the input and every
/// parameter, over `trials` random draws of inputs, parameters and r.
/// Normalization layers run in inference mode with randomized running
/// statistics.
inline OpGradientReport check_op_gradient(OpFamily family, int kind, int trials, std::uint64_t seed,
                                          const Geometry& g = {8, 4, 4}, int batch = 2) {
  using R = long double;
  OpGradientReport report{family, kind};
  for (int trial = 0; trial < trials; ++trial) {
    Rng init(seed + 7919u * static_cast<std::uint64_t>(trial));
    Rng scratch(0);
    auto op = make_op<double>(family, kind, g, scratch);
    auto ref = make_op<R>(family, kind, g, scratch);
    std::vector<Var<double>> leaves;
    std::vector<Var<R>> ref_leaves;
    auto params = op->named_parameters();
    auto ref_params = ref->named_parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto t = signed_uniform(params[i].second->shape(), init, 0.2, 1.0);
      params[i].second->assign(t);
      ref_params[i].second->assign(t.cast<R>());
      leaves.push_back(params[i].second->var());
      ref_leaves.push_back(ref_params[i].second->var());
    }
    auto buffers = op->named_buffers();
    auto ref_buffers = ref->named_buffers();
    for (std::size_t i = 0; i < buffers.size(); ++i) {
      const bool is_var = buffers[i].first.ends_with("running_var");
      std::uniform_real_distribution<double> d(is_var ? 0.5 : -0.5, is_var ? 1.5 : 0.5);
      for (std::size_t j = 0; j < buffers[i].second->size(); ++j) {
        const double v = d(init);
        (*buffers[i].second)[j] = v;
        (*ref_buffers[i].second)[j] = static_cast<R>(v);
      }
    }
    auto x = signed_uniform(op_input_shape(family, batch, g), init, 0.5, 1.5);
    Var<double> xv = Var<double>::leaf(x);
    Var<R> xr = Var<R>::leaf(x.cast<R>());
    leaves.push_back(xv);
    ref_leaves.push_back(xr);
    std::uniform_real_distribution<double> rd(-1.0, 1.0);
    Tensor<double> r(op_output_shape(family, batch, g));
    for (auto& v : r.storage()) v = rd(init);
    const auto rr = r.cast<R>();

    auto res = grad_check_against<double, R>(
        [&] { return sum_all(mul(op->forward(xv, false), Var<double>::constant(r))); }, leaves,
        [&] { return sum_all(mul(ref->forward(xr, false), Var<R>::constant(rr))); }, ref_leaves, Stencil::KinkAware);
    if (res.max_rel_error > report.max_rel_error || trial == 0) {
      report.max_rel_error = std::max(report.max_rel_error, res.max_rel_error);
      report.worst_trial = trial;
      report.worst = res;
    }
  }
  return report;
}

namespace detail {

template <class U>
void randomize_module(Module<U>& m, Rng& init, std::vector<Var<U>>& leaves) {
  for (auto& [name, p] : m.named_parameters()) {
    p->assign(signed_uniform(p->shape(), init, 0.2, 1.0).template cast<U>());
    leaves.push_back(p->var());
  }
  for (auto& [name, b] : m.named_buffers()) {
    const bool is_var = name.ends_with("running_var");
    std::uniform_real_distribution<double> d(is_var ? 0.5 : -0.5, is_var ? 1.5 : 0.5);
    for (std::size_t j = 0; j < b->size(); ++j) (*b)[j] = static_cast<U>(d(init));
  }
}

}  // namespace detail

/// Same protocol as check_op_gradient for any module. `make(std::type_identity<U>{}, rng)`
/// builds the module at precision U; `forward(module, x, alpha)` evaluates it.
/// When `alpha_shape` is given, a Gaussian alpha leaf joins the checked inputs.
template <class Make, class Forward>
GradCheckResult check_module_gradient(Make make, Forward forward, Shape in, Shape out, std::optional<Shape> alpha,
                                      int trials, std::uint64_t seed, double tolerance, int* worst_trial = nullptr) {
  using R = long double;
  GradCheckResult worst;
  for (int trial = 0; trial < trials; ++trial) {
    Rng scratch(0);
    auto m = make(std::type_identity<double>{}, scratch);
    auto mr = make(std::type_identity<R>{}, scratch);
    std::vector<Var<double>> leaves;
    std::vector<Var<R>> ref_leaves;
    {
      Rng init(seed + 7919u * static_cast<std::uint64_t>(trial));
      detail::randomize_module(*m, init, leaves);
    }
    {
      Rng init(seed + 7919u * static_cast<std::uint64_t>(trial));
      detail::randomize_module(*mr, init, ref_leaves);
    }
    Rng init(seed + 7919u * static_cast<std::uint64_t>(trial) + 1);
    auto x = signed_uniform(in, init, 0.5, 1.5);
    std::optional<Var<double>> a;
    std::optional<Var<R>> ar;
    if (alpha) {
      std::normal_distribution<double> nd(0.0, 1.0);
      Tensor<double> at(*alpha);
      for (auto& v : at.storage()) v = nd(init);
      a = Var<double>::leaf(at);
      ar = Var<R>::leaf(at.cast<R>());
      leaves.push_back(*a);
      ref_leaves.push_back(*ar);
    }
    Var<double> xv = Var<double>::leaf(x);
    Var<R> xr = Var<R>::leaf(x.cast<R>());
    leaves.push_back(xv);
    ref_leaves.push_back(xr);
    std::uniform_real_distribution<double> rd(-1.0, 1.0);
    Tensor<double> r(out);
    for (auto& v : r.storage()) v = rd(init);
    const auto rr = r.cast<R>();
    auto res = grad_check_against<double, R>(
        [&] { return sum_all(mul(forward(*m, xv, a), Var<double>::constant(r))); }, leaves,
        [&] { return sum_all(mul(forward(*mr, xr, ar), Var<R>::constant(rr))); }, ref_leaves, Stencil::KinkAware,
        tolerance);
    if (trial == 0 || res.max_rel_error > worst.max_rel_error) {
      worst = res;
      if (worst_trial) *worst_trial = trial;
    }
  }
  return worst;
}

/// Mixed edge of the given family over (2,8,4,4)-derived shapes.
inline GradCheckResult check_mixed_edge_gradient(EdgeId edge, int trials, std::uint64_t seed,
                                                 const Geometry& g = {8, 4, 4}, int batch = 2) {
  const OpFamily f = kEdgeFamilies[static_cast<std::size_t>(edge)];
  return check_module_gradient(
      [&](auto tag, Rng& rng) {
        using U = typename decltype(tag)::type;
        return std::make_unique<Edge<U>>(edge, g, rng);
      },
      [](auto& m, const auto& x, const auto& a) { return m.forward(x, false, a); }, op_input_shape(f, batch, g),
      op_output_shape(f, batch, g), Shape{1, kOpsPerSet, 1, 1}, trials, seed, 1e-5);
}

/// Full search block (all six mixed edges) w.r.t. x, every weight and alpha.
inline GradCheckResult check_block_gradient(int trials, std::uint64_t seed, const Geometry& g = {8, 4, 4},
                                            int batch = 2, int* worst_trial = nullptr) {
  const Shape in{batch, g.c, g.h, g.w};
  return check_module_gradient(
      [&](auto tag, Rng& rng) {
        using U = typename decltype(tag)::type;
        return std::make_unique<SaseBlock<U>>(g, rng);
      },
      [](auto& m, const auto& x, const auto& a) { return m.map(x, false, a); }, in, in, alpha_shape(), trials, seed, 1e-4, worst_trial);
}

inline std::vector<OpGradientReport> run_gradient_suite(int trials, std::uint64_t seed) {
  std::vector<OpGradientReport> out;
  for (auto f : kOpFamilies)
    for (int k = 0; k < kOpsPerSet; ++k) out.push_back(check_op_gradient(f, k, trials, seed));
  return out;
}

}  // namespace sase
