#pragma once

// Bi-level architecture search: SGD on network weights, Adam on the
// architecture logits, and the one-step unrolled alpha gradient with a
// finite-difference Hessian-vector product.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "sase/autograd.hpp"
#include "sase/nn.hpp"
#include "sase/supernet.hpp"

namespace sase {

struct SearchHyper {
  int epochs = 50;
  int batch = 128;
  double lr_max = 0.025;
  double lr_min = 0.0001;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double alpha_lr = 3e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double alpha_init_std = 0.001;
  double eps_scale = 0.01;
  int order = 2;

  void validate() const {
    if (epochs < 0) fail(ErrorKind::Value, "epochs must be non-negative");
    if (batch < 1) fail(ErrorKind::Value, "batch must be positive");
    if (!(lr_max > 0) || !(lr_min > 0) || !(eps_scale > 0) || !(alpha_init_std > 0))
      fail(ErrorKind::Value, "learning rates, alpha init scale and eps scale must be positive");
    if (!(alpha_lr >= 0)) fail(ErrorKind::Value, "alpha learning rate must be non-negative");
    if (momentum < 0 || momentum >= 1) fail(ErrorKind::Value, "momentum must lie in [0, 1)");
    if (weight_decay < 0) fail(ErrorKind::Value, "weight decay must be non-negative");
    if (order != 1 && order != 2) fail(ErrorKind::Value, "order must be 1 or 2");
  }
};

/// Cosine annealing from lr_max at epoch 0 to lr_min at epoch epochs-1.
inline double cosine_lr(int epoch, int epochs, double lr_max, double lr_min) {
  if (epochs <= 1) return lr_max;
  const double t = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

template <class T>
std::vector<T> softmax_row(const Tensor<T>& alpha, int row) {
  const std::size_t cols = alpha.size() / static_cast<std::size_t>(alpha.shape().n);
  std::vector<T> out(cols);
  T peak = alpha[row * cols];
  for (std::size_t j = 0; j < cols; ++j) peak = std::max(peak, alpha[row * cols + j]);
  T total = 0;
  for (std::size_t j = 0; j < cols; ++j) total += out[j] = std::exp(alpha[row * cols + j] - peak);
  for (auto& v : out) v /= total;
  return out;
}

template <class T>
T entropy(const std::vector<T>& p) {
  T h = 0;
  for (T v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

template <class T>
T mean_row_entropy(const Tensor<T>& alpha) {
  T total = 0;
  for (int r = 0; r < alpha.shape().n; ++r) total += entropy(softmax_row(alpha, r));
  return total / static_cast<T>(alpha.shape().n);
}

/// Momentum SGD with coupled weight decay:
/// g = grad + wd w; buf = mu buf + g; w -= lr buf.
template <class T>
class SgdMomentum {
 public:
  SgdMomentum(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const std::vector<Parameter<T>*>& params, double lr) {
    ensure_state(params);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto* p = params[i];
      if (!p->has_grad()) fail(ErrorKind::Value, "missing gradient for " + p->name());
      auto w = p->values();
      auto g = p->grad();
      auto& buf = buffers_[i].storage();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const T d = g[j] + static_cast<T>(weight_decay_) * w[j];
        buf[j] = static_cast<T>(momentum_) * buf[j] + d;
        w[j] -= static_cast<T>(lr) * buf[j];
      }
    }
  }

  std::vector<Tensor<T>>& buffers() { return buffers_; }
  const std::vector<Tensor<T>>& buffers() const { return buffers_; }
  void ensure_state(const std::vector<Parameter<T>*>& params) {
    if (buffers_.size() == params.size()) return;
    buffers_.clear();
    for (auto* p : params) buffers_.emplace_back(p->shape());
  }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Tensor<T>> buffers_;
};

/// Adam with bias correction and no weight decay.
template <class T>
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Parameter<T>*>& params) { step(params, lr_); }
  void step(const std::vector<Parameter<T>*>& params, double lr) {
    ensure_state(params);
    ++steps_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto* p = params[i];
      if (!p->has_grad()) fail(ErrorKind::Value, "missing gradient for " + p->name());
      auto w = p->values();
      auto g = p->grad();
      auto& m = m_[i].storage();
      auto& v = v_[i].storage();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = static_cast<T>(beta1_) * m[j] + static_cast<T>(1 - beta1_) * g[j];
        v[j] = static_cast<T>(beta2_) * v[j] + static_cast<T>(1 - beta2_) * g[j] * g[j];
        const T mhat = m[j] / static_cast<T>(c1);
        const T vhat = v[j] / static_cast<T>(c2);
        w[j] -= static_cast<T>(lr) * mhat / (std::sqrt(vhat) + static_cast<T>(eps_));
      }
    }
  }

  double lr() const { return lr_; }
  std::uint64_t steps() const { return steps_; }
  void set_steps(std::uint64_t s) { steps_ = s; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  void ensure_state(const std::vector<Parameter<T>*>& params) {
    if (m_.size() == params.size()) return;
    m_.clear();
    v_.clear();
    for (auto* p : params) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t steps_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

template <class T>
using LossFn = std::function<Var<T>()>;

/// The two parameter groups of a search, plus any state the loss mutates as
/// a side effect (normalization running statistics).
template <class T>
struct BilevelProblem {
  std::vector<Parameter<T>*> weights;
  std::vector<Parameter<T>*> alphas;
  std::vector<Tensor<T>*> buffers;

  std::vector<Parameter<T>*> all() const {
    auto out = weights;
    out.insert(out.end(), alphas.begin(), alphas.end());
    return out;
  }
};

namespace detail {

template <class T>
std::vector<Tensor<T>> snapshot(const std::vector<Parameter<T>*>& params) {
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (auto* p : params) out.push_back(p->tensor());
  return out;
}

template <class T>
void restore(const std::vector<Parameter<T>*>& params, const std::vector<Tensor<T>>& saved) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->assign(saved[i]);
}

template <class T>
std::vector<Tensor<T>> grads_of(const std::vector<Parameter<T>*>& params) {
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (auto* p : params) {
    auto g = p->grad();
    out.emplace_back(p->shape(), std::vector<T>(g.begin(), g.end()));
  }
  return out;
}

template <class T>
T norm(const std::vector<Tensor<T>>& v) {
  T total = 0;
  for (const auto& t : v)
    for (T x : t.storage()) total += x * x;
  return std::sqrt(total);
}

}  // namespace detail

/// Zeroes every gradient of the problem, evaluates `loss` and backpropagates.
/// Returns the loss value.
template <class T>
T evaluate_and_backprop(const BilevelProblem<T>& problem, const LossFn<T>& loss) {
  zero_grads(problem.all());
  auto l = loss();
  const T value = l.value().item();
  if (!std::isfinite(value)) fail(ErrorKind::Numeric, "non-finite loss");
  if (l.requires_grad()) backprop(l);
  return value;
}

/// omega - eta * grad_omega Ltrain. Weights are left untouched.
template <class T>
std::vector<Tensor<T>> virtual_step(const BilevelProblem<T>& problem, const LossFn<T>& train_loss, T eta) {
  evaluate_and_backprop(problem, train_loss);
  auto out = detail::snapshot(problem.weights);
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto g = problem.weights[i]->grad();
    auto& w = out[i].storage();
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= eta * g[j];
  }
  return out;
}

/// Central difference of grad_alpha Ltrain along v:
/// (grad_alpha Ltrain(w + eps v) - grad_alpha Ltrain(w - eps v)) / (2 eps),
/// eps = eps_scale / |v|. Weights are restored bit-exactly.
template <class T>
std::vector<Tensor<T>> hvp_finite_diff(const BilevelProblem<T>& problem, const LossFn<T>& train_loss,
                                       const std::vector<Tensor<T>>& v, T eps_scale) {
  std::vector<Tensor<T>> out;
  for (auto* a : problem.alphas) out.emplace_back(a->shape());
  const T vnorm = detail::norm(v);
  if (vnorm < T(1e-12)) return out;
  const T eps = eps_scale / vnorm;
  const auto saved = detail::snapshot(problem.weights);
  auto shifted = [&](T sign) {
    for (std::size_t i = 0; i < saved.size(); ++i) {
      Tensor<T> w = saved[i];
      for (std::size_t j = 0; j < w.size(); ++j) w[j] += sign * eps * v[i][j];
      problem.weights[i]->assign(w);
    }
    evaluate_and_backprop(problem, train_loss);
    return detail::grads_of(problem.alphas);
  };
  const auto plus = shifted(T(1));
  const auto minus = shifted(T(-1));
  detail::restore(problem.weights, saved);
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t j = 0; j < out[i].size(); ++j) out[i][j] = (plus[i][j] - minus[i][j]) / (T(2) * eps);
  return out;
}

template <class T>
struct AlphaGradient {
  std::vector<Tensor<T>> grads;
  T val_loss = 0;
};

/// grad_alpha Lval(w~, alpha) - eta * HVP, w~ the virtual step. Weights and
/// buffers come back bit-identical.
template <class T>
AlphaGradient<T> alpha_gradient_second_order(const BilevelProblem<T>& problem, const LossFn<T>& train_loss,
                                             const LossFn<T>& val_loss, T eta, T eps_scale) {
  const auto saved = detail::snapshot(problem.weights);
  std::vector<Tensor<T>> saved_buffers;
  for (auto* b : problem.buffers) saved_buffers.push_back(*b);
  auto put_back = [&] {
    detail::restore(problem.weights, saved);
    for (std::size_t i = 0; i < saved_buffers.size(); ++i) *problem.buffers[i] = saved_buffers[i];
  };

  AlphaGradient<T> result;
  try {
    if (eta != T(0)) detail::restore(problem.weights, virtual_step(problem, train_loss, eta));
    result.val_loss = evaluate_and_backprop(problem, val_loss);
    result.grads = detail::grads_of(problem.alphas);
    if (eta != T(0)) {
      const auto v = detail::grads_of(problem.weights);
      detail::restore(problem.weights, saved);
      const auto hvp = hvp_finite_diff(problem, train_loss, v, eps_scale);
      for (std::size_t i = 0; i < hvp.size(); ++i)
        for (std::size_t j = 0; j < hvp[i].size(); ++j) result.grads[i][j] -= eta * hvp[i][j];
    }
  } catch (...) {
    put_back();
    throw;
  }
  put_back();
  for (const auto& g : result.grads)
    if (!g.all_finite()) fail(ErrorKind::Numeric, "non-finite alpha gradient");
  return result;
}

/// First-order variant: grad_alpha Lval at the current weights.
template <class T>
AlphaGradient<T> alpha_gradient_first_order(const BilevelProblem<T>& problem, const LossFn<T>& val_loss) {
  AlphaGradient<T> result;
  result.val_loss = evaluate_and_backprop(problem, val_loss);
  result.grads = detail::grads_of(problem.alphas);
  return result;
}

struct IterationLosses {
  double train_loss = 0;
  double val_loss = 0;
};

/// Optimizer state of a search: weights first, then architecture logits.
template <class T>
class BilevelOptimizer {
 public:
  BilevelOptimizer(BilevelProblem<T> problem, const SearchHyper& hyper)
      : problem_(std::move(problem)),
        hyper_(hyper),
        weight_opt_(hyper.momentum, hyper.weight_decay),
        alpha_opt_(hyper.alpha_lr, hyper.adam_beta1, hyper.adam_beta2, hyper.adam_eps) {
    hyper_.validate();
    weight_opt_.ensure_state(problem_.weights);
    alpha_opt_.ensure_state(problem_.alphas);
  }

  IterationLosses step(const LossFn<T>& train_loss, const LossFn<T>& val_loss, double lr) {
    IterationLosses out;
    out.train_loss = static_cast<double>(evaluate_and_backprop(problem_, train_loss));
    weight_opt_.step(problem_.weights, lr);

    auto ag = hyper_.order == 2 ? alpha_gradient_second_order(problem_, train_loss, val_loss, static_cast<T>(lr),
                                                             static_cast<T>(hyper_.eps_scale))
                                : alpha_gradient_first_order(problem_, val_loss);
    out.val_loss = static_cast<double>(ag.val_loss);
    zero_grads(problem_.alphas);
    for (std::size_t i = 0; i < problem_.alphas.size(); ++i) {
      auto g = problem_.alphas[i]->grad();
      std::copy(ag.grads[i].storage().begin(), ag.grads[i].storage().end(), g.begin());
    }
    alpha_opt_.step(problem_.alphas);
    ++iteration_;
    return out;
  }

  const BilevelProblem<T>& problem() const { return problem_; }
  const SearchHyper& hyper() const { return hyper_; }
  SgdMomentum<T>& weight_optimizer() { return weight_opt_; }
  Adam<T>& alpha_optimizer() { return alpha_opt_; }
  std::uint64_t iteration() const { return iteration_; }
  void set_iteration(std::uint64_t i) { iteration_ = i; }

 private:
  BilevelProblem<T> problem_;
  SearchHyper hyper_;
  SgdMomentum<T> weight_opt_;
  Adam<T> alpha_opt_;
  std::uint64_t iteration_ = 0;
};

}  // namespace sase
