#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sase/autograd.hpp"
#include "sase/ops.hpp"
#include "sase/tensor.hpp"

namespace sase {

using Rng = std::mt19937_64;

template <class T>
Tensor<T> uniform_tensor(Shape s, T bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
  Tensor<T> t(s);
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return t;
}

template <class T>
Tensor<T> normal_tensor(Shape s, T stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  Tensor<T> t(s);
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return t;
}

/// Owns parameters, buffers and child modules; names compose into dotted paths.
template <class T>
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  std::vector<std::pair<std::string, Parameter<T>*>> named_parameters(const std::string& prefix = "") const {
    std::vector<std::pair<std::string, Parameter<T>*>> out;
    collect_parameters(prefix, out);
    return out;
  }

  std::vector<Parameter<T>*> parameters() const {
    std::vector<Parameter<T>*> out;
    for (auto& [name, p] : named_parameters()) out.push_back(p);
    return out;
  }

  std::vector<Parameter<T>*> parameters(ParamGroup group) const {
    std::vector<Parameter<T>*> out;
    for (auto& [name, p] : named_parameters())
      if (p->group() == group) out.push_back(p);
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_buffers(const std::string& prefix = "") const {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    collect_buffers(prefix, out);
    return out;
  }

  std::size_t parameter_count(std::optional<ParamGroup> group = std::nullopt) const {
    std::size_t total = 0;
    for (auto& [name, p] : named_parameters())
      if (!group || p->group() == *group) total += p->size();
    return total;
  }

 protected:
  Parameter<T>& add_parameter(const std::string& name, Tensor<T> init,
                              ParamGroup group = ParamGroup::NetworkWeight) {
    params_.emplace_back(name, std::make_unique<Parameter<T>>(name, std::move(init), group));
    return *params_.back().second;
  }

  Tensor<T>& add_buffer(const std::string& name, Tensor<T> init) {
    buffers_.emplace_back(name, std::make_unique<Tensor<T>>(std::move(init)));
    return *buffers_.back().second;
  }

  template <class M>
  M& add_child(const std::string& name, std::unique_ptr<M> child) {
    M& ref = *child;
    children_.emplace_back(name, &ref);
    owned_.push_back(std::move(child));
    return ref;
  }

 private:
  static std::string join(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
  }

  void collect_parameters(const std::string& prefix, std::vector<std::pair<std::string, Parameter<T>*>>& out) const {
    for (auto& [name, p] : params_) out.emplace_back(join(prefix, name), p.get());
    for (auto& [name, c] : children_) c->collect_parameters(join(prefix, name), out);
  }

  void collect_buffers(const std::string& prefix, std::vector<std::pair<std::string, Tensor<T>*>>& out) const {
    for (auto& [name, b] : buffers_) out.emplace_back(join(prefix, name), b.get());
    for (auto& [name, c] : children_) c->collect_buffers(join(prefix, name), out);
  }

  std::vector<std::pair<std::string, std::unique_ptr<Parameter<T>>>> params_;
  std::vector<std::pair<std::string, std::unique_ptr<Tensor<T>>>> buffers_;
  std::vector<std::pair<std::string, Module<T>*>> children_;
  std::vector<std::unique_ptr<Module<T>>> owned_;
};

/// (x - mean) / sqrt(var + eps) over each slice spanned by `axes`, population
/// variance. Backward: dx = (g - mean(g) - y * mean(g * y)) / s.
template <class T>
Var<T> standardize(const Var<T>& x, unsigned axes, T eps) {
  if (!(eps > T(0))) fail(ErrorKind::Value, "normalize: eps must be positive");
  if ((axes & 0xFu) == 0) fail(ErrorKind::Value, "normalize: empty reduction axis set");
  const Shape in = x.shape();
  const Shape out = reduced_shape(in, axes);
  const auto so = detail::broadcast_strides(out, in);
  const auto id = detail::broadcast_strides(in, in);
  const std::size_t count = in.size() / out.size();
  auto m = detail::slice_moments(x.value(), out, so, id, count, false);
  std::vector<T> inv_s(out.size());
  for (std::size_t o = 0; o < out.size(); ++o) inv_s[o] = T(1) / std::sqrt(m.var[o] + eps);
  Tensor<T> y(in);
  const auto& xv = x.value().storage();
  detail::broadcast_loop(in, id, so,
                         [&](std::size_t i, std::size_t, std::size_t o) { y[i] = (xv[i] - m.mean[o]) * inv_s[o]; });
  return make_result<T>(
      std::move(y), {x},
      [in, out, so, id, count, inv_s = std::move(inv_s)](Node<T>& self) {
        auto& X = *self.inputs[0];
        const auto& yv = self.value.storage();
        const auto& g = self.grad;
        std::vector<T> mg(out.size(), T(0)), mgy(out.size(), T(0));
        detail::broadcast_loop(in, id, so, [&](std::size_t i, std::size_t, std::size_t o) {
          mg[o] += g[i];
          mgy[o] += g[i] * yv[i];
        });
        const T inv_n = T(1) / static_cast<T>(count);
        detail::broadcast_loop(in, id, so, [&](std::size_t i, std::size_t, std::size_t o) {
          X.grad[i] += inv_s[o] * (g[i] - mg[o] * inv_n - yv[i] * mgy[o] * inv_n);
        });
      },
      "standardize");
}

/// Instance normalization over `axes` followed by the affine gamma * y + beta.
template <class T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, unsigned axes, T eps) {
  return add(mul(standardize(x, axes, eps), gamma), beta);
}

/// Per-channel batch normalization with running statistics.
template <class T>
class BatchNorm : public Module<T> {
 public:
  explicit BatchNorm(int channels, T momentum = T(0.1), T eps = T(1e-5))
      : channels_(channels),
        momentum_(momentum),
        eps_(eps),
        gamma_(this->add_parameter("weight", Tensor<T>(Shape{1, channels, 1, 1}, T(1)))),
        beta_(this->add_parameter("bias", Tensor<T>(Shape{1, channels, 1, 1}, T(0)))),
        running_mean_(this->add_buffer("running_mean", Tensor<T>(Shape{1, channels, 1, 1}, T(0)))),
        running_var_(this->add_buffer("running_var", Tensor<T>(Shape{1, channels, 1, 1}, T(1)))) {
    if (!(eps > T(0))) fail(ErrorKind::Value, "batch norm: eps must be positive");
  }

  Var<T> forward(const Var<T>& x, bool training) {
    if (x.shape().c != channels_) fail(ErrorKind::Shape, "batch norm: channel mismatch " + x.shape().str());
    if (training) {
      const unsigned axes = kBatch | kSpatial;
      {
        const Shape out = reduced_shape(x.shape(), axes);
        const auto so = detail::broadcast_strides(out, x.shape());
        const auto id = detail::broadcast_strides(x.shape(), x.shape());
        auto m = detail::slice_moments(x.value(), out, so, id, x.shape().size() / out.size(), false);
        for (int c = 0; c < channels_; ++c) {
          running_mean_[c] = (T(1) - momentum_) * running_mean_[c] + momentum_ * m.mean[c];
          running_var_[c] = (T(1) - momentum_) * running_var_[c] + momentum_ * m.var[c];
        }
      }
      return add(mul(standardize(x, axes, eps_), gamma_.var()), beta_.var());
    }
    Tensor<T> shift(Shape{1, channels_, 1, 1}), inv(Shape{1, channels_, 1, 1});
    for (int c = 0; c < channels_; ++c) {
      shift[c] = running_mean_[c];
      inv[c] = T(1) / std::sqrt(running_var_[c] + eps_);
    }
    auto y = mul(sub(x, Var<T>::constant(std::move(shift))), Var<T>::constant(std::move(inv)));
    return add(mul(y, gamma_.var()), beta_.var());
  }

  Parameter<T>& gamma() { return gamma_; }
  Parameter<T>& beta() { return beta_; }
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }

 private:
  int channels_;
  T momentum_;
  T eps_;
  Parameter<T>& gamma_;
  Parameter<T>& beta_;
  Tensor<T>& running_mean_;
  Tensor<T>& running_var_;
};

/// Convolution layer with uniform fan-in initialization and zero bias.
template <class T>
class Conv2d : public Module<T> {
 public:
  Conv2d(int in, int out, int kh, int kw, Conv2dOptions opt, bool bias, Rng& rng) : opt_(opt) {
    if (in % opt.groups != 0 || out % opt.groups != 0) fail(ErrorKind::Shape, "conv: groups must divide channels");
    const int fan_in = in / opt.groups * kh * kw;
    weight_ = &this->add_parameter(
        "weight", uniform_tensor<T>(Shape{out, in / opt.groups, kh, kw}, T(1) / std::sqrt(T(fan_in)), rng));
    if (bias) bias_ = &this->add_parameter("bias", Tensor<T>(Shape{1, out, 1, 1}, T(0)));
  }

  Var<T> forward(const Var<T>& x) const {
    return conv2d(x, weight_->var(), bias_ ? std::optional<Var<T>>(bias_->var()) : std::nullopt, opt_);
  }

  Parameter<T>& weight() { return *weight_; }
  Parameter<T>* bias() { return bias_; }

 private:
  Conv2dOptions opt_;
  Parameter<T>* weight_ = nullptr;
  Parameter<T>* bias_ = nullptr;
};

template <class T>
class Dense : public Module<T> {
 public:
  Dense(int in, int out, Rng& rng, bool zero_init = false) {
    weight_ = &this->add_parameter("weight", zero_init ? Tensor<T>(Shape{out, in, 1, 1})
                                                       : uniform_tensor<T>(Shape{out, in, 1, 1},
                                                                           T(1) / std::sqrt(T(in)), rng));
    bias_ = &this->add_parameter("bias", Tensor<T>(Shape{1, out, 1, 1}, T(0)));
  }

  Var<T> forward(const Var<T>& x) const { return dense(x, weight_->var(), std::optional<Var<T>>(bias_->var())); }

  Parameter<T>& weight() { return *weight_; }
  Parameter<T>& bias() { return *bias_; }

 private:
  Parameter<T>* weight_ = nullptr;
  Parameter<T>* bias_ = nullptr;
};

}  // namespace sase
