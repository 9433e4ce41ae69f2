#pragma once

// Differentiable primitives. Every op validates shapes, rejects non-finite
// results, and (when recording) attaches an analytic backward closure.

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <type_traits>
#include <string>
#include <vector>

#include "sase/autograd.hpp"
#include "sase/gemm.hpp"
#include "sase/tensor.hpp"

namespace sase {

namespace detail {

using Strides = std::array<std::size_t, 4>;

// Strides of `small` laid out in its own storage, zeroed on axes where it is
// broadcast (extent 1) against `big`.
inline Strides broadcast_strides(Shape small, Shape big) {
  const std::array<std::size_t, 4> own{static_cast<std::size_t>(small.c) * small.h * small.w,
                                       static_cast<std::size_t>(small.h) * small.w,
                                       static_cast<std::size_t>(small.w), 1};
  Strides s{};
  for (int a = 0; a < 4; ++a) s[a] = (small[a] == 1 && big[a] != 1) ? 0 : own[a];
  return s;
}

// f(out_flat, a_flat, b_flat) over every element of `out`.
template <class F>
void broadcast_loop(Shape out, const Strides& sa, const Strides& sb, F&& f) {
  std::size_t o = 0;
  for (int n = 0; n < out.n; ++n)
    for (int c = 0; c < out.c; ++c)
      for (int h = 0; h < out.h; ++h) {
        const std::size_t ia = n * sa[0] + c * sa[1] + h * sa[2];
        const std::size_t ib = n * sb[0] + c * sb[1] + h * sb[2];
        for (int w = 0; w < out.w; ++w) f(o++, ia + w * sa[3], ib + w * sb[3]);
      }
}

inline Shape broadcast_shape(Shape a, Shape b, const char* op) {
  Shape out;
  for (int ax = 0; ax < 4; ++ax) {
    if (a[ax] == b[ax] || b[ax] == 1)
      out.at(ax) = a[ax];
    else if (a[ax] == 1)
      out.at(ax) = b[ax];
    else
      fail(ErrorKind::Shape, std::string(op) + ": cannot broadcast " + a.str() + " with " + b.str());
  }
  return out;
}

template <class T, class F, class DA, class DB>
Var<T> binary(const Var<T>& a, const Var<T>& b, F f, DA da, DB db, const char* op) {
  const Shape out = broadcast_shape(a.shape(), b.shape(), op);
  const Strides sa = broadcast_strides(a.shape(), out), sb = broadcast_strides(b.shape(), out);
  Tensor<T> y(out);
  const auto& av = a.value().storage();
  const auto& bv = b.value().storage();
  broadcast_loop(out, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { y[o] = f(av[i], bv[j]); });
  return make_result<T>(
      std::move(y), {a, b},
      [out, sa, sb, da, db](Node<T>& self) {
        auto& A = *self.inputs[0];
        auto& B = *self.inputs[1];
        const auto& av = A.value.storage();
        const auto& bv = B.value.storage();
        const auto& g = self.grad;
        if (A.requires_grad)
          broadcast_loop(out, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
            A.grad[i] += g[o] * da(av[i], bv[j]);
          });
        if (B.requires_grad)
          broadcast_loop(out, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
            B.grad[j] += g[o] * db(av[i], bv[j]);
          });
      },
      op);
}

// dfdx receives (x, y) so ops can reuse their output.
template <class T, class F, class DF>
Var<T> unary(const Var<T>& x, F f, DF dfdx, const char* op) {
  Tensor<T> y(x.shape());
  const auto& xv = x.value().storage();
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  return make_result<T>(
      std::move(y), {x},
      [dfdx](Node<T>& self) {
        auto& X = *self.inputs[0];
        const auto& xv = X.value.storage();
        const auto& yv = self.value.storage();
        for (std::size_t i = 0; i < xv.size(); ++i) X.grad[i] += self.grad[i] * dfdx(xv[i], yv[i]);
      },
      op);
}

inline int ceil_div(int a, int b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }
inline int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary(a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
                        [](T, T) { return T(1); }, "add");
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary(a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
                        [](T, T) { return T(-1); }, "sub");
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary(a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; },
                        "mul");
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return detail::binary(a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
                        [](T x, T y) { return -x / (y * y); }, "div");
}

template <class T>
Var<T> scale(const Var<T>& x, T k) {
  return detail::unary(x, [k](T v) { return k * v; }, [k](T, T) { return k; }, "scale");
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T k) {
  return detail::unary(x, [k](T v) { return v + k; }, [](T, T) { return T(1); }, "add_scalar");
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); },
                       "relu");
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); }, "sigmoid");
}

template <class T>
Var<T> square(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; }, "square");
}

template <class T>
Var<T> sqrt(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; }, "sqrt");
}

template <class T>
Var<T> exp(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; }, "exp");
}

// ----------------------------------------------------------------- reductions

enum class Stat { Mean, Max, Sum, Std, Skew, Lp };


namespace detail {

// Population moments of each reduced slice.
template <class T>
struct Moments {
  std::vector<T> mean, var, m3;
};

template <class T>
Moments<T> slice_moments(const Tensor<T>& x, Shape out, const Strides& so, const Strides& id, std::size_t count,
                         bool third) {
  Moments<T> m;
  m.mean.assign(out.size(), T(0));
  m.var.assign(out.size(), T(0));
  if (third) m.m3.assign(out.size(), T(0));
  const auto& xv = x.storage();
  broadcast_loop(x.shape(), id, so, [&](std::size_t i, std::size_t, std::size_t o) { m.mean[o] += xv[i]; });
  for (auto& v : m.mean) v /= static_cast<T>(count);
  broadcast_loop(x.shape(), id, so, [&](std::size_t i, std::size_t, std::size_t o) {
    const T d = xv[i] - m.mean[o];
    m.var[o] += d * d;
    if (third) m.m3[o] += d * d * d;
  });
  for (auto& v : m.var) v /= static_cast<T>(count);
  if (third)
    for (auto& v : m.m3) v /= static_cast<T>(count);
  return m;
}

template <class T>
T int_pow(T v, int p) {
  T r = T(1);
  for (int i = 0; i < p; ++i) r *= v;
  return r;
}

template <class T>
T lp_pow(T v, T p) {
  const int ip = static_cast<int>(p);
  return static_cast<T>(ip) == p ? int_pow(v, ip) : std::pow(v, p);
}

}  // namespace detail

/// Reduces `axes` (bitmask of Axis) with the chosen statistic; reduced axes
/// are kept at extent 1.
///   Std  = sqrt(var + eps), population variance.
///   Skew = E[(x-mu)^3] / (var^1.5 + eps).
///   Lp   = (sum x^p)^(1/p), no averaging.
/// Max routes its gradient to the first maximal element in memory order.
template <class T>
Var<T> reduce_stat(const Var<T>& x, unsigned axes, Stat stat, T eps = T(0), T p = T(4)) {
  if ((axes & 0xFu) == 0) fail(ErrorKind::Value, "reduce_stat: empty reduction axis set");
  if (stat == Stat::Lp && p < T(1)) fail(ErrorKind::Value, "reduce_stat: Lp requires p >= 1");
  if ((stat == Stat::Std || stat == Stat::Skew) && eps < T(0)) fail(ErrorKind::Value, "reduce_stat: eps < 0");
  const Shape in = x.shape();
  const Shape out = reduced_shape(in, axes);
  const detail::Strides so = detail::broadcast_strides(out, in);
  const detail::Strides id = detail::broadcast_strides(in, in);
  const std::size_t count = in.size() / out.size();
  const auto& xv = x.value().storage();
  Tensor<T> y(out);

  switch (stat) {
    case Stat::Sum:
    case Stat::Mean: {
      detail::broadcast_loop(in, id, so, [&](std::size_t i, std::size_t, std::size_t o) { y[o] += xv[i]; });
      const T k = stat == Stat::Mean ? T(1) / static_cast<T>(count) : T(1);
      if (stat == Stat::Mean)
        for (std::size_t o = 0; o < y.size(); ++o) y[o] /= static_cast<T>(count);
      return make_result<T>(
          std::move(y), {x},
          [in, so, id, k](Node<T>& self) {
            auto& X = *self.inputs[0];
            detail::broadcast_loop(in, id, so,
                                   [&](std::size_t i, std::size_t, std::size_t o) { X.grad[i] += k * self.grad[o]; });
          },
          stat == Stat::Mean ? "reduce_mean" : "reduce_sum");
    }
    case Stat::Max: {
      std::vector<std::size_t> arg(out.size(), std::numeric_limits<std::size_t>::max());
      detail::broadcast_loop(in, id, so, [&](std::size_t i, std::size_t, std::size_t o) {
        if (arg[o] == std::numeric_limits<std::size_t>::max() || xv[i] > xv[arg[o]]) arg[o] = i;
      });
      for (std::size_t o = 0; o < out.size(); ++o) y[o] = xv[arg[o]];
      return make_result<T>(
          std::move(y), {x},
          [arg = std::move(arg)](Node<T>& self) {
            auto& X = *self.inputs[0];
            for (std::size_t o = 0; o < arg.size(); ++o) X.grad[arg[o]] += self.grad[o];
          },
          "reduce_max");
    }
    case Stat::Std: {
      auto m = detail::slice_moments(x.value(), out, so, id, count, false);
      for (std::size_t o = 0; o < out.size(); ++o) y[o] = std::sqrt(m.var[o] + eps);
      return make_result<T>(
          std::move(y), {x},
          [in, so, id, count, mean = std::move(m.mean)](Node<T>& self) {
            auto& X = *self.inputs[0];
            const auto& xv = X.value.storage();
            const auto& s = self.value.storage();
            const T inv_n = T(1) / static_cast<T>(count);
            detail::broadcast_loop(in, id, so, [&](std::size_t i, std::size_t, std::size_t o) {
              if (s[o] > T(0)) X.grad[i] += self.grad[o] * (xv[i] - mean[o]) * inv_n / s[o];
            });
          },
          "reduce_std");
    }
    case Stat::Skew: {
      auto m = detail::slice_moments(x.value(), out, so, id, count, true);
      std::vector<T> denom(out.size());
      for (std::size_t o = 0; o < out.size(); ++o) {
        denom[o] = std::pow(m.var[o], T(1.5)) + eps;
        if (denom[o] > T(0)) y[o] = m.m3[o] / denom[o];
      }
      return make_result<T>(
          std::move(y), {x},
          [in, so, id, count, m = std::move(m), denom = std::move(denom)](Node<T>& self) {
            auto& X = *self.inputs[0];
            const auto& xv = X.value.storage();
            const T inv_n = T(1) / static_cast<T>(count);
            detail::broadcast_loop(in, id, so, [&](std::size_t i, std::size_t, std::size_t o) {
              if (denom[o] <= T(0)) return;
              const T d = xv[i] - m.mean[o];
              const T dm3 = T(3) * inv_n * (d * d - m.var[o]);
              const T dvar = T(2) * inv_n * d;
              const T dsig3 = T(1.5) * std::sqrt(m.var[o]) * dvar;
              X.grad[i] += self.grad[o] * (dm3 / denom[o] - m.m3[o] * dsig3 / (denom[o] * denom[o]));
            });
          },
          "reduce_skew");
    }
    case Stat::Lp: {
      detail::broadcast_loop(in, id, so,
                             [&](std::size_t i, std::size_t, std::size_t o) { y[o] += detail::lp_pow(xv[i], p); });
      for (std::size_t o = 0; o < out.size(); ++o) y[o] = std::pow(y[o], T(1) / p);
      return make_result<T>(
          std::move(y), {x},
          [in, so, id, p](Node<T>& self) {
            auto& X = *self.inputs[0];
            const auto& xv = X.value.storage();
            const auto& L = self.value.storage();
            detail::broadcast_loop(in, id, so, [&](std::size_t i, std::size_t, std::size_t o) {
              // dL/dx = x^(p-1) * L^(1-p); the all-zero slice has no usable direction.
              if (L[o] > T(0)) X.grad[i] += self.grad[o] * detail::lp_pow(xv[i], p - T(1)) / detail::lp_pow(L[o], p - T(1));
            });
          },
          "reduce_lp");
    }
  }
  fail(ErrorKind::Value, "reduce_stat: unknown statistic");
}

template <class T>
Var<T> reduce_mean(const Var<T>& x, unsigned axes) {
  return reduce_stat(x, axes, Stat::Mean);
}
template <class T>
Var<T> reduce_sum(const Var<T>& x, unsigned axes) {
  return reduce_stat(x, axes, Stat::Sum);
}
template <class T>
Var<T> reduce_max(const Var<T>& x, unsigned axes) {
  return reduce_stat(x, axes, Stat::Max);
}
template <class T>
Var<T> sum_all(const Var<T>& x) {
  return reduce_stat(x, kBatch | kChannel | kSpatial, Stat::Sum);
}
template <class T>
Var<T> mean_all(const Var<T>& x) {
  return reduce_stat(x, kBatch | kChannel | kSpatial, Stat::Mean);
}

// ------------------------------------------------------------------- softmax

/// Softmax along one axis (0..3).
template <class T>
Var<T> softmax(const Var<T>& x, int axis) {
  if (axis < 0 || axis > 3) fail(ErrorKind::Value, "softmax: axis must be in [0,3]");
  const Shape in = x.shape();
  const Shape outer = reduced_shape(in, 1u << axis);
  const detail::Strides st = detail::broadcast_strides(in, in);
  const std::size_t step = st[axis];
  const int len = in[axis];
  const detail::Strides so = detail::broadcast_strides(in, outer);
  Tensor<T> y(in);
  const auto& xv = x.value().storage();
  std::vector<std::size_t> bases;
  bases.reserve(outer.size());
  detail::broadcast_loop(outer, detail::broadcast_strides(outer, outer), so,
                         [&](std::size_t, std::size_t, std::size_t base) { bases.push_back(base); });
  for (std::size_t base : bases) {
    T mx = xv[base];
    for (int k = 1; k < len; ++k) mx = std::max(mx, xv[base + k * step]);
    T z = T(0);
    for (int k = 0; k < len; ++k) z += (y[base + k * step] = std::exp(xv[base + k * step] - mx));
    for (int k = 0; k < len; ++k) y[base + k * step] /= z;
  }
  return make_result<T>(
      std::move(y), {x},
      [bases = std::move(bases), step, len](Node<T>& self) {
        auto& X = *self.inputs[0];
        const auto& yv = self.value.storage();
        const auto& g = self.grad;
        for (std::size_t base : bases) {
          T dot = T(0);
          for (int k = 0; k < len; ++k) dot += g[base + k * step] * yv[base + k * step];
          for (int k = 0; k < len; ++k) {
            const std::size_t i = base + k * step;
            X.grad[i] += yv[i] * (g[i] - dot);
          }
        }
      },
      "softmax");
}

// ------------------------------------------------------------- convolutions

struct Conv2dOptions {
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;
  int groups = 1;

  /// Zero "same" padding for odd kernels at stride 1.
  static Conv2dOptions same(int kh, int kw, int groups = 1) {
    if (kh % 2 == 0 || kw % 2 == 0) fail(ErrorKind::Value, "same padding requires odd kernel extents");
    return Conv2dOptions{1, 1, kh / 2, kw / 2, groups};
  }
};

namespace detail {

// Column matrix (Cin kH kW, N OH OW) of a zero-padded input.
template <class T>
void im2col(const T* x, Shape xs, Shape ws, Shape ys, const Conv2dOptions& opt, T* col) {
  const std::size_t P = static_cast<std::size_t>(ys.h) * ys.w, NP = P * ys.n;
  for (int ic = 0; ic < xs.c; ++ic)
    for (int kh = 0; kh < ws.h; ++kh)
      for (int kw = 0; kw < ws.w; ++kw) {
        T* row = col + ((static_cast<std::size_t>(ic) * ws.h + kh) * ws.w + kw) * NP;
        for (int n = 0; n < xs.n; ++n) {
          const T* plane = x + (static_cast<std::size_t>(n) * xs.c + ic) * xs.h * xs.w;
          for (int oh = 0; oh < ys.h; ++oh) {
            const int ih = oh * opt.stride_h - opt.pad_h + kh;
            T* dst = row + n * P + static_cast<std::size_t>(oh) * ys.w;
            if (ih < 0 || ih >= xs.h) {
              std::fill_n(dst, ys.w, T(0));
              continue;
            }
            for (int ow = 0; ow < ys.w; ++ow) {
              const int iw = ow * opt.stride_w - opt.pad_w + kw;
              dst[ow] = (iw >= 0 && iw < xs.w) ? plane[ih * xs.w + iw] : T(0);
            }
          }
        }
      }
}

template <class T>
void col2im_add(const T* col, Shape xs, Shape ws, Shape ys, const Conv2dOptions& opt, T* x) {
  const std::size_t P = static_cast<std::size_t>(ys.h) * ys.w, NP = P * ys.n;
  for (int ic = 0; ic < xs.c; ++ic)
    for (int kh = 0; kh < ws.h; ++kh)
      for (int kw = 0; kw < ws.w; ++kw) {
        const T* row = col + ((static_cast<std::size_t>(ic) * ws.h + kh) * ws.w + kw) * NP;
        for (int n = 0; n < xs.n; ++n) {
          T* plane = x + (static_cast<std::size_t>(n) * xs.c + ic) * xs.h * xs.w;
          for (int oh = 0; oh < ys.h; ++oh) {
            const int ih = oh * opt.stride_h - opt.pad_h + kh;
            if (ih < 0 || ih >= xs.h) continue;
            const T* src = row + n * P + static_cast<std::size_t>(oh) * ys.w;
            for (int ow = 0; ow < ys.w; ++ow) {
              const int iw = ow * opt.stride_w - opt.pad_w + kw;
              if (iw >= 0 && iw < xs.w) plane[ih * xs.w + iw] += src[ow];
            }
          }
        }
      }
}

// Ungrouped convolution as one GEMM over the whole batch.
template <class T>
Var<T> conv2d_gemm(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias, const Conv2dOptions& opt,
                   Shape ys) {
  const Shape xs = x.shape(), ws = weight.shape();
  const int K = ws.c * ws.h * ws.w, Cout = ws.n;
  const std::size_t P = static_cast<std::size_t>(ys.h) * ys.w;
  const int NP = static_cast<int>(P * ys.n);
  std::vector<T> col(static_cast<std::size_t>(K) * NP);
  im2col(x.value().storage().data(), xs, ws, ys, opt, col.data());
  std::vector<T> yt(static_cast<std::size_t>(Cout) * NP);
  gemm<T>(false, false, Cout, NP, K, T(1), weight.value().storage().data(), K, col.data(), NP, T(0), yt.data(), NP);
  Tensor<T> y(ys);
  for (int n = 0; n < ys.n; ++n)
    for (int oc = 0; oc < Cout; ++oc) {
      const T b = bias ? bias->value()[oc] : T(0);
      const T* src = yt.data() + static_cast<std::size_t>(oc) * NP + n * P;
      T* dst = y.storage().data() + (static_cast<std::size_t>(n) * Cout + oc) * P;
      for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + b;
    }

  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return make_result<T>(
      std::move(y), std::move(inputs),
      [xs, ws, ys, opt, K, Cout, P, NP](Node<T>& self) {
        auto& X = *self.inputs[0];
        auto& W = *self.inputs[1];
        std::vector<T> gt(static_cast<std::size_t>(Cout) * NP);
        for (int n = 0; n < ys.n; ++n)
          for (int oc = 0; oc < Cout; ++oc)
            std::copy_n(self.grad.data() + (static_cast<std::size_t>(n) * Cout + oc) * P, P,
                        gt.data() + static_cast<std::size_t>(oc) * NP + n * P);
        if (W.requires_grad) {
          std::vector<T> col(static_cast<std::size_t>(K) * NP);
          im2col(X.value.storage().data(), xs, ws, ys, opt, col.data());
          gemm<T>(false, true, Cout, K, NP, T(1), gt.data(), NP, col.data(), NP, T(1), W.grad.data(), K);
        }
        if (X.requires_grad) {
          std::vector<T> dcol(static_cast<std::size_t>(K) * NP);
          gemm<T>(true, false, K, NP, Cout, T(1), W.value.storage().data(), K, gt.data(), NP, T(0), dcol.data(), NP);
          col2im_add(dcol.data(), xs, ws, ys, opt, X.grad.data());
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
          auto& B = *self.inputs[2];
          for (int oc = 0; oc < Cout; ++oc) {
            const T* gp = gt.data() + static_cast<std::size_t>(oc) * NP;
            T acc = T(0);
            for (int k = 0; k < NP; ++k) acc += gp[k];
            B.grad[oc] += acc;
          }
        }
      },
      "conv2d");
}

}  // namespace detail

/// Cross-correlation. weight is (Cout, Cin/groups, kH, kW); bias, when
/// present, has shape (1, Cout, 1, 1).
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const std::optional<std::type_identity_t<Var<T>>>& bias, const Conv2dOptions& opt) {
  const Shape xs = x.shape(), ws = weight.shape();
  const int G = opt.groups;
  if (G < 1 || xs.c % G != 0) fail(ErrorKind::Shape, "conv2d: groups must divide input channels");
  if (ws.n % G != 0) fail(ErrorKind::Shape, "conv2d: groups must divide output channels");
  if (ws.c != xs.c / G)
    fail(ErrorKind::Shape, "conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
  if (opt.stride_h < 1 || opt.stride_w < 1 || opt.pad_h < 0 || opt.pad_w < 0)
    fail(ErrorKind::Value, "conv2d: invalid stride or padding");
  if (bias && bias->shape() != Shape{1, ws.n, 1, 1})
    fail(ErrorKind::Shape, "conv2d: bias must be (1," + std::to_string(ws.n) + ",1,1)");
  const int OH = (xs.h + 2 * opt.pad_h - ws.h) / opt.stride_h + 1;
  const int OW = (xs.w + 2 * opt.pad_w - ws.w) / opt.stride_w + 1;
  if (xs.h + 2 * opt.pad_h < ws.h || xs.w + 2 * opt.pad_w < ws.w || OH < 1 || OW < 1)
    fail(ErrorKind::Shape, "conv2d: kernel larger than padded input");
  const Shape ys{xs.n, ws.n, OH, OW};
  const int cin_g = xs.c / G, cout_g = ws.n / G;
  if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>)
    if (G == 1) return detail::conv2d_gemm(x, weight, bias, opt, ys);

  // Valid output range for one kernel tap along one axis.
  struct Range {
    int lo, hi;
  };
  auto range = [](int k, int pad, int stride, int in, int out) {
    int lo = std::max(0, detail::ceil_div(pad - k, stride));
    int hi = std::min(out - 1, detail::floor_div(in - 1 - k + pad, stride));
    return Range{lo, hi};
  };

  // Visits (out offset, in offset, weight offset, count, in stride) runs.
  auto visit = [=](auto&& f) {
    for (int n = 0; n < xs.n; ++n)
      for (int g = 0; g < G; ++g)
        for (int oc = g * cout_g; oc < (g + 1) * cout_g; ++oc)
          for (int icl = 0; icl < cin_g; ++icl) {
            const int ic = g * cin_g + icl;
            for (int kh = 0; kh < ws.h; ++kh) {
              const Range rh = range(kh, opt.pad_h, opt.stride_h, xs.h, OH);
              for (int kw = 0; kw < ws.w; ++kw) {
                const Range rw = range(kw, opt.pad_w, opt.stride_w, xs.w, OW);
                if (rw.lo > rw.hi) continue;
                const std::size_t wi = ((static_cast<std::size_t>(oc) * cin_g + icl) * ws.h + kh) * ws.w + kw;
                for (int oh = rh.lo; oh <= rh.hi; ++oh) {
                  const int ih = oh * opt.stride_h - opt.pad_h + kh;
                  const int iw0 = rw.lo * opt.stride_w - opt.pad_w + kw;
                  const std::size_t yo = ((static_cast<std::size_t>(n) * ys.c + oc) * OH + oh) * OW + rw.lo;
                  const std::size_t xo = ((static_cast<std::size_t>(n) * xs.c + ic) * xs.h + ih) * xs.w + iw0;
                  f(yo, xo, wi, rw.hi - rw.lo + 1, opt.stride_w);
                }
              }
            }
          }
  };

  Tensor<T> y(ys);
  {
    const auto& xv = x.value().storage();
    const auto& wv = weight.value().storage();
    if (bias) {
      const auto& bv = bias->value().storage();
      for (int n = 0; n < ys.n; ++n)
        for (int oc = 0; oc < ys.c; ++oc)
          std::fill_n(y.storage().begin() + y.index(n, oc, 0, 0), static_cast<std::size_t>(OH) * OW, bv[oc]);
    }
    T* yp = y.storage().data();
    const T* xp = xv.data();
    visit([&](std::size_t yo, std::size_t xo, std::size_t wi, int cnt, int sw) {
      const T wv_ = wv[wi];
      for (int k = 0; k < cnt; ++k) yp[yo + k] += wv_ * xp[xo + static_cast<std::size_t>(k) * sw];
    });
  }

  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return make_result<T>(
      std::move(y), std::move(inputs),
      [visit, ys](Node<T>& self) {
        auto& X = *self.inputs[0];
        auto& W = *self.inputs[1];
        const T* g = self.grad.data();
        const T* xp = X.value.storage().data();
        const T* wp = W.value.storage().data();
        const bool gx = X.requires_grad, gw = W.requires_grad;
        T* gxp = gx ? X.grad.data() : nullptr;
        T* gwp = gw ? W.grad.data() : nullptr;
        visit([&](std::size_t yo, std::size_t xo, std::size_t wi, int cnt, int sw) {
          if (gx) {
            const T wv_ = wp[wi];
            for (int k = 0; k < cnt; ++k) gxp[xo + static_cast<std::size_t>(k) * sw] += wv_ * g[yo + k];
          }
          if (gw) {
            T acc = T(0);
            for (int k = 0; k < cnt; ++k) acc += xp[xo + static_cast<std::size_t>(k) * sw] * g[yo + k];
            gwp[wi] += acc;
          }
        });
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
          auto& B = *self.inputs[2];
          const std::size_t plane = static_cast<std::size_t>(ys.h) * ys.w;
          for (int n = 0; n < ys.n; ++n)
            for (int oc = 0; oc < ys.c; ++oc) {
              const T* gp = g + (static_cast<std::size_t>(n) * ys.c + oc) * plane;
              T acc = T(0);
              for (std::size_t k = 0; k < plane; ++k) acc += gp[k];
              B.grad[oc] += acc;
            }
        }
      },
      "conv2d");
}

/// Same-padded 1D convolution over a (B,1,1,L) sequence with a (1,1,1,k)
/// kernel and optional (1,1,1,1) bias.
template <class T>
Var<T> conv1d(const Var<T>& seq, const Var<T>& weight, const std::optional<std::type_identity_t<Var<T>>>& bias) {
  const Shape s = seq.shape(), w = weight.shape();
  if (s.c != 1 || s.h != 1) fail(ErrorKind::Shape, "conv1d: input must be (B,1,1,L), got " + s.str());
  if (w.n != 1 || w.c != 1 || w.h != 1) fail(ErrorKind::Shape, "conv1d: kernel must be (1,1,1,k)");
  if (w.w % 2 == 0) fail(ErrorKind::Value, "conv1d: kernel size must be odd for same padding");
  return conv2d(seq, weight, bias, Conv2dOptions{1, 1, 0, w.w / 2, 1});
}

/// Affine map applied per sample: x is (B, N, ...) flattened to N features,
/// weight is (M, N, 1, 1), bias (1, M, 1, 1). Output (B, M, 1, 1).
template <class T>
Var<T> dense(const Var<T>& x, const Var<T>& weight, const std::optional<std::type_identity_t<Var<T>>>& bias) {
  const Shape xs = x.shape(), ws = weight.shape();
  const int B = xs.n;
  const int N = static_cast<int>(xs.size() / xs.n);
  const int M = ws.n;
  if (ws.c != N || ws.h != 1 || ws.w != 1)
    fail(ErrorKind::Shape, "dense: weight " + ws.str() + " incompatible with input " + xs.str());
  if (bias && bias->shape() != Shape{1, M, 1, 1}) fail(ErrorKind::Shape, "dense: bias must be (1,M,1,1)");
  Tensor<T> y(Shape{B, M, 1, 1});
  const auto& xv = x.value().storage();
  const auto& wv = weight.value().storage();
  for (int b = 0; b < B; ++b)
    for (int m = 0; m < M; ++m) {
      T acc = bias ? bias->value()[m] : T(0);
      const T* xr = xv.data() + static_cast<std::size_t>(b) * N;
      const T* wr = wv.data() + static_cast<std::size_t>(m) * N;
      for (int k = 0; k < N; ++k) acc += wr[k] * xr[k];
      y[static_cast<std::size_t>(b) * M + m] = acc;
    }
  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return make_result<T>(
      std::move(y), std::move(inputs),
      [B, N, M](Node<T>& self) {
        auto& X = *self.inputs[0];
        auto& W = *self.inputs[1];
        const auto& xv = X.value.storage();
        const auto& wv = W.value.storage();
        const auto& g = self.grad;
        for (int b = 0; b < B; ++b)
          for (int m = 0; m < M; ++m) {
            const T gm = g[static_cast<std::size_t>(b) * M + m];
            const std::size_t xo = static_cast<std::size_t>(b) * N, wo = static_cast<std::size_t>(m) * N;
            if (X.requires_grad)
              for (int k = 0; k < N; ++k) X.grad[xo + k] += gm * wv[wo + k];
            if (W.requires_grad)
              for (int k = 0; k < N; ++k) W.grad[wo + k] += gm * xv[xo + k];
          }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
          auto& Bi = *self.inputs[2];
          for (int b = 0; b < B; ++b)
            for (int m = 0; m < M; ++m) Bi.grad[m] += g[static_cast<std::size_t>(b) * M + m];
        }
      },
      "dense");
}

/// Batched matrix product on the (H, W) axes: (Ba,1,M,K) x (Bb,1,K,N). A batch
/// extent of 1 on either side is broadcast.
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
  const Shape as = a.shape(), bs = b.shape();
  if (as.c != 1 || bs.c != 1 || as.w != bs.h || (as.n != bs.n && as.n != 1 && bs.n != 1))
    fail(ErrorKind::Shape, "bmm: incompatible operands " + as.str() + " and " + bs.str());
  const int B = std::max(as.n, bs.n), M = as.h, K = as.w, N = bs.w;
  const std::size_t sa = as.n == 1 ? 0 : static_cast<std::size_t>(M) * K;
  const std::size_t sb = bs.n == 1 ? 0 : static_cast<std::size_t>(K) * N;
  const std::size_t sy = static_cast<std::size_t>(M) * N;
  Tensor<T> y(Shape{B, 1, M, N});
  const T* ap = a.value().storage().data();
  const T* bp = b.value().storage().data();
  for (int n = 0; n < B; ++n)
    gemm<T>(false, false, M, N, K, T(1), ap + n * sa, K, bp + n * sb, N, T(0), y.storage().data() + n * sy, N);
  return make_result<T>(
      std::move(y), {a, b},
      [B, M, K, N, sa, sb, sy](Node<T>& self) {
        auto& A = *self.inputs[0];
        auto& Bm = *self.inputs[1];
        const T* ap = A.value.storage().data();
        const T* bp = Bm.value.storage().data();
        const T* g = self.grad.data();
        for (int n = 0; n < B; ++n) {
          if (A.requires_grad)
            gemm<T>(false, true, M, K, N, T(1), g + n * sy, N, bp + n * sb, N, T(1), A.grad.data() + n * sa, K);
          if (Bm.requires_grad)
            gemm<T>(true, false, K, N, M, T(1), ap + n * sa, K, g + n * sy, N, T(1), Bm.grad.data() + n * sb, N);
        }
      },
      "bmm");
}

// ------------------------------------------------------------ data movement

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
  if (s.size() != x.shape().size())
    fail(ErrorKind::Shape, "reshape: " + x.shape().str() + " to " + s.str() + " changes size");
  return make_result<T>(
      x.value().reshaped(s), {x},
      [](Node<T>& self) {
        auto& X = *self.inputs[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) X.grad[i] += self.grad[i];
      },
      "reshape");
}

/// Swaps the H and W axes.
template <class T>
Var<T> transpose_hw(const Var<T>& x) {
  const Shape s = x.shape();
  const Shape t{s.n, s.c, s.w, s.h};
  Tensor<T> y(t);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int h = 0; h < s.h; ++h)
        for (int w = 0; w < s.w; ++w) y.at(n, c, w, h) = x.value().at(n, c, h, w);
  return make_result<T>(
      std::move(y), {x},
      [s, t](Node<T>& self) {
        auto& X = *self.inputs[0];
        for (int n = 0; n < s.n; ++n)
          for (int c = 0; c < s.c; ++c)
            for (int h = 0; h < s.h; ++h)
              for (int w = 0; w < s.w; ++w)
                X.grad[X.value.index(n, c, h, w)] += self.grad[((static_cast<std::size_t>(n) * t.c + c) * t.h + w) * t.w + h];
      },
      "transpose_hw");
}

/// Concatenates along the channel axis.
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape as = a.shape(), bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w)
    fail(ErrorKind::Shape, "concat_channels: " + as.str() + " vs " + bs.str());
  const Shape ys{as.n, as.c + bs.c, as.h, as.w};
  const std::size_t plane = static_cast<std::size_t>(as.h) * as.w;
  const std::size_t na = as.c * plane, nb = bs.c * plane;
  Tensor<T> y(ys);
  for (int n = 0; n < as.n; ++n) {
    std::copy_n(a.value().storage().begin() + n * na, na, y.storage().begin() + n * (na + nb));
    std::copy_n(b.value().storage().begin() + n * nb, nb, y.storage().begin() + n * (na + nb) + na);
  }
  return make_result<T>(
      std::move(y), {a, b},
      [na, nb, batch = as.n](Node<T>& self) {
        auto& A = *self.inputs[0];
        auto& B = *self.inputs[1];
        for (int n = 0; n < batch; ++n) {
          const T* g = self.grad.data() + n * (na + nb);
          if (A.requires_grad)
            for (std::size_t i = 0; i < na; ++i) A.grad[n * na + i] += g[i];
          if (B.requires_grad)
            for (std::size_t i = 0; i < nb; ++i) B.grad[n * nb + i] += g[na + i];
        }
      },
      "concat_channels");
}

/// Picks batch entry `index`, keeping a batch extent of 1.
template <class T>
Var<T> select_batch(const Var<T>& x, int index) {
  const Shape s = x.shape();
  if (index < 0 || index >= s.n) fail(ErrorKind::Shape, "select_batch: index out of range");
  const std::size_t len = s.size() / s.n;
  Tensor<T> y(Shape{1, s.c, s.h, s.w});
  std::copy_n(x.value().storage().begin() + index * len, len, y.storage().begin());
  return make_result<T>(
      std::move(y), {x},
      [len, off = index * len](Node<T>& self) {
        auto& X = *self.inputs[0];
        for (std::size_t i = 0; i < len; ++i) X.grad[off + i] += self.grad[i];
      },
      "select_batch");
}

/// sum_k weights[k] * inputs[k]; weights has shape (1, K, 1, 1).
template <class T>
Var<T> weighted_sum(const Var<T>& weights, const std::vector<Var<T>>& inputs) {
  const int K = static_cast<int>(inputs.size());
  if (K == 0 || weights.shape() != Shape{1, K, 1, 1})
    fail(ErrorKind::Shape, "weighted_sum: weights must be (1," + std::to_string(K) + ",1,1)");
  const Shape s = inputs[0].shape();
  for (const auto& in : inputs)
    if (in.shape() != s) fail(ErrorKind::Shape, "weighted_sum: inputs disagree in shape");
  Tensor<T> y(s);
  for (int k = 0; k < K; ++k) {
    const T wk = weights.value()[k];
    const auto& xv = inputs[k].value().storage();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += wk * xv[i];
  }
  std::vector<Var<T>> all{weights};
  all.insert(all.end(), inputs.begin(), inputs.end());
  return make_result<T>(
      std::move(y), std::move(all),
      [K](Node<T>& self) {
        auto& Wt = *self.inputs[0];
        const auto& g = self.grad;
        for (int k = 0; k < K; ++k) {
          auto& X = *self.inputs[k + 1];
          const auto& xv = X.value.storage();
          if (Wt.requires_grad) {
            T acc = T(0);
            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
            Wt.grad[k] += acc;
          }
          if (X.requires_grad) {
            const T wk = Wt.value[k];
            for (std::size_t i = 0; i < g.size(); ++i) X.grad[i] += wk * g[i];
          }
        }
      },
      "weighted_sum");
}

/// Mean softmax cross-entropy of (B, K, 1, 1) logits against class indices.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  const Shape s = logits.shape();
  const int B = s.n, K = static_cast<int>(s.size() / s.n);
  if (static_cast<int>(labels.size()) != B) fail(ErrorKind::Shape, "cross_entropy: label count != batch");
  std::vector<T> prob(s.size());
  T loss = T(0);
  const auto& z = logits.value().storage();
  for (int b = 0; b < B; ++b) {
    const int lab = labels[b];
    if (lab < 0 || lab >= K) fail(ErrorKind::Value, "cross_entropy: label out of range");
    const T* zr = z.data() + static_cast<std::size_t>(b) * K;
    T mx = zr[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, zr[k]);
    T sum = T(0);
    for (int k = 0; k < K; ++k) sum += (prob[b * K + k] = std::exp(zr[k] - mx));
    for (int k = 0; k < K; ++k) prob[b * K + k] /= sum;
    loss += std::log(sum) + mx - zr[lab];
  }
  loss /= static_cast<T>(B);
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result<T>(
      Tensor<T>(Shape{}, std::vector<T>{loss}), {logits},
      [prob = std::move(prob), lab = std::move(lab), B, K](Node<T>& self) {
        auto& L = *self.inputs[0];
        const T g = self.grad[0] / static_cast<T>(B);
        for (int b = 0; b < B; ++b)
          for (int k = 0; k < K; ++k)
            L.grad[b * K + k] += g * (prob[b * K + k] - (k == lab[b] ? T(1) : T(0)));
      },
      "cross_entropy");
}

}  // namespace sase
