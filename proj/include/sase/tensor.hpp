#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sase {

enum class ErrorKind { Shape, Value, Numeric, Io, Format, Usage };

inline const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Shape: return "ShapeError";
    case ErrorKind::Value: return "ValueError";
    case ErrorKind::Numeric: return "NumericError";
    case ErrorKind::Io: return "IoError";
    case ErrorKind::Format: return "FormatError";
    case ErrorKind::Usage: return "UsageError";
  }
  return "Error";
}

/// Every failure raised by the library carries a machine-readable class.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

/// Four semantic extents (batch, channels, height, width). Lower-rank data
/// (vectors, matrices, scalars) uses extent 1 on the unused axes.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  constexpr std::size_t size() const noexcept {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }
  constexpr int operator[](int axis) const noexcept {
    return axis == 0 ? n : axis == 1 ? c : axis == 2 ? h : w;
  }
  constexpr int& at(int axis) noexcept { return axis == 0 ? n : axis == 1 ? c : axis == 2 ? h : w; }
  constexpr std::array<int, 4> dims() const noexcept { return {n, c, h, w}; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

/// Axis bitmask for reductions.
enum Axis : unsigned { kBatch = 1u, kChannel = 2u, kHeight = 4u, kWidth = 8u };
inline constexpr unsigned kSpatial = kHeight | kWidth;

constexpr Shape reduced_shape(Shape s, unsigned axes) noexcept {
  for (int a = 0; a < 4; ++a)
    if (axes & (1u << a)) s.at(a) = 1;
  return s;
}

/// Dense row-major (n, c, h, w) array.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.size(), fill) { check_extents(); }
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_.size())
      fail(ErrorKind::Shape, "tensor data length " + std::to_string(data_.size()) + " does not match " +
                                 shape_.str());
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::size_t index(int n, int c, int h, int w) const noexcept {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(int n, int c, int h, int w) noexcept { return data_[index(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const noexcept { return data_[index(n, c, h, w)]; }

  T item() const {
    if (data_.size() != 1) fail(ErrorKind::Shape, "item() on non-scalar tensor " + shape_.str());
    return data_[0];
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  Tensor reshaped(Shape s) const {
    if (s.size() != shape_.size()) fail(ErrorKind::Shape, "cannot reshape " + shape_.str() + " to " + s.str());
    return Tensor(s, data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_extents() const {
    for (int e : shape_.dims())
      if (e < 1) fail(ErrorKind::Shape, "tensor extents must be positive, got " + shape_.str());
  }

  Shape shape_{};
  std::vector<T> data_ = std::vector<T>(1, T(0));
};

}  // namespace sase
