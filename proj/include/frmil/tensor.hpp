#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "frmil/error.hpp"

namespace frmil {

using Shape = std::vector<std::size_t>;

/// Per-row (or per-token) validity flags; `false` marks padding.
using Mask = std::vector<bool>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::size_t count_true(const Mask& mask) {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

/// Dense row-major array. Pure value type; gradient tracking lives in Tape.
template <std::floating_point T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)) {
    check_extents();
    data.assign(shape_numel(shape), fill);
  }

  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    check_extents();
    if (data.size() != shape_numel(shape)) {
      throw DimensionError("tensor of shape " + shape_str(shape) + " given " +
                           std::to_string(data.size()) + " values");
    }
  }

  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

  std::size_t numel() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t rows() const noexcept { return shape.empty() ? 0 : shape[0]; }
  /// Trailing extent product; for a matrix this is the column count.
  std::size_t cols() const noexcept { return rows() == 0 ? 0 : numel() / rows(); }

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape));
    return data[0];
  }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](T v) { return std::isfinite(v); });
  }

  template <std::floating_point U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_extents() const {
    for (auto e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
  }
};

}  // namespace frmil
