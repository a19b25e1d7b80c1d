// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "segpool/error.hpp"

namespace segpool {

/// Ordered list of positive extents. Feature maps use channels x height x width.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) { validate(); }

  [[nodiscard]] std::size_t rank() const noexcept { return dims_.size(); }
  [[nodiscard]] std::size_t operator[](std::size_t i) const { return dims_.at(i); }
  [[nodiscard]] const std::vector<std::size_t>& dims() const noexcept { return dims_; }

  [[nodiscard]] std::size_t numel() const noexcept {
    return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>{});
  }

  [[nodiscard]] std::string str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(dims_[i]);
    }
    return s + "]";
  }

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  void validate() const {
    for (auto d : dims_)
      if (d == 0) throw InvalidShape("shape extents must be >= 1, got " + str());
  }

  std::vector<std::size_t> dims_;
};

/// Allocator returning cache-line aligned blocks. Vectorized kernels peel
/// leading elements up to the first aligned address, so a fixed base
/// alignment keeps floating-point results independent of heap layout.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  [[nodiscard]] T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(shape_.numel(), fill) {}
  Tensor(Shape shape, const std::vector<double>& values)
      : shape_(std::move(shape)), values_(values.begin(), values.end()) {
    if (values_.size() != shape_.numel())
      throw InvalidShape("tensor of shape " + shape_.str() + " needs " + std::to_string(shape_.numel()) +
                         " values, got " + std::to_string(values_.size()));
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
  [[nodiscard]] bool empty() const noexcept { return values_.empty(); }

  [[nodiscard]] std::span<double> data() noexcept { return values_; }
  [[nodiscard]] std::span<const double> data() const noexcept { return values_; }
  [[nodiscard]] Storage& values() noexcept { return values_; }
  [[nodiscard]] const Storage& values() const noexcept { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  /// Element of a rank-3 tensor.
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return values_[(c * shape_[1] + y) * shape_[2] + x];
  }
  [[nodiscard]] double at(std::size_t c, std::size_t y, std::size_t x) const {
    return values_[(c * shape_[1] + y) * shape_[2] + x];
  }

  /// Scalar value of a single-element tensor.
  [[nodiscard]] double item() const {
    if (values_.size() != 1) throw ContractViolation("item() on tensor of shape " + shape_.str());
    return values_[0];
  }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  Storage values_;
};

/// Integer raster (labels, instance ids, predictions), row-major.
template <typename T>
struct Grid {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(std::size_t w, std::size_t h, T fill = T{}) : width(w), height(h), values(w * h, fill) {}

  [[nodiscard]] std::size_t size() const noexcept { return values.size(); }
  T& operator()(std::size_t y, std::size_t x) { return values[y * width + x]; }
  const T& operator()(std::size_t y, std::size_t x) const { return values[y * width + x]; }

  friend bool operator==(const Grid&, const Grid&) = default;
};

using LabelGrid = Grid<int>;

}  // namespace segpool
