#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lgm/errors.hpp"

namespace lgm {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

enum class DType { f32, f64 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::f32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::f64;
}

// Dense row-major N-d array. Extents are non-negative; zero extents are
// allowed so that empty channel blocks can take part in concatenation.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(checked_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != checked_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::int64_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // index(i0..ik) = ((i0*s1+i1)*s2+...)
  std::size_t offset(std::initializer_list<std::int64_t> idx) const {
    if (idx.size() != shape_.size()) {
      throw ShapeError("index rank " + std::to_string(idx.size()) + " vs tensor rank " +
                       std::to_string(shape_.size()));
    }
    std::int64_t off = 0;
    std::size_t axis = 0;
    for (auto i : idx) {
      if (i < 0 || i >= shape_[axis]) {
        throw ShapeError("index " + std::to_string(i) + " out of range on axis " +
                         std::to_string(axis) + " of " + shape_str(shape_));
      }
      off = off * shape_[axis] + i;
      ++axis;
    }
    return static_cast<std::size_t>(off);
  }
  T& at(std::initializer_list<std::int64_t> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<std::int64_t> idx) const { return data_[offset(idx)]; }

  Tensor reshaped(Shape shape) const {
    if (checked_numel(shape) != static_cast<std::int64_t>(data_.size())) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  static std::int64_t checked_numel(const Shape& shape) {
    for (auto e : shape) {
      if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    }
    return shape_numel(shape);
  }

  Shape shape_;
  std::vector<T> data_;
};

// True if every element is finite.
template <typename T>
bool all_finite(const Tensor<T>& t);

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

// Bitwise equality of shape and payload.
template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace lgm
