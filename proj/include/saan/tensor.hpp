#pragma once

#include <Eigen/Core>

#include <initializer_list>
#include <span>
#include <vector>

#include "saan/common.hpp"

namespace saan {

/// Dense row-major N-dimensional array. Value semantics; storage is an
/// Eigen column array so elementwise math composes as Eigen expressions.
template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape, S fill = S(0));
  Tensor(Shape shape, Array values);
  Tensor(Shape shape, std::initializer_list<S> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, S value) { return Tensor(std::move(shape), value); }

  const Shape& shape() const { return shape_; }
  Index ndim() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const;
  Index size() const { return values_.size(); }
  bool empty() const { return shape_.empty(); }

  Array& values() { return values_; }
  const Array& values() const { return values_; }
  S* data() { return values_.data(); }
  const S* data() const { return values_.data(); }
  std::span<S> span() { return {values_.data(), static_cast<std::size_t>(values_.size())}; }
  std::span<const S> span() const {
    return {values_.data(), static_cast<std::size_t>(values_.size())};
  }

  S& operator[](Index i) { return values_[i]; }
  S operator[](Index i) const { return values_[i]; }

  /// 4-D accessor for NCHW tensors.
  S& at(Index n, Index c, Index h, Index w);
  S at(Index n, Index c, Index h, Index w) const;

  Tensor reshaped(Shape shape) const;

  template <typename T>
  Tensor<T> cast() const {
    return Tensor<T>(shape_, values_.template cast<T>().eval());
  }

  bool all_finite() const { return values_.allFinite(); }

 private:
  Shape shape_;
  Array values_;
};

/// Exact equality of shape and every bit of every value.
template <typename S>
bool bit_equal(const Tensor<S>& a, const Tensor<S>& b);

struct Dims4 {
  Index n, c, h, w;
};

/// Interprets a shape as NCHW; throws DimensionError otherwise.
Dims4 as_nchw(const Shape& shape, const char* what);

// Spatial transforms over the last two axes. Rotations turn counter-clockwise
// and require H == W.
template <typename S>
Tensor<S> flip_horizontal(const Tensor<S>& t);
template <typename S>
Tensor<S> flip_vertical(const Tensor<S>& t);
template <typename S>
Tensor<S> rotate90(const Tensor<S>& t, int quarter_turns);

/// Stack equally shaped tensors along a new leading axis.
template <typename S>
Tensor<S> stack(std::span<const Tensor<S>> items);

/// Slice `count` entries starting at `first` along the leading axis.
template <typename S>
Tensor<S> slice_leading(const Tensor<S>& t, Index first, Index count);

}  // namespace saan
