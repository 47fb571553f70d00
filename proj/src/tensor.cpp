#include "saan/tensor.hpp"

#include <cstring>
#include <numeric>
#include <sstream>

namespace saan {

Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
  for (auto d : shape)
    if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
}

}  // namespace

template <typename S>
Tensor<S>::Tensor(Shape shape, S fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  values_ = Array::Constant(numel(shape_), fill);
}

template <typename S>
Tensor<S>::Tensor(Shape shape, Array values) : shape_(std::move(shape)), values_(std::move(values)) {
  check_shape(shape_);
  if (values_.size() != numel(shape_))
    throw DimensionError("value count " + std::to_string(values_.size()) + " does not match shape " +
                         to_string(shape_));
}

template <typename S>
Tensor<S>::Tensor(Shape shape, std::initializer_list<S> values) : shape_(std::move(shape)) {
  check_shape(shape_);
  if (static_cast<Index>(values.size()) != numel(shape_))
    throw DimensionError("value count does not match shape " + to_string(shape_));
  values_.resize(static_cast<Index>(values.size()));
  std::copy(values.begin(), values.end(), values_.data());
}

template <typename S>
Index Tensor<S>::dim(Index axis) const {
  if (axis < 0) axis += ndim();
  if (axis < 0 || axis >= ndim()) throw DimensionError("axis out of range for " + to_string(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

template <typename S>
S& Tensor<S>::at(Index n, Index c, Index h, Index w) {
  return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

template <typename S>
S Tensor<S>::at(Index n, Index c, Index h, Index w) const {
  return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

template <typename S>
Tensor<S> Tensor<S>::reshaped(Shape shape) const {
  if (numel(shape) != size())
    throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  return Tensor(std::move(shape), values_);
}

template <typename S>
bool bit_equal(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(S) * static_cast<std::size_t>(a.size())) == 0;
}

Dims4 as_nchw(const Shape& shape, const char* what) {
  if (shape.size() != 4)
    throw DimensionError(std::string(what) + ": expected NCHW tensor, got " + to_string(shape));
  return {shape[0], shape[1], shape[2], shape[3]};
}

namespace {

// Applies dst(plane, y, x) = src(plane, map(y, x)) over the last two axes.
template <typename S, typename Map>
Tensor<S> remap_planes(const Tensor<S>& t, Index out_h, Index out_w, Map map) {
  if (t.ndim() < 2) throw DimensionError("spatial transform needs at least 2 axes");
  const Index h = t.dim(-2), w = t.dim(-1);
  const Index planes = t.size() / (h * w);
  Shape shape = t.shape();
  shape[shape.size() - 2] = out_h;
  shape[shape.size() - 1] = out_w;
  Tensor<S> out(shape);
  for (Index p = 0; p < planes; ++p) {
    const S* src = t.data() + p * h * w;
    S* dst = out.data() + p * out_h * out_w;
    for (Index y = 0; y < out_h; ++y)
      for (Index x = 0; x < out_w; ++x) {
        auto [sy, sx] = map(y, x);
        dst[y * out_w + x] = src[sy * w + sx];
      }
  }
  return out;
}

}  // namespace

template <typename S>
Tensor<S> flip_horizontal(const Tensor<S>& t) {
  const Index w = t.dim(-1);
  return remap_planes(t, t.dim(-2), w, [w](Index y, Index x) { return std::pair{y, w - 1 - x}; });
}

template <typename S>
Tensor<S> flip_vertical(const Tensor<S>& t) {
  const Index h = t.dim(-2);
  return remap_planes(t, h, t.dim(-1), [h](Index y, Index x) { return std::pair{h - 1 - y, x}; });
}

template <typename S>
Tensor<S> rotate90(const Tensor<S>& t, int quarter_turns) {
  const Index h = t.dim(-2), w = t.dim(-1);
  if (h != w) throw DimensionError("rotation requires square images, got " + to_string(t.shape()));
  const int k = ((quarter_turns % 4) + 4) % 4;
  const Index n = h;
  switch (k) {
    case 0:
      return t;
    case 1:  // counter-clockwise: out(y, x) = in(x, n-1-y)
      return remap_planes(t, n, n, [n](Index y, Index x) { return std::pair{x, n - 1 - y}; });
    case 2:
      return remap_planes(t, n, n, [n](Index y, Index x) { return std::pair{n - 1 - y, n - 1 - x}; });
    default:
      return remap_planes(t, n, n, [n](Index y, Index x) { return std::pair{n - 1 - x, y}; });
  }
}

template <typename S>
Tensor<S> stack(std::span<const Tensor<S>> items) {
  if (items.empty()) throw DimensionError("stack of zero tensors");
  const Shape& inner = items[0].shape();
  Shape shape{static_cast<Index>(items.size())};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor<S> out(shape);
  const Index block = items[0].size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != inner)
      throw DimensionError("stack shape mismatch: " + to_string(items[i].shape()) + " vs " + to_string(inner));
    out.values().segment(static_cast<Index>(i) * block, block) = items[i].values();
  }
  return out;
}

template <typename S>
Tensor<S> slice_leading(const Tensor<S>& t, Index first, Index count) {
  if (first < 0 || count <= 0 || first + count > t.dim(0))
    throw DimensionError("leading slice out of range for " + to_string(t.shape()));
  Shape shape = t.shape();
  shape[0] = count;
  const Index block = t.size() / t.dim(0);
  return Tensor<S>(shape, t.values().segment(first * block, count * block).eval());
}

#define SAAN_INSTANTIATE(S)                                                   \
  template class Tensor<S>;                                                   \
  template bool bit_equal(const Tensor<S>&, const Tensor<S>&);                \
  template Tensor<S> flip_horizontal(const Tensor<S>&);                       \
  template Tensor<S> flip_vertical(const Tensor<S>&);                         \
  template Tensor<S> rotate90(const Tensor<S>&, int);                         \
  template Tensor<S> stack(std::span<const Tensor<S>>);                       \
  template Tensor<S> slice_leading(const Tensor<S>&, Index, Index);

SAAN_INSTANTIATE(float)
SAAN_INSTANTIATE(double)

}  // namespace saan
