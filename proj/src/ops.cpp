#include "saan/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace saan {

namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using MapRow = Eigen::Map<RowMat<S>>;

template <typename S>
using ConstMapRow = Eigen::Map<const RowMat<S>>;

// ---------------------------------------------------------------------------
// Broadcasting

struct Broadcast {
  Shape out;
  std::vector<Index> stride_a, stride_b;  // 0 on broadcast axes
  bool same = false;
};

std::vector<Index> contiguous_strides(const Shape& shape) {
  std::vector<Index> strides(shape.size());
  Index s = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    strides[i] = s;
    s *= shape[i];
  }
  return strides;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  if (a.size() != b.size())
    throw DimensionError(std::string(op) + ": rank mismatch " + to_string(a) + " vs " + to_string(b));
  const auto sa = contiguous_strides(a), sb = contiguous_strides(b);
  plan.out.resize(a.size());
  plan.stride_a.resize(a.size());
  plan.stride_b.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1)
      throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
    plan.out[i] = std::max(a[i], b[i]);
    plan.stride_a[i] = a[i] == 1 ? 0 : sa[i];
    plan.stride_b[i] = b[i] == 1 ? 0 : sb[i];
  }
  return plan;
}

// Calls fn(out_index, a_index, b_index) over every output element in order.
template <typename Fn>
void for_each_broadcast(const Broadcast& plan, Fn&& fn) {
  const Index total = numel(plan.out);
  if (plan.same) {
    for (Index i = 0; i < total; ++i) fn(i, i, i);
    return;
  }
  const std::size_t rank = plan.out.size();
  std::vector<Index> idx(rank, 0);
  Index ia = 0, ib = 0;
  const Index inner = plan.out[rank - 1];
  const Index inner_a = plan.stride_a[rank - 1], inner_b = plan.stride_b[rank - 1];
  for (Index i = 0; i < total; i += inner) {
    for (Index j = 0; j < inner; ++j) fn(i + j, ia + j * inner_a, ib + j * inner_b);
    // advance the outer multi-index
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      ia += plan.stride_a[d];
      ib += plan.stride_b[d];
      if (idx[d] < plan.out[d]) break;
      ia -= plan.stride_a[d] * idx[d];
      ib -= plan.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

template <typename S, typename Forward, typename GradA, typename GradB>
Var<S> binary_op(const char* name, const Var<S>& a, const Var<S>& b, Forward fwd, GradA grad_a, GradB grad_b) {
  const Broadcast plan = plan_broadcast(a.shape(), b.shape(), name);
  Tensor<S> out(plan.out);
  const S* pa = a.value().data();
  const S* pb = b.value().data();
  S* po = out.data();
  for_each_broadcast(plan, [&](Index i, Index ia, Index ib) { po[i] = fwd(pa[ia], pb[ib]); });
  return a.tape()->record(name, {a, b}, std::move(out), [a, b, plan, grad_a, grad_b](Tape<S>& t, const Tensor<S>& g) {
    const S* pa = a.value().data();
    const S* pb = b.value().data();
    const S* pg = g.data();
    Tensor<S>* ga = t.grad_buffer(a);
    Tensor<S>* gb = t.grad_buffer(b);
    S* qa = ga ? ga->data() : nullptr;
    S* qb = gb ? gb->data() : nullptr;
    for_each_broadcast(plan, [&](Index i, Index ia, Index ib) {
      if (qa) qa[ia] += grad_a(pg[i], pa[ia], pb[ib]);
      if (qb) qb[ib] += grad_b(pg[i], pa[ia], pb[ib]);
    });
  });
}

// ---------------------------------------------------------------------------
// im2col helpers (single image, CHW)

template <typename S>
void im2col(const S* image, Index channels, Index height, Index width, Index kh, Index kw, int stride, int pad,
            Index out_h, Index out_w, S* col) {
  const Index plane = out_h * out_w;
  for (Index c = 0; c < channels; ++c)
    for (Index ky = 0; ky < kh; ++ky)
      for (Index kx = 0; kx < kw; ++kx) {
        S* row = col + ((c * kh + ky) * kw + kx) * plane;
        const S* src = image + c * height * width;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ky;
          S* dst = row + oy * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(dst, dst + out_w, S(0));
            continue;
          }
          const S* line = src + iy * width;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < width) ? line[ix] : S(0);
          }
        }
      }
}

template <typename S>
void col2im(const S* col, Index channels, Index height, Index width, Index kh, Index kw, int stride, int pad,
            Index out_h, Index out_w, S* image) {
  const Index plane = out_h * out_w;
  for (Index c = 0; c < channels; ++c)
    for (Index ky = 0; ky < kh; ++ky)
      for (Index kx = 0; kx < kw; ++kx) {
        const S* row = col + ((c * kh + ky) * kw + kx) * plane;
        S* dst = image + c * height * width;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) continue;
          S* line = dst + iy * width;
          const S* src = row + oy * out_w;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < width) line[ix] += src[ox];
          }
        }
      }
}

template <typename S>
S stable_sigmoid(S x) {
  S s;
  if (x >= S(0)) {
    s = S(1) / (S(1) + std::exp(-x));
  } else {
    const S e = std::exp(x);
    s = e / (S(1) + e);
  }
  return std::clamp(s, std::numeric_limits<S>::min(), std::nextafter(S(1), S(0)));
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  return binary_op<S>(
      "add", a, b, [](S x, S y) { return x + y; }, [](S g, S, S) { return g; }, [](S g, S, S) { return g; });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  return binary_op<S>(
      "sub", a, b, [](S x, S y) { return x - y; }, [](S g, S, S) { return g; }, [](S g, S, S) { return -g; });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  return binary_op<S>(
      "mul", a, b, [](S x, S y) { return x * y; }, [](S g, S, S y) { return g * y; },
      [](S g, S x, S) { return g * x; });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
  Tensor<S> out(a.shape());
  out.values() = a.value().values() * factor;
  return a.tape()->record("scale", {a}, std::move(out), [a, factor](Tape<S>& t, const Tensor<S>& g) {
    if (auto* ga = t.grad_buffer(a)) ga->values() += g.values() * factor;
  });
}

template <typename S>
Var<S> sum(const Var<S>& a) {
  double acc = 0;
  for (S v : a.value().span()) acc += v;
  Tensor<S> out(Shape{1}, static_cast<S>(acc));
  return a.tape()->record("sum", {a}, std::move(out), [a](Tape<S>& t, const Tensor<S>& g) {
    if (auto* ga = t.grad_buffer(a)) ga->values() += g[0];
  });
}

template <typename S>
Var<S> mean(const Var<S>& a) {
  return scale(sum(a), S(1) / static_cast<S>(a.value().size()));
}

template <typename S>
Var<S> relu(const Var<S>& x) {
  Tensor<S> out(x.shape());
  out.values() = x.value().values().max(S(0));
  return x.tape()->record("relu", {x}, std::move(out), [x](Tape<S>& t, const Tensor<S>& g) {
    if (auto* gx = t.grad_buffer(x))
      gx->values() += (x.value().values() > S(0)).select(g.values(), S(0));
  });
}

template <typename S>
Var<S> sigmoid(const Var<S>& x) {
  Tensor<S> out(x.shape());
  out.values() = x.value().values().unaryExpr([](S v) { return stable_sigmoid(v); });
  // The backward pass reads the output, which lands at the next record id.
  const Var<S> y(x.tape(), x.tape()->size());
  return x.tape()->record("sigmoid", {x}, std::move(out), [x, y](Tape<S>& t, const Tensor<S>& g) {
    if (auto* gx = t.grad_buffer(x)) {
      const auto& s = y.value().values();
      gx->values() += g.values() * s * (S(1) - s);
    }
  });
}

template <typename S>
Var<S> activation(const Var<S>& x, Activation kind) {
  return kind == Activation::relu ? relu(x) : sigmoid(x);
}

// ---------------------------------------------------------------------------
// Convolution / linear

template <typename S>
Var<S> conv2d(const Var<S>& input, const Var<S>& weight, const std::optional<Var<S>>& bias, int stride,
              int padding) {
  const Dims4 x = as_nchw(input.shape(), "conv2d input");
  const Dims4 wt = as_nchw(weight.shape(), "conv2d weight");
  if (stride < 1 || padding < 0) throw DimensionError("conv2d: stride must be >= 1 and padding >= 0");
  if (wt.c != x.c)
    throw DimensionError("conv2d: input has " + std::to_string(x.c) + " channels, weight expects " +
                         std::to_string(wt.c));
  if (bias && bias->shape() != Shape{wt.n})
    throw DimensionError("conv2d: bias shape " + to_string(bias->shape()) + " does not match " +
                         std::to_string(wt.n) + " output channels");
  if (x.h + 2 * padding < wt.h || x.w + 2 * padding < wt.w)
    throw DimensionError("conv2d: kernel larger than padded input");
  const Index out_h = (x.h + 2 * padding - wt.h) / stride + 1;
  const Index out_w = (x.w + 2 * padding - wt.w) / stride + 1;
  if (out_h <= 0 || out_w <= 0) throw DimensionError("conv2d: zero-sized output");

  const Index cout = wt.n, k = wt.c * wt.h * wt.w, plane = out_h * out_w;
  const bool pointwise = wt.h == 1 && wt.w == 1 && stride == 1 && padding == 0;
  Tensor<S> out(Shape{x.n, cout, out_h, out_w});
  ConstMapRow<S> w_mat(weight.value().data(), cout, k);
  RowMat<S> col(pointwise ? 0 : k, pointwise ? 0 : plane);
  for (Index n = 0; n < x.n; ++n) {
    const S* image = input.value().data() + n * x.c * x.h * x.w;
    MapRow<S> out_mat(out.data() + n * cout * plane, cout, plane);
    if (pointwise) {
      out_mat.noalias() = w_mat * ConstMapRow<S>(image, k, plane);
    } else {
      im2col(image, x.c, x.h, x.w, wt.h, wt.w, stride, padding, out_h, out_w, col.data());
      out_mat.noalias() = w_mat * col;
    }
    if (bias) out_mat.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(bias->value().data(), cout);
  }

  std::vector<Var<S>> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  return input.tape()->record(
      "conv2d", std::move(inputs), std::move(out),
      [input, weight, bias, stride, padding, x, wt, out_h, out_w, pointwise](Tape<S>& t, const Tensor<S>& g) {
        const Index cout = wt.n, k = wt.c * wt.h * wt.w, plane = out_h * out_w;
        Tensor<S>* gx = t.grad_buffer(input);
        Tensor<S>* gw = t.grad_buffer(weight);
        Tensor<S>* gb = bias ? t.grad_buffer(*bias) : nullptr;
        ConstMapRow<S> w_mat(weight.value().data(), cout, k);
        RowMat<S> col(pointwise ? 0 : k, pointwise ? 0 : plane);
        RowMat<S> dcol(pointwise ? 0 : k, pointwise ? 0 : plane);
        for (Index n = 0; n < x.n; ++n) {
          ConstMapRow<S> g_mat(g.data() + n * cout * plane, cout, plane);
          const S* image = input.value().data() + n * x.c * x.h * x.w;
          if (gb) Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(gb->data(), cout) += g_mat.rowwise().sum();
          if (gw) {
            MapRow<S> gw_mat(gw->data(), cout, k);
            if (pointwise) {
              gw_mat.noalias() += g_mat * ConstMapRow<S>(image, k, plane).transpose();
            } else {
              im2col(image, x.c, x.h, x.w, wt.h, wt.w, stride, padding, out_h, out_w, col.data());
              gw_mat.noalias() += g_mat * col.transpose();
            }
          }
          if (gx) {
            S* gimage = gx->data() + n * x.c * x.h * x.w;
            if (pointwise) {
              MapRow<S>(gimage, k, plane).noalias() += w_mat.transpose() * g_mat;
            } else {
              dcol.noalias() = w_mat.transpose() * g_mat;
              col2im(dcol.data(), x.c, x.h, x.w, wt.h, wt.w, stride, padding, out_h, out_w, gimage);
            }
          }
        }
      });
}

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
  if (x.value().ndim() != 2 || weight.value().ndim() != 2 || bias.value().ndim() != 1)
    throw DimensionError("linear: expected x[N,Din], weight[Dout,Din], bias[Dout]");
  const Index n = x.shape()[0], din = x.shape()[1], dout = weight.shape()[0];
  if (weight.shape()[1] != din)
    throw DimensionError("linear: input width " + std::to_string(din) + " does not match weight " +
                         to_string(weight.shape()));
  if (bias.shape()[0] != dout) throw DimensionError("linear: bias size does not match output width");
  Tensor<S> out(Shape{n, dout});
  MapRow<S> o(out.data(), n, dout);
  o.noalias() = ConstMapRow<S>(x.value().data(), n, din) * ConstMapRow<S>(weight.value().data(), dout, din).transpose();
  o.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(bias.value().data(), dout);
  return x.tape()->record("linear", {x, weight, bias}, std::move(out), [x, weight, bias, n, din, dout](Tape<S>& t, const Tensor<S>& g) {
    ConstMapRow<S> gm(g.data(), n, dout);
    if (auto* gx = t.grad_buffer(x))
      MapRow<S>(gx->data(), n, din).noalias() += gm * ConstMapRow<S>(weight.value().data(), dout, din);
    if (auto* gw = t.grad_buffer(weight))
      MapRow<S>(gw->data(), dout, din).noalias() += gm.transpose() * ConstMapRow<S>(x.value().data(), n, din);
    if (auto* gb = t.grad_buffer(bias))
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(gb->data(), dout) += gm.colwise().sum();
  });
}

// ---------------------------------------------------------------------------
// Pooling

template <typename S>
Var<S> pool2d(const Var<S>& input, PoolMode mode, int kernel, int stride) {
  const Dims4 d = as_nchw(input.shape(), "pool2d input");
  if (kernel < 1 || stride < 1) throw DimensionError("pool2d: kernel and stride must be positive");
  if (kernel > d.h || kernel > d.w) throw DimensionError("pool2d: window larger than input " + to_string(input.shape()));
  const Index oh = (d.h - kernel) / stride + 1, ow = (d.w - kernel) / stride + 1;
  Tensor<S> out(Shape{d.n, d.c, oh, ow});
  std::vector<Index> argmax(mode == PoolMode::max ? static_cast<std::size_t>(out.size()) : 0);
  const S* src = input.value().data();
  const S inv = S(1) / static_cast<S>(kernel * kernel);
  for (Index p = 0; p < d.n * d.c; ++p)
    for (Index oy = 0; oy < oh; ++oy)
      for (Index ox = 0; ox < ow; ++ox) {
        const Index o = (p * oh + oy) * ow + ox;
        if (mode == PoolMode::max) {
          Index best = -1;
          for (Index ky = 0; ky < kernel; ++ky)
            for (Index kx = 0; kx < kernel; ++kx) {
              const Index i = (p * d.h + oy * stride + ky) * d.w + ox * stride + kx;
              if (best < 0 || src[i] > src[best]) best = i;
            }
          argmax[static_cast<std::size_t>(o)] = best;
          out[o] = src[best];
        } else {
          double acc = 0;
          for (Index ky = 0; ky < kernel; ++ky)
            for (Index kx = 0; kx < kernel; ++kx) acc += src[(p * d.h + oy * stride + ky) * d.w + ox * stride + kx];
          out[o] = static_cast<S>(acc) * inv;
        }
      }
  return input.tape()->record(
      "pool2d", {input}, std::move(out),
      [input, mode, kernel, stride, d, oh, ow, argmax = std::move(argmax), inv](Tape<S>& t, const Tensor<S>& g) {
        auto* gx = t.grad_buffer(input);
        if (!gx) return;
        if (mode == PoolMode::max) {
          for (Index o = 0; o < g.size(); ++o) (*gx)[argmax[static_cast<std::size_t>(o)]] += g[o];
          return;
        }
        for (Index p = 0; p < d.n * d.c; ++p)
          for (Index oy = 0; oy < oh; ++oy)
            for (Index ox = 0; ox < ow; ++ox) {
              const S share = g[(p * oh + oy) * ow + ox] * inv;
              for (Index ky = 0; ky < kernel; ++ky)
                for (Index kx = 0; kx < kernel; ++kx) (*gx)[(p * d.h + oy * stride + ky) * d.w + ox * stride + kx] += share;
            }
      });
}

template <typename S>
Var<S> global_pool(const Var<S>& input, PoolMode mode) {
  const Dims4 d = as_nchw(input.shape(), "global_pool input");
  const Index plane = d.h * d.w;
  Tensor<S> out(Shape{d.n, d.c, 1, 1});
  std::vector<Index> argmax(mode == PoolMode::max ? static_cast<std::size_t>(d.n * d.c) : 0);
  const S* src = input.value().data();
  for (Index p = 0; p < d.n * d.c; ++p) {
    const S* v = src + p * plane;
    if (mode == PoolMode::max) {
      const Index best = std::max_element(v, v + plane) - v;  // first maximum
      argmax[static_cast<std::size_t>(p)] = best;
      out[p] = v[best];
    } else {
      double acc = 0;
      for (Index i = 0; i < plane; ++i) acc += v[i];
      out[p] = static_cast<S>(acc / static_cast<double>(plane));
    }
  }
  return input.tape()->record("global_pool", {input}, std::move(out),
                              [input, mode, d, plane, argmax = std::move(argmax)](Tape<S>& t, const Tensor<S>& g) {
                                auto* gx = t.grad_buffer(input);
                                if (!gx) return;
                                for (Index p = 0; p < d.n * d.c; ++p) {
                                  if (mode == PoolMode::max) {
                                    (*gx)[p * plane + argmax[static_cast<std::size_t>(p)]] += g[p];
                                  } else {
                                    gx->values().segment(p * plane, plane) += g[p] / static_cast<S>(plane);
                                  }
                                }
                              });
}

template <typename S>
Var<S> channel_reduce(const Var<S>& input, ChannelReduce mode) {
  const Dims4 d = as_nchw(input.shape(), "channel_reduce input");
  const Index plane = d.h * d.w;
  Tensor<S> out(Shape{d.n, 1, d.h, d.w});
  std::vector<Index> argmax(mode == ChannelReduce::max ? static_cast<std::size_t>(d.n * plane) : 0);
  const S* src = input.value().data();
  for (Index n = 0; n < d.n; ++n)
    for (Index i = 0; i < plane; ++i) {
      const S* base = src + n * d.c * plane + i;
      if (mode == ChannelReduce::max) {
        Index best = 0;
        for (Index c = 1; c < d.c; ++c)
          if (base[c * plane] > base[best * plane]) best = c;
        argmax[static_cast<std::size_t>(n * plane + i)] = best;
        out[n * plane + i] = base[best * plane];
      } else {
        double acc = 0;
        for (Index c = 0; c < d.c; ++c) acc += base[c * plane];
        if (mode == ChannelReduce::mean) acc /= static_cast<double>(d.c);
        out[n * plane + i] = static_cast<S>(acc);
      }
    }
  return input.tape()->record("channel_reduce", {input}, std::move(out),
                              [input, mode, d, plane, argmax = std::move(argmax)](Tape<S>& t, const Tensor<S>& g) {
                                auto* gx = t.grad_buffer(input);
                                if (!gx) return;
                                const S share = mode == ChannelReduce::mean ? S(1) / static_cast<S>(d.c) : S(1);
                                for (Index n = 0; n < d.n; ++n)
                                  for (Index i = 0; i < plane; ++i) {
                                    S* base = gx->data() + n * d.c * plane + i;
                                    const S gi = g[n * plane + i];
                                    if (mode == ChannelReduce::max) {
                                      base[argmax[static_cast<std::size_t>(n * plane + i)] * plane] += gi;
                                    } else {
                                      for (Index c = 0; c < d.c; ++c) base[c * plane] += gi * share;
                                    }
                                  }
                              });
}

template <typename S>
Var<S> channel_l2_normalize(const Var<S>& input, S eps) {
  const Dims4 d = as_nchw(input.shape(), "channel_l2_normalize input");
  const Index plane = d.h * d.w;
  Tensor<S> out(input.shape());
  Tensor<S> denom(Shape{d.n, 1, d.h, d.w});
  const S* src = input.value().data();
  for (Index n = 0; n < d.n; ++n)
    for (Index i = 0; i < plane; ++i) {
      const S* base = src + n * d.c * plane + i;
      double sq = 0;
      for (Index c = 0; c < d.c; ++c) sq += static_cast<double>(base[c * plane]) * base[c * plane];
      const S r = std::max(static_cast<S>(std::sqrt(sq)), eps);
      denom[n * plane + i] = r;
      S* dst = out.data() + n * d.c * plane + i;
      for (Index c = 0; c < d.c; ++c) dst[c * plane] = base[c * plane] / r;
    }
  return input.tape()->record(
      "channel_l2_normalize", {input}, std::move(out),
      [input, d, plane, eps, denom = std::move(denom)](Tape<S>& t, const Tensor<S>& g) {
        auto* gx = t.grad_buffer(input);
        if (!gx) return;
        const S* src = input.value().data();
        for (Index n = 0; n < d.n; ++n)
          for (Index i = 0; i < plane; ++i) {
            const Index off = n * d.c * plane + i;
            const S r = denom[n * plane + i];
            if (r <= eps) {
              // Clamped branch: y = x / eps.
              for (Index c = 0; c < d.c; ++c) (*gx)[off + c * plane] += g[off + c * plane] / r;
              continue;
            }
            // y = x / |x|;  dx = (g - y (y . g)) / |x|
            double dot = 0;
            for (Index c = 0; c < d.c; ++c) dot += static_cast<double>(g[off + c * plane]) * src[off + c * plane];
            const S proj = static_cast<S>(dot) / (r * r);
            for (Index c = 0; c < d.c; ++c)
              (*gx)[off + c * plane] += (g[off + c * plane] - src[off + c * plane] * proj) / r;
          }
      });
}

// ---------------------------------------------------------------------------
// Resampling

namespace {

struct Tap {
  Index lo, hi;
  double w_hi;  // weight of hi; lo gets 1 - w_hi
};

// Half-pixel-center source taps for an exact 2x enlargement of `size` samples.
std::vector<Tap> bilinear_taps(Index size) {
  std::vector<Tap> taps(static_cast<std::size_t>(2 * size));
  for (Index o = 0; o < 2 * size; ++o) {
    const double src = std::max((static_cast<double>(o) + 0.5) / 2.0 - 0.5, 0.0);
    const Index lo = std::min(static_cast<Index>(std::floor(src)), size - 1);
    const Index hi = std::min(lo + 1, size - 1);
    taps[static_cast<std::size_t>(o)] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

template <typename S>
Var<S> upsample2x_bilinear(const Var<S>& input) {
  const Dims4 d = as_nchw(input.shape(), "upsample2x_bilinear input");
  const Index oh = 2 * d.h, ow = 2 * d.w;
  auto ty = bilinear_taps(d.h), tx = bilinear_taps(d.w);
  Tensor<S> out(Shape{d.n, d.c, oh, ow});
  const S* src = input.value().data();
  for (Index p = 0; p < d.n * d.c; ++p) {
    const S* plane = src + p * d.h * d.w;
    S* dst = out.data() + p * oh * ow;
    for (Index y = 0; y < oh; ++y) {
      const Tap& a = ty[static_cast<std::size_t>(y)];
      const S wy = static_cast<S>(a.w_hi);
      for (Index x = 0; x < ow; ++x) {
        const Tap& b = tx[static_cast<std::size_t>(x)];
        const S wx = static_cast<S>(b.w_hi);
        const S top = plane[a.lo * d.w + b.lo] * (S(1) - wx) + plane[a.lo * d.w + b.hi] * wx;
        const S bottom = plane[a.hi * d.w + b.lo] * (S(1) - wx) + plane[a.hi * d.w + b.hi] * wx;
        dst[y * ow + x] = top * (S(1) - wy) + bottom * wy;
      }
    }
  }
  return input.tape()->record("upsample2x_bilinear", {input}, std::move(out),
                              [input, d, oh, ow, ty = std::move(ty), tx = std::move(tx)](Tape<S>& t, const Tensor<S>& g) {
                                auto* gx = t.grad_buffer(input);
                                if (!gx) return;
                                for (Index p = 0; p < d.n * d.c; ++p) {
                                  S* plane = gx->data() + p * d.h * d.w;
                                  const S* gp = g.data() + p * oh * ow;
                                  for (Index y = 0; y < oh; ++y) {
                                    const Tap& a = ty[static_cast<std::size_t>(y)];
                                    const S wy = static_cast<S>(a.w_hi);
                                    for (Index x = 0; x < ow; ++x) {
                                      const Tap& b = tx[static_cast<std::size_t>(x)];
                                      const S wx = static_cast<S>(b.w_hi);
                                      const S gv = gp[y * ow + x];
                                      plane[a.lo * d.w + b.lo] += gv * (S(1) - wy) * (S(1) - wx);
                                      plane[a.lo * d.w + b.hi] += gv * (S(1) - wy) * wx;
                                      plane[a.hi * d.w + b.lo] += gv * wy * (S(1) - wx);
                                      plane[a.hi * d.w + b.hi] += gv * wy * wx;
                                    }
                                  }
                                }
                              });
}

// ---------------------------------------------------------------------------
// Shape manipulation

namespace {

// outer = product of dims before axis, inner = product after.
void axis_split(const Shape& shape, Index axis, Index& outer, Index& inner) {
  outer = 1;
  inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) inner *= shape[static_cast<std::size_t>(i)];
}

Index normalize_axis(Index axis, Index rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("axis out of range");
  return axis;
}

}  // namespace

template <typename S>
Var<S> concat(const std::vector<Var<S>>& inputs, Index axis) {
  if (inputs.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = inputs[0].shape();
  axis = normalize_axis(axis, static_cast<Index>(first.size()));
  Shape shape = first;
  shape[static_cast<std::size_t>(axis)] = 0;
  std::vector<Index> sizes;
  for (const auto& v : inputs) {
    const Shape& s = v.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      if (static_cast<Index>(i) != axis && s[i] != first[i]) ok = false;
    if (!ok) throw DimensionError("concat: shape " + to_string(s) + " incompatible with " + to_string(first));
    sizes.push_back(s[static_cast<std::size_t>(axis)]);
    shape[static_cast<std::size_t>(axis)] += sizes.back();
  }
  if (inputs.size() == 1) {
    Tensor<S> out = inputs[0].value();
    return inputs[0].tape()->record("concat", inputs, std::move(out), [v = inputs[0]](Tape<S>& t, const Tensor<S>& g) {
      t.accumulate(v, g);
    });
  }
  Index outer, inner;
  axis_split(shape, axis, outer, inner);
  const Index total_axis = shape[static_cast<std::size_t>(axis)];
  Tensor<S> out(shape);
  Index offset = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Index block = sizes[k] * inner;
    const S* src = inputs[k].value().data();
    for (Index o = 0; o < outer; ++o)
      std::copy(src + o * block, src + (o + 1) * block, out.data() + o * total_axis * inner + offset * inner);
    offset += sizes[k];
  }
  return inputs[0].tape()->record("concat", inputs, std::move(out),
                                  [inputs, sizes, outer, inner, total_axis](Tape<S>& t, const Tensor<S>& g) {
                                    Index offset = 0;
                                    for (std::size_t k = 0; k < inputs.size(); ++k) {
                                      const Index block = sizes[k] * inner;
                                      if (auto* gk = t.grad_buffer(inputs[k])) {
                                        for (Index o = 0; o < outer; ++o)
                                          gk->values().segment(o * block, block) +=
                                              g.values().segment(o * total_axis * inner + offset * inner, block);
                                      }
                                      offset += sizes[k];
                                    }
                                  });
}

template <typename S>
Var<S> slice(const Var<S>& input, Index axis, Index first, Index count) {
  const Shape& in_shape = input.shape();
  axis = normalize_axis(axis, static_cast<Index>(in_shape.size()));
  const Index extent = in_shape[static_cast<std::size_t>(axis)];
  if (first < 0 || count <= 0 || first + count > extent)
    throw DimensionError("slice out of range on axis of size " + std::to_string(extent));
  Index outer, inner;
  axis_split(in_shape, axis, outer, inner);
  Shape shape = in_shape;
  shape[static_cast<std::size_t>(axis)] = count;
  Tensor<S> out(shape);
  const Index block = count * inner;
  for (Index o = 0; o < outer; ++o)
    out.values().segment(o * block, block) = input.value().values().segment(o * extent * inner + first * inner, block);
  return input.tape()->record("slice", {input}, std::move(out),
                              [input, outer, inner, extent, first, block](Tape<S>& t, const Tensor<S>& g) {
                                auto* gx = t.grad_buffer(input);
                                if (!gx) return;
                                for (Index o = 0; o < outer; ++o)
                                  gx->values().segment(o * extent * inner + first * inner, block) +=
                                      g.values().segment(o * block, block);
                              });
}

template <typename S>
std::vector<Var<S>> split(const Var<S>& input, Index axis, const std::vector<Index>& sizes) {
  std::vector<Var<S>> parts;
  Index first = 0;
  for (Index s : sizes) {
    parts.push_back(slice(input, axis, first, s));
    first += s;
  }
  if (first != input.value().dim(axis)) throw DimensionError("split sizes do not cover the axis");
  return parts;
}

template <typename S>
Var<S> reshape(const Var<S>& input, Shape shape) {
  Tensor<S> out = input.value().reshaped(std::move(shape));
  return input.tape()->record("reshape", {input}, std::move(out), [input](Tape<S>& t, const Tensor<S>& g) {
    if (auto* gx = t.grad_buffer(input)) gx->values() += g.values();
  });
}

// ---------------------------------------------------------------------------
// Batch normalization

namespace {

// `update` non-null selects training mode.
template <typename S>
Var<S> batchnorm_impl(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, const BatchNormState<S>& state,
                      BatchNormState<S>* update, double momentum, double eps) {
  const bool training = update != nullptr;
  const Dims4 d = as_nchw(x.shape(), "batchnorm2d input");
  if (gamma.shape() != Shape{d.c} || beta.shape() != Shape{d.c} || state.running_mean.shape() != Shape{d.c})
    throw DimensionError("batchnorm2d: parameter shapes do not match " + std::to_string(d.c) + " channels");
  const Index plane = d.h * d.w;
  const Index count = d.n * plane;
  Tensor<S> inv_std(Shape{d.c});
  Tensor<S> xhat(x.shape());
  Tensor<S> out(x.shape());
  const S* src = x.value().data();
  for (Index c = 0; c < d.c; ++c) {
    double mu, var;
    if (training) {
      double acc = 0;
      for (Index n = 0; n < d.n; ++n)
        for (Index i = 0; i < plane; ++i) acc += src[(n * d.c + c) * plane + i];
      mu = acc / static_cast<double>(count);
      double sq = 0;
      for (Index n = 0; n < d.n; ++n)
        for (Index i = 0; i < plane; ++i) {
          const double dv = src[(n * d.c + c) * plane + i] - mu;
          sq += dv * dv;
        }
      var = sq / static_cast<double>(count);
      const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
      update->running_mean[c] = static_cast<S>((1.0 - momentum) * state.running_mean[c] + momentum * mu);
      update->running_var[c] = static_cast<S>((1.0 - momentum) * state.running_var[c] + momentum * unbiased);
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    const S is = static_cast<S>(1.0 / std::sqrt(var + eps));
    inv_std[c] = is;
    const S g = gamma.value()[c], b = beta.value()[c], m = static_cast<S>(mu);
    for (Index n = 0; n < d.n; ++n)
      for (Index i = 0; i < plane; ++i) {
        const Index k = (n * d.c + c) * plane + i;
        xhat[k] = (src[k] - m) * is;
        out[k] = g * xhat[k] + b;
      }
  }
  return x.tape()->record(
      "batchnorm2d", {x, gamma, beta}, std::move(out),
      [x, gamma, beta, training, d, plane, count, inv_std = std::move(inv_std), xhat = std::move(xhat)](
          Tape<S>& t, const Tensor<S>& g) {
        auto* gx = t.grad_buffer(x);
        auto* gg = t.grad_buffer(gamma);
        auto* gb = t.grad_buffer(beta);
        for (Index c = 0; c < d.c; ++c) {
          double sum_g = 0, sum_gx = 0;
          for (Index n = 0; n < d.n; ++n)
            for (Index i = 0; i < plane; ++i) {
              const Index k = (n * d.c + c) * plane + i;
              sum_g += g[k];
              sum_gx += static_cast<double>(g[k]) * xhat[k];
            }
          if (gg) (*gg)[c] += static_cast<S>(sum_gx);
          if (gb) (*gb)[c] += static_cast<S>(sum_g);
          if (!gx) continue;
          const S gam = gamma.value()[c], is = inv_std[c];
          if (training) {
            const S mean_g = static_cast<S>(sum_g / static_cast<double>(count));
            const S mean_gx = static_cast<S>(sum_gx / static_cast<double>(count));
            for (Index n = 0; n < d.n; ++n)
              for (Index i = 0; i < plane; ++i) {
                const Index k = (n * d.c + c) * plane + i;
                (*gx)[k] += gam * is * (g[k] - mean_g - xhat[k] * mean_gx);
              }
          } else {
            for (Index n = 0; n < d.n; ++n)
              for (Index i = 0; i < plane; ++i) {
                const Index k = (n * d.c + c) * plane + i;
                (*gx)[k] += gam * is * g[k];
              }
          }
        }
      });
}

}  // namespace

template <typename S>
Var<S> batchnorm2d(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, BatchNormState<S>& state,
                   bool training, double momentum, double eps) {
  return batchnorm_impl(x, gamma, beta, state, training ? &state : nullptr, momentum, eps);
}

template <typename S>
Var<S> batchnorm2d(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, const BatchNormState<S>& state,
                   double eps) {
  return batchnorm_impl<S>(x, gamma, beta, state, nullptr, 0.0, eps);
}

#define SAAN_INSTANTIATE_OPS(S)                                                                         \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                    \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                                    \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                                    \
  template Var<S> scale(const Var<S>&, S);                                                              \
  template Var<S> sum(const Var<S>&);                                                                   \
  template Var<S> mean(const Var<S>&);                                                                  \
  template Var<S> relu(const Var<S>&);                                                                  \
  template Var<S> sigmoid(const Var<S>&);                                                               \
  template Var<S> activation(const Var<S>&, Activation);                                                \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const std::optional<Var<S>>&, int, int);         \
  template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                                  \
  template Var<S> pool2d(const Var<S>&, PoolMode, int, int);                                            \
  template Var<S> global_pool(const Var<S>&, PoolMode);                                                 \
  template Var<S> channel_reduce(const Var<S>&, ChannelReduce);                                         \
  template Var<S> channel_l2_normalize(const Var<S>&, S);                                               \
  template Var<S> upsample2x_bilinear(const Var<S>&);                                                   \
  template Var<S> concat(const std::vector<Var<S>>&, Index);                                            \
  template Var<S> slice(const Var<S>&, Index, Index, Index);                                            \
  template std::vector<Var<S>> split(const Var<S>&, Index, const std::vector<Index>&);                  \
  template Var<S> reshape(const Var<S>&, Shape);                                                        \
  template Var<S> batchnorm2d(const Var<S>&, const Var<S>&, const Var<S>&, BatchNormState<S>&, bool, double, \
                              double);                                                                   \
  template Var<S> batchnorm2d(const Var<S>&, const Var<S>&, const Var<S>&, const BatchNormState<S>&, double);

SAAN_INSTANTIATE_OPS(float)
SAAN_INSTANTIATE_OPS(double)

}  // namespace saan
