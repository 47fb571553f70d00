#pragma once

#include <cmath>
#include <vector>

#include "saan/autodiff.hpp"
#include "saan/rng.hpp"

namespace saan::test {

template <typename S = double>
Tensor<S> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor<S> t(std::move(shape));
  Xoshiro256pp rng(seed);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

/// Values bounded away from zero, for probing relu and max-pool kinks.
template <typename S = double>
Tensor<S> random_away_from_zero(Shape shape, std::uint64_t seed, double gap = 0.05) {
  Tensor<S> t = random_tensor<S>(std::move(shape), seed);
  for (Index i = 0; i < t.size(); ++i) t[i] = t[i] >= 0 ? t[i] + static_cast<S>(gap) : t[i] - static_cast<S>(gap);
  return t;
}

template <typename S = double>
Tensor<S> random_mask(Shape shape, std::uint64_t seed, double p = 0.5) {
  Tensor<S> t(std::move(shape));
  Xoshiro256pp rng(seed);
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform() < p ? S(1) : S(0);
  return t;
}

/// Direct-loop cross-correlation oracle.
inline Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b,
                                  int stride, int pad) {
  const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const Index oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  Tensor<double> y(Shape{n, cout, oh, ow});
  for (Index i = 0; i < n; ++i)
    for (Index o = 0; o < cout; ++o)
      for (Index r = 0; r < oh; ++r)
        for (Index c = 0; c < ow; ++c) {
          double acc = b ? (*b)[o] : 0.0;
          for (Index k = 0; k < cin; ++k)
            for (Index u = 0; u < kh; ++u)
              for (Index v = 0; v < kw; ++v) {
                const Index yy = r * stride - pad + u, xx = c * stride - pad + v;
                if (yy < 0 || yy >= h || xx < 0 || xx >= wd) continue;
                acc += x.at(i, k, yy, xx) * w.at(o, k, u, v);
              }
          y.at(i, o, r, c) = acc;
        }
  return y;
}

inline double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace saan::test
