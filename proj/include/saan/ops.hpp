#pragma once

#include <optional>
#include <vector>

#include "saan/autodiff.hpp"

namespace saan {

enum class PoolMode { max, avg };
enum class Activation { relu, sigmoid };
enum class ChannelReduce { sum, mean, max };

// Elementwise arithmetic. Operands must have equal rank; each axis must match
// or be 1 in one of them (broadcast). Gradients are summed over broadcast axes.
template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S>
Var<S> scale(const Var<S>& a, S factor);

/// Scalar (shape {1}) sum / mean of all elements.
template <typename S>
Var<S> sum(const Var<S>& a);
template <typename S>
Var<S> mean(const Var<S>& a);

template <typename S>
Var<S> relu(const Var<S>& x);
/// Numerically stable logistic; output clamped into the open interval (0, 1).
template <typename S>
Var<S> sigmoid(const Var<S>& x);
template <typename S>
Var<S> activation(const Var<S>& x, Activation kind);

/// Cross-correlation over NCHW input with OIHW weights.
template <typename S>
Var<S> conv2d(const Var<S>& input, const Var<S>& weight, const std::optional<Var<S>>& bias, int stride,
              int padding);

/// x[N, Din] * weight[Dout, Din]^T + bias[Dout].
template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias);

/// Windowed pooling without padding. Max-pool ties route to the first
/// element in row-major window order.
template <typename S>
Var<S> pool2d(const Var<S>& input, PoolMode mode, int kernel, int stride);

/// Spatial reduction to [N, C, 1, 1].
template <typename S>
Var<S> global_pool(const Var<S>& input, PoolMode mode);

/// Reduction over the channel axis to [N, 1, H, W]. Max ties go to the lowest channel.
template <typename S>
Var<S> channel_reduce(const Var<S>& input, ChannelReduce mode);

/// Each pixel's channel vector divided by max(||v||_2, eps).
template <typename S>
Var<S> channel_l2_normalize(const Var<S>& input, S eps);

/// 2x bilinear upsampling, half-pixel centers (align_corners = false).
template <typename S>
Var<S> upsample2x_bilinear(const Var<S>& input);

template <typename S>
Var<S> concat(const std::vector<Var<S>>& inputs, Index axis);
template <typename S>
Var<S> slice(const Var<S>& input, Index axis, Index first, Index count);
template <typename S>
std::vector<Var<S>> split(const Var<S>& input, Index axis, const std::vector<Index>& sizes);

template <typename S>
Var<S> reshape(const Var<S>& input, Shape shape);

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEps = 1e-5;

template <typename S>
struct BatchNormState {
  Tensor<S> running_mean;
  Tensor<S> running_var;

  explicit BatchNormState(Index channels = 1)
      : running_mean(Shape{channels}, S(0)), running_var(Shape{channels}, S(1)) {}
};

/// Training mode normalizes with batch statistics (biased variance) and
/// updates the running stats by momentum with the unbiased variance. Eval
/// mode normalizes with the running stats.
template <typename S>
Var<S> batchnorm2d(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, BatchNormState<S>& state,
                   bool training, double momentum = kBatchNormMomentum, double eps = kBatchNormEps);

/// Eval-mode overload: normalizes with the running stats, never mutates them.
template <typename S>
Var<S> batchnorm2d(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, const BatchNormState<S>& state,
                   double eps = kBatchNormEps);

}  // namespace saan
