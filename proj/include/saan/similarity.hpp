#pragma once

#include "saan/ops.hpp"

namespace saan {

enum class Reduction { mean, sum };

struct ContrastiveConfig {
  double margin = 1.0;      // m; 1.0 puts the hinge at cos = 0.5 (60 degrees)
  double sqrt_eps = 1e-12;  // added under the square root of the distance
  Reduction reduction = Reduction::mean;

  void validate() const;
};

inline constexpr double kNormalizeEps = 1e-12;

/// Per-pixel cosine similarity of two NCHW feature maps -> [N,1,H,W].
template <typename S>
Var<S> cosine_similarity_map(const Var<S>& f1, const Var<S>& f2, S eps = S(kNormalizeEps));

/// d = sqrt(max(2 - 2 sim, 0) + sqrt_eps).
template <typename S>
Var<S> distance_from_similarity(const Var<S>& sim, S sqrt_eps);

template <typename S>
Var<S> cosine_distance_map(const Var<S>& f1, const Var<S>& f2, S sqrt_eps = S(1e-12));

/// Margin contrastive objective on a distance map:
///   1/2 (1 - y) d^2 + 1/2 y max(m - d, 0)^2
/// summed or averaged over every pixel of every sample.
template <typename S>
Var<S> contrastive_from_distance(const Var<S>& distance, const Tensor<S>& labels, S margin, Reduction reduction);

template <typename S>
Var<S> contrastive_loss(const Var<S>& f1, const Var<S>& f2, const Tensor<S>& labels,
                        const ContrastiveConfig& config = {});

/// Block-average a binary mask by `factor` and threshold: a coarse pixel is 1
/// iff at least half of its block changed.
template <typename S>
Tensor<S> downsample_labels(const Tensor<S>& labels, Index factor);

/// Throws ValueError unless every value is exactly 0 or 1.
template <typename S>
void check_binary(const Tensor<S>& labels, const char* what);

}  // namespace saan
