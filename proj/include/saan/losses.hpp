#pragma once

#include <vector>

#include "saan/similarity.hpp"

namespace saan {

struct AblationFlags;

struct LossConfig {
  double w = 0.3;  // weight of the contrastive and deep-supervision terms
  double dice_smooth = 1.0;
  double prediction_threshold = 0.5;

  void validate() const;
};

/// 1 - (2 sum(p g) + smooth) / (sum(p) + sum(g) + smooth), p = sigmoid(logits);
/// sums run over the whole batch.
template <typename S>
Var<S> dice_loss(const Var<S>& logits, const Tensor<S>& targets, S smooth = S(1));

/// Mean binary cross-entropy on logits: max(x,0) - x y + log(1 + exp(-|x|)).
template <typename S>
Var<S> cross_entropy_loss(const Var<S>& logits, const Tensor<S>& targets);

/// Dice + CE of one decoder head against labels downsampled to its resolution.
template <typename S>
Var<S> aux_loss(const Var<S>& aux_logits, const Tensor<S>& labels, Index factor, S smooth = S(1));

template <typename S>
struct LossBreakdown {
  Var<S> total;
  Var<S> seg;
  double total_value = 0;
  double seg_value = 0;
  double con_value = 0;  // 0 when the similarity term is disabled
  double aux_value = 0;  // sum over heads; 0 when deep supervision is disabled
};

/// total = L_seg + w L_con [sim_loss] + w sum_i L_aux^i [deep_supervision]
template <typename S>
LossBreakdown<S> total_loss(const Var<S>& final_logits, const std::vector<Var<S>>& aux_logits,
                            const Var<S>& deep_t1, const Var<S>& deep_t2, const Tensor<S>& labels,
                            const AblationFlags& flags, const LossConfig& config,
                            const ContrastiveConfig& contrastive = {});

}  // namespace saan
