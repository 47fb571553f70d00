#include "saan/losses.hpp"

#include <cmath>

#include "saan/model.hpp"

namespace saan {

void LossConfig::validate() const {
  if (!(w >= 0.0)) throw ValueError("loss weight w must be >= 0");
  if (!(dice_smooth > 0.0)) throw ValueError("dice_smooth must be > 0");
  if (!(prediction_threshold > 0.0 && prediction_threshold < 1.0))
    throw ValueError("prediction_threshold must lie in (0,1)");
}

namespace {

template <typename S>
void check_targets(const Var<S>& logits, const Tensor<S>& targets, const char* what) {
  if (logits.shape() != targets.shape())
    throw DimensionError(std::string(what) + ": logits " + to_string(logits.shape()) + " vs targets " +
                         to_string(targets.shape()));
}

}  // namespace

template <typename S>
Var<S> dice_loss(const Var<S>& logits, const Tensor<S>& targets, S smooth) {
  check_targets(logits, targets, "dice loss");
  Var<S> p = sigmoid(logits);
  const Tensor<S>& pv = p.value();
  double inter = 0, sum_p = 0, sum_g = 0;
  for (Index i = 0; i < pv.size(); ++i) {
    inter += static_cast<double>(pv[i]) * targets[i];
    sum_p += pv[i];
    sum_g += targets[i];
  }
  const double num = 2.0 * inter + smooth;
  const double den = sum_p + sum_g + smooth;
  Tensor<S> out(Shape{1}, static_cast<S>(1.0 - num / den));
  return p.tape()->record("dice", {p}, std::move(out), [p, targets, num, den](Tape<S>& t, const Tensor<S>& g) {
    auto* gp = t.grad_buffer(p);
    if (!gp) return;
    // d/dp_i [1 - num/den] = -(2 g_i den - num) / den^2
    const double inv = 1.0 / (den * den);
    for (Index i = 0; i < targets.size(); ++i)
      (*gp)[i] += g[0] * static_cast<S>(-(2.0 * targets[i] * den - num) * inv);
  });
}

template <typename S>
Var<S> cross_entropy_loss(const Var<S>& logits, const Tensor<S>& targets) {
  check_targets(logits, targets, "cross-entropy loss");
  const Tensor<S>& x = logits.value();
  double acc = 0;
  for (Index i = 0; i < x.size(); ++i) {
    const double xi = x[i], yi = targets[i];
    acc += std::max(xi, 0.0) - xi * yi + std::log1p(std::exp(-std::abs(xi)));
  }
  const double n = static_cast<double>(x.size());
  Tensor<S> out(Shape{1}, static_cast<S>(acc / n));
  return logits.tape()->record("cross_entropy", {logits}, std::move(out), [logits, targets, n](Tape<S>& t, const Tensor<S>& g) {
    auto* gx = t.grad_buffer(logits);
    if (!gx) return;
    const Tensor<S>& x = logits.value();
    for (Index i = 0; i < x.size(); ++i) {
      const double xi = x[i];
      const double s = xi >= 0 ? 1.0 / (1.0 + std::exp(-xi)) : std::exp(xi) / (1.0 + std::exp(xi));
      (*gx)[i] += g[0] * static_cast<S>((s - targets[i]) / n);
    }
  });
}

template <typename S>
Var<S> aux_loss(const Var<S>& aux_logits, const Tensor<S>& labels, Index factor, S smooth) {
  Tensor<S> coarse = downsample_labels(labels, factor);
  if (coarse.shape() != aux_logits.shape())
    throw DimensionError("aux loss: head resolution " + to_string(aux_logits.shape()) + " does not match labels " +
                         to_string(coarse.shape()) + " at factor " + std::to_string(factor));
  return add(dice_loss(aux_logits, coarse, smooth), cross_entropy_loss(aux_logits, coarse));
}

template <typename S>
LossBreakdown<S> total_loss(const Var<S>& final_logits, const std::vector<Var<S>>& aux_logits,
                            const Var<S>& deep_t1, const Var<S>& deep_t2, const Tensor<S>& labels,
                            const AblationFlags& flags, const LossConfig& config,
                            const ContrastiveConfig& contrastive) {
  config.validate();
  const S smooth = static_cast<S>(config.dice_smooth);
  const S w = static_cast<S>(config.w);
  check_binary(labels, "total loss");
  LossBreakdown<S> out;
  out.seg = add(dice_loss(final_logits, labels, smooth), cross_entropy_loss(final_logits, labels));
  out.seg_value = out.seg.value()[0];
  out.total = out.seg;
  const Index full = labels.dim(-1);
  if (flags.sim_loss) {
    const Index factor = full / deep_t1.value().dim(-1);
    Var<S> con = contrastive_loss(deep_t1, deep_t2, downsample_labels(labels, factor), contrastive);
    out.con_value = con.value()[0];
    out.total = add(out.total, scale(con, w));
  }
  if (flags.deep_supervision && !aux_logits.empty()) {
    Var<S> aux_sum;
    for (const auto& head : aux_logits) {
      const Index factor = full / head.value().dim(-1);
      Var<S> term = aux_loss(head, labels, factor, smooth);
      aux_sum = aux_sum.valid() ? add(aux_sum, term) : term;
    }
    out.aux_value = aux_sum.value()[0];
    out.total = add(out.total, scale(aux_sum, w));
  }
  out.total_value = out.total.value()[0];
  return out;
}

#define SAAN_INSTANTIATE_LOSS(S)                                                                        \
  template Var<S> dice_loss(const Var<S>&, const Tensor<S>&, S);                                        \
  template Var<S> cross_entropy_loss(const Var<S>&, const Tensor<S>&);                                  \
  template Var<S> aux_loss(const Var<S>&, const Tensor<S>&, Index, S);                                  \
  template LossBreakdown<S> total_loss(const Var<S>&, const std::vector<Var<S>>&, const Var<S>&,         \
                                       const Var<S>&, const Tensor<S>&, const AblationFlags&,            \
                                       const LossConfig&, const ContrastiveConfig&);

SAAN_INSTANTIATE_LOSS(float)
SAAN_INSTANTIATE_LOSS(double)

}  // namespace saan
