#include "saan/similarity.hpp"

#include <cmath>

namespace saan {

void ContrastiveConfig::validate() const {
  if (!(margin > 0.0 && margin <= std::sqrt(2.0) + 1e-12))
    throw ValueError("contrastive margin must lie in (0, sqrt(2)], got " + std::to_string(margin));
  if (!(sqrt_eps > 0.0)) throw ValueError("sqrt_eps must be positive");
}

template <typename S>
void check_binary(const Tensor<S>& labels, const char* what) {
  for (Index i = 0; i < labels.size(); ++i)
    if (labels[i] != S(0) && labels[i] != S(1))
      throw ValueError(std::string(what) + ": label " + std::to_string(static_cast<double>(labels[i])) +
                       " at element " + std::to_string(i) + " is not in {0,1}");
}

template <typename S>
Var<S> cosine_similarity_map(const Var<S>& f1, const Var<S>& f2, S eps) {
  if (f1.shape() != f2.shape())
    throw DimensionError("cosine similarity: feature shapes differ " + to_string(f1.shape()) + " vs " +
                         to_string(f2.shape()));
  as_nchw(f1.shape(), "cosine similarity features");
  return channel_reduce(mul(channel_l2_normalize(f1, eps), channel_l2_normalize(f2, eps)), ChannelReduce::sum);
}

template <typename S>
Var<S> distance_from_similarity(const Var<S>& sim, S sqrt_eps) {
  Tensor<S> out(sim.shape());
  for (Index i = 0; i < out.size(); ++i) out[i] = std::sqrt(std::max(S(2) - S(2) * sim.value()[i], S(0)) + sqrt_eps);
  const Var<S> d(sim.tape(), sim.tape()->size());
  return sim.tape()->record("cosine_distance", {sim}, std::move(out), [sim, d](Tape<S>& t, const Tensor<S>& g) {
    auto* gs = t.grad_buffer(sim);
    if (!gs) return;
    for (Index i = 0; i < g.size(); ++i)
      if (S(2) - S(2) * sim.value()[i] > S(0)) (*gs)[i] -= g[i] / d.value()[i];
  });
}

template <typename S>
Var<S> cosine_distance_map(const Var<S>& f1, const Var<S>& f2, S sqrt_eps) {
  return distance_from_similarity(cosine_similarity_map(f1, f2), sqrt_eps);
}

template <typename S>
Var<S> contrastive_from_distance(const Var<S>& distance, const Tensor<S>& labels, S margin, Reduction reduction) {
  if (labels.shape() != distance.shape())
    throw DimensionError("contrastive loss: labels " + to_string(labels.shape()) + " do not match distance map " +
                         to_string(distance.shape()));
  check_binary(labels, "contrastive loss");
  const Tensor<S>& d = distance.value();
  double acc = 0;
  for (Index i = 0; i < d.size(); ++i) {
    const double di = d[i];
    if (labels[i] == S(0)) {
      acc += 0.5 * di * di;
    } else {
      const double hinge = std::max(static_cast<double>(margin) - di, 0.0);
      acc += 0.5 * hinge * hinge;
    }
  }
  const S norm = reduction == Reduction::mean ? S(1) / static_cast<S>(d.size()) : S(1);
  Tensor<S> out(Shape{1}, static_cast<S>(acc) * norm);
  return distance.tape()->record(
      "contrastive", {distance}, std::move(out), [distance, labels, margin, norm](Tape<S>& t, const Tensor<S>& g) {
        auto* gd = t.grad_buffer(distance);
        if (!gd) return;
        const Tensor<S>& d = distance.value();
        const S scale = g[0] * norm;
        for (Index i = 0; i < d.size(); ++i) {
          if (labels[i] == S(0)) {
            (*gd)[i] += scale * d[i];
          } else if (d[i] < margin) {
            (*gd)[i] -= scale * (margin - d[i]);
          }
        }
      });
}

template <typename S>
Var<S> contrastive_loss(const Var<S>& f1, const Var<S>& f2, const Tensor<S>& labels, const ContrastiveConfig& config) {
  config.validate();
  if (f1.shape() != f2.shape()) throw DimensionError("contrastive loss: feature shapes differ");
  const Dims4 f = as_nchw(f1.shape(), "contrastive loss features");
  const Dims4 y = as_nchw(labels.shape(), "contrastive loss labels");
  if (y.n != f.n || y.c != 1 || y.h != f.h || y.w != f.w)
    throw DimensionError("contrastive loss: labels " + to_string(labels.shape()) + " do not match features " +
                         to_string(f1.shape()));
  return contrastive_from_distance(cosine_distance_map(f1, f2, static_cast<S>(config.sqrt_eps)), labels,
                                   static_cast<S>(config.margin), config.reduction);
}

template <typename S>
Tensor<S> downsample_labels(const Tensor<S>& labels, Index factor) {
  const Dims4 d = as_nchw(labels.shape(), "downsample_labels");
  if (factor < 1 || (factor & (factor - 1)) != 0) throw ValueError("downsample factor must be a power of two");
  if (d.h % factor != 0 || d.w % factor != 0)
    throw DimensionError("downsample_labels: " + to_string(labels.shape()) + " not divisible by " +
                         std::to_string(factor));
  check_binary(labels, "downsample_labels");
  const Index oh = d.h / factor, ow = d.w / factor;
  Tensor<S> out(Shape{d.n, d.c, oh, ow});
  const Index half = factor * factor;  // compare 2 * count >= block size
  for (Index p = 0; p < d.n * d.c; ++p)
    for (Index y = 0; y < oh; ++y)
      for (Index x = 0; x < ow; ++x) {
        Index changed = 0;
        for (Index dy = 0; dy < factor; ++dy)
          for (Index dx = 0; dx < factor; ++dx)
            changed += labels[(p * d.h + y * factor + dy) * d.w + x * factor + dx] != S(0);
        out[(p * oh + y) * ow + x] = 2 * changed >= half ? S(1) : S(0);
      }
  return out;
}

#define SAAN_INSTANTIATE_SIM(S)                                                                      \
  template void check_binary(const Tensor<S>&, const char*);                                         \
  template Var<S> cosine_similarity_map(const Var<S>&, const Var<S>&, S);                            \
  template Var<S> distance_from_similarity(const Var<S>&, S);                                        \
  template Var<S> cosine_distance_map(const Var<S>&, const Var<S>&, S);                              \
  template Var<S> contrastive_from_distance(const Var<S>&, const Tensor<S>&, S, Reduction);          \
  template Var<S> contrastive_loss(const Var<S>&, const Var<S>&, const Tensor<S>&, const ContrastiveConfig&); \
  template Tensor<S> downsample_labels(const Tensor<S>&, Index);

SAAN_INSTANTIATE_SIM(float)
SAAN_INSTANTIATE_SIM(double)

}  // namespace saan
