#include "saan/autodiff.hpp"

namespace saan {

template <typename S>
Var<S> Tape<S>::leaf(Tensor<S> value, bool requires_grad) {
  Record rec;
  rec.op = "leaf";
  rec.value = std::move(value);
  rec.requires_grad = requires_grad;
  records_.push_back(std::move(rec));
  return Var<S>(this, size() - 1);
}

template <typename S>
void Tape<S>::check_owner(const Var<S>& v) const {
  if (v.tape() != this) throw ValueError("variable belongs to a different tape");
}

template <typename S>
Var<S> Tape<S>::record(std::string op, std::vector<Var<S>> inputs, Tensor<S> value, BackwardFn backward) {
  Record rec;
  rec.op = std::move(op);
  rec.value = std::move(value);
  for (const auto& in : inputs) {
    check_owner(in);
    rec.inputs.push_back(in.id());
    rec.requires_grad = rec.requires_grad || at(in.id()).requires_grad;
  }
  if (rec.requires_grad) rec.backward = std::move(backward);
  records_.push_back(std::move(rec));
  return Var<S>(this, size() - 1);
}

template <typename S>
Tensor<S>* Tape<S>::grad_buffer(const Var<S>& v) {
  check_owner(v);
  auto& rec = records_[static_cast<std::size_t>(v.id())];
  if (!rec.requires_grad) return nullptr;
  if (rec.grad.empty()) rec.grad = Tensor<S>(rec.value.shape());
  return &rec.grad;
}

template <typename S>
void Tape<S>::accumulate(const Var<S>& v, const Tensor<S>& g) {
  Tensor<S>* buf = grad_buffer(v);
  if (!buf) return;
  if (g.shape() != buf->shape())
    throw DimensionError("gradient shape " + to_string(g.shape()) + " does not match value " +
                         to_string(buf->shape()) + " for record '" + records_[static_cast<std::size_t>(v.id())].op + "'");
  buf->values() += g.values();
}

template <typename S>
void Tape<S>::backward(const Var<S>& loss) {
  check_owner(loss);
  const auto& root = at(loss.id());
  if (root.value.size() != 1)
    throw ValueError("backward needs a scalar loss, got shape " + to_string(root.value.shape()));
  if (!root.requires_grad) throw ValueError("loss is detached: no input requires a gradient");
  Tensor<S>* seed = grad_buffer(loss);
  seed->values() += S(1);
  for (Index id = loss.id(); id >= 0; --id) {
    auto& rec = records_[static_cast<std::size_t>(id)];
    if (!rec.backward || rec.grad.empty()) continue;
    // Inputs always have smaller ids, so the closure never touches rec.grad
    // and no record is appended during backward.
    rec.backward(*this, rec.grad);
  }
}

template <typename S>
void Tape<S>::zero_grad() {
  for (auto& rec : records_) rec.grad = Tensor<S>();
}

template class Tape<float>;
template class Tape<double>;

}  // namespace saan
