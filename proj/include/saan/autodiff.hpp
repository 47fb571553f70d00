#pragma once

#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "saan/tensor.hpp"

namespace saan {

template <typename S>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename S>
class Var {
 public:
  Var() = default;
  Var(Tape<S>* tape, Index id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<S>* tape() const { return tape_; }
  Index id() const { return id_; }

  const Tensor<S>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  /// Gradient accumulated by the last backward pass; zeros if never reached.
  Tensor<S> grad() const;

 private:
  Tape<S>* tape_ = nullptr;
  Index id_ = -1;
};

/// Reverse-mode recording. Records are appended in execution order, so the
/// record list is always topologically sorted and backward walks it in reverse.
/// References to recorded values stay valid while the tape lives.
template <typename S>
class Tape {
 public:
  /// Receives the gradient of the record's output and pushes contributions
  /// into its inputs via accumulate().
  using BackwardFn = std::function<void(Tape&, const Tensor<S>& out_grad)>;

  struct Record {
    std::string op;
    std::vector<Index> inputs;
    Tensor<S> value;
    Tensor<S> grad;  // empty until something flows into it
    bool requires_grad = false;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> leaf(Tensor<S> value, bool requires_grad = false);
  Var<S> constant(Tensor<S> value) { return leaf(std::move(value), false); }

  /// Appends an op output. The backward closure is kept only if some input
  /// requires a gradient.
  Var<S> record(std::string op, std::vector<Var<S>> inputs, Tensor<S> value, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable input.
  /// Throws ValueError for a non-scalar loss or one detached from any
  /// gradient-requiring leaf.
  void backward(const Var<S>& loss);

  /// Adds `g` into the gradient buffer of `v` (no-op if v needs no gradient).
  void accumulate(const Var<S>& v, const Tensor<S>& g);
  /// Like accumulate, for callers that write in place. Returns nullptr if v
  /// needs no gradient.
  Tensor<S>* grad_buffer(const Var<S>& v);

  const Tensor<S>& value(Index id) const { return records_.at(static_cast<std::size_t>(id)).value; }
  const Record& at(Index id) const { return records_.at(static_cast<std::size_t>(id)); }
  Index size() const { return static_cast<Index>(records_.size()); }
  void zero_grad();

  void check_owner(const Var<S>& v) const;

 private:
  std::deque<Record> records_;  // appends never move existing records
};

template <typename S>
const Tensor<S>& Var<S>::value() const {
  return tape_->value(id_);
}

template <typename S>
bool Var<S>::requires_grad() const {
  return tape_->at(id_).requires_grad;
}

template <typename S>
Tensor<S> Var<S>::grad() const {
  const auto& rec = tape_->at(id_);
  if (rec.grad.empty()) return Tensor<S>(rec.value.shape());
  return rec.grad;
}

}  // namespace saan
