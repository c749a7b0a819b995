#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <vector>

#include "far/tensor.hpp"

namespace far {

template <typename Real>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename Real>
class Var {
 public:
  Var() = default;
  Var(Tape<Real>* tape, std::size_t id, std::uint64_t generation)
      : tape_(tape), id_(id), generation_(generation) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<Real>& tape() const;
  std::size_t id() const { return id_; }
  std::uint64_t generation() const { return generation_; }

  const Tensor<Real>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape<Real>* tape_ = nullptr;
  std::size_t id_ = 0;
  std::uint64_t generation_ = 0;
};

/// The computation record: an append-only list of executed operations.
///
/// A node requires a gradient iff it is a trainable Parameter leaf or has an
/// input that requires one. Operations whose inputs all lack gradients are
/// stored as constants with no backward closure, which is how frozen
/// subgraphs drop out of the adjoint pass.
template <typename Real>
class Tape {
 public:
  /// Called with the tape and the id of the node whose adjoint is ready.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  /// With record_gradients=false nothing requires a gradient (inference).
  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  /// Leaf bound to a Parameter. The Parameter must outlive the tape and must
  /// not be mutated until backward has run.
  Var<Real> parameter(Parameter<Real>& p);
  Var<Real> constant(Tensor<Real> value);

  /// Appends an operation result. `backward` is kept only when one of
  /// `inputs` requires a gradient.
  Var<Real> emit(Tensor<Real> value, std::initializer_list<Var<Real>> inputs, BackwardFn backward);
  Var<Real> emit(Tensor<Real> value, const std::vector<Var<Real>>& inputs, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1, replays adjoints in reverse execution order
  /// and accumulates into trainable Parameter gradients. May be called more
  /// than once; each call adds another full gradient.
  void backward(Var<Real> loss);

  /// Drops every record; outstanding Vars become invalid.
  void clear();

  std::size_t size() const { return nodes_.size(); }
  /// Number of nodes carrying a backward closure.
  std::size_t recorded_ops() const;

  const Tensor<Real>& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Adjoint of `id`, zero-allocated on first access.
  Tensor<Real>& adjoint(std::size_t id);

  /// Elements of dense-layer inputs held for weight-gradient terms.
  void note_retained(std::size_t elements) { retained_ += elements; }
  std::size_t retained_elements() const { return retained_; }

  void check(const Var<Real>& v) const;

 private:
  struct Node {
    Tensor<Real> owned;
    Parameter<Real>* param = nullptr;
    Tensor<Real> adjoint;
    bool requires_grad = false;
    BackwardFn backward;
  };

  bool record_;
  std::vector<Node> nodes_;
  std::uint64_t generation_ = 1;
  std::size_t retained_ = 0;
};

template <typename Real>
Tape<Real>& Var<Real>::tape() const {
  if (!tape_) throw StateError("use of an unbound variable");
  return *tape_;
}

template <typename Real>
const Tensor<Real>& Var<Real>::value() const {
  tape().check(*this);
  return tape_->value(id_);
}

template <typename Real>
bool Var<Real>::requires_grad() const {
  tape().check(*this);
  return tape_->requires_grad(id_);
}

}  // namespace far
