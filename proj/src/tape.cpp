#include "far/tape.hpp"

namespace far {

template <typename Real>
Var<Real> Tape<Real>::parameter(Parameter<Real>& p) {
  Node node;
  node.param = &p;
  node.requires_grad = record_ && p.trainable();
  nodes_.push_back(std::move(node));
  return Var<Real>(this, nodes_.size() - 1, generation_);
}

template <typename Real>
Var<Real> Tape<Real>::constant(Tensor<Real> value) {
  Node node;
  node.owned = std::move(value);
  nodes_.push_back(std::move(node));
  return Var<Real>(this, nodes_.size() - 1, generation_);
}

template <typename Real>
Var<Real> Tape<Real>::emit(Tensor<Real> value, std::initializer_list<Var<Real>> inputs, BackwardFn backward) {
  return emit(std::move(value), std::vector<Var<Real>>(inputs), std::move(backward));
}

template <typename Real>
Var<Real> Tape<Real>::emit(Tensor<Real> value, const std::vector<Var<Real>>& inputs, BackwardFn backward) {
  Node node;
  node.owned = std::move(value);
  for (const auto& in : inputs) {
    check(in);
    if (nodes_[in.id()].requires_grad) node.requires_grad = true;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<Real>(this, nodes_.size() - 1, generation_);
}

template <typename Real>
void Tape<Real>::check(const Var<Real>& v) const {
  if (!v.valid() || &v.tape() != this) throw StateError("variable does not belong to this computation record");
  if (v.generation() != generation_ || v.id() >= nodes_.size()) {
    throw StateError("variable refers to a cleared computation record");
  }
}

template <typename Real>
const Tensor<Real>& Tape<Real>::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.param ? n.param->value() : n.owned;
}

template <typename Real>
Tensor<Real>& Tape<Real>::adjoint(std::size_t id) {
  Node& n = nodes_[id];
  if (n.adjoint.empty()) n.adjoint = Tensor<Real>(value(id).shape());
  return n.adjoint;
}

template <typename Real>
std::size_t Tape<Real>::recorded_ops() const {
  std::size_t n = 0;
  for (const Node& node : nodes_) n += node.backward ? 1 : 0;
  return n;
}

template <typename Real>
void Tape<Real>::backward(Var<Real> loss) {
  if (!loss.valid() || nodes_.empty()) throw StateError("backward called without a recorded forward pass");
  check(loss);
  if (!record_) throw StateError("backward called on an inference-only record");
  if (value(loss.id()).size() != 1) {
    throw DimensionError("backward requires a scalar loss, got " + shape_string(value(loss.id()).shape()));
  }
  if (!nodes_[loss.id()].requires_grad) return;

  for (Node& n : nodes_) n.adjoint = Tensor<Real>();
  adjoint(loss.id())[0] = Real(1);

  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.backward && !n.adjoint.empty()) n.backward(*this, id);
  }

  for (Node& n : nodes_) {
    if (n.param && n.requires_grad && !n.adjoint.empty()) {
      auto g = n.param->mutable_grad().data();
      auto a = n.adjoint.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += a[i];
    }
  }
}

template <typename Real>
void Tape<Real>::clear() {
  nodes_.clear();
  retained_ = 0;
  ++generation_;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace far
