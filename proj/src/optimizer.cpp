#include "far/optimizer.hpp"

#include <cmath>
#include <set>

namespace far {

const char* optimizer_name(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + name + "' (expected adam or sgd)");
}

template <typename Real>
void Optimizer<Real>::sync(EncoderModel<Real>& model) {
  if (kind_ == OptimizerKind::sgd) {
    state_.clear();
    return;
  }
  std::set<std::string> live;
  for (Parameter<Real>* p : model.parameters()) {
    if (!p->trainable()) continue;
    live.insert(p->name());
    auto [it, inserted] = state_.try_emplace(p->name());
    if (inserted || it->second.m.size() != p->size()) {
      it->second = State{std::vector<Real>(p->size(), Real(0)), std::vector<Real>(p->size(), Real(0)), 0};
    }
  }
  for (auto it = state_.begin(); it != state_.end();) {
    it = live.count(it->first) ? std::next(it) : state_.erase(it);
  }
}

template <typename Real>
void Optimizer<Real>::step(EncoderModel<Real>& model, double lr) {
  const Real rate = static_cast<Real>(lr);
  for (Parameter<Real>* p : model.parameters()) {
    if (!p->trainable()) continue;
    auto value = p->mutable_value().data();
    auto grad = p->grad().data();
    if (kind_ == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < value.size(); ++i) value[i] -= rate * grad[i];
      continue;
    }
    auto it = state_.find(p->name());
    if (it == state_.end()) throw StateError("no optimizer state for " + p->name() + "; call sync() first");
    State& s = it->second;
    s.steps += 1;
    const Real b1 = static_cast<Real>(settings_.beta1);
    const Real b2 = static_cast<Real>(settings_.beta2);
    const Real eps = static_cast<Real>(settings_.eps);
    const Real c1 = Real(1) - static_cast<Real>(std::pow(settings_.beta1, double(s.steps)));
    const Real c2 = Real(1) - static_cast<Real>(std::pow(settings_.beta2, double(s.steps)));
    for (std::size_t i = 0; i < value.size(); ++i) {
      const Real g = grad[i];
      s.m[i] = b1 * s.m[i] + (Real(1) - b1) * g;
      s.v[i] = b2 * s.v[i] + (Real(1) - b2) * g * g;
      const Real mhat = s.m[i] / c1;
      const Real vhat = s.v[i] / c2;
      value[i] -= rate * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template <typename Real>
typename Optimizer<Real>::State Optimizer<Real>::take_rows(const State& src, const std::vector<std::size_t>& rows,
                                                           std::size_t width) {
  State out{std::vector<Real>(rows.size() * width), std::vector<Real>(rows.size() * width), src.steps};
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t j = 0; j < width; ++j) {
      out.m[r * width + j] = src.m[rows[r] * width + j];
      out.v[r * width + j] = src.v[rows[r] * width + j];
    }
  return out;
}

template <typename Real>
void Optimizer<Real>::migrate(const ReconfigurationRecord& record) {
  if (kind_ == OptimizerKind::sgd) return;
  for (const auto& s : record.sublayers) {
    auto w = state_.find(s.source_weight);
    auto b = state_.find(s.source_bias);
    if (w != state_.end()) state_[s.learner_weight] = take_rows(w->second, s.learner_nodes, s.fan_in);
    if (b != state_.end()) {
      state_[s.learner_bias] = take_rows(b->second, s.learner_nodes, 1);
      if (!s.frozen_bias.empty()) state_[s.frozen_bias] = take_rows(b->second, s.frozen_nodes, 1);
    }
    state_.erase(s.source_weight);
    state_.erase(s.source_bias);
  }
}

template <typename Real>
std::size_t Optimizer<Real>::state_entries() const {
  std::size_t n = 0;
  for (const auto& [name, s] : state_) n += s.m.size();
  return n;
}

template class Optimizer<float>;
template class Optimizer<double>;

}  // namespace far
