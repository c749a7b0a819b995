#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "far/far_core.hpp"
#include "far/model.hpp"

namespace far {

enum class OptimizerKind { adam, sgd };

const char* optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam (bias-corrected, per-parameter step counters) or plain SGD.
/// State is keyed by parameter name and exists only for trainable
/// parameters.
template <typename Real>
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind = OptimizerKind::adam, AdamSettings settings = {})
      : kind_(kind), settings_(settings) {}

  OptimizerKind kind() const { return kind_; }

  /// Creates zero state for trainable parameters without one and discards
  /// state of parameters that are frozen or gone.
  void sync(EncoderModel<Real>& model);

  /// Applies one update with learning rate `lr` to every trainable parameter.
  void step(EncoderModel<Real>& model, double lr);

  /// Moves the rows of each reconfigured sublayer's state into its learner
  /// block (and, when nonlearner biases stay trainable, into the frozen
  /// block's bias). Call before sync().
  void migrate(const ReconfigurationRecord& record);

  /// Scalars per moment tensor across all parameters with state.
  std::size_t state_entries() const;
  bool has_state(const std::string& name) const { return state_.count(name) != 0; }

 private:
  struct State {
    std::vector<Real> m;
    std::vector<Real> v;
    std::uint64_t steps = 0;
  };

  static State take_rows(const State& src, const std::vector<std::size_t>& rows, std::size_t width);

  OptimizerKind kind_;
  AdamSettings settings_;
  std::map<std::string, State> state_;
};

}  // namespace far
