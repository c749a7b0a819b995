#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "far/far_core.hpp"
#include "far/model.hpp"

namespace far {

/// Per-element memory operations charged per step.
///
/// Inference reads every parameter once. Training reads a trainable
/// parameter twice (forward and backward) and writes it once (update); a
/// frozen parameter is read once in the forward pass only. Inputs retained
/// for weight gradients are stored once and loaded once. Each example is
/// read once. Optimizer moments are tracked in their own counters and are
/// excluded from total().
struct MemoryOpModel {
  std::uint64_t inference_reads = 1;
  std::uint64_t trainable_reads = 2;
  std::uint64_t trainable_writes = 1;
  std::uint64_t frozen_reads = 1;
  std::uint64_t activation_stores = 1;
  std::uint64_t activation_loads = 1;
  std::uint64_t data_reads_per_example = 1;
  /// Moment tensors per trainable parameter (2 for Adam, 0 for SGD).
  std::uint64_t optimizer_moments = 2;
};

struct MemoryOps {
  std::uint64_t parameter_reads = 0;
  std::uint64_t parameter_writes = 0;
  std::uint64_t activation_stores = 0;
  std::uint64_t activation_loads = 0;
  std::uint64_t data_reads = 0;
  std::uint64_t optimizer_state_reads = 0;
  std::uint64_t optimizer_state_writes = 0;

  std::uint64_t parameter_ops() const { return parameter_reads + parameter_writes; }
  std::uint64_t total() const {
    return parameter_reads + parameter_writes + activation_stores + activation_loads + data_reads;
  }

  MemoryOps& operator+=(const MemoryOps& o);
  friend bool operator==(const MemoryOps&, const MemoryOps&) = default;
};

/// Named counters in a fixed order, for tables and serialization.
std::vector<std::pair<std::string, std::uint64_t>> counter_list(const MemoryOps& ops);

enum class CostPhase { inference, training };

struct StepShape {
  std::size_t examples = 0;
  std::size_t tokens = 0;
};

/// One parameter tensor as seen by the cost model.
struct ParameterGroup {
  std::string name;
  ParameterKind kind = ParameterKind::embedding;
  std::size_t count = 0;
  bool trainable = true;
  /// Input width of dense weight matrices, 0 otherwise.
  std::size_t fan_in = 0;
  /// True for dense layers applied to every token; the classifier sees
  /// one pooled row per example.
  bool per_token = true;
};

using ParameterInventory = std::vector<ParameterGroup>;

template <typename Real>
ParameterInventory inventory(const EncoderModel<Real>& model);

/// Inventory a model of `config` would have after FAR with the given mode
/// and retention, computed from dimensions alone.
ParameterInventory planned_inventory(const ModelConfig& config, SelectionMode mode, double retention_percent,
                                     bool freeze_nonlearner_bias = true);

std::size_t total_parameters(const ParameterInventory& inv);
std::size_t trainable_parameters(const ParameterInventory& inv);
double trainable_fraction(const ParameterInventory& inv);

template <typename Real>
double trainable_fraction(const EncoderModel<Real>& model) {
  return trainable_fraction(inventory(model));
}

MemoryOps step_cost(const ParameterInventory& inv, CostPhase phase, StepShape shape, const MemoryOpModel& model = {});

/// Activation elements retained for weight gradients in one training step;
/// matches Tape::retained_elements() of the corresponding forward pass.
std::uint64_t retained_activation_elements(const ParameterInventory& inv, StepShape shape);

struct PhaseTotals {
  std::string name;
  CostPhase kind = CostPhase::training;
  std::size_t steps = 0;
  MemoryOps ops;
  std::optional<double> wall_seconds;
};

struct ResourceReport {
  std::vector<PhaseTotals> phases;
  std::size_t total_parameters = 0;
  std::size_t trainable_parameters = 0;
  std::size_t frozen_parameters = 0;

  PhaseTotals& phase(const std::string& name, CostPhase kind);
  const PhaseTotals* find_phase(const std::string& name) const;
  void add_step(const std::string& phase, CostPhase kind, const MemoryOps& ops);
  /// Sum over training phases.
  MemoryOps training_totals() const;
  MemoryOps totals() const;
  std::size_t training_steps() const;
  /// Sums counters phase by phase; parameter counts must match.
  ResourceReport& merge(const ResourceReport& other);

  friend bool operator==(const ResourceReport& a, const ResourceReport& b);
};

struct Reduction {
  std::string counter;
  std::uint64_t baseline = 0;
  std::uint64_t candidate = 0;
  /// 100 * (baseline - candidate) / baseline; 0 when the baseline is 0.
  double percent = 0;
};

/// Percentage reductions of `candidate` relative to `baseline` over the
/// training phases. Throws InputError when total parameter counts differ.
std::vector<Reduction> compare_runs(const ResourceReport& baseline, const ResourceReport& candidate);

}  // namespace far
