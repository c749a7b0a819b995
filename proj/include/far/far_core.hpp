#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "far/model.hpp"

namespace far {

enum class SelectionMode { metric, random, bias_only, none };

const char* selection_mode_name(SelectionMode mode);
SelectionMode parse_selection_mode(const std::string& name);

struct FarConfig {
  /// Share of total optimization steps spent priming, in percent.
  double priming_percent = 1.0;
  /// Share of nodes kept as learners in every FFN sublayer, in percent.
  double retention_percent = 10.0;
  SelectionMode selection_mode = SelectionMode::metric;
  /// Seed for random selection; mixed with the run seed.
  std::uint64_t seed = 0;
  /// When false, nonlearner biases stay trainable while their weights freeze.
  bool freeze_nonlearner_bias = true;

  void validate() const;
  friend bool operator==(const FarConfig&, const FarConfig&) = default;
};

/// Copy of every FFN weight matrix and bias taken before priming.
template <typename Real>
class WeightSnapshot {
 public:
  struct Entry {
    FfnSublayerAddress address;
    Tensor<Real> weight;
    Tensor<Real> bias;
  };

  explicit WeightSnapshot(std::vector<Entry> entries) : entries_(std::move(entries)) {}

  const std::vector<Entry>& entries() const { return entries_; }
  const Entry& at(FfnSublayerAddress address) const;

 private:
  std::vector<Entry> entries_;
};

template <typename Real>
WeightSnapshot<Real> snapshot_weights(const EncoderModel<Real>& model);

struct NodeLearningMetric {
  FfnSublayerAddress address;
  std::size_t node = 0;
  double metric = 0;
};

/// L1 distance between each node's current and snapshotted incoming weight
/// row. Bias entries are excluded.
template <typename Real>
std::vector<NodeLearningMetric> learning_metric(const WeightSnapshot<Real>& snapshot, const EncoderModel<Real>& model);

/// max(1, round_half_up(r/100 * nodes)), capped at nodes.
std::size_t select_count(double retention_percent, std::size_t nodes);

/// Learner node indices per sublayer, ascending.
using LearnerSets = std::map<FfnSublayerAddress, std::vector<std::size_t>>;

/// Top select_count nodes by metric in each sublayer independently; equal
/// metrics prefer the lower node index.
LearnerSets select_learners(std::span<const NodeLearningMetric> metrics, double retention_percent);

/// Uniform sample of select_count nodes per sublayer without replacement.
template <typename Real>
LearnerSets select_random(const EncoderModel<Real>& model, double retention_percent, std::uint64_t seed);

/// Parameter renames produced by reconfiguration, for carrying optimizer
/// state from a dense sublayer into its learner block.
struct SublayerReconfiguration {
  FfnSublayerAddress address;
  std::string source_weight;
  std::string source_bias;
  std::string learner_weight;
  std::string learner_bias;
  std::vector<std::size_t> learner_nodes;
  std::size_t fan_in = 0;
  /// Set when nonlearner biases stay trainable.
  std::string frozen_bias;
  std::vector<std::size_t> frozen_nodes;
};

struct ReconfigurationRecord {
  std::vector<SublayerReconfiguration> sublayers;
};

struct ReconfigureOptions {
  bool freeze_nonlearner_bias = true;
};

/// Splits each listed FFN sublayer into a trainable learner block and a
/// frozen block whose outputs are permuted back to the original order.
/// Throws InputError for invalid indices, StateError if already partitioned.
template <typename Real>
ReconfigurationRecord reconfigure(EncoderModel<Real>& model, const LearnerSets& learners,
                                  ReconfigureOptions options = {});

/// Freezes every weight matrix (attention, FFN, embeddings, classifier);
/// biases and layer-norm parameters stay trainable.
template <typename Real>
void apply_bias_only(EncoderModel<Real>& model);

/// Tab-separated report: encoder, dense, node, metric, class.
void write_learner_report(std::ostream& out, std::span<const NodeLearningMetric> metrics, const LearnerSets& learners);

}  // namespace far
