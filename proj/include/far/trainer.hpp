#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "far/accounting.hpp"
#include "far/datasets.hpp"
#include "far/far_core.hpp"
#include "far/model.hpp"
#include "far/optimizer.hpp"

namespace far {

enum class EvalMetric { accuracy, matthews_corr };

const char* eval_metric_name(EvalMetric metric);
EvalMetric parse_eval_metric(const std::string& name);
Precision parse_precision(const std::string& name);

struct TrainConfig {
  double learning_rate = 2e-5;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 5;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  OptimizerKind optimizer = OptimizerKind::adam;
  EvalMetric metric = EvalMetric::accuracy;
  Precision precision = Precision::f32;
  /// Adds per-phase wall-clock seconds to resource reports.
  bool record_wall_clock = false;
  FarConfig far;

  void validate() const;
};

/// Linear decay to zero over the whole run; the priming phase is the
/// first priming_steps of it.
struct Schedule {
  std::size_t total_steps = 0;
  std::size_t priming_steps = 0;
  double base_lr = 0;

  double lr(std::size_t step) const { return base_lr * (1.0 - double(step) / double(total_steps)); }
};

/// total = epochs * ceil(n / batch), priming = ceil(p/100 * total).
/// Throws ConfigError when the dataset is smaller than one batch.
Schedule compute_schedule(std::size_t dataset_size, const TrainConfig& config);

struct Confusion {
  std::size_t tp = 0;
  std::size_t tn = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
};

double accuracy(const Confusion& c);
/// (TP*TN - FP*FN) / sqrt((TP+FP)(TP+FN)(TN+FP)(TN+FN)); 0 if a factor is 0.
double matthews_correlation(const Confusion& c);

/// Binary confusion with class 1 as positive. Throws InputError for empty
/// input or labels outside {0, 1}.
Confusion confusion(const std::vector<std::int32_t>& predictions, const std::vector<std::int32_t>& labels);

double score_predictions(const std::vector<std::int32_t>& predictions, const std::vector<std::int32_t>& labels,
                         EvalMetric metric);

template <typename Real>
std::vector<std::int32_t> predict(EncoderModel<Real>& model, const Split& split, std::size_t batch_size = 64);

/// Accuracy or Matthews correlation on a labeled split.
template <typename Real>
double evaluate(EncoderModel<Real>& model, const Split& split, EvalMetric metric);

struct StepRecord {
  std::size_t step = 0;
  std::string phase;
  double loss = 0;
  double lr = 0;
};

inline constexpr const char* kPhasePriming = "priming";
inline constexpr const char* kPhaseReconfigured = "post_reconfiguration";
inline constexpr const char* kPhaseFull = "full_fine_tune";
inline constexpr const char* kPhaseBiasOnly = "bias_only";
inline constexpr const char* kPhaseEvaluation = "evaluation";

struct SeedResult {
  std::uint64_t seed = 0;
  double score = 0;
  std::size_t total_steps = 0;
  std::size_t priming_steps = 0;
  std::size_t post_reconfiguration_steps = 0;
  double trainable_fraction = 1.0;
  std::size_t optimizer_state_entries = 0;
  ResourceReport resources;
  std::vector<StepRecord> steps;
  std::vector<NodeLearningMetric> metrics;
  LearnerSets learners;
};

struct RunResult {
  SelectionMode selection_mode = SelectionMode::none;
  double priming_percent = 0;
  double retention_percent = 100;
  EvalMetric metric = EvalMetric::accuracy;
  std::vector<SeedResult> seeds;

  double mean() const;
  /// Counters summed over seeds.
  ResourceReport resources() const;
};

/// Observation points for tests and verification.
template <typename Real>
struct TrainHooks {
  std::function<void(const EncoderModel<Real>&, std::size_t step)> on_reconfigured;
  std::function<void(const EncoderModel<Real>&, std::size_t step, const std::string& phase)> after_backward;
  std::function<void(const EncoderModel<Real>&, const Optimizer<Real>&, std::size_t step)> after_step;
};

/// Runs one seed of the regime: snapshot, priming, metric, selection,
/// reconfiguration, continued training, then dev evaluation. Mode none
/// trains everything; mode bias_only freezes weight matrices first.
/// Throws NumericError on a non-finite loss.
template <typename Real>
SeedResult train(EncoderModel<Real>& model, const Dataset& data, const TrainConfig& config, std::uint64_t seed,
                 const TrainHooks<Real>* hooks = nullptr);

/// Model seed used for a run seed.
std::uint64_t model_seed(const ModelConfig& config, std::uint64_t run_seed);

/// Empty result carrying the run's identity. Modes that never partition
/// record p = 0 and r = 100 since they train every FFN node alike.
RunResult run_header(const TrainConfig& config);

/// One fresh model per seed, run on up to `workers` threads (0 reads the
/// FAR_WORKERS environment variable, default 1). Results are ordered as
/// config.seeds regardless of completion order.
RunResult run_experiment(const ModelConfig& model, const Dataset& data, const TrainConfig& config,
                         std::size_t workers = 0);

struct GridResult {
  std::vector<double> p_values;
  std::vector<double> r_values;
  /// Row-major over (p, r).
  std::vector<RunResult> cells;

  const RunResult& at(std::size_t p_index, std::size_t r_index) const {
    return cells[p_index * r_values.size() + r_index];
  }
};

GridResult run_grid(const ModelConfig& model, const Dataset& data, const TrainConfig& config,
                    const std::vector<double>& p_values, const std::vector<double>& r_values,
                    std::size_t workers = 0);

std::size_t worker_count_from_env();

}  // namespace far
