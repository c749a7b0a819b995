#include "far/trainer.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

namespace far {

const char* eval_metric_name(EvalMetric metric) {
  return metric == EvalMetric::accuracy ? "accuracy" : "matthews_corr";
}

EvalMetric parse_eval_metric(const std::string& name) {
  if (name == "accuracy") return EvalMetric::accuracy;
  if (name == "matthews_corr") return EvalMetric::matthews_corr;
  throw ConfigError("unknown metric '" + name + "' (expected accuracy or matthews_corr)");
}

Precision parse_precision(const std::string& name) {
  if (name == "f32") return Precision::f32;
  if (name == "f64") return Precision::f64;
  throw ConfigError("unknown precision '" + name + "' (expected f32 or f64)");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("train.learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  if (max_epochs < 1) throw ConfigError("train.max_epochs must be at least 1");
  if (seeds.empty()) throw ConfigError("train.seeds must not be empty");
  far.validate();
}

Schedule compute_schedule(std::size_t dataset_size, const TrainConfig& config) {
  config.validate();
  if (dataset_size < config.batch_size) {
    throw ConfigError("dataset of " + std::to_string(dataset_size) + " examples is smaller than one batch of " +
                      std::to_string(config.batch_size));
  }
  Schedule s;
  s.base_lr = config.learning_rate;
  s.total_steps = config.max_epochs * ((dataset_size + config.batch_size - 1) / config.batch_size);
  const double priming = config.far.priming_percent * double(s.total_steps) / 100.0;
  // Snap values within rounding noise of an integer before taking the ceiling.
  const double nearest = std::round(priming);
  s.priming_steps = std::abs(priming - nearest) < 1e-9 ? static_cast<std::size_t>(nearest)
                                                       : static_cast<std::size_t>(std::ceil(priming));
  s.priming_steps = std::min(s.priming_steps, s.total_steps);
  return s;
}

double accuracy(const Confusion& c) {
  const std::size_t n = c.tp + c.tn + c.fp + c.fn;
  return n == 0 ? 0.0 : double(c.tp + c.tn) / double(n);
}

double matthews_correlation(const Confusion& c) {
  const double tp = double(c.tp), tn = double(c.tn), fp = double(c.fp), fn = double(c.fn);
  const double a = tp + fp, b = tp + fn, d = tn + fp, e = tn + fn;
  if (a == 0 || b == 0 || d == 0 || e == 0) return 0.0;
  return (tp * tn - fp * fn) / std::sqrt(a * b * d * e);
}

Confusion confusion(const std::vector<std::int32_t>& predictions, const std::vector<std::int32_t>& labels) {
  if (labels.empty()) throw InputError("cannot evaluate an empty split");
  if (predictions.size() != labels.size()) throw InputError("prediction and label counts differ");
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::int32_t p = predictions[i], y = labels[i];
    if ((p != 0 && p != 1) || (y != 0 && y != 1)) {
      throw InputError("Matthews correlation is defined here for binary labels only");
    }
    if (p == 1 && y == 1) ++c.tp;
    if (p == 0 && y == 0) ++c.tn;
    if (p == 1 && y == 0) ++c.fp;
    if (p == 0 && y == 1) ++c.fn;
  }
  return c;
}

double score_predictions(const std::vector<std::int32_t>& predictions, const std::vector<std::int32_t>& labels,
                         EvalMetric metric) {
  if (labels.empty()) throw InputError("cannot evaluate an empty split");
  if (predictions.size() != labels.size()) throw InputError("prediction and label counts differ");
  if (metric == EvalMetric::matthews_corr) return matthews_correlation(confusion(predictions, labels));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i] ? 1 : 0;
  return double(correct) / double(labels.size());
}

template <typename Real>
std::vector<std::int32_t> predict(EncoderModel<Real>& model, const Split& split, std::size_t batch_size) {
  std::vector<std::int32_t> out;
  out.reserve(split.size());
  for (const Batch& b : batches(split, batch_size, 0, false)) {
    const Tensor<Real> logits = model.logits(b.tokens);
    const std::size_t c = logits.cols();
    for (std::size_t r = 0; r < b.tokens.batch; ++r) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < c; ++j) {
        if (logits[r * c + j] > logits[r * c + best]) best = j;
      }
      out.push_back(static_cast<std::int32_t>(best));
    }
  }
  return out;
}

template <typename Real>
double evaluate(EncoderModel<Real>& model, const Split& split, EvalMetric metric) {
  if (split.empty()) throw InputError("cannot evaluate an empty split");
  std::vector<std::int32_t> labels;
  for (const auto& e : split) labels.push_back(e.label);
  return score_predictions(predict(model, split), labels, metric);
}

double RunResult::mean() const {
  if (seeds.empty()) return 0.0;
  double total = 0;
  for (const auto& s : seeds) total += s.score;
  return total / double(seeds.size());
}

ResourceReport RunResult::resources() const {
  ResourceReport out;
  for (const auto& s : seeds) out.merge(s.resources);
  return out;
}

namespace {

using Clock = std::chrono::steady_clock;

class PhaseTimer {
 public:
  PhaseTimer(bool enabled, ResourceReport& report) : enabled_(enabled), report_(report) {}

  void enter(const std::string& phase, CostPhase kind) {
    if (!enabled_) return;
    leave();
    current_ = phase;
    kind_ = kind;
    start_ = Clock::now();
  }

  void leave() {
    if (!enabled_ || current_.empty()) return;
    const double seconds = std::chrono::duration<double>(Clock::now() - start_).count();
    auto& p = report_.phase(current_, kind_);
    p.wall_seconds = p.wall_seconds.value_or(0.0) + seconds;
    current_.clear();
  }

 private:
  bool enabled_;
  ResourceReport& report_;
  std::string current_;
  CostPhase kind_ = CostPhase::training;
  Clock::time_point start_;
};

}  // namespace

template <typename Real>
SeedResult train(EncoderModel<Real>& model, const Dataset& data, const TrainConfig& config, std::uint64_t seed,
                 const TrainHooks<Real>* hooks) {
  config.validate();
  const Schedule schedule = compute_schedule(data.train.size(), config);
  const SelectionMode mode = config.far.selection_mode;
  const bool partitions = mode == SelectionMode::metric || mode == SelectionMode::random;

  SeedResult result;
  result.seed = seed;
  result.total_steps = schedule.total_steps;

  MemoryOpModel op_model;
  op_model.optimizer_moments = config.optimizer == OptimizerKind::adam ? 2 : 0;
  PhaseTimer timer(config.record_wall_clock, result.resources);

  Optimizer<Real> optimizer(config.optimizer);
  if (mode == SelectionMode::bias_only) apply_bias_only(model);
  optimizer.sync(model);

  std::optional<WeightSnapshot<Real>> snapshot;
  if (partitions) snapshot = snapshot_weights(model);

  std::string phase = partitions                        ? kPhasePriming
                      : mode == SelectionMode::bias_only ? kPhaseBiasOnly
                                                         : kPhaseFull;
  ParameterInventory inv = inventory(model);
  bool reconfigured = false;

  auto reconfigure_now = [&](std::size_t step) {
    result.metrics = learning_metric(*snapshot, model);
    result.learners = mode == SelectionMode::metric
                          ? select_learners(result.metrics, config.far.retention_percent)
                          : select_random(model, config.far.retention_percent, mix_seed(config.far.seed, seed));
    ReconfigureOptions options;
    options.freeze_nonlearner_bias = config.far.freeze_nonlearner_bias;
    const ReconfigurationRecord record = reconfigure(model, result.learners, options);
    optimizer.migrate(record);
    optimizer.sync(model);
    inv = inventory(model);
    phase = kPhaseReconfigured;
    reconfigured = true;
    result.priming_steps = step;
    if (hooks && hooks->on_reconfigured) hooks->on_reconfigured(model, step);
  };

  std::optional<Rng> dropout_rng;
  if (model.config().dropout > 0) dropout_rng.emplace(mix_seed(seed, 0x64726f70));

  timer.enter(phase, CostPhase::training);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    for (const Batch& batch : batches(data.train, config.batch_size, mix_seed(seed, epoch), true)) {
      if (partitions && !reconfigured && step == schedule.priming_steps) {
        reconfigure_now(step);
        timer.enter(phase, CostPhase::training);
      }
      const double lr = schedule.lr(step);
      model.zero_grad();
      Tape<Real> tape;
      Var<Real> logits = model.forward(tape, batch.tokens, ForwardMode::train, dropout_rng ? &*dropout_rng : nullptr);
      Var<Real> loss = softmax_cross_entropy(logits, std::span<const std::int32_t>(batch.labels));
      const double loss_value = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(loss_value)) {
        std::ostringstream msg;
        msg << "non-finite loss " << loss_value << " at step " << step << " (phase " << phase << ", epoch " << epoch
            << ", lr " << lr << ", seed " << seed << ")";
        throw NumericError(msg.str());
      }
      tape.backward(loss);
      if (hooks && hooks->after_backward) hooks->after_backward(model, step, phase);
      optimizer.step(model, lr);
      if (hooks && hooks->after_step) hooks->after_step(model, optimizer, step);

      const StepShape shape{batch.tokens.batch, batch.tokens.batch * batch.tokens.seq};
      result.resources.add_step(phase, CostPhase::training, step_cost(inv, CostPhase::training, shape, op_model));
      result.steps.push_back({step, phase, loss_value, lr});
      ++step;
    }
  }
  if (partitions && !reconfigured) reconfigure_now(step);
  if (partitions) {
    result.post_reconfiguration_steps = step - result.priming_steps;
  } else {
    result.post_reconfiguration_steps = step;
  }

  timer.enter(kPhaseEvaluation, CostPhase::inference);
  std::vector<std::int32_t> labels;
  for (const auto& e : data.dev) labels.push_back(e.label);
  const auto predictions = predict(model, data.dev);
  for (const Batch& b : batches(data.dev, 64, 0, false)) {
    result.resources.add_step(kPhaseEvaluation, CostPhase::inference,
                              step_cost(inv, CostPhase::inference, {b.tokens.batch, b.tokens.batch * b.tokens.seq},
                                        op_model));
  }
  result.score = score_predictions(predictions, labels, config.metric);
  timer.leave();

  result.resources.total_parameters = total_parameters(inv);
  result.resources.trainable_parameters = trainable_parameters(inv);
  result.resources.frozen_parameters = result.resources.total_parameters - result.resources.trainable_parameters;
  result.trainable_fraction = trainable_fraction(inv);
  result.optimizer_state_entries = optimizer.state_entries();
  return result;
}

std::uint64_t model_seed(const ModelConfig& config, std::uint64_t run_seed) { return mix_seed(config.seed, run_seed); }

std::size_t worker_count_from_env() {
  if (const char* env = std::getenv("FAR_WORKERS")) {
    try {
      const long n = std::stol(env);
      if (n >= 1) return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("FAR_WORKERS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

namespace {

template <typename Real>
SeedResult run_seed(const ModelConfig& model_config, const Dataset& data, const TrainConfig& config,
                    std::uint64_t seed) {
  ModelConfig mc = model_config;
  mc.seed = model_seed(model_config, seed);
  EncoderModel<Real> model(mc);
  return train(model, data, config, seed);
}

// Runs jobs[i] for every i on a bounded set of threads; rethrows the
// lowest-index failure.
void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& job) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

RunResult run_header(const TrainConfig& config) {
  RunResult run;
  const SelectionMode mode = config.far.selection_mode;
  run.selection_mode = mode;
  run.metric = config.metric;
  if (mode == SelectionMode::metric || mode == SelectionMode::random) {
    run.priming_percent = config.far.priming_percent;
    run.retention_percent = config.far.retention_percent;
  }
  return run;
}

RunResult run_experiment(const ModelConfig& model, const Dataset& data, const TrainConfig& config,
                         std::size_t workers) {
  config.validate();
  model.validate();
  if (data.vocab_size > model.vocab_size) {
    throw ConfigError("dataset vocabulary (" + std::to_string(data.vocab_size) + ") exceeds model.vocab_size (" +
                      std::to_string(model.vocab_size) + ")");
  }
  if (data.num_classes > model.num_classes) {
    throw ConfigError("dataset has " + std::to_string(data.num_classes) + " classes but model.num_classes is " +
                      std::to_string(model.num_classes));
  }
  if (data.seq_len > model.max_seq_len) throw ConfigError("dataset sequence length exceeds model.max_seq_len");
  if (workers == 0) workers = worker_count_from_env();

  RunResult run = run_header(config);
  run.seeds.resize(config.seeds.size());
  parallel_for(config.seeds.size(), workers, [&](std::size_t i) {
    run.seeds[i] = config.precision == Precision::f64 ? run_seed<double>(model, data, config, config.seeds[i])
                                                      : run_seed<float>(model, data, config, config.seeds[i]);
  });
  return run;
}

GridResult run_grid(const ModelConfig& model, const Dataset& data, const TrainConfig& config,
                    const std::vector<double>& p_values, const std::vector<double>& r_values, std::size_t workers) {
  if (p_values.empty() || r_values.empty()) throw ConfigError("grid needs at least one p and one r value");
  GridResult grid;
  grid.p_values = p_values;
  grid.r_values = r_values;
  for (double p : p_values)
    for (double r : r_values) {
      TrainConfig cell = config;
      cell.far.priming_percent = p;
      cell.far.retention_percent = r;
      grid.cells.push_back(run_experiment(model, data, cell, workers));
    }
  return grid;
}

#define FAR_INSTANTIATE_TRAINER(Real)                                                                    \
  template std::vector<std::int32_t> predict(EncoderModel<Real>&, const Split&, std::size_t);            \
  template double evaluate(EncoderModel<Real>&, const Split&, EvalMetric);                               \
  template SeedResult train(EncoderModel<Real>&, const Dataset&, const TrainConfig&, std::uint64_t,      \
                            const TrainHooks<Real>*);

FAR_INSTANTIATE_TRAINER(float)
FAR_INSTANTIATE_TRAINER(double)

}  // namespace far
