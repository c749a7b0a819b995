#include "far/verify.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

#include "far/accounting.hpp"
#include "far/far_core.hpp"
#include "far/model.hpp"
#include "far/ops.hpp"
#include "far/trainer.hpp"

namespace far {

Fault parse_fault(const std::string& name) {
  if (name == "none") return Fault::none;
  if (name == "skip-permutation" || name == "skip_permutation") return Fault::skip_permutation;
  throw ConfigError("unknown fault '" + name + "' (expected skip-permutation)");
}

bool VerifyReport::all_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

std::vector<std::string> VerifyReport::failed() const {
  std::vector<std::string> out;
  for (const auto& c : checks)
    if (!c.passed) out.push_back(c.name);
  return out;
}

GradCheckResult check_gradients(const std::vector<Parameter<double>*>& params,
                                const std::function<Var<double>(Tape<double>&)>& loss, double step, double floor) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    tape.backward(loss(tape));
  }
  auto evaluate = [&] {
    Tape<double> tape(false);
    return loss(tape).value()[0];
  };
  GradCheckResult result;
  for (auto* p : params) {
    if (!p->trainable()) continue;
    const Tensor<double> analytic = p->grad();
    auto values = p->mutable_value().data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = evaluate();
      values[i] = saved - step;
      const double down = evaluate();
      values[i] = saved;
      const double numeric = (up - down) / (2 * step);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++result.elements;
      if (rel >= result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst = p->name() + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

namespace {

using P = Parameter<double>;

P random_param(const std::string& name, Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return P(name, std::move(t));
}

// Scalar projection L y R of a rank-2 output so every element gets its own
// sensitivity.
Var<double> project(Tape<double>& tape, Var<double> y, Rng& rng) {
  const std::size_t m = y.shape()[0], n = y.shape()[1];
  Tensor<double> left({2, m}), right({n, 2});
  for (auto& v : left.data()) v = rng.uniform(-1, 1);
  for (auto& v : right.data()) v = rng.uniform(-1, 1);
  return sum(matmul(matmul(tape.constant(std::move(left)), y), tape.constant(std::move(right))));
}

struct OpCase {
  std::string name;
  std::vector<std::unique_ptr<P>> params;
  std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)> body;
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

ModelConfig gradient_model_config() {
  ModelConfig c;
  c.num_layers = 1;
  c.d_model = 8;
  c.d_ff = 16;
  c.num_heads = 2;
  c.vocab_size = 16;
  c.max_seq_len = 4;
  c.num_classes = 2;
  c.seed = 11;
  return c;
}

TokenBatch random_tokens(std::size_t batch, std::size_t seq, std::size_t vocab, Rng& rng, bool pad) {
  std::vector<std::int32_t> ids(batch * seq);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t len = pad ? 1 + rng.below(seq) : seq;
    for (std::size_t s = 0; s < seq; ++s) {
      ids[b * seq + s] = s < len ? static_cast<std::int32_t>(1 + rng.below(vocab - 1)) : kPadId;
    }
  }
  return make_batch(batch, seq, std::move(ids));
}

CheckResult check_op_gradients(const VerifyOptions& opt) {
  Rng rng(101);
  std::vector<OpCase> cases;
  auto add_case = [&](std::string name, std::vector<P> ps,
                      std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)> body) {
    OpCase c;
    c.name = std::move(name);
    for (auto& p : ps) c.params.push_back(std::make_unique<P>(std::move(p)));
    c.body = std::move(body);
    cases.push_back(std::move(c));
  };
  add_case("matmul", {random_param("a", {3, 4}, rng), random_param("b", {4, 5}, rng)},
           [](Tape<double>&, auto& v) { return matmul(v[0], v[1]); });
  add_case("add", {random_param("a", {3, 4}, rng), random_param("b", {3, 4}, rng)},
           [](Tape<double>&, auto& v) { return add(v[0], v[1]); });
  add_case("add_bias", {random_param("x", {3, 4}, rng), random_param("b", {4}, rng)},
           [](Tape<double>&, auto& v) { return add_bias(v[0], v[1]); });
  add_case("gelu_tanh", {random_param("x", {3, 4}, rng, -3, 3)},
           [](Tape<double>&, auto& v) { return gelu(v[0], GeluKind::tanh); });
  add_case("gelu_erf", {random_param("x", {3, 4}, rng, -3, 3)},
           [](Tape<double>&, auto& v) { return gelu(v[0], GeluKind::erf); });
  {
    // Keep inputs away from the kink at 0.
    P x = random_param("x", {3, 4}, rng, 0.1, 1);
    for (std::size_t i = 0; i < x.size(); i += 2) x.mutable_value()[i] = -x.value()[i];
    add_case("relu", {std::move(x)}, [](Tape<double>&, auto& v) { return relu(v[0]); });
  }
  add_case("layer_norm",
           {random_param("x", {3, 6}, rng), random_param("gain", {6}, rng), random_param("shift", {6}, rng)},
           [](Tape<double>&, auto& v) { return layer_norm(v[0], v[1], v[2], 1e-12); });
  add_case("linear", {random_param("x", {3, 4}, rng), random_param("w", {5, 4}, rng), random_param("b", {5}, rng)},
           [](Tape<double>&, auto& v) { return linear(v[0], v[1], v[2]); });
  add_case("gather_rows", {random_param("table", {5, 3}, rng)}, [](Tape<double>&, auto& v) {
    static const std::size_t idx[] = {4, 0, 4, 2};
    return gather_rows(v[0], std::span<const std::size_t>(idx));
  });
  add_case("scatter_columns", {random_param("x", {3, 4}, rng)}, [](Tape<double>&, auto& v) {
    static const std::size_t pos[] = {2, 0, 3, 1};
    return scatter_columns(v[0], std::span<const std::size_t>(pos));
  });
  add_case("concat_columns", {random_param("a", {3, 2}, rng), random_param("b", {3, 3}, rng)},
           [](Tape<double>&, auto& v) { return concat_columns(v[0], v[1]); });
  add_case("split_merge_heads", {random_param("x", {6, 4}, rng)},
           [](Tape<double>&, auto& v) { return merge_heads(split_heads(v[0], 2, 2)); });
  {
    Tensor<double> mask({2, 3});
    mask[2] = kMaskedScore;
    add_case("attention",
             {random_param("q", {2, 2, 3, 2}, rng), random_param("k", {2, 2, 3, 2}, rng),
              random_param("v", {2, 2, 3, 2}, rng)},
             [mask](Tape<double>&, auto& v) { return merge_heads(attention(v[0], v[1], v[2], mask)); });
  }

  double worst = 0;
  std::string where;
  std::size_t elements = 0;
  for (auto& c : cases) {
    std::vector<P*> ptrs;
    for (auto& p : c.params) ptrs.push_back(p.get());
    const std::uint64_t proj_seed = rng.next();
    auto loss = [&](Tape<double>& tape) {
      std::vector<Var<double>> vars;
      for (auto* p : ptrs) vars.push_back(tape.parameter(*p));
      Rng proj(proj_seed);
      return project(tape, c.body(tape, vars), proj);
    };
    const GradCheckResult r = check_gradients(ptrs, loss);
    elements += r.elements;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      where = c.name + ":" + r.worst;
    }
  }
  {
    P logits = random_param("logits", {4, 3}, rng, -2, 2);
    static const std::int32_t labels[] = {0, 2, 1, 2};
    const GradCheckResult r = check_gradients({&logits}, [&](Tape<double>& tape) {
      return softmax_cross_entropy(tape.parameter(logits), std::span<const std::int32_t>(labels));
    });
    elements += r.elements;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      where = "softmax_cross_entropy:" + r.worst;
    }
  }
  return {"gradients.ops", worst < opt.gradient_tolerance,
          "max rel error " + fmt(worst) + " at " + where + " over " + std::to_string(elements) + " elements"};
}

CheckResult check_model_gradients(const VerifyOptions& opt, bool reconfigured) {
  EncoderModel<double> model(gradient_model_config());
  Rng rng(202);
  if (reconfigured) reconfigure(model, select_random(model, 25, 3));
  const TokenBatch tokens = random_tokens(3, 4, model.config().vocab_size, rng, true);
  const std::vector<std::int32_t> labels = {0, 1, 1};
  const GradCheckResult r = check_gradients(model.parameters(), [&](Tape<double>& tape) {
    return softmax_cross_entropy(model.forward(tape, tokens, ForwardMode::train),
                                 std::span<const std::int32_t>(labels));
  });
  return {reconfigured ? "gradients.model_reconfigured" : "gradients.model", r.max_rel_error < opt.gradient_tolerance,
          "max rel error " + fmt(r.max_rel_error) + " at " + r.worst + " over " + std::to_string(r.elements) +
              " elements"};
}

ModelConfig random_toy_config(Rng& rng, std::uint64_t seed) {
  ModelConfig c;
  c.num_layers = 1 + rng.below(2);
  c.num_heads = 1 + rng.below(2);
  c.d_model = c.num_heads * (2 + rng.below(4));
  c.d_ff = 4 + rng.below(24);
  c.vocab_size = 12;
  c.max_seq_len = 6;
  c.num_classes = 2 + rng.below(2);
  c.seed = seed;
  return c;
}

void apply_fault(EncoderModel<double>& model, Fault fault) {
  if (fault != Fault::skip_permutation) return;
  for (const auto& a : model.ffn_addresses()) {
    if (auto* p = std::get_if<PartitionedFfn<double>>(&model.ffn(a))) p->permute_output = false;
  }
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

CheckResult check_equivalence(const VerifyOptions& opt, bool dense2_only) {
  Rng rng(dense2_only ? 404 : 303);
  double worst = 0;
  std::size_t comparisons = 0;
  for (std::size_t m = 0; m < opt.equivalence_models; ++m) {
    const ModelConfig config = random_toy_config(rng, rng.next());
    for (double r : {10.0, 25.0, 40.0, 100.0}) {
      EncoderModel<double> original(config);
      // Perturb as if primed so that the metric ordering is non-trivial.
      for (auto* p : original.parameters())
        for (auto& v : p->mutable_value().data()) v += rng.uniform(-0.05, 0.05);
      EncoderModel<double> partitioned = original;
      std::vector<NodeLearningMetric> metrics;
      for (const auto& a : partitioned.ffn_addresses())
        for (std::size_t n = 0; n < partitioned.ffn_nodes(a); ++n) metrics.push_back({a, n, rng.uniform()});
      LearnerSets sets = select_learners(metrics, r);
      if (dense2_only) std::erase_if(sets, [](const auto& kv) { return kv.first.dense != 2; });
      reconfigure(partitioned, sets);
      apply_fault(partitioned, opt.fault);
      for (std::size_t b = 0; b < opt.equivalence_batches; ++b) {
        const std::size_t batch = 1 + rng.below(4), seq = 1 + rng.below(config.max_seq_len);
        const TokenBatch tokens = random_tokens(batch, seq, config.vocab_size, rng, true);
        worst = std::max(worst, max_abs_diff(original.logits(tokens), partitioned.logits(tokens)));
        ++comparisons;
      }
    }
  }
  const double tol = dense2_only ? 0.0 : opt.equivalence_tolerance;
  return {dense2_only ? "equivalence.dense2_exact" : "equivalence.logits", worst <= tol,
          "max |diff| " + fmt(worst) + " (tolerance " + fmt(tol) + ") over " + std::to_string(comparisons) +
              " batches"};
}

Dataset tiny_dataset() {
  SyntheticTaskSpec spec;
  spec.vocab_size = 12;
  spec.seq_len = 6;
  spec.min_len = 3;
  spec.train_size = 64;
  spec.dev_size = 16;
  spec.test_size = 16;
  spec.seed = 5;
  return make_synthetic(spec);
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.num_layers = 1;
  c.d_model = 8;
  c.d_ff = 16;
  c.num_heads = 2;
  c.vocab_size = 12;
  c.max_seq_len = 6;
  c.seed = 9;
  return c;
}

CheckResult check_freeze(SelectionMode mode, bool freeze_bias) {
  const Dataset data = tiny_dataset();
  EncoderModel<double> model(tiny_model());
  TrainConfig tc;
  tc.learning_rate = 1e-2;
  tc.batch_size = 8;
  tc.max_epochs = 3;
  tc.precision = Precision::f64;
  tc.far.selection_mode = mode;
  tc.far.priming_percent = 25;
  tc.far.retention_percent = 25;
  tc.far.freeze_nonlearner_bias = freeze_bias;

  std::vector<std::pair<std::string, Tensor<double>>> frozen_at_reconfiguration;
  std::size_t violations = 0, post_steps = 0, hygiene_failures = 0;
  std::string first_violation;
  auto note = [&](const std::string& what) {
    if (violations++ == 0) first_violation = what;
  };
  TrainHooks<double> hooks;
  hooks.on_reconfigured = [&](const EncoderModel<double>& m, std::size_t) {
    m.visit([&](const Parameter<double>& p, ParameterKind) {
      if (p.name().find(".frozen.") != std::string::npos && !p.trainable()) {
        frozen_at_reconfiguration.emplace_back(p.name(), p.value());
      }
    });
  };
  hooks.after_backward = [&](const EncoderModel<double>& m, std::size_t step, const std::string& phase) {
    if (phase != kPhaseReconfigured) return;
    ++post_steps;
    m.visit([&](const Parameter<double>& p, ParameterKind) {
      if (!p.trainable() && !p.grad().all_zero()) note(p.name() + " has a gradient at step " + std::to_string(step));
    });
  };
  hooks.after_step = [&](const EncoderModel<double>& m, const Optimizer<double>& o, std::size_t) {
    if (o.state_entries() != m.trainable_parameter_count()) ++hygiene_failures;
    m.visit([&](const Parameter<double>& p, ParameterKind) {
      if (!p.trainable() && o.has_state(p.name())) ++hygiene_failures;
    });
  };
  train(model, data, tc, 0, &hooks);

  std::size_t frozen_scalars = 0;
  for (const auto& [name, value] : frozen_at_reconfiguration) {
    frozen_scalars += value.size();
    Parameter<double>* p = model.find_parameter(name);
    if (!p || !(p->value() == value)) note(name + " changed after reconfiguration");
  }
  const bool ok = violations == 0 && hygiene_failures == 0 && post_steps > 0 && !frozen_at_reconfiguration.empty();
  std::string name = std::string("freeze.") + selection_mode_name(mode) + (freeze_bias ? "" : "_trainable_bias");
  std::string detail = std::to_string(frozen_scalars) + " frozen scalars over " + std::to_string(post_steps) +
                       " post-reconfiguration steps";
  if (violations) detail += "; " + first_violation;
  if (hygiene_failures) detail += "; optimizer state mismatch in " + std::to_string(hygiene_failures) + " steps";
  return {name, ok, detail};
}

CheckResult check_metric_oracle(const VerifyOptions& opt) {
  Rng rng(505);
  std::size_t mismatches = 0, nodes = 0;
  for (std::size_t k = 0; k < opt.metric_snapshots; ++k) {
    EncoderModel<double> model(random_toy_config(rng, rng.next()));
    const WeightSnapshot<double> snap = snapshot_weights(model);
    for (const auto& a : model.ffn_addresses()) {
      auto& block = std::get<DenseBlock<double>>(model.ffn(a));
      for (auto& v : block.weight.mutable_value().data()) {
        if (rng.uniform() < 0.7) v += rng.uniform(-0.5, 0.5);
      }
      for (auto& v : block.bias.mutable_value().data()) v += rng.uniform(-0.5, 0.5);
    }
    const auto metrics = learning_metric(snap, model);
    std::size_t i = 0;
    for (const auto& a : model.ffn_addresses()) {
      const auto& w = std::get<DenseBlock<double>>(model.ffn(a)).weight.value();
      const auto& phi = snap.at(a).weight;
      const std::size_t fan_in = w.dim(1);
      for (std::size_t n = 0; n < w.dim(0); ++n, ++i) {
        double m = 0;
        for (std::size_t j = 0; j < fan_in; ++j) m += std::abs(w.at(n, j) - phi.at(n, j));
        ++nodes;
        if (i >= metrics.size() || metrics[i].address != a || metrics[i].node != n || metrics[i].metric != m) {
          ++mismatches;
        }
      }
    }
    if (i != metrics.size()) ++mismatches;
  }
  return {"metric.oracle", mismatches == 0,
          std::to_string(nodes) + " nodes over " + std::to_string(opt.metric_snapshots) + " snapshots, " +
              std::to_string(mismatches) + " mismatches"};
}

ParameterInventory ffn_only(const ParameterInventory& inv) {
  ParameterInventory out;
  for (const auto& g : inv)
    if (g.kind == ParameterKind::ffn_weight || g.kind == ParameterKind::ffn_bias) out.push_back(g);
  return out;
}

CheckResult check_counters() {
  std::vector<std::string> problems;
  const StepShape shape{16, 16 * 128};
  for (const ModelConfig& config : {ModelConfig{}, ModelConfig::paper_scale()}) {
    const std::string tag = config.d_model == 768 ? "paper" : "toy";
    const ParameterInventory full = planned_inventory(config, SelectionMode::none, 100);
    const MemoryOps train = step_cost(full, CostPhase::training, shape);
    const MemoryOps infer = step_cost(full, CostPhase::inference, shape);
    if (train.parameter_ops() != 3 * infer.parameter_reads) problems.push_back(tag + ": training/inference ratio != 3");

    MemoryOps previous;
    bool first = true;
    for (double r : {100.0, 40.0, 25.0, 10.0, 5.0, 1.0}) {
      const ParameterInventory inv = planned_inventory(config, SelectionMode::metric, r);
      std::uint64_t expected = 0;
      for (std::size_t e = 1; e <= config.num_layers; ++e) {
        expected += select_count(r, config.d_ff) * (config.d_model + 1);
        expected += select_count(r, config.d_model) * (config.d_ff + 1);
      }
      const MemoryOps ffn = step_cost(ffn_only(inv), CostPhase::training, shape);
      if (ffn.parameter_writes != expected) {
        problems.push_back(tag + " r=" + fmt(r) + ": FFN writes " + std::to_string(ffn.parameter_writes) +
                           " != " + std::to_string(expected));
      }
      const MemoryOps ops = step_cost(inv, CostPhase::training, shape);
      if (!first) {
        const bool strict = ops.parameter_reads < previous.parameter_reads &&
                            ops.parameter_writes < previous.parameter_writes && ops.total() < previous.total();
        const bool monotone = ops.activation_stores <= previous.activation_stores &&
                              ops.activation_loads <= previous.activation_loads;
        if (!strict || !monotone) problems.push_back(tag + " r=" + fmt(r) + ": counters did not decrease");
      }
      previous = ops;
      first = false;
    }
  }

  // Live models agree with the closed form, including retained activations.
  Rng rng(606);
  for (double r : {100.0, 40.0, 10.0}) {
    ModelConfig config = tiny_model();
    EncoderModel<double> model(config);
    const TokenBatch tokens = random_tokens(3, 5, config.vocab_size, rng, false);
    const std::vector<std::int32_t> labels = {0, 1, 0};
    if (r < 100) reconfigure(model, select_random(model, r, 1));
    const ParameterInventory live = inventory(model);
    const ParameterInventory planned =
        planned_inventory(config, r < 100 ? SelectionMode::metric : SelectionMode::none, r);
    if (total_parameters(live) != total_parameters(planned) ||
        trainable_parameters(live) != trainable_parameters(planned)) {
      problems.push_back("live inventory differs from planned at r=" + fmt(r));
    }
    Tape<double> tape;
    tape.backward(softmax_cross_entropy(model.forward(tape, tokens, ForwardMode::train),
                                        std::span<const std::int32_t>(labels)));
    if (tape.retained_elements() != retained_activation_elements(live, {3, 15})) {
      problems.push_back("retained activations differ from the tape at r=" + fmt(r));
    }
  }
  std::string detail = problems.empty() ? "closed forms agree" : problems.front();
  if (problems.size() > 1) detail += " (+" + std::to_string(problems.size() - 1) + " more)";
  return {"counters.closed_form", problems.empty(), detail};
}

}  // namespace

VerifyReport run_verification(const VerifyOptions& options) {
  VerifyReport report;
  report.checks.push_back(check_op_gradients(options));
  report.checks.push_back(check_model_gradients(options, false));
  report.checks.push_back(check_model_gradients(options, true));
  report.checks.push_back(check_equivalence(options, false));
  report.checks.push_back(check_equivalence(options, true));
  report.checks.push_back(check_freeze(SelectionMode::metric, true));
  report.checks.push_back(check_freeze(SelectionMode::random, true));
  report.checks.push_back(check_freeze(SelectionMode::metric, false));
  report.checks.push_back(check_metric_oracle(options));
  report.checks.push_back(check_counters());
  return report;
}

}  // namespace far
