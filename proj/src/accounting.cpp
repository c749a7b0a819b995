#include "far/accounting.hpp"

namespace far {

MemoryOps& MemoryOps::operator+=(const MemoryOps& o) {
  parameter_reads += o.parameter_reads;
  parameter_writes += o.parameter_writes;
  activation_stores += o.activation_stores;
  activation_loads += o.activation_loads;
  data_reads += o.data_reads;
  optimizer_state_reads += o.optimizer_state_reads;
  optimizer_state_writes += o.optimizer_state_writes;
  return *this;
}

std::vector<std::pair<std::string, std::uint64_t>> counter_list(const MemoryOps& ops) {
  return {
      {"parameter_reads", ops.parameter_reads},
      {"parameter_writes", ops.parameter_writes},
      {"activation_stores", ops.activation_stores},
      {"activation_loads", ops.activation_loads},
      {"data_reads", ops.data_reads},
      {"total_memory_ops", ops.total()},
      {"optimizer_state_reads", ops.optimizer_state_reads},
      {"optimizer_state_writes", ops.optimizer_state_writes},
  };
}

namespace {

bool is_dense_weight(ParameterKind k) {
  return k == ParameterKind::attention_weight || k == ParameterKind::ffn_weight ||
         k == ParameterKind::classifier_weight;
}

void add_dense(ParameterInventory& inv, const std::string& name, ParameterKind wk, ParameterKind bk, std::size_t rows,
               std::size_t fan_in, bool weight_trainable, bool bias_trainable, bool per_token) {
  inv.push_back({name + ".weight", wk, rows * fan_in, weight_trainable, fan_in, per_token});
  inv.push_back({name + ".bias", bk, rows, bias_trainable, 0, per_token});
}

}  // namespace

template <typename Real>
ParameterInventory inventory(const EncoderModel<Real>& model) {
  ParameterInventory inv;
  model.visit(typename EncoderModel<Real>::ConstParameterVisitor([&](const Parameter<Real>& p, ParameterKind kind) {
    ParameterGroup g;
    g.name = p.name();
    g.kind = kind;
    g.count = p.size();
    g.trainable = p.trainable();
    g.fan_in = is_dense_weight(kind) ? p.shape()[1] : 0;
    g.per_token = kind != ParameterKind::classifier_weight && kind != ParameterKind::classifier_bias;
    inv.push_back(std::move(g));
  }));
  return inv;
}

ParameterInventory planned_inventory(const ModelConfig& c, SelectionMode mode, double retention_percent,
                                     bool freeze_nonlearner_bias) {
  c.validate();
  const bool bias_only = mode == SelectionMode::bias_only;
  const bool partitioned = mode == SelectionMode::metric || mode == SelectionMode::random;
  ParameterInventory inv;
  inv.push_back({"embeddings.token", ParameterKind::embedding, c.vocab_size * c.d_model, !bias_only, 0, true});
  inv.push_back({"embeddings.position", ParameterKind::embedding, c.max_seq_len * c.d_model, !bias_only, 0, true});
  for (std::size_t e = 1; e <= c.num_layers; ++e) {
    const std::string p = "encoder." + std::to_string(e);
    for (const char* proj : {"query", "key", "value", "output"}) {
      add_dense(inv, p + ".attention." + proj, ParameterKind::attention_weight, ParameterKind::attention_bias,
                c.d_model, c.d_model, !bias_only, true, true);
    }
    inv.push_back({p + ".attention_norm.gain", ParameterKind::layer_norm, c.d_model, true, 0, true});
    inv.push_back({p + ".attention_norm.shift", ParameterKind::layer_norm, c.d_model, true, 0, true});
    const std::pair<std::size_t, std::size_t> dims[2] = {{c.d_ff, c.d_model}, {c.d_model, c.d_ff}};
    for (std::size_t i = 0; i < 2; ++i) {
      const auto [nodes, fan_in] = dims[i];
      const std::string base = p + ".ffn.dense" + std::to_string(i + 1);
      if (partitioned) {
        const std::size_t learners = select_count(retention_percent, nodes);
        add_dense(inv, base + ".learner", ParameterKind::ffn_weight, ParameterKind::ffn_bias, learners, fan_in, true,
                  true, true);
        if (learners < nodes) {
          add_dense(inv, base + ".frozen", ParameterKind::ffn_weight, ParameterKind::ffn_bias, nodes - learners, fan_in,
                    false, !freeze_nonlearner_bias, true);
        }
      } else {
        add_dense(inv, base, ParameterKind::ffn_weight, ParameterKind::ffn_bias, nodes, fan_in, !bias_only, true,
                  true);
      }
    }
    inv.push_back({p + ".output_norm.gain", ParameterKind::layer_norm, c.d_model, true, 0, true});
    inv.push_back({p + ".output_norm.shift", ParameterKind::layer_norm, c.d_model, true, 0, true});
  }
  add_dense(inv, "classifier", ParameterKind::classifier_weight, ParameterKind::classifier_bias, c.num_classes,
            c.d_model, !bias_only, true, false);
  return inv;
}

std::size_t total_parameters(const ParameterInventory& inv) {
  std::size_t n = 0;
  for (const auto& g : inv) n += g.count;
  return n;
}

std::size_t trainable_parameters(const ParameterInventory& inv) {
  std::size_t n = 0;
  for (const auto& g : inv) n += g.trainable ? g.count : 0;
  return n;
}

double trainable_fraction(const ParameterInventory& inv) {
  const std::size_t total = total_parameters(inv);
  return total == 0 ? 0.0 : double(trainable_parameters(inv)) / double(total);
}

std::uint64_t retained_activation_elements(const ParameterInventory& inv, StepShape shape) {
  std::uint64_t n = 0;
  for (const auto& g : inv) {
    if (g.trainable && is_dense_weight(g.kind)) n += (g.per_token ? shape.tokens : shape.examples) * g.fan_in;
  }
  return n;
}

MemoryOps step_cost(const ParameterInventory& inv, CostPhase phase, StepShape shape, const MemoryOpModel& m) {
  MemoryOps ops;
  ops.data_reads = m.data_reads_per_example * shape.examples;
  if (phase == CostPhase::inference) {
    ops.parameter_reads = m.inference_reads * total_parameters(inv);
    return ops;
  }
  for (const auto& g : inv) {
    if (g.trainable) {
      ops.parameter_reads += m.trainable_reads * g.count;
      ops.parameter_writes += m.trainable_writes * g.count;
      ops.optimizer_state_reads += m.optimizer_moments * g.count;
      ops.optimizer_state_writes += m.optimizer_moments * g.count;
    } else {
      ops.parameter_reads += m.frozen_reads * g.count;
    }
  }
  const std::uint64_t retained = retained_activation_elements(inv, shape);
  ops.activation_stores = m.activation_stores * retained;
  ops.activation_loads = m.activation_loads * retained;
  return ops;
}

PhaseTotals& ResourceReport::phase(const std::string& name, CostPhase kind) {
  for (auto& p : phases) {
    if (p.name == name) return p;
  }
  phases.push_back({name, kind, 0, {}, std::nullopt});
  return phases.back();
}

const PhaseTotals* ResourceReport::find_phase(const std::string& name) const {
  for (const auto& p : phases) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

void ResourceReport::add_step(const std::string& name, CostPhase kind, const MemoryOps& ops) {
  PhaseTotals& p = phase(name, kind);
  p.steps += 1;
  p.ops += ops;
}

MemoryOps ResourceReport::training_totals() const {
  MemoryOps out;
  for (const auto& p : phases) {
    if (p.kind == CostPhase::training) out += p.ops;
  }
  return out;
}

MemoryOps ResourceReport::totals() const {
  MemoryOps out;
  for (const auto& p : phases) out += p.ops;
  return out;
}

std::size_t ResourceReport::training_steps() const {
  std::size_t n = 0;
  for (const auto& p : phases) n += p.kind == CostPhase::training ? p.steps : 0;
  return n;
}

ResourceReport& ResourceReport::merge(const ResourceReport& other) {
  if (total_parameters == 0 && phases.empty()) {
    total_parameters = other.total_parameters;
    trainable_parameters = other.trainable_parameters;
    frozen_parameters = other.frozen_parameters;
  } else if (total_parameters != other.total_parameters) {
    throw InputError("cannot merge resource reports over different parameter totals");
  }
  for (const auto& p : other.phases) {
    PhaseTotals& mine = phase(p.name, p.kind);
    mine.steps += p.steps;
    mine.ops += p.ops;
    if (p.wall_seconds) mine.wall_seconds = mine.wall_seconds.value_or(0.0) + *p.wall_seconds;
  }
  return *this;
}

bool operator==(const ResourceReport& a, const ResourceReport& b) {
  if (a.total_parameters != b.total_parameters || a.trainable_parameters != b.trainable_parameters ||
      a.frozen_parameters != b.frozen_parameters || a.phases.size() != b.phases.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.phases.size(); ++i) {
    const auto& x = a.phases[i];
    const auto& y = b.phases[i];
    if (x.name != y.name || x.kind != y.kind || x.steps != y.steps || !(x.ops == y.ops)) return false;
  }
  return true;
}

std::vector<Reduction> compare_runs(const ResourceReport& baseline, const ResourceReport& candidate) {
  if (baseline.total_parameters != candidate.total_parameters) {
    throw InputError("resource reports cover different models (" + std::to_string(baseline.total_parameters) +
                     " vs " + std::to_string(candidate.total_parameters) + " parameters)");
  }
  auto a = counter_list(baseline.training_totals());
  auto b = counter_list(candidate.training_totals());
  a.emplace_back("trainable_parameters", baseline.trainable_parameters);
  b.emplace_back("trainable_parameters", candidate.trainable_parameters);
  std::vector<Reduction> out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    Reduction r{a[i].first, a[i].second, b[i].second, 0.0};
    if (r.baseline != 0) r.percent = 100.0 * (double(r.baseline) - double(r.candidate)) / double(r.baseline);
    out.push_back(r);
  }
  return out;
}

template ParameterInventory inventory(const EncoderModel<float>&);
template ParameterInventory inventory(const EncoderModel<double>&);

}  // namespace far
