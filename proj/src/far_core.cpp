#include "far/far_core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace far {

const char* selection_mode_name(SelectionMode mode) {
  switch (mode) {
    case SelectionMode::metric:
      return "metric";
    case SelectionMode::random:
      return "random";
    case SelectionMode::bias_only:
      return "bias_only";
    case SelectionMode::none:
      return "none";
  }
  return "?";
}

SelectionMode parse_selection_mode(const std::string& name) {
  for (auto m : {SelectionMode::metric, SelectionMode::random, SelectionMode::bias_only, SelectionMode::none}) {
    if (name == selection_mode_name(m)) return m;
  }
  throw ConfigError("unknown selection mode '" + name + "' (expected metric, random, bias_only or none)");
}

void FarConfig::validate() const {
  if (selection_mode == SelectionMode::none || selection_mode == SelectionMode::bias_only) return;
  if (!(priming_percent > 0 && priming_percent <= 100)) throw ConfigError("far.p must lie in (0, 100]");
  if (!(retention_percent > 0 && retention_percent <= 100)) throw ConfigError("far.r must lie in (0, 100]");
}

template <typename Real>
const typename WeightSnapshot<Real>::Entry& WeightSnapshot<Real>::at(FfnSublayerAddress address) const {
  for (const auto& e : entries_) {
    if (e.address == address) return e;
  }
  throw StateError("snapshot has no entry for " + address.label());
}

template <typename Real>
WeightSnapshot<Real> snapshot_weights(const EncoderModel<Real>& model) {
  std::vector<typename WeightSnapshot<Real>::Entry> entries;
  for (const auto& a : model.ffn_addresses()) entries.push_back({a, model.ffn_weight(a), model.ffn_bias(a)});
  return WeightSnapshot<Real>(std::move(entries));
}

template <typename Real>
std::vector<NodeLearningMetric> learning_metric(const WeightSnapshot<Real>& snapshot, const EncoderModel<Real>& model) {
  const auto addresses = model.ffn_addresses();
  if (snapshot.entries().size() != addresses.size()) {
    throw StateError("snapshot covers " + std::to_string(snapshot.entries().size()) + " sublayers, model has " +
                     std::to_string(addresses.size()));
  }
  std::vector<NodeLearningMetric> out;
  for (const auto& a : addresses) {
    const Tensor<Real>& initial = snapshot.at(a).weight;
    const Tensor<Real> current = model.ffn_weight(a);
    if (initial.shape() != current.shape()) {
      throw StateError(a.label() + ": snapshot shape " + shape_string(initial.shape()) + " differs from model shape " +
                       shape_string(current.shape()));
    }
    const std::size_t nodes = current.dim(0), width = current.dim(1);
    for (std::size_t n = 0; n < nodes; ++n) {
      double m = 0;
      for (std::size_t j = 0; j < width; ++j) {
        m += std::abs(static_cast<double>(current[n * width + j]) - static_cast<double>(initial[n * width + j]));
      }
      out.push_back({a, n, m});
    }
  }
  return out;
}

std::size_t select_count(double retention_percent, std::size_t nodes) {
  if (!(retention_percent > 0 && retention_percent <= 100)) {
    throw InputError("retention percentage must lie in (0, 100]");
  }
  const double exact = retention_percent * double(nodes) / 100.0;
  const auto rounded = static_cast<std::size_t>(std::floor(exact + 0.5));
  return std::min(nodes, std::max<std::size_t>(1, rounded));
}

LearnerSets select_learners(std::span<const NodeLearningMetric> metrics, double retention_percent) {
  if (metrics.empty()) throw StateError("no learning metrics to select from");
  std::map<FfnSublayerAddress, std::vector<double>> by_sublayer;
  std::map<FfnSublayerAddress, std::vector<char>> seen;
  for (const auto& m : metrics) {
    auto& values = by_sublayer[m.address];
    auto& flags = seen[m.address];
    if (m.node >= values.size()) {
      values.resize(m.node + 1, 0.0);
      flags.resize(m.node + 1, 0);
    }
    if (flags[m.node]) throw StateError(m.address.label() + ": duplicate metric for node " + std::to_string(m.node));
    flags[m.node] = 1;
    values[m.node] = m.metric;
  }
  LearnerSets out;
  for (const auto& [address, values] : by_sublayer) {
    const auto& flags = seen[address];
    if (std::find(flags.begin(), flags.end(), 0) != flags.end()) {
      throw StateError(address.label() + ": learning metrics are incomplete");
    }
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
    order.resize(select_count(retention_percent, values.size()));
    std::sort(order.begin(), order.end());
    out.emplace(address, std::move(order));
  }
  return out;
}

template <typename Real>
LearnerSets select_random(const EncoderModel<Real>& model, double retention_percent, std::uint64_t seed) {
  Rng rng(seed);
  LearnerSets out;
  for (const auto& a : model.ffn_addresses()) {
    const std::size_t nodes = model.ffn_nodes(a);
    std::vector<std::size_t> all(nodes);
    std::iota(all.begin(), all.end(), 0);
    rng.shuffle(all);
    all.resize(select_count(retention_percent, nodes));
    std::sort(all.begin(), all.end());
    out.emplace(a, std::move(all));
  }
  return out;
}

namespace {

template <typename Real>
DenseBlock<Real> take_rows(const DenseBlock<Real>& src, const std::vector<std::size_t>& rows, const std::string& name,
                           bool trainable) {
  const std::size_t width = src.fan_in();
  Tensor<Real> w({rows.size(), width});
  Tensor<Real> b({rows.size()});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(src.weight.value().raw() + rows[r] * width, width, w.raw() + r * width);
    b[r] = src.bias.value()[rows[r]];
  }
  return DenseBlock<Real>{Parameter<Real>(name + ".weight", std::move(w), trainable),
                          Parameter<Real>(name + ".bias", std::move(b), trainable)};
}

std::string base_name(const std::string& weight_name) {
  return weight_name.substr(0, weight_name.size() - std::string(".weight").size());
}

}  // namespace

template <typename Real>
ReconfigurationRecord reconfigure(EncoderModel<Real>& model, const LearnerSets& learners, ReconfigureOptions options) {
  // Validate everything before mutating anything.
  for (const auto& [address, nodes] : learners) {
    auto& dense = model.ffn(address);
    if (!std::holds_alternative<DenseBlock<Real>>(dense)) {
      throw StateError(address.label() + " is already reconfigured");
    }
    const std::size_t n = model.ffn_nodes(address);
    if (nodes.empty()) throw InputError(address.label() + ": learner set is empty");
    std::vector<char> seen(n, 0);
    for (std::size_t node : nodes) {
      if (node >= n) {
        throw InputError(address.label() + ": learner index " + std::to_string(node) + " out of range for " +
                         std::to_string(n) + " nodes");
      }
      if (seen[node]) throw InputError(address.label() + ": duplicate learner index " + std::to_string(node));
      seen[node] = 1;
    }
  }

  ReconfigurationRecord record;
  for (const auto& [address, nodes] : learners) {
    auto& dense = model.ffn(address);
    const DenseBlock<Real> source = std::get<DenseBlock<Real>>(dense);
    const std::size_t n = source.nodes();
    std::vector<std::size_t> learner_nodes = nodes;
    std::sort(learner_nodes.begin(), learner_nodes.end());
    std::vector<char> is_learner(n, 0);
    for (std::size_t node : learner_nodes) is_learner[node] = 1;
    std::vector<std::size_t> frozen_nodes;
    for (std::size_t node = 0; node < n; ++node) {
      if (!is_learner[node]) frozen_nodes.push_back(node);
    }

    const std::string base = base_name(source.weight.name());
    PartitionedFfn<Real> part;
    part.learner = take_rows(source, learner_nodes, base + ".learner", true);
    if (!frozen_nodes.empty()) {
      part.frozen = take_rows(source, frozen_nodes, base + ".frozen", false);
      if (!options.freeze_nonlearner_bias) part.frozen->bias.set_trainable(true);
    }
    part.learner_nodes = learner_nodes;
    part.permutation = learner_nodes;
    part.permutation.insert(part.permutation.end(), frozen_nodes.begin(), frozen_nodes.end());

    SublayerReconfiguration r;
    r.address = address;
    r.source_weight = source.weight.name();
    r.source_bias = source.bias.name();
    r.learner_weight = part.learner.weight.name();
    r.learner_bias = part.learner.bias.name();
    r.learner_nodes = learner_nodes;
    r.fan_in = source.fan_in();
    if (part.frozen && part.frozen->bias.trainable()) {
      r.frozen_bias = part.frozen->bias.name();
      r.frozen_nodes = frozen_nodes;
    }
    record.sublayers.push_back(std::move(r));
    dense = std::move(part);
  }
  return record;
}

template <typename Real>
void apply_bias_only(EncoderModel<Real>& model) {
  model.visit(typename EncoderModel<Real>::ParameterVisitor(
      [](Parameter<Real>& p, ParameterKind kind) { p.set_trainable(is_bias_like(kind)); }));
}

void write_learner_report(std::ostream& out, std::span<const NodeLearningMetric> metrics, const LearnerSets& learners) {
  out << "encoder\tdense\tnode\tmetric\tclass\n";
  char buf[64];
  for (const auto& m : metrics) {
    bool learner = false;
    if (auto it = learners.find(m.address); it != learners.end()) {
      learner = std::binary_search(it->second.begin(), it->second.end(), m.node);
    }
    std::snprintf(buf, sizeof buf, "%.17g", m.metric);
    out << m.address.encoder << '\t' << m.address.dense << '\t' << m.node << '\t' << buf << '\t'
        << (learner ? "learner" : "nonlearner") << '\n';
  }
}

#define FAR_INSTANTIATE_CORE(Real)                                                                        \
  template class WeightSnapshot<Real>;                                                                    \
  template WeightSnapshot<Real> snapshot_weights(const EncoderModel<Real>&);                              \
  template std::vector<NodeLearningMetric> learning_metric(const WeightSnapshot<Real>&,                   \
                                                           const EncoderModel<Real>&);                    \
  template LearnerSets select_random(const EncoderModel<Real>&, double, std::uint64_t);                   \
  template ReconfigurationRecord reconfigure(EncoderModel<Real>&, const LearnerSets&, ReconfigureOptions); \
  template void apply_bias_only(EncoderModel<Real>&);

FAR_INSTANTIATE_CORE(float)
FAR_INSTANTIATE_CORE(double)

}  // namespace far
