#include "far/model.hpp"

#include <cmath>
#include <numeric>

namespace far {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw ConfigError(std::string("model.") + name + " must be at least 1");
  };
  positive(num_layers, "num_layers");
  positive(d_model, "d_model");
  positive(d_ff, "d_ff");
  positive(num_heads, "num_heads");
  positive(max_seq_len, "max_seq_len");
  positive(num_classes, "num_classes");
  if (vocab_size < 2) throw ConfigError("model.vocab_size must be at least 2 (pad and unknown ids)");
  if (d_model % num_heads != 0) {
    throw ConfigError("model.d_model (" + std::to_string(d_model) + ") must be divisible by model.num_heads (" +
                      std::to_string(num_heads) + ")");
  }
  if (!(dropout >= 0 && dropout < 1)) throw ConfigError("model.dropout must lie in [0, 1)");
  if (!(layer_norm_eps > 0)) throw ConfigError("model.layer_norm_eps must be positive");
}

ModelConfig ModelConfig::paper_scale() {
  ModelConfig c;
  c.num_layers = 6;
  c.d_model = 768;
  c.d_ff = 3072;
  c.num_heads = 12;
  c.vocab_size = 30522;
  c.max_seq_len = 512;
  c.num_classes = 2;
  return c;
}

std::string FfnSublayerAddress::label() const {
  return "encoder." + std::to_string(encoder) + ".ffn.dense" + std::to_string(dense);
}

TokenBatch make_batch(std::size_t batch, std::size_t seq, std::vector<std::int32_t> ids) {
  if (batch == 0 || seq == 0 || ids.size() != batch * seq) {
    throw DimensionError("token batch of " + std::to_string(ids.size()) + " ids does not match " +
                         std::to_string(batch) + "x" + std::to_string(seq));
  }
  return TokenBatch{batch, seq, std::move(ids)};
}

ParameterCounts count_parameters(const ModelConfig& c) {
  c.validate();
  ParameterCounts n;
  n.embedding = (c.vocab_size + c.max_seq_len) * c.d_model;
  n.attention = c.num_layers * 4 * (c.d_model * c.d_model + c.d_model);
  n.layer_norm = c.num_layers * 4 * c.d_model;
  n.ffn_weights = c.num_layers * 2 * c.d_model * c.d_ff;
  n.ffn_biases = c.num_layers * (c.d_ff + c.d_model);
  n.classifier = c.d_model * c.num_classes + c.num_classes;
  n.total = n.embedding + n.attention + n.layer_norm + n.ffn_weights + n.ffn_biases + n.classifier;
  return n;
}

namespace {

template <typename Real>
Tensor<Real> uniform_tensor(Shape shape, double limit, Rng& rng) {
  Tensor<Real> t(std::move(shape));
  for (Real& v : t.data()) v = static_cast<Real>(rng.uniform(-limit, limit));
  return t;
}

template <typename Real>
DenseBlock<Real> make_dense(const std::string& name, std::size_t out, std::size_t in, Rng& rng,
                            double limit = 0) {
  if (limit == 0) limit = 1.0 / std::sqrt(double(in));
  return DenseBlock<Real>{Parameter<Real>(name + ".weight", uniform_tensor<Real>({out, in}, limit, rng)),
                          Parameter<Real>(name + ".bias", Tensor<Real>({out}))};
}

template <typename Real>
Parameter<Real> constant_param(const std::string& name, std::size_t n, Real value) {
  return Parameter<Real>(name, Tensor<Real>::filled({n}, value));
}

template <typename Real, typename Block, typename Fn>
void visit_dense(Block& block, ParameterKind weight_kind, ParameterKind bias_kind, Fn& fn) {
  fn(block.weight, weight_kind);
  fn(block.bias, bias_kind);
}

template <typename Real, typename Ffn, typename Fn>
void visit_ffn(Ffn& dense, Fn& fn) {
  std::visit(
      [&](auto& d) {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, DenseBlock<Real>>) {
          visit_dense<Real>(d, ParameterKind::ffn_weight, ParameterKind::ffn_bias, fn);
        } else {
          visit_dense<Real>(d.learner, ParameterKind::ffn_weight, ParameterKind::ffn_bias, fn);
          if (d.frozen) visit_dense<Real>(*d.frozen, ParameterKind::ffn_weight, ParameterKind::ffn_bias, fn);
        }
      },
      dense);
}

template <typename Real, typename Model, typename Fn>
void visit_all(Model& m, Fn& fn) {
  fn(m.token_embedding, ParameterKind::embedding);
  fn(m.position_embedding, ParameterKind::embedding);
  for (auto& layer : m.layers) {
    visit_dense<Real>(layer.query, ParameterKind::attention_weight, ParameterKind::attention_bias, fn);
    visit_dense<Real>(layer.key, ParameterKind::attention_weight, ParameterKind::attention_bias, fn);
    visit_dense<Real>(layer.value, ParameterKind::attention_weight, ParameterKind::attention_bias, fn);
    visit_dense<Real>(layer.attention_output, ParameterKind::attention_weight, ParameterKind::attention_bias, fn);
    fn(layer.attention_norm_gain, ParameterKind::layer_norm);
    fn(layer.attention_norm_shift, ParameterKind::layer_norm);
    visit_ffn<Real>(layer.dense1, fn);
    visit_ffn<Real>(layer.dense2, fn);
    fn(layer.output_norm_gain, ParameterKind::layer_norm);
    fn(layer.output_norm_shift, ParameterKind::layer_norm);
  }
  visit_dense<Real>(m.classifier, ParameterKind::classifier_weight, ParameterKind::classifier_bias, fn);
}

// Reassembles rows (or bias entries) of a partitioned sublayer in original order.
template <typename Real>
Tensor<Real> merge_rows(const PartitionedFfn<Real>& p, bool bias) {
  const std::size_t width = bias ? 1 : p.fan_in();
  Tensor<Real> out(bias ? Shape{p.nodes()} : Shape{p.nodes(), width});
  auto copy_block = [&](const DenseBlock<Real>& block, std::size_t offset) {
    const Tensor<Real>& src = bias ? block.bias.value() : block.weight.value();
    for (std::size_t r = 0; r < block.nodes(); ++r) {
      const std::size_t node = p.permutation[offset + r];
      std::copy_n(src.raw() + r * width, width, out.raw() + node * width);
    }
  };
  copy_block(p.learner, 0);
  if (p.frozen) copy_block(*p.frozen, p.learner.nodes());
  return out;
}

}  // namespace

template <typename Real>
EncoderModel<Real>::EncoderModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  Rng rng(c.seed);
  token_embedding_ = Parameter<Real>("embeddings.token", uniform_tensor<Real>({c.vocab_size, c.d_model}, 1.0, rng));
  position_embedding_ =
      Parameter<Real>("embeddings.position", uniform_tensor<Real>({c.max_seq_len, c.d_model}, 1.0, rng));
  layers_.reserve(c.num_layers);
  for (std::size_t e = 1; e <= c.num_layers; ++e) {
    const std::string p = "encoder." + std::to_string(e);
    EncoderLayer<Real> layer{
        make_dense<Real>(p + ".attention.query", c.d_model, c.d_model, rng),
        make_dense<Real>(p + ".attention.key", c.d_model, c.d_model, rng),
        make_dense<Real>(p + ".attention.value", c.d_model, c.d_model, rng),
        make_dense<Real>(p + ".attention.output", c.d_model, c.d_model, rng),
        constant_param<Real>(p + ".attention_norm.gain", c.d_model, Real(1)),
        constant_param<Real>(p + ".attention_norm.shift", c.d_model, Real(0)),
        make_dense<Real>(p + ".ffn.dense1", c.d_ff, c.d_model, rng),
        make_dense<Real>(p + ".ffn.dense2", c.d_model, c.d_ff, rng),
        constant_param<Real>(p + ".output_norm.gain", c.d_model, Real(1)),
        constant_param<Real>(p + ".output_norm.shift", c.d_model, Real(0)),
    };
    layers_.push_back(std::move(layer));
  }
  // Narrower head so untrained predictions start near uniform.
  classifier_ = make_dense<Real>("classifier", c.num_classes, c.d_model, rng, 1.0 / double(c.d_model));
}

template <typename Real>
Var<Real> EncoderModel<Real>::apply_ffn_dense(Tape<Real>& tape, FfnDense<Real>& dense, Var<Real> x) {
  if (auto* plain = std::get_if<DenseBlock<Real>>(&dense)) {
    return linear(x, tape.parameter(plain->weight), tape.parameter(plain->bias));
  }
  auto& part = std::get<PartitionedFfn<Real>>(dense);
  Var<Real> out = linear(x, tape.parameter(part.learner.weight), tape.parameter(part.learner.bias));
  if (part.frozen) {
    Var<Real> rest = linear(x, tape.parameter(part.frozen->weight), tape.parameter(part.frozen->bias));
    out = concat_columns(out, rest);
  }
  if (part.permute_output) out = scatter_columns(out, std::span<const std::size_t>(part.permutation));
  return out;
}

template <typename Real>
Var<Real> EncoderModel<Real>::forward(Tape<Real>& tape, const TokenBatch& tokens, ForwardMode mode,
                                      Rng* dropout_rng) {
  const auto& c = config_;
  if (tokens.batch == 0 || tokens.seq == 0 || tokens.ids.size() != tokens.batch * tokens.seq) {
    throw DimensionError("malformed token batch");
  }
  if (tokens.seq > c.max_seq_len) {
    throw InputError("sequence length " + std::to_string(tokens.seq) + " exceeds max_seq_len " +
                     std::to_string(c.max_seq_len));
  }
  const bool use_dropout = mode == ForwardMode::train && c.dropout > 0;
  if (use_dropout && !dropout_rng) throw StateError("dropout enabled without a dropout generator");

  const std::size_t B = tokens.batch, S = tokens.seq, n = B * S;
  std::vector<std::size_t> ids(n), positions(n);
  Tensor<Real> key_mask({B, S});
  for (std::size_t i = 0; i < n; ++i) {
    const std::int32_t id = tokens.ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
      throw InputError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(c.vocab_size));
    }
    ids[i] = static_cast<std::size_t>(id);
    positions[i] = i % S;
    if (id == 0) key_mask[i] = Real(kMaskedScore);
  }

  Var<Real> x = add(gather_rows(tape.parameter(token_embedding_), std::span<const std::size_t>(ids)),
                    gather_rows(tape.parameter(position_embedding_), std::span<const std::size_t>(positions)));
  auto maybe_dropout = [&](Var<Real> v) { return use_dropout ? dropout(v, c.dropout, *dropout_rng) : v; };

  for (auto& layer : layers_) {
    auto project = [&](DenseBlock<Real>& d, Var<Real> in) {
      return linear(in, tape.parameter(d.weight), tape.parameter(d.bias));
    };
    Var<Real> q = split_heads(project(layer.query, x), B, c.num_heads);
    Var<Real> k = split_heads(project(layer.key, x), B, c.num_heads);
    Var<Real> v = split_heads(project(layer.value, x), B, c.num_heads);
    Var<Real> attended = project(layer.attention_output, merge_heads(attention(q, k, v, key_mask)));
    x = layer_norm(add(x, maybe_dropout(attended)), tape.parameter(layer.attention_norm_gain),
                   tape.parameter(layer.attention_norm_shift), c.layer_norm_eps);

    Var<Real> hidden = apply_ffn_dense(tape, layer.dense1, x);
    switch (c.activation) {
      case Activation::gelu_tanh:
        hidden = gelu(hidden, GeluKind::tanh);
        break;
      case Activation::gelu_erf:
        hidden = gelu(hidden, GeluKind::erf);
        break;
      case Activation::relu:
        hidden = relu(hidden);
        break;
    }
    Var<Real> ffn_out = apply_ffn_dense(tape, layer.dense2, hidden);
    x = layer_norm(add(x, maybe_dropout(ffn_out)), tape.parameter(layer.output_norm_gain),
                   tape.parameter(layer.output_norm_shift), c.layer_norm_eps);
  }

  std::vector<std::size_t> first_tokens(B);
  for (std::size_t b = 0; b < B; ++b) first_tokens[b] = b * S;
  Var<Real> pooled = gather_rows(x, std::span<const std::size_t>(first_tokens));
  return linear(pooled, tape.parameter(classifier_.weight), tape.parameter(classifier_.bias));
}

template <typename Real>
Tensor<Real> EncoderModel<Real>::logits(const TokenBatch& tokens) {
  Tape<Real> tape(false);
  return forward(tape, tokens, ForwardMode::eval).value();
}

template <typename Real>
void EncoderModel<Real>::visit(const ParameterVisitor& fn) {
  struct View {
    Parameter<Real>& token_embedding;
    Parameter<Real>& position_embedding;
    std::vector<EncoderLayer<Real>>& layers;
    DenseBlock<Real>& classifier;
  } view{token_embedding_, position_embedding_, layers_, classifier_};
  visit_all<Real>(view, fn);
}

template <typename Real>
void EncoderModel<Real>::visit(const ConstParameterVisitor& fn) const {
  struct View {
    const Parameter<Real>& token_embedding;
    const Parameter<Real>& position_embedding;
    const std::vector<EncoderLayer<Real>>& layers;
    const DenseBlock<Real>& classifier;
  } view{token_embedding_, position_embedding_, layers_, classifier_};
  visit_all<Real>(view, fn);
}

template <typename Real>
std::vector<Parameter<Real>*> EncoderModel<Real>::parameters() {
  std::vector<Parameter<Real>*> out;
  visit(ParameterVisitor([&](Parameter<Real>& p, ParameterKind) { out.push_back(&p); }));
  return out;
}

template <typename Real>
Parameter<Real>* EncoderModel<Real>::find_parameter(const std::string& name) {
  for (Parameter<Real>* p : parameters()) {
    if (p->name() == name) return p;
  }
  return nullptr;
}

template <typename Real>
std::vector<FfnSublayerAddress> EncoderModel<Real>::ffn_addresses() const {
  std::vector<FfnSublayerAddress> out;
  for (std::size_t e = 1; e <= layers_.size(); ++e) {
    out.push_back({e, 1});
    out.push_back({e, 2});
  }
  return out;
}

template <typename Real>
void EncoderModel<Real>::check_address(FfnSublayerAddress a) const {
  if (a.encoder < 1 || a.encoder > layers_.size() || a.dense < 1 || a.dense > 2) {
    throw InputError("FFN sublayer (" + std::to_string(a.encoder) + ", " + std::to_string(a.dense) +
                     ") outside model with " + std::to_string(layers_.size()) + " encoders");
  }
}

template <typename Real>
FfnDense<Real>& EncoderModel<Real>::ffn(FfnSublayerAddress a) {
  check_address(a);
  auto& layer = layers_[a.encoder - 1];
  return a.dense == 1 ? layer.dense1 : layer.dense2;
}

template <typename Real>
const FfnDense<Real>& EncoderModel<Real>::ffn(FfnSublayerAddress a) const {
  check_address(a);
  const auto& layer = layers_[a.encoder - 1];
  return a.dense == 1 ? layer.dense1 : layer.dense2;
}

template <typename Real>
std::size_t EncoderModel<Real>::ffn_nodes(FfnSublayerAddress a) const {
  return std::visit([](const auto& d) { return d.nodes(); }, ffn(a));
}

template <typename Real>
std::size_t EncoderModel<Real>::ffn_fan_in(FfnSublayerAddress a) const {
  return std::visit([](const auto& d) { return d.fan_in(); }, ffn(a));
}

template <typename Real>
Tensor<Real> EncoderModel<Real>::ffn_weight(FfnSublayerAddress a) const {
  const auto& d = ffn(a);
  if (const auto* plain = std::get_if<DenseBlock<Real>>(&d)) return plain->weight.value();
  return merge_rows(std::get<PartitionedFfn<Real>>(d), false);
}

template <typename Real>
Tensor<Real> EncoderModel<Real>::ffn_bias(FfnSublayerAddress a) const {
  const auto& d = ffn(a);
  if (const auto* plain = std::get_if<DenseBlock<Real>>(&d)) return plain->bias.value();
  return merge_rows(std::get<PartitionedFfn<Real>>(d), true);
}

template <typename Real>
bool EncoderModel<Real>::is_reconfigured() const {
  for (const auto& layer : layers_) {
    if (std::holds_alternative<PartitionedFfn<Real>>(layer.dense1) ||
        std::holds_alternative<PartitionedFfn<Real>>(layer.dense2)) {
      return true;
    }
  }
  return false;
}

template <typename Real>
ParameterCounts EncoderModel<Real>::count_parameters() const {
  ParameterCounts n;
  visit(ConstParameterVisitor([&](const Parameter<Real>& p, ParameterKind kind) {
    n.total += p.size();
    switch (kind) {
      case ParameterKind::embedding:
        n.embedding += p.size();
        break;
      case ParameterKind::attention_weight:
      case ParameterKind::attention_bias:
        n.attention += p.size();
        break;
      case ParameterKind::layer_norm:
        n.layer_norm += p.size();
        break;
      case ParameterKind::ffn_weight:
        n.ffn_weights += p.size();
        break;
      case ParameterKind::ffn_bias:
        n.ffn_biases += p.size();
        break;
      case ParameterKind::classifier_weight:
      case ParameterKind::classifier_bias:
        n.classifier += p.size();
        break;
    }
  }));
  return n;
}

template <typename Real>
std::size_t EncoderModel<Real>::trainable_parameter_count() const {
  std::size_t n = 0;
  visit(ConstParameterVisitor([&](const Parameter<Real>& p, ParameterKind) { n += p.trainable() ? p.size() : 0; }));
  return n;
}

template <typename Real>
void EncoderModel<Real>::set_all_trainable(bool trainable) {
  visit(ParameterVisitor([&](Parameter<Real>& p, ParameterKind) { p.set_trainable(trainable); }));
}

template <typename Real>
void EncoderModel<Real>::zero_grad() {
  visit(ParameterVisitor([](Parameter<Real>& p, ParameterKind) { p.zero_grad(); }));
}

template class EncoderModel<float>;
template class EncoderModel<double>;

}  // namespace far
