#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "far/ops.hpp"
#include "far/random.hpp"
#include "far/tape.hpp"

namespace far {

enum class Activation { gelu_tanh, gelu_erf, relu };

/// Encoder classifier dimensions. Defaults are a desk-scale toy;
/// paper_scale() returns the DistilBERT-shaped configuration.
struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t d_model = 32;
  std::size_t d_ff = 64;
  std::size_t num_heads = 2;
  std::size_t vocab_size = 32;
  std::size_t max_seq_len = 16;
  std::size_t num_classes = 2;
  std::uint64_t seed = 0;
  Activation activation = Activation::gelu_tanh;
  /// Applied after the attention and FFN sublayers in training mode only.
  double dropout = 0.0;
  double layer_norm_eps = 1e-12;

  /// Throws ConfigError.
  void validate() const;

  static ModelConfig paper_scale();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// One dense layer of one encoder's FFN; both indices are 1-based.
struct FfnSublayerAddress {
  std::size_t encoder = 1;
  std::size_t dense = 1;

  std::string label() const;  // "encoder.<e>.ffn.dense<i>"
  friend auto operator<=>(const FfnSublayerAddress&, const FfnSublayerAddress&) = default;
};

/// Row-major b x s matrix of token ids; id 0 is padding.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;

  std::int32_t at(std::size_t b, std::size_t s) const { return ids[b * seq + s]; }
};

enum class ParameterKind {
  embedding,
  attention_weight,
  attention_bias,
  layer_norm,
  ffn_weight,
  ffn_bias,
  classifier_weight,
  classifier_bias,
};

inline bool is_bias_like(ParameterKind k) {
  return k == ParameterKind::attention_bias || k == ParameterKind::ffn_bias ||
         k == ParameterKind::classifier_bias || k == ParameterKind::layer_norm;
}

/// A dense layer whose nodes are the rows of `weight` (out x in) paired with
/// the entries of `bias`.
template <typename Real>
struct DenseBlock {
  Parameter<Real> weight;
  Parameter<Real> bias;

  std::size_t nodes() const { return weight.shape()[0]; }
  std::size_t fan_in() const { return weight.shape()[1]; }
  void set_trainable(bool t) {
    weight.set_trainable(t);
    bias.set_trainable(t);
  }
};

/// A dense layer split into a trainable learner block and a frozen block.
/// Their outputs are concatenated [learner | frozen] and scattered back to
/// the original node order through `permutation`.
template <typename Real>
struct PartitionedFfn {
  DenseBlock<Real> learner;
  std::optional<DenseBlock<Real>> frozen;
  /// Original indices of learner nodes, ascending.
  std::vector<std::size_t> learner_nodes;
  /// permutation[c] is the original node of concatenated output column c.
  std::vector<std::size_t> permutation;
  /// Cleared only by fault-injection checks.
  bool permute_output = true;

  std::size_t nodes() const { return permutation.size(); }
  std::size_t fan_in() const { return learner.fan_in(); }
};

template <typename Real>
using FfnDense = std::variant<DenseBlock<Real>, PartitionedFfn<Real>>;

template <typename Real>
struct EncoderLayer {
  DenseBlock<Real> query;
  DenseBlock<Real> key;
  DenseBlock<Real> value;
  DenseBlock<Real> attention_output;
  Parameter<Real> attention_norm_gain;
  Parameter<Real> attention_norm_shift;
  FfnDense<Real> dense1;
  FfnDense<Real> dense2;
  Parameter<Real> output_norm_gain;
  Parameter<Real> output_norm_shift;
};

/// Exact parameter counts by group.
struct ParameterCounts {
  std::size_t total = 0;
  std::size_t embedding = 0;
  std::size_t attention = 0;
  std::size_t layer_norm = 0;
  std::size_t ffn_weights = 0;
  std::size_t ffn_biases = 0;
  std::size_t classifier = 0;

  std::size_t non_embedding() const { return total - embedding; }
  double ffn_weight_share_of_total() const { return double(ffn_weights) / double(total); }
  double ffn_weight_share_of_non_embedding() const { return double(ffn_weights) / double(non_embedding()); }

  friend bool operator==(const ParameterCounts&, const ParameterCounts&) = default;
};

/// Closed-form counts; never allocates the model.
ParameterCounts count_parameters(const ModelConfig& config);

enum class ForwardMode { eval, train };

template <typename Real>
class EncoderModel {
 public:
  using ParameterVisitor = std::function<void(Parameter<Real>&, ParameterKind)>;
  using ConstParameterVisitor = std::function<void(const Parameter<Real>&, ParameterKind)>;

  /// Deterministic initialization from config.seed: weight matrices
  /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) except the classifier's
  /// U(-1/fan_in, 1/fan_in), embeddings U(-1, 1), biases 0, layer-norm
  /// gain 1 and shift 0. Every parameter starts trainable.
  explicit EncoderModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  /// Records the forward pass on `tape` and returns [b x num_classes] logits.
  /// Dropout (when configured) needs `dropout_rng` in train mode.
  Var<Real> forward(Tape<Real>& tape, const TokenBatch& tokens, ForwardMode mode = ForwardMode::eval,
                    Rng* dropout_rng = nullptr);

  /// Inference-only logits.
  Tensor<Real> logits(const TokenBatch& tokens);

  /// Visits every parameter in a fixed order (the checkpoint order).
  void visit(const ParameterVisitor& fn);
  void visit(const ConstParameterVisitor& fn) const;

  std::vector<Parameter<Real>*> parameters();
  Parameter<Real>* find_parameter(const std::string& name);

  std::vector<FfnSublayerAddress> ffn_addresses() const;
  FfnDense<Real>& ffn(FfnSublayerAddress address);
  const FfnDense<Real>& ffn(FfnSublayerAddress address) const;
  std::size_t ffn_nodes(FfnSublayerAddress address) const;
  std::size_t ffn_fan_in(FfnSublayerAddress address) const;

  /// Weight matrix and bias of an FFN sublayer in original node order,
  /// reassembled from the blocks when the sublayer is partitioned.
  Tensor<Real> ffn_weight(FfnSublayerAddress address) const;
  Tensor<Real> ffn_bias(FfnSublayerAddress address) const;
  bool is_reconfigured() const;

  std::vector<EncoderLayer<Real>>& layers() { return layers_; }
  const std::vector<EncoderLayer<Real>>& layers() const { return layers_; }
  DenseBlock<Real>& classifier() { return classifier_; }

  ParameterCounts count_parameters() const;
  std::size_t trainable_parameter_count() const;

  void set_all_trainable(bool trainable);
  void zero_grad();

 private:
  Var<Real> apply_ffn_dense(Tape<Real>& tape, FfnDense<Real>& dense, Var<Real> x);
  void check_address(FfnSublayerAddress address) const;

  ModelConfig config_;
  Parameter<Real> token_embedding_;
  Parameter<Real> position_embedding_;
  std::vector<EncoderLayer<Real>> layers_;
  DenseBlock<Real> classifier_;
};

template <typename Real>
EncoderModel<Real> build_model(const ModelConfig& config) {
  return EncoderModel<Real>(config);
}

/// Convenience for tests and tools: token ids -> batch with validation of
/// shape only.
TokenBatch make_batch(std::size_t batch, std::size_t seq, std::vector<std::int32_t> ids);

}  // namespace far
