#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "far/random.hpp"
#include "far/tape.hpp"

namespace far {

enum class GeluKind { tanh, erf };

enum class ElementwiseOp { add, add_bias_broadcast, gelu, relu };

/// Additive mask value for padded key positions.
inline constexpr double kMaskedScore = -1e9;

/// [m x k] . [k x n] -> [m x n]
template <typename Real>
Var<Real> matmul(Var<Real> a, Var<Real> b);

/// Same-shape element-wise sum.
template <typename Real>
Var<Real> add(Var<Real> a, Var<Real> b);

/// Adds a [d] bias to every row of a [... x d] tensor.
template <typename Real>
Var<Real> add_bias(Var<Real> x, Var<Real> bias);

/// tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)));
/// erf form: 0.5 x (1 + erf(x / sqrt(2))).
template <typename Real>
Var<Real> gelu(Var<Real> x, GeluKind kind = GeluKind::tanh);

template <typename Real>
Var<Real> relu(Var<Real> x);

/// Dispatcher over the element-wise family; `y` is required for the two
/// binary ops and must be absent for the unary ones.
template <typename Real>
Var<Real> elementwise(ElementwiseOp op, Var<Real> x, std::optional<Var<Real>> y = std::nullopt);

/// Row-wise (x - mean) / sqrt(var + eps) * gain + shift over the last axis.
template <typename Real>
Var<Real> layer_norm(Var<Real> x, Var<Real> gain, Var<Real> shift, double eps);

/// Mean negative log-likelihood over a [b x c] batch of logits.
template <typename Real>
Var<Real> softmax_cross_entropy(Var<Real> logits, std::span<const std::int32_t> labels);

/// softmax(q k^T / sqrt(d_h) + mask) v for [b x h x s x d_h] inputs.
/// `key_mask` is either empty or an additive [b x s] mask over key positions.
template <typename Real>
Var<Real> attention(Var<Real> q, Var<Real> k, Var<Real> v, const Tensor<Real>& key_mask);

/// Dense layer: x [n x in], weight [out x in], bias [out] -> x weight^T + bias.
/// Each output unit is computed as a left-to-right dot product followed by
/// the bias, so any row subset of `weight` reproduces the same outputs
/// bit-for-bit. When the weight requires a gradient the input is counted
/// as retained on the tape.
template <typename Real>
Var<Real> linear(Var<Real> x, Var<Real> weight, Var<Real> bias);

/// out[r] = table[indices[r]] for a rank-2 table.
template <typename Real>
Var<Real> gather_rows(Var<Real> table, std::span<const std::size_t> indices);

/// out[:, positions[c]] = x[:, c]; `positions` must be a permutation.
template <typename Real>
Var<Real> scatter_columns(Var<Real> x, std::span<const std::size_t> positions);

template <typename Real>
Var<Real> concat_columns(Var<Real> a, Var<Real> b);

/// [b*s x h*d_h] -> [b x h x s x d_h]
template <typename Real>
Var<Real> split_heads(Var<Real> x, std::size_t batch, std::size_t heads);

/// [b x h x s x d_h] -> [b*s x h*d_h]
template <typename Real>
Var<Real> merge_heads(Var<Real> x);

/// Inverted dropout with a mask drawn from `rng`.
template <typename Real>
Var<Real> dropout(Var<Real> x, double rate, Rng& rng);

/// Sum of all elements, as a [1] tensor.
template <typename Real>
Var<Real> sum(Var<Real> x);

}  // namespace far
