#include "far/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>

namespace far {
namespace {

template <typename Real>
Tape<Real>& same_tape(std::initializer_list<Var<Real>> vars) {
  Tape<Real>* tape = nullptr;
  for (const auto& v : vars) {
    Tape<Real>& t = v.tape();
    t.check(v);
    if (tape && tape != &t) throw StateError("operands recorded on different computation records");
    tape = &t;
  }
  return *tape;
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
  }
}

template <typename Real>
void accumulate(Tensor<Real>& into, const Tensor<Real>& from) {
  auto a = into.data();
  auto b = from.data();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

constexpr double kGeluTanhScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

template <typename Real>
Real gelu_value(Real x, GeluKind kind) {
  if (kind == GeluKind::tanh) {
    const Real u = Real(kGeluTanhScale) * (x + Real(kGeluCubic) * x * x * x);
    return Real(0.5) * x * (Real(1) + std::tanh(u));
  }
  return Real(0.5) * x * (Real(1) + std::erf(x / std::numbers::sqrt2_v<Real>));
}

template <typename Real>
Real gelu_slope(Real x, GeluKind kind) {
  if (kind == GeluKind::tanh) {
    const Real u = Real(kGeluTanhScale) * (x + Real(kGeluCubic) * x * x * x);
    const Real t = std::tanh(u);
    const Real du = Real(kGeluTanhScale) * (Real(1) + Real(3 * kGeluCubic) * x * x);
    return Real(0.5) * (Real(1) + t) + Real(0.5) * x * (Real(1) - t * t) * du;
  }
  const Real pdf = std::exp(Real(-0.5) * x * x) * Real(0.3989422804014327);  // 1/sqrt(2 pi)
  return Real(0.5) * (Real(1) + std::erf(x / std::numbers::sqrt2_v<Real>)) + x * pdf;
}

}  // namespace

template <typename Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
  Tape<Real>& tape = same_tape({a, b});
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) mismatch("matmul", sa, sb);
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor<Real> out({m, n});
  const Real* A = a.value().raw();
  const Real* B = b.value().raw();
  Real* C = out.raw();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) C[i * n + j] += aip * B[p * n + j];
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.emit(std::move(out), {a, b}, [ia, ib, m, k, n](Tape<Real>& t, std::size_t self) {
    const Real* dC = t.adjoint(self).raw();
    if (t.requires_grad(ia)) {
      const Real* B = t.value(ib).raw();
      Real* dA = t.adjoint(ia).raw();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          Real acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += dC[i * n + j] * B[p * n + j];
          dA[i * k + p] += acc;
        }
    }
    if (t.requires_grad(ib)) {
      const Real* A = t.value(ia).raw();
      Real* dB = t.adjoint(ib).raw();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const Real aip = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += aip * dC[i * n + j];
        }
    }
  });
}

template <typename Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
  Tape<Real>& tape = same_tape({a, b});
  if (a.shape() != b.shape()) mismatch("add", a.shape(), b.shape());
  Tensor<Real> out = a.value();
  accumulate(out, b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return tape.emit(std::move(out), {a, b}, [ia, ib](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& d = t.adjoint(self);
    if (t.requires_grad(ia)) accumulate(t.adjoint(ia), d);
    if (t.requires_grad(ib)) accumulate(t.adjoint(ib), d);
  });
}

template <typename Real>
Var<Real> add_bias(Var<Real> x, Var<Real> bias) {
  Tape<Real>& tape = same_tape({x, bias});
  const Shape& sx = x.shape();
  const Shape& sb = bias.shape();
  if (sb.size() != 1 || sb[0] != sx.back()) mismatch("add_bias", sx, sb);
  Tensor<Real> out = x.value();
  const std::size_t rows = out.rows(), d = out.cols();
  const Real* b = bias.value().raw();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += b[c];
  const std::size_t ix = x.id(), ibias = bias.id();
  return tape.emit(std::move(out), {x, bias}, [ix, ibias, rows, d](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& g = t.adjoint(self);
    if (t.requires_grad(ix)) accumulate(t.adjoint(ix), g);
    if (t.requires_grad(ibias)) {
      Real* db = t.adjoint(ibias).raw();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < d; ++c) db[c] += g[r * d + c];
    }
  });
}

template <typename Real>
Var<Real> gelu(Var<Real> x, GeluKind kind) {
  Tape<Real>& tape = same_tape({x});
  Tensor<Real> out = x.value();
  for (Real& v : out.data()) v = gelu_value(v, kind);
  const std::size_t ix = x.id();
  return tape.emit(std::move(out), {x}, [ix, kind](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& g = t.adjoint(self);
    const Tensor<Real>& in = t.value(ix);
    Tensor<Real>& dx = t.adjoint(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * gelu_slope(in[i], kind);
  });
}

template <typename Real>
Var<Real> relu(Var<Real> x) {
  Tape<Real>& tape = same_tape({x});
  Tensor<Real> out = x.value();
  for (Real& v : out.data()) v = v > Real(0) ? v : Real(0);
  const std::size_t ix = x.id();
  return tape.emit(std::move(out), {x}, [ix](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& g = t.adjoint(self);
    const Tensor<Real>& in = t.value(ix);
    Tensor<Real>& dx = t.adjoint(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += in[i] > Real(0) ? g[i] : Real(0);
  });
}

template <typename Real>
Var<Real> elementwise(ElementwiseOp op, Var<Real> x, std::optional<Var<Real>> y) {
  const bool binary = op == ElementwiseOp::add || op == ElementwiseOp::add_bias_broadcast;
  if (binary != y.has_value()) {
    throw InputError(binary ? "binary element-wise op requires a second operand"
                            : "unary element-wise op takes a single operand");
  }
  switch (op) {
    case ElementwiseOp::add:
      return add(x, *y);
    case ElementwiseOp::add_bias_broadcast:
      return add_bias(x, *y);
    case ElementwiseOp::gelu:
      return gelu(x);
    case ElementwiseOp::relu:
      return relu(x);
  }
  throw InputError("unknown element-wise op");
}

template <typename Real>
Var<Real> layer_norm(Var<Real> x, Var<Real> gain, Var<Real> shift, double eps) {
  Tape<Real>& tape = same_tape({x, gain, shift});
  if (!(eps > 0)) throw InputError("layer_norm: eps must be positive");
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d}) mismatch("layer_norm gain", x.shape(), gain.shape());
  if (shift.shape() != Shape{d}) mismatch("layer_norm shift", x.shape(), shift.shape());
  const Tensor<Real>& in = x.value();
  const std::size_t rows = in.rows();
  auto normalized = std::make_shared<Tensor<Real>>(in.shape());
  auto inv_std = std::make_shared<std::vector<Real>>(rows);
  Tensor<Real> out(in.shape());
  const Real* g = gain.value().raw();
  const Real* s = shift.value().raw();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = in.raw() + r * d;
    Real mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += row[c];
    mean /= Real(d);
    Real var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= Real(d);
    const Real istd = Real(1) / std::sqrt(var + Real(eps));
    (*inv_std)[r] = istd;
    for (std::size_t c = 0; c < d; ++c) {
      const Real xh = (row[c] - mean) * istd;
      (*normalized)[r * d + c] = xh;
      out[r * d + c] = xh * g[c] + s[c];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), is = shift.id();
  return tape.emit(std::move(out), {x, gain, shift},
                   [ix, ig, is, rows, d, normalized, inv_std](Tape<Real>& t, std::size_t self) {
                     const Real* dy = t.adjoint(self).raw();
                     const Real* xh = normalized->raw();
                     if (t.requires_grad(ig)) {
                       Real* dg = t.adjoint(ig).raw();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t c = 0; c < d; ++c) dg[c] += dy[r * d + c] * xh[r * d + c];
                     }
                     if (t.requires_grad(is)) {
                       Real* ds = t.adjoint(is).raw();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t c = 0; c < d; ++c) ds[c] += dy[r * d + c];
                     }
                     if (t.requires_grad(ix)) {
                       const Real* g = t.value(ig).raw();
                       Real* dx = t.adjoint(ix).raw();
                       for (std::size_t r = 0; r < rows; ++r) {
                         Real mean_dxh = 0, mean_dxh_xh = 0;
                         for (std::size_t c = 0; c < d; ++c) {
                           const Real dxh = dy[r * d + c] * g[c];
                           mean_dxh += dxh;
                           mean_dxh_xh += dxh * xh[r * d + c];
                         }
                         mean_dxh /= Real(d);
                         mean_dxh_xh /= Real(d);
                         const Real istd = (*inv_std)[r];
                         for (std::size_t c = 0; c < d; ++c) {
                           const Real dxh = dy[r * d + c] * g[c];
                           dx[r * d + c] += istd * (dxh - mean_dxh - xh[r * d + c] * mean_dxh_xh);
                         }
                       }
                     }
                   });
}

template <typename Real>
Var<Real> softmax_cross_entropy(Var<Real> logits, std::span<const std::int32_t> labels) {
  Tape<Real>& tape = same_tape({logits});
  require_rank("softmax_cross_entropy", logits.shape(), 2);
  const std::size_t b = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != b) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
  }
  for (std::int32_t y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw InputError("label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  const Tensor<Real>& z = logits.value();
  auto probs = std::make_shared<Tensor<Real>>(z.shape());
  Real loss = 0;
  for (std::size_t r = 0; r < b; ++r) {
    const Real* row = z.raw() + r * c;
    const Real mx = *std::max_element(row, row + c);
    Real denom = 0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
    const Real log_denom = std::log(denom);
    for (std::size_t j = 0; j < c; ++j) (*probs)[r * c + j] = std::exp(row[j] - mx - log_denom);
    loss += log_denom - (row[labels[r]] - mx);
  }
  Tensor<Real> out({1});
  out[0] = loss / Real(b);
  const std::size_t iz = logits.id();
  std::vector<std::int32_t> y(labels.begin(), labels.end());
  return tape.emit(std::move(out), {logits}, [iz, b, c, probs, y = std::move(y)](Tape<Real>& t, std::size_t self) {
    const Real scale = t.adjoint(self)[0] / Real(b);
    Real* dz = t.adjoint(iz).raw();
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const Real onehot = static_cast<std::size_t>(y[r]) == j ? Real(1) : Real(0);
        dz[r * c + j] += ((*probs)[r * c + j] - onehot) * scale;
      }
  });
}

template <typename Real>
Var<Real> attention(Var<Real> q, Var<Real> k, Var<Real> v, const Tensor<Real>& key_mask) {
  Tape<Real>& tape = same_tape({q, k, v});
  const Shape& sq = q.shape();
  require_rank("attention", sq, 4);
  if (k.shape() != sq) mismatch("attention q/k", sq, k.shape());
  if (v.shape() != sq) mismatch("attention q/v", sq, v.shape());
  const std::size_t B = sq[0], H = sq[1], S = sq[2], D = sq[3];
  if (!key_mask.empty() && key_mask.shape() != Shape{B, S}) mismatch("attention mask", sq, key_mask.shape());
  const Real scale = Real(1) / std::sqrt(Real(D));
  const Real* Q = q.value().raw();
  const Real* K = k.value().raw();
  const Real* V = v.value().raw();
  auto probs = std::make_shared<Tensor<Real>>(Shape{B, H, S, S});
  Tensor<Real> out(sq);
  std::vector<Real> scores(S);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t base = (b * H + h) * S * D;
      Real* P = probs->raw() + (b * H + h) * S * S;
      for (std::size_t i = 0; i < S; ++i) {
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::size_t j = 0; j < S; ++j) {
          Real s = 0;
          for (std::size_t e = 0; e < D; ++e) s += Q[base + i * D + e] * K[base + j * D + e];
          s *= scale;
          if (!key_mask.empty()) s += key_mask[b * S + j];
          scores[j] = s;
          mx = std::max(mx, s);
        }
        Real denom = 0;
        for (std::size_t j = 0; j < S; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          denom += scores[j];
        }
        Real* o = out.raw() + base + i * D;
        for (std::size_t j = 0; j < S; ++j) {
          const Real p = scores[j] / denom;
          P[i * S + j] = p;
          for (std::size_t e = 0; e < D; ++e) o[e] += p * V[base + j * D + e];
        }
      }
    }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return tape.emit(std::move(out), {q, k, v}, [=](Tape<Real>& t, std::size_t self) {
    const Real* dO = t.adjoint(self).raw();
    const Real* Q = t.value(iq).raw();
    const Real* K = t.value(ik).raw();
    const Real* V = t.value(iv).raw();
    Real* dQ = t.requires_grad(iq) ? t.adjoint(iq).raw() : nullptr;
    Real* dK = t.requires_grad(ik) ? t.adjoint(ik).raw() : nullptr;
    Real* dV = t.requires_grad(iv) ? t.adjoint(iv).raw() : nullptr;
    std::vector<Real> dS(S);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t base = (b * H + h) * S * D;
        const Real* P = probs->raw() + (b * H + h) * S * S;
        for (std::size_t i = 0; i < S; ++i) {
          const Real* g = dO + base + i * D;
          if (dV) {
            for (std::size_t j = 0; j < S; ++j)
              for (std::size_t e = 0; e < D; ++e) dV[base + j * D + e] += P[i * S + j] * g[e];
          }
          if (!dQ && !dK) continue;
          Real weighted = 0;
          for (std::size_t j = 0; j < S; ++j) {
            Real dp = 0;
            for (std::size_t e = 0; e < D; ++e) dp += g[e] * V[base + j * D + e];
            dS[j] = dp;
            weighted += dp * P[i * S + j];
          }
          for (std::size_t j = 0; j < S; ++j) {
            const Real ds = P[i * S + j] * (dS[j] - weighted) * scale;
            if (dQ)
              for (std::size_t e = 0; e < D; ++e) dQ[base + i * D + e] += ds * K[base + j * D + e];
            if (dK)
              for (std::size_t e = 0; e < D; ++e) dK[base + j * D + e] += ds * Q[base + i * D + e];
          }
        }
      }
  });
}

template <typename Real>
Var<Real> linear(Var<Real> x, Var<Real> weight, Var<Real> bias) {
  Tape<Real>& tape = same_tape({x, weight, bias});
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  require_rank("linear input", sx, 2);
  require_rank("linear weight", sw, 2);
  if (sx[1] != sw[1]) mismatch("linear", sx, sw);
  if (bias.shape() != Shape{sw[0]}) mismatch("linear bias", sw, bias.shape());
  const std::size_t n = sx[0], in = sx[1], outs = sw[0];
  Tensor<Real> out({n, outs});
  const Real* X = x.value().raw();
  const Real* W = weight.value().raw();
  const Real* b = bias.value().raw();
  for (std::size_t t = 0; t < n; ++t) {
    const Real* xr = X + t * in;
    Real* yr = out.raw() + t * outs;
    for (std::size_t o = 0; o < outs; ++o) {
      const Real* wr = W + o * in;
      Real acc = 0;
      for (std::size_t j = 0; j < in; ++j) acc += xr[j] * wr[j];
      yr[o] = acc + b[o];
    }
  }
  if (tape.recording() && weight.requires_grad()) tape.note_retained(n * in);
  const std::size_t ix = x.id(), iw = weight.id(), ib = bias.id();
  return tape.emit(std::move(out), {x, weight, bias}, [=](Tape<Real>& t, std::size_t self) {
    const Real* dY = t.adjoint(self).raw();
    if (t.requires_grad(ix)) {
      const Real* W = t.value(iw).raw();
      Real* dX = t.adjoint(ix).raw();
      for (std::size_t r = 0; r < n; ++r) {
        Real* dxr = dX + r * in;
        for (std::size_t o = 0; o < outs; ++o) {
          const Real g = dY[r * outs + o];
          const Real* wr = W + o * in;
          for (std::size_t j = 0; j < in; ++j) dxr[j] += g * wr[j];
        }
      }
    }
    if (t.requires_grad(iw)) {
      const Real* X = t.value(ix).raw();
      Real* dW = t.adjoint(iw).raw();
      for (std::size_t r = 0; r < n; ++r) {
        const Real* xr = X + r * in;
        for (std::size_t o = 0; o < outs; ++o) {
          const Real g = dY[r * outs + o];
          Real* dwr = dW + o * in;
          for (std::size_t j = 0; j < in; ++j) dwr[j] += g * xr[j];
        }
      }
    }
    if (t.requires_grad(ib)) {
      Real* db = t.adjoint(ib).raw();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < outs; ++o) db[o] += dY[r * outs + o];
    }
  });
}

template <typename Real>
Var<Real> gather_rows(Var<Real> table, std::span<const std::size_t> indices) {
  Tape<Real>& tape = same_tape({table});
  require_rank("gather_rows", table.shape(), 2);
  const std::size_t rows = table.shape()[0], d = table.shape()[1];
  if (indices.empty()) throw InputError("gather_rows: no indices");
  Tensor<Real> out({indices.size(), d});
  const Real* T = table.value().raw();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows) {
      throw InputError("gather_rows: index " + std::to_string(indices[r]) + " outside table of " +
                       std::to_string(rows) + " rows");
    }
    std::copy_n(T + indices[r] * d, d, out.raw() + r * d);
  }
  const std::size_t it = table.id();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return tape.emit(std::move(out), {table}, [it, d, idx = std::move(idx)](Tape<Real>& t, std::size_t self) {
    const Real* g = t.adjoint(self).raw();
    Real* dT = t.adjoint(it).raw();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) dT[idx[r] * d + c] += g[r * d + c];
  });
}

template <typename Real>
Var<Real> scatter_columns(Var<Real> x, std::span<const std::size_t> positions) {
  Tape<Real>& tape = same_tape({x});
  require_rank("scatter_columns", x.shape(), 2);
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  if (positions.size() != c) {
    throw DimensionError("scatter_columns: permutation of length " + std::to_string(positions.size()) +
                         " for " + std::to_string(c) + " columns");
  }
  std::vector<char> seen(c, 0);
  for (std::size_t p : positions) {
    if (p >= c || seen[p]) throw InputError("scatter_columns: positions are not a permutation");
    seen[p] = 1;
  }
  Tensor<Real> out({n, c});
  const Real* X = x.value().raw();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + positions[j]] = X[r * c + j];
  const std::size_t ix = x.id();
  std::vector<std::size_t> perm(positions.begin(), positions.end());
  return tape.emit(std::move(out), {x}, [ix, n, c, perm = std::move(perm)](Tape<Real>& t, std::size_t self) {
    const Real* g = t.adjoint(self).raw();
    Real* dx = t.adjoint(ix).raw();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < c; ++j) dx[r * c + j] += g[r * c + perm[j]];
  });
}

template <typename Real>
Var<Real> concat_columns(Var<Real> a, Var<Real> b) {
  Tape<Real>& tape = same_tape({a, b});
  require_rank("concat_columns", a.shape(), 2);
  require_rank("concat_columns", b.shape(), 2);
  if (a.shape()[0] != b.shape()[0]) mismatch("concat_columns", a.shape(), b.shape());
  const std::size_t n = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1], c = ca + cb;
  Tensor<Real> out({n, c});
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(a.value().raw() + r * ca, ca, out.raw() + r * c);
    std::copy_n(b.value().raw() + r * cb, cb, out.raw() + r * c + ca);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.emit(std::move(out), {a, b}, [=](Tape<Real>& t, std::size_t self) {
    const Real* g = t.adjoint(self).raw();
    if (t.requires_grad(ia)) {
      Real* da = t.adjoint(ia).raw();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < ca; ++j) da[r * ca + j] += g[r * c + j];
    }
    if (t.requires_grad(ib)) {
      Real* db = t.adjoint(ib).raw();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < cb; ++j) db[r * cb + j] += g[r * c + ca + j];
    }
  });
}

template <typename Real>
Var<Real> split_heads(Var<Real> x, std::size_t batch, std::size_t heads) {
  Tape<Real>& tape = same_tape({x});
  require_rank("split_heads", x.shape(), 2);
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  if (batch == 0 || heads == 0 || rows % batch != 0 || d % heads != 0) {
    throw DimensionError("split_heads: cannot split " + shape_string(x.shape()) + " into batch " +
                         std::to_string(batch) + " and " + std::to_string(heads) + " heads");
  }
  const std::size_t S = rows / batch, D = d / heads;
  Tensor<Real> out({batch, heads, S, D});
  const Real* X = x.value().raw();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(X + (b * S + s) * d + h * D, D, out.raw() + ((b * heads + h) * S + s) * D);
  const std::size_t ix = x.id();
  return tape.emit(std::move(out), {x}, [=](Tape<Real>& t, std::size_t self) {
    const Real* g = t.adjoint(self).raw();
    Real* dx = t.adjoint(ix).raw();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t e = 0; e < D; ++e) dx[(b * S + s) * d + h * D + e] += g[((b * heads + h) * S + s) * D + e];
  });
}

template <typename Real>
Var<Real> merge_heads(Var<Real> x) {
  Tape<Real>& tape = same_tape({x});
  require_rank("merge_heads", x.shape(), 4);
  const std::size_t B = x.shape()[0], H = x.shape()[1], S = x.shape()[2], D = x.shape()[3];
  const std::size_t d = H * D;
  Tensor<Real> out({B * S, d});
  const Real* X = x.value().raw();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t s = 0; s < S; ++s)
        std::copy_n(X + ((b * H + h) * S + s) * D, D, out.raw() + (b * S + s) * d + h * D);
  const std::size_t ix = x.id();
  return tape.emit(std::move(out), {x}, [=](Tape<Real>& t, std::size_t self) {
    const Real* g = t.adjoint(self).raw();
    Real* dx = t.adjoint(ix).raw();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t s = 0; s < S; ++s)
          for (std::size_t e = 0; e < D; ++e) dx[((b * H + h) * S + s) * D + e] += g[(b * S + s) * d + h * D + e];
  });
}

template <typename Real>
Var<Real> dropout(Var<Real> x, double rate, Rng& rng) {
  Tape<Real>& tape = same_tape({x});
  if (rate < 0 || rate >= 1) throw InputError("dropout rate must lie in [0, 1)");
  auto mask = std::make_shared<std::vector<Real>>(x.value().size());
  const Real keep_scale = Real(1) / Real(1 - rate);
  Tensor<Real> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() < rate ? Real(0) : keep_scale;
    out[i] *= (*mask)[i];
  }
  const std::size_t ix = x.id();
  return tape.emit(std::move(out), {x}, [ix, mask](Tape<Real>& t, std::size_t self) {
    const Tensor<Real>& g = t.adjoint(self);
    Tensor<Real>& dx = t.adjoint(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * (*mask)[i];
  });
}

template <typename Real>
Var<Real> sum(Var<Real> x) {
  Tape<Real>& tape = same_tape({x});
  Tensor<Real> out({1});
  for (Real v : x.value().data()) out[0] += v;
  const std::size_t ix = x.id();
  return tape.emit(std::move(out), {x}, [ix](Tape<Real>& t, std::size_t self) {
    const Real g = t.adjoint(self)[0];
    for (Real& d : t.adjoint(ix).data()) d += g;
  });
}

#define FAR_INSTANTIATE_OPS(Real)                                                                  \
  template Var<Real> matmul(Var<Real>, Var<Real>);                                                 \
  template Var<Real> add(Var<Real>, Var<Real>);                                                    \
  template Var<Real> add_bias(Var<Real>, Var<Real>);                                               \
  template Var<Real> gelu(Var<Real>, GeluKind);                                                    \
  template Var<Real> relu(Var<Real>);                                                              \
  template Var<Real> elementwise(ElementwiseOp, Var<Real>, std::optional<Var<Real>>);              \
  template Var<Real> layer_norm(Var<Real>, Var<Real>, Var<Real>, double);                          \
  template Var<Real> softmax_cross_entropy(Var<Real>, std::span<const std::int32_t>);              \
  template Var<Real> attention(Var<Real>, Var<Real>, Var<Real>, const Tensor<Real>&);              \
  template Var<Real> linear(Var<Real>, Var<Real>, Var<Real>);                                      \
  template Var<Real> gather_rows(Var<Real>, std::span<const std::size_t>);                         \
  template Var<Real> scatter_columns(Var<Real>, std::span<const std::size_t>);                     \
  template Var<Real> concat_columns(Var<Real>, Var<Real>);                                         \
  template Var<Real> split_heads(Var<Real>, std::size_t, std::size_t);                             \
  template Var<Real> merge_heads(Var<Real>);                                                       \
  template Var<Real> dropout(Var<Real>, double, Rng&);                                             \
  template Var<Real> sum(Var<Real>);

FAR_INSTANTIATE_OPS(float)
FAR_INSTANTIATE_OPS(double)

}  // namespace far
