#include <doctest.h>

#include <cmath>

#include "far/ops.hpp"
#include "far/tape.hpp"
#include "oracles.hpp"

using namespace far;
using oracle::Gen;

namespace {

Var<double> weighted_sum(Tape<double>& tape, Var<double> y, const Tensor<double>& left, const Tensor<double>& right) {
  return sum(matmul(matmul(tape.constant(left), y), tape.constant(right)));
}

// FD check of `op` applied to freshly generated parameters; the output is
// reduced through fixed random projections.
template <typename Op>
oracle::FdResult fd_check(Gen& g, std::vector<Shape> shapes, Op op, double lo = -1, double hi = 1) {
  std::vector<Parameter<double>> params;
  for (std::size_t i = 0; i < shapes.size(); ++i) params.emplace_back("p" + std::to_string(i), g.tensor(shapes[i], lo, hi));
  std::vector<Parameter<double>*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  Tensor<double> left, right;
  return oracle::finite_difference(ptrs, [&](Tape<double>& tape) {
    std::vector<Var<double>> v;
    for (auto* p : ptrs) v.push_back(tape.parameter(*p));
    Var<double> y = op(v);
    if (left.empty()) {
      left = g.tensor({2, y.shape()[0]});
      right = g.tensor({y.shape()[1], 2});
    }
    return weighted_sum(tape, y, left, right);
  });
}

}  // namespace

TEST_CASE("tensor shape validation") {
  CHECK_THROWS_AS(Tensor<double>(Shape{2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor<double>(Shape{2, 2}, {1, 2, 3}), DimensionError);
  Tensor<float> t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.all_zero());
  t[4] = NAN;
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("matmul small cases") {
  Tape<double> tape(false);
  auto id = tape.constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  auto b = tape.constant(Tensor<double>({2, 2}, {5, 6, 7, 8}));
  CHECK(matmul(id, b).value() == Tensor<double>({2, 2}, {5, 6, 7, 8}));
  auto row = tape.constant(Tensor<double>({1, 2}, {1, 2}));
  auto col = tape.constant(Tensor<double>({2, 1}, {3, 4}));
  CHECK(matmul(row, col).value()[0] == 11);
  try {
    matmul(row, row);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("[1x2]") != std::string::npos);
  }
}

TEST_CASE("matmul matches the triple loop forward and backward") {
  Gen g(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = g.size(1, 5), k = g.size(1, 5), n = g.size(1, 5);
    Parameter<double> a("a", g.tensor({m, k})), b("b", g.tensor({k, n}));
    Tape<double> tape;
    auto c = matmul(tape.parameter(a), tape.parameter(b));
    const Tensor<double> expect = oracle::matmul(a.value(), b.value());
    CHECK(oracle::max_abs_diff(c.value(), expect) < 1e-12);
    // With loss = sum(C) the upstream G is all ones: dA = G B^T, dB = A^T G.
    tape.backward(sum(c));
    Tensor<double> ones = Tensor<double>::filled({m, n}, 1.0);
    Tensor<double> bt({n, k}), at({k, m});
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < n; ++j) bt[j * k + i] = b.value()[i * n + j];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < k; ++j) at[j * m + i] = a.value()[i * k + j];
    CHECK(oracle::max_abs_diff(a.grad(), oracle::matmul(ones, bt)) < 1e-12);
    CHECK(oracle::max_abs_diff(b.grad(), oracle::matmul(at, ones)) < 1e-12);
  }
}

TEST_CASE("element-wise ops") {
  Tape<double> tape(false);
  auto x = tape.constant(Tensor<double>({2, 2}, {1, 1, 2, 2}));
  auto bias = tape.constant(Tensor<double>({2}, {10, 20}));
  CHECK(add_bias(x, bias).value() == Tensor<double>({2, 2}, {11, 21, 12, 22}));
  CHECK(elementwise<double>(ElementwiseOp::add_bias_broadcast, x, bias).value() == Tensor<double>({2, 2}, {11, 21, 12, 22}));
  auto zero = tape.constant(Tensor<double>({1}, {0.0}));
  CHECK(gelu(zero).value()[0] == 0.0);
  CHECK(gelu(zero, GeluKind::erf).value()[0] == 0.0);
  auto neg = tape.constant(Tensor<double>({2}, {-1.5, 2.0}));
  CHECK(relu(neg).value() == Tensor<double>({2}, {0.0, 2.0}));
  CHECK_THROWS_AS(elementwise<double>(ElementwiseOp::add, x), InputError);
  CHECK_THROWS_AS(elementwise<double>(ElementwiseOp::gelu, x, x), InputError);
  CHECK_THROWS_AS(add(x, bias), DimensionError);
  CHECK_THROWS_AS(add_bias(x, tape.constant(Tensor<double>({3}))), DimensionError);
  // gelu(1) under the tanh form, evaluated by hand.
  auto one = tape.constant(Tensor<double>({1}, {1.0}));
  const double expect = 0.5 * (1 + std::tanh(std::sqrt(2 / M_PI) * (1 + 0.044715)));
  CHECK(gelu(one).value()[0] == doctest::Approx(expect).epsilon(1e-15));
}

TEST_CASE("gelu gradient at fixed points") {
  for (GeluKind kind : {GeluKind::tanh, GeluKind::erf}) {
    Parameter<double> x("x", Tensor<double>({4}, {-2, -0.5, 0.5, 2}));
    auto r = oracle::finite_difference({&x}, [&](Tape<double>& t) { return sum(gelu(t.parameter(x), kind)); });
    CHECK(r.max_rel < 1e-6);
  }
}

TEST_CASE("layer norm values") {
  Tape<double> tape(false);
  auto gain = tape.constant(Tensor<double>::filled({4}, 1.0));
  auto shift = tape.constant(Tensor<double>({4}));
  auto flat = layer_norm(tape.constant(Tensor<double>::filled({1, 4}, 1.0)), gain, shift, 1e-12);
  CHECK(flat.value().all_zero());
  auto g2 = tape.constant(Tensor<double>::filled({2}, 1.0));
  auto s2 = tape.constant(Tensor<double>({2}));
  auto pm = layer_norm(tape.constant(Tensor<double>({1, 2}, {1, -1})), g2, s2, 1e-12);
  CHECK(pm.value()[0] == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(pm.value()[1] == doctest::Approx(-1.0).epsilon(1e-10));
  CHECK_THROWS_AS(layer_norm(tape.constant(Tensor<double>({1, 3})), g2, s2, 1e-12), DimensionError);
  CHECK_THROWS_AS(layer_norm(tape.constant(Tensor<double>({1, 2})), g2, s2, 0.0), InputError);
}

TEST_CASE("softmax cross entropy") {
  Tape<double> tape(false);
  const std::int32_t zero[] = {0};
  auto uniform = softmax_cross_entropy(tape.constant(Tensor<double>({1, 2})), std::span<const std::int32_t>(zero));
  CHECK(uniform.value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  auto big = softmax_cross_entropy(tape.constant(Tensor<double>({1, 2}, {1000, 0})), std::span<const std::int32_t>(zero));
  CHECK(std::isfinite(big.value()[0]));
  CHECK(big.value()[0] < 1e-12);
  const std::int32_t bad[] = {2};
  CHECK_THROWS_AS(softmax_cross_entropy(tape.constant(Tensor<double>({1, 2})), std::span<const std::int32_t>(bad)),
                  InputError);
  Gen g(2);
  Parameter<double> logits("logits", g.tensor({4, 3}, -3, 3));
  const std::int32_t labels[] = {0, 2, 1, 1};
  auto r = oracle::finite_difference({&logits}, [&](Tape<double>& t) {
    return softmax_cross_entropy(t.parameter(logits), std::span<const std::int32_t>(labels));
  });
  CHECK(r.max_rel < 1e-5);
}

TEST_CASE("attention special cases") {
  Gen g(3);
  Tape<double> tape(false);
  const Tensor<double> v1 = g.tensor({1, 2, 1, 3});
  auto single = attention(tape.constant(g.tensor({1, 2, 1, 3})), tape.constant(g.tensor({1, 2, 1, 3})),
                          tape.constant(v1), Tensor<double>());
  CHECK(single.value() == v1);

  // q = 0 gives equal scores, so the output is the mean of the value rows.
  const Tensor<double> v = g.tensor({1, 1, 3, 2});
  auto uniform = attention(tape.constant(Tensor<double>({1, 1, 3, 2})), tape.constant(g.tensor({1, 1, 3, 2})),
                           tape.constant(v), Tensor<double>());
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t d = 0; d < 2; ++d) {
      const double mean = (v[d] + v[2 + d] + v[4 + d]) / 3;
      CHECK(uniform.value()[s * 2 + d] == doctest::Approx(mean).epsilon(1e-14));
    }

  // A masked key receives no weight.
  Tensor<double> mask({1, 3});
  mask[2] = kMaskedScore;
  auto masked = attention(tape.constant(Tensor<double>({1, 1, 3, 2})), tape.constant(g.tensor({1, 1, 3, 2})),
                          tape.constant(v), mask);
  CHECK(masked.value()[0] == doctest::Approx((v[0] + v[2]) / 2).epsilon(1e-14));
  CHECK_THROWS_AS(attention(tape.constant(g.tensor({1, 1, 3, 2})), tape.constant(g.tensor({1, 1, 2, 2})),
                            tape.constant(g.tensor({1, 1, 3, 2})), Tensor<double>()),
                  DimensionError);
}

TEST_CASE("finite differences over randomized shapes") {
  Gen g(4);
  double worst_plain = 0, worst_attention = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = g.size(1, 4), n = g.size(1, 5), k = g.size(1, 4);
    worst_plain = std::max(worst_plain, fd_check(g, {{m, k}, {k, n}}, [](auto& v) { return matmul(v[0], v[1]); }).max_rel);
    worst_plain = std::max(worst_plain, fd_check(g, {{m, n}, {m, n}}, [](auto& v) { return add(v[0], v[1]); }).max_rel);
    worst_plain = std::max(worst_plain, fd_check(g, {{m, n}, {n}}, [](auto& v) { return add_bias(v[0], v[1]); }).max_rel);
    worst_plain = std::max(worst_plain, fd_check(g, {{m, n}}, [](auto& v) { return gelu(v[0]); }, -3, 3).max_rel);
    worst_plain =
        std::max(worst_plain, fd_check(g, {{m, n}}, [](auto& v) { return gelu(v[0], GeluKind::erf); }, -3, 3).max_rel);
    worst_plain = std::max(
        worst_plain,
        fd_check(g, {{m, n + 1}, {n + 1}, {n + 1}}, [](auto& v) { return layer_norm(v[0], v[1], v[2], 1e-12); }).max_rel);
    worst_plain = std::max(worst_plain,
                           fd_check(g, {{m, k}, {n, k}, {n}}, [](auto& v) { return linear(v[0], v[1], v[2]); }).max_rel);
    worst_plain = std::max(worst_plain,
                           fd_check(g, {{m, n}, {m, k}}, [](auto& v) { return concat_columns(v[0], v[1]); }).max_rel);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    g.rng.shuffle(perm);
    worst_plain = std::max(worst_plain, fd_check(g, {{m, n}}, [&](auto& v) {
                                          return scatter_columns(v[0], std::span<const std::size_t>(perm));
                                        }).max_rel);
    std::vector<std::size_t> rows(g.size(1, 6));
    for (auto& r : rows) r = g.rng.below(m);
    worst_plain = std::max(worst_plain, fd_check(g, {{m, n}}, [&](auto& v) {
                                          return gather_rows(v[0], std::span<const std::size_t>(rows));
                                        }).max_rel);

    const std::size_t b = g.size(1, 2), h = g.size(1, 2), s = g.size(1, 3), d = g.size(1, 4);
    Tensor<double> mask({b, s});
    if (s > 1 && g.rng.below(2)) mask[s - 1] = kMaskedScore;
    worst_attention = std::max(worst_attention, fd_check(g, {{b, h, s, d}, {b, h, s, d}, {b, h, s, d}}, [&](auto& v) {
                                                  return merge_heads(attention(v[0], v[1], v[2], mask));
                                                }).max_rel);
    worst_attention = std::max(worst_attention, fd_check(g, {{b * s, h * d}}, [&](auto& v) {
                                                  return merge_heads(split_heads(v[0], b, h));
                                                }).max_rel);
  }
  CHECK(worst_plain < 1e-5);
  CHECK(worst_attention < 1e-4);
}

TEST_CASE("attention gradient at b=1 h=2 s=3 d=4") {
  Gen g(5);
  auto r = fd_check(g, {{1, 2, 3, 4}, {1, 2, 3, 4}, {1, 2, 3, 4}},
                    [](auto& v) { return merge_heads(attention(v[0], v[1], v[2], Tensor<double>())); });
  CHECK(r.max_rel < 1e-4);
}

TEST_CASE("layer norm gradient on 2x8") {
  Gen g(6);
  auto r = fd_check(g, {{2, 8}, {8}, {8}}, [](auto& v) { return layer_norm(v[0], v[1], v[2], 1e-12); });
  CHECK(r.max_rel < 1e-5);
}

TEST_CASE("linear row subsets are bit-exact") {
  Gen g(7);
  Tape<double> tape(false);
  const Tensor<double> x = g.tensor({3, 5}), w = g.tensor({4, 5}), b = g.tensor({4});
  auto full = linear(tape.constant(x), tape.constant(w), tape.constant(b)).value();
  Tensor<double> w_rows({2, 5}), b_rows({2});
  const std::size_t pick[] = {3, 1};
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t j = 0; j < 5; ++j) w_rows[r * 5 + j] = w[pick[r] * 5 + j];
    b_rows[r] = b[pick[r]];
  }
  auto part = linear(tape.constant(x), tape.constant(w_rows), tape.constant(b_rows)).value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t r = 0; r < 2; ++r) CHECK(part[i * 2 + r] == full[i * 4 + pick[r]]);
}

TEST_CASE("scatter requires a permutation") {
  Tape<double> tape(false);
  auto x = tape.constant(Tensor<double>({1, 3}, {1, 2, 3}));
  const std::size_t dup[] = {0, 0, 1};
  CHECK_THROWS_AS(scatter_columns(x, std::span<const std::size_t>(dup)), InputError);
  const std::size_t shortp[] = {0, 1};
  CHECK_THROWS_AS(scatter_columns(x, std::span<const std::size_t>(shortp)), DimensionError);
  const std::size_t perm[] = {2, 0, 1};
  CHECK(scatter_columns(x, std::span<const std::size_t>(perm)).value() == Tensor<double>({1, 3}, {2, 3, 1}));
}

TEST_CASE("backward contract") {
  Gen g(8);
  Parameter<double> w("w", g.tensor({3, 4}));
  const Tensor<double> x = g.tensor({4, 1});

  SUBCASE("outer product") {
    Tape<double> tape;
    tape.backward(sum(matmul(tape.parameter(w), tape.constant(x))));
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 4; ++j) CHECK(w.grad()[i * 4 + j] == x[j]);
  }
  SUBCASE("frozen parameters get no gradient and no backward closure") {
    w.set_trainable(false);
    Tape<double> tape;
    auto y = matmul(tape.parameter(w), tape.constant(x));
    CHECK_FALSE(y.requires_grad());
    CHECK(tape.recorded_ops() == 0);
    Parameter<double> bias("b", g.tensor({1}));
    tape.backward(sum(add_bias(y, tape.parameter(bias))));
    CHECK(w.grad().all_zero());
    CHECK_FALSE(bias.grad().all_zero());
  }
  SUBCASE("accumulation") {
    Tape<double> t1;
    t1.backward(sum(matmul(t1.parameter(w), t1.constant(x))));
    const Tensor<double> once = w.grad();
    Tape<double> t2;
    t2.backward(sum(matmul(t2.parameter(w), t2.constant(x))));
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(w.grad()[i] == 2 * once[i]);
  }
  SUBCASE("errors") {
    Tape<double> empty;
    Tape<double> other;
    auto c = other.constant(Tensor<double>({1}, {1.0}));
    CHECK_THROWS_AS(empty.backward(c), StateError);
    Tape<double> tape;
    auto y = matmul(tape.parameter(w), tape.constant(x));
    CHECK_THROWS_AS(tape.backward(y), DimensionError);
    Tape<double> inference(false);
    auto z = sum(matmul(inference.parameter(w), inference.constant(x)));
    CHECK_THROWS_AS(inference.backward(z), StateError);
    tape.clear();
    CHECK_THROWS_AS(sum(y), StateError);
  }
}

TEST_CASE("gating leaves trainable gradients bit-identical") {
  Gen g(9);
  for (int trial = 0; trial < 20; ++trial) {
    Parameter<double> w1("w1", g.tensor({4, 3})), b1("b1", g.tensor({4})), w2("w2", g.tensor({2, 4})),
        b2("b2", g.tensor({2}));
    const Tensor<double> x = g.tensor({5, 3});
    std::vector<Parameter<double>*> all = {&w1, &b1, &w2, &b2};
    auto run = [&] {
      for (auto* p : all) p->zero_grad();
      Tape<double> tape;
      auto h = gelu(linear(tape.constant(x), tape.parameter(w1), tape.parameter(b1)));
      tape.backward(sum(linear(h, tape.parameter(w2), tape.parameter(b2))));
    };
    run();
    std::vector<Tensor<double>> reference;
    for (auto* p : all) reference.push_back(p->grad());
    const std::size_t frozen = g.rng.below(all.size());
    all[frozen]->set_trainable(false);
    run();
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (i == frozen) {
        CHECK(all[i]->grad().all_zero());
      } else {
        CHECK(all[i]->grad() == reference[i]);
      }
    }
  }
}

TEST_CASE("dropout") {
  Tape<double> tape(false);
  Rng rng(1);
  auto x = tape.constant(Tensor<double>::filled({10, 10}, 1.0));
  auto y = dropout(x, 0.5, rng);
  std::size_t zeros = 0;
  for (double v : y.value().data()) {
    CHECK((v == 0.0 || v == 2.0));
    zeros += v == 0.0;
  }
  CHECK(zeros > 20);
  CHECK(zeros < 80);
  CHECK_THROWS_AS(dropout(x, 1.0, rng), InputError);
}
