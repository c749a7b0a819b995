#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "far/checkpoint.hpp"
#include "far/far_core.hpp"
#include "far/model.hpp"
#include "oracles.hpp"

using namespace far;
using oracle::Gen;

namespace {

ModelConfig small(std::size_t e, std::size_t d, std::size_t ff, std::size_t heads) {
  ModelConfig c;
  c.num_layers = e;
  c.d_model = d;
  c.d_ff = ff;
  c.num_heads = heads;
  return c;
}

std::string bytes_of(const Checkpoint& c) {
  std::ostringstream s(std::ios::binary);
  write_checkpoint(s, c);
  return s.str();
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(ModelConfig{}.validate());
  ModelConfig c;
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.d_ff = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(EncoderModel<float>{c}, ConfigError);
}

TEST_CASE("FFN shapes and node accounting") {
  EncoderModel<float> m(small(2, 16, 64, 2));
  const auto& d1 = std::get<DenseBlock<float>>(m.ffn({1, 1}));
  CHECK(d1.weight.shape() == Shape{64, 16});
  CHECK(m.ffn_nodes({1, 1}) == 64);
  CHECK(m.ffn_nodes({2, 2}) == 16);
  for (const auto& a : m.ffn_addresses()) {
    const auto& d = std::get<DenseBlock<float>>(m.ffn(a));
    CHECK(m.ffn_nodes(a) * (m.ffn_fan_in(a) + 1) == d.weight.size() + d.bias.size());
  }
  CHECK(m.count_parameters().ffn_weights == 4096);
  CHECK_THROWS_AS(m.ffn({3, 1}), InputError);
  CHECK_THROWS_AS(m.ffn({1, 3}), InputError);
}

TEST_CASE("parameter counts") {
  const ParameterCounts paper = count_parameters(ModelConfig::paper_scale());
  CHECK(paper.ffn_weights == 28311552);
  CHECK(paper.embedding == 30522 * 768 + 512 * 768);
  CHECK(paper.non_embedding() == 42527232 + 768 * 2 + 2);
  CHECK(paper.ffn_weight_share_of_non_embedding() > 0.66);
  CHECK(paper.ffn_weight_share_of_non_embedding() < 0.67);
  CHECK(paper.ffn_weight_share_of_total() < 0.45);

  Gen g(1);
  for (int i = 0; i < 10; ++i) {
    const ModelConfig c = g.toy_config();
    EncoderModel<double> m(c);
    std::size_t total = 0;
    for (auto* p : m.parameters()) total += p->size();
    CHECK(total == count_parameters(c).total);
    CHECK(m.count_parameters() == count_parameters(c));
  }
}

TEST_CASE("initialization is deterministic and documented") {
  const ModelConfig c = small(2, 8, 16, 2);
  EncoderModel<double> a(c), b(c);
  auto pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name() == pb[i]->name());
    CHECK(pa[i]->value() == pb[i]->value());
    CHECK(pa[i]->trainable());
  }
  ModelConfig other = c;
  other.seed = 1;
  EncoderModel<double> d(other);
  CHECK_FALSE(d.find_parameter("encoder.1.ffn.dense1.weight")->value() ==
              a.find_parameter("encoder.1.ffn.dense1.weight")->value());

  for (auto* p : a.parameters()) {
    const std::string& n = p->name();
    if (n.ends_with(".bias") || n.ends_with(".shift")) {
      CHECK(p->value().all_zero());
    } else if (n.ends_with(".gain")) {
      for (double v : p->value().data()) CHECK(v == 1.0);
    } else if (n.starts_with("embeddings.")) {
      for (double v : p->value().data()) CHECK(std::fabs(v) <= 1.0);
    } else {
      const double fan_in = double(p->shape()[1]);
      const double bound = n == "classifier.weight" ? 1.0 / fan_in : 1.0 / std::sqrt(fan_in);
      for (double v : p->value().data()) CHECK(std::fabs(v) <= bound);
    }
  }
}

TEST_CASE("forward properties") {
  const ModelConfig c = small(2, 8, 16, 2);
  EncoderModel<double> m(c);
  const TokenBatch same = make_batch(3, 4, {5, 6, 7, 0, 5, 6, 7, 0, 5, 6, 7, 0});
  const Tensor<double> l = m.logits(same);
  CHECK(l.shape() == Shape{3, 2});
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(l[j] == l[2 + j]);
    CHECK(l[j] == l[4 + j]);
  }

  Gen g(2);
  const TokenBatch four = g.tokens(4, 5, c.vocab_size);
  const Tensor<double> all = m.logits(four);
  for (std::size_t b = 0; b < 4; ++b) {
    std::vector<std::int32_t> row(four.ids.begin() + b * 5, four.ids.begin() + (b + 1) * 5);
    const Tensor<double> one = m.logits(make_batch(1, 5, row));
    for (std::size_t j = 0; j < 2; ++j) CHECK(one[j] == all[b * 2 + j]);
  }

  CHECK_THROWS_AS(m.logits(make_batch(1, 2, {3, int(c.vocab_size)})), InputError);
  CHECK_THROWS_AS(m.logits(make_batch(1, 2, {3, -1})), InputError);
  CHECK_THROWS_AS(m.logits(make_batch(1, c.max_seq_len + 1, std::vector<std::int32_t>(c.max_seq_len + 1, 2))),
                  InputError);
}

TEST_CASE("untrained loss is near ln(num_classes)") {
  Gen g(3);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ModelConfig c;
    c.seed = seed;
    EncoderModel<double> m(c);
    const TokenBatch t = g.tokens(16, 12, c.vocab_size);
    std::vector<std::int32_t> labels(16);
    for (std::size_t i = 0; i < 16; ++i) labels[i] = static_cast<std::int32_t>(i % 2);
    Tape<double> tape(false);
    const double loss =
        softmax_cross_entropy(m.forward(tape, t), std::span<const std::int32_t>(labels)).value()[0];
    CHECK(std::isfinite(loss));
    CHECK(std::fabs(loss - std::log(2.0)) < 0.2 * std::log(2.0));
  }
}

TEST_CASE("full-model gradient check at E=1 d=8 ff=16 s=4") {
  ModelConfig c = small(1, 8, 16, 2);
  c.vocab_size = 12;
  c.max_seq_len = 4;
  EncoderModel<double> m(c);
  const TokenBatch t = make_batch(3, 4, {3, 4, 5, 6, 7, 8, 0, 0, 9, 10, 11, 0});
  const std::vector<std::int32_t> labels = {0, 1, 1};
  const auto r = oracle::finite_difference(m.parameters(), [&](Tape<double>& tape) {
    return softmax_cross_entropy(m.forward(tape, t, ForwardMode::train), std::span<const std::int32_t>(labels));
  });
  INFO("worst element " << r.worst);
  CHECK(r.max_rel < 1e-4);
  CHECK(r.count == count_parameters(c).total);
}

TEST_CASE("trainability never changes forward values") {
  const ModelConfig c = small(2, 8, 16, 2);
  EncoderModel<double> m(c);
  Gen g(4);
  const TokenBatch t = g.tokens(3, 6, c.vocab_size);
  const Tensor<double> before = m.logits(t);
  m.set_all_trainable(false);
  CHECK(m.trainable_parameter_count() == 0);
  CHECK(m.logits(t) == before);
  Tape<double> tape;
  CHECK(m.forward(tape, t, ForwardMode::train).value() == before);
  CHECK(tape.recorded_ops() == 0);
}

TEST_CASE("dropout only in train mode and seeded") {
  ModelConfig c = small(1, 8, 16, 2);
  c.dropout = 0.3;
  EncoderModel<double> m(c);
  Gen g(5);
  const TokenBatch t = g.tokens(2, 6, c.vocab_size);
  Tape<double> a, b, e(false);
  Rng r1(9), r2(9);
  CHECK(m.forward(a, t, ForwardMode::train, &r1).value() == m.forward(b, t, ForwardMode::train, &r2).value());
  CHECK(m.forward(e, t).value() == m.logits(t));
  Tape<double> missing;
  CHECK_THROWS_AS(m.forward(missing, t, ForwardMode::train), StateError);
}

TEST_CASE("checkpoint round trip") {
  const ModelConfig c = small(2, 8, 16, 2);
  EncoderModel<float> m(c);
  const Checkpoint ck = make_checkpoint(m);
  CHECK(ck.element_count() == count_parameters(c).total);

  const auto dir = std::filesystem::temp_directory_path() / "far_test_ckpt";
  std::filesystem::create_directories(dir);
  save_checkpoint(m, dir / "a.ckpt");
  EncoderModel<float> loaded = load_checkpoint<float>(dir / "a.ckpt");
  save_checkpoint(loaded, dir / "b.ckpt");
  std::ifstream fa(dir / "a.ckpt", std::ios::binary), fb(dir / "b.ckpt", std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  CHECK(sa == sb);
  CHECK(loaded.config() == c);
  auto pa = m.parameters(), pb = loaded.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value() == pb[i]->value());
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint of a reconfigured model is consolidated") {
  const ModelConfig c = small(1, 8, 16, 2);
  EncoderModel<double> m(c);
  for (auto* p : m.parameters())
    for (auto& v : p->mutable_value().data()) v += 0.01;
  const std::string before = bytes_of(make_checkpoint(m));
  reconfigure(m, select_random(m, 25, 1));
  CHECK(bytes_of(make_checkpoint(m)) == before);
}

TEST_CASE("snapshot equals checkpoint FFN tensors") {
  EncoderModel<double> m(small(2, 8, 16, 2));
  const auto snap = snapshot_weights(m);
  const Checkpoint ck = make_checkpoint(m);
  for (const auto& e : snap.entries()) {
    for (const auto& t : ck.tensors) {
      if (t.name == e.address.label() + ".weight") {
        CHECK(std::memcmp(t.bytes.data(), e.weight.raw(), t.bytes.size()) == 0);
      }
      if (t.name == e.address.label() + ".bias") {
        CHECK(std::memcmp(t.bytes.data(), e.bias.raw(), t.bytes.size()) == 0);
      }
    }
  }
}

TEST_CASE("checkpoint validation") {
  EncoderModel<double> m(small(1, 8, 16, 2));
  Checkpoint ck = make_checkpoint(m);

  SUBCASE("mismatched d_model names the tensor") {
    ck.config.d_model = 16;
    std::istringstream in(bytes_of(ck));
    const Checkpoint read = read_checkpoint(in);
    EncoderModel<double> target(read.config);
    try {
      load_checkpoint_into(target, read);
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("embeddings.token") != std::string::npos);
    }
  }
  SUBCASE("dtype mismatch") {
    EncoderModel<float> f(m.config());
    CHECK_THROWS_AS(load_checkpoint_into(f, ck), FormatError);
  }
  SUBCASE("missing and extra tensors") {
    Checkpoint missing = ck;
    missing.tensors.pop_back();
    EncoderModel<double> t(m.config());
    CHECK_THROWS_WITH_AS(load_checkpoint_into(t, missing), doctest::Contains("classifier.bias"), FormatError);
    Checkpoint extra = ck;
    extra.tensors.push_back(extra.tensors.back());
    extra.tensors.back().name = "bogus";
    CHECK_THROWS_WITH_AS(load_checkpoint_into(t, extra), doctest::Contains("bogus"), FormatError);
  }
  SUBCASE("corruption") {
    std::string bytes = bytes_of(ck);
    std::istringstream truncated(bytes.substr(0, bytes.size() - 20));
    CHECK_THROWS_AS(read_checkpoint(truncated), FormatError);
    bytes[0] = 'X';
    std::istringstream bad(bytes);
    CHECK_THROWS_AS(read_checkpoint(bad), FormatError);
  }
  SUBCASE("reconfigured target") {
    EncoderModel<double> t(m.config());
    reconfigure(t, select_random(t, 50, 2));
    CHECK_THROWS_AS(load_checkpoint_into(t, ck), StateError);
  }
}
