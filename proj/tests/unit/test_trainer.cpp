#include <doctest.h>

#include <cmath>
#include <cstdlib>

#include "far/trainer.hpp"
#include "oracles.hpp"
#include "reference_loop.hpp"

using namespace far;

namespace {

ModelConfig toy() {
  ModelConfig c;
  c.max_seq_len = 12;
  c.seed = 21;
  return c;
}

Dataset task(std::size_t train_size = 160) {
  SyntheticTaskSpec spec;
  spec.train_size = train_size;
  spec.dev_size = 40;
  spec.test_size = 40;
  return make_synthetic(spec);
}

TrainConfig quick(SelectionMode mode) {
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.batch_size = 16;
  tc.max_epochs = 2;
  tc.seeds = {0, 1, 2};
  tc.far.selection_mode = mode;
  tc.far.priming_percent = 10;
  tc.far.retention_percent = 10;
  return tc;
}

}  // namespace

TEST_CASE("schedule arithmetic") {
  TrainConfig tc;
  tc.batch_size = 16;
  tc.max_epochs = 5;
  tc.far.priming_percent = 1;
  Schedule s = compute_schedule(9594, tc);
  CHECK(s.total_steps == 3000);
  CHECK(s.priming_steps == 30);
  tc.far.priming_percent = 100;
  CHECK(compute_schedule(9594, tc).priming_steps == 3000);
  tc.far.priming_percent = 0.5;
  CHECK(compute_schedule(9594, tc).priming_steps == 15);
  tc.far.priming_percent = 0.01;
  CHECK(compute_schedule(9594, tc).priming_steps == 1);
  tc.far.priming_percent = 10;
  CHECK(compute_schedule(16, tc).total_steps == 5);
  CHECK(compute_schedule(17, tc).total_steps == 10);
  CHECK_THROWS_AS(compute_schedule(15, tc), ConfigError);

  tc.learning_rate = 2e-5;
  s = compute_schedule(9594, tc);
  CHECK(s.lr(0) == 2e-5);
  CHECK(s.lr(s.total_steps) == 0.0);
  CHECK(s.lr(1500) == doctest::Approx(1e-5));
  CHECK(s.lr(2999) > 0);
}

TEST_CASE("training config validation") {
  TrainConfig tc;
  CHECK_NOTHROW(tc.validate());
  tc.learning_rate = 0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.seeds.clear();
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.far.retention_percent = 0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  CHECK(parse_eval_metric("matthews_corr") == EvalMetric::matthews_corr);
  CHECK_THROWS_AS(parse_eval_metric("f1"), ConfigError);
  CHECK(parse_precision("f64") == Precision::f64);
  CHECK_THROWS_AS(parse_precision("f16"), ConfigError);
}

TEST_CASE("metrics") {
  const Confusion c{3, 4, 1, 2};
  CHECK(matthews_correlation(c) == doctest::Approx(0.4082).epsilon(1e-4));
  CHECK(matthews_correlation(c) == doctest::Approx(oracle::mcc(3, 4, 1, 2)).epsilon(1e-15));
  CHECK(accuracy(c) == doctest::Approx(0.7));
  CHECK(matthews_correlation({5, 5, 0, 0}) == 1.0);
  CHECK(matthews_correlation({0, 0, 5, 5}) == -1.0);
  CHECK(matthews_correlation({10, 0, 0, 0}) == 0.0);
  CHECK(matthews_correlation({0, 6, 0, 4}) == 0.0);

  oracle::Gen g(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = g.size(1, 40);
    std::vector<std::int32_t> p(n), l(n);
    double tp = 0, tn = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = std::int32_t(g.size(0, 1));
      l[i] = std::int32_t(g.size(0, 1));
      tp += p[i] && l[i];
      tn += !p[i] && !l[i];
      fp += p[i] && !l[i];
      fn += !p[i] && l[i];
    }
    CHECK(score_predictions(p, l, EvalMetric::matthews_corr) == doctest::Approx(oracle::mcc(tp, tn, fp, fn)));
    CHECK(score_predictions(p, l, EvalMetric::accuracy) == doctest::Approx((tp + tn) / double(n)));
  }
  CHECK_THROWS_AS(confusion({}, {}), InputError);
  CHECK_THROWS_AS(confusion({0, 1}, {0}), InputError);
  CHECK_THROWS_AS(confusion({0, 2}, {0, 2}), InputError);
  CHECK_THROWS_AS(score_predictions({}, {}, EvalMetric::accuracy), InputError);
  EncoderModel<float> m(toy());
  CHECK_THROWS_AS(evaluate(m, Split{}, EvalMetric::accuracy), InputError);
}

TEST_CASE("schedule is conserved across phases") {
  const Dataset data = task();
  for (SelectionMode mode : {SelectionMode::metric, SelectionMode::random, SelectionMode::none,
                             SelectionMode::bias_only}) {
    for (double p : {1.0, 37.5, 100.0}) {
      TrainConfig tc = quick(mode);
      tc.far.priming_percent = p;
      EncoderModel<float> m(toy());
      const SeedResult r = train(m, data, tc, 0);
      const Schedule s = compute_schedule(data.train.size(), tc);
      CHECK(r.total_steps == s.total_steps);
      CHECK(r.steps.size() == s.total_steps);
      CHECK(r.priming_steps + r.post_reconfiguration_steps == r.total_steps);
      for (std::size_t i = 0; i < r.steps.size(); ++i) {
        CHECK(r.steps[i].step == i);
        CHECK(r.steps[i].lr == s.lr(i));
      }
      if (mode == SelectionMode::metric || mode == SelectionMode::random) {
        CHECK(r.priming_steps == s.priming_steps);
        CHECK(m.is_reconfigured());
        CHECK(r.resources.training_steps() == s.total_steps);
        for (std::size_t i = 0; i < r.steps.size(); ++i)
          CHECK(r.steps[i].phase == (i < s.priming_steps ? kPhasePriming : kPhaseReconfigured));
        CHECK(r.trainable_fraction < 1.0);
        CHECK(!r.learners.empty());
      } else {
        CHECK(r.priming_steps == 0);
        CHECK(!m.is_reconfigured());
        CHECK(r.steps.front().phase == (mode == SelectionMode::none ? kPhaseFull : kPhaseBiasOnly));
      }
    }
  }
}

TEST_CASE("optimizer state tracks the trainable set") {
  const Dataset data = task();
  for (SelectionMode mode : {SelectionMode::metric, SelectionMode::bias_only, SelectionMode::none}) {
    for (bool freeze_bias : {true, false}) {
      TrainConfig tc = quick(mode);
      tc.far.priming_percent = 25;
      tc.far.freeze_nonlearner_bias = freeze_bias;
      std::size_t bad = 0, checked = 0;
      TrainHooks<float> hooks;
      hooks.after_step = [&](const EncoderModel<float>& m, const Optimizer<float>& o, std::size_t) {
        ++checked;
        if (o.state_entries() != m.trainable_parameter_count()) ++bad;
        m.visit([&](const Parameter<float>& p, ParameterKind) {
          if (p.trainable() != o.has_state(p.name())) ++bad;
        });
      };
      EncoderModel<float> m(toy());
      const auto r = train(m, data, tc, 1, &hooks);
      CHECK(checked == r.total_steps);
      CHECK(bad == 0);
      CHECK(r.optimizer_state_entries == m.trainable_parameter_count());
    }
  }
}

TEST_CASE("results do not depend on seed order or worker count") {
  const Dataset data = task();
  TrainConfig tc = quick(SelectionMode::metric);
  tc.seeds = {0, 1, 2};
  const RunResult a = run_experiment(toy(), data, tc, 1);
  tc.seeds = {2, 0, 1};
  const RunResult b = run_experiment(toy(), data, tc, 3);
  REQUIRE(a.seeds.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const SeedResult& x = a.seeds[i];
    const SeedResult& y = b.seeds[(i + 1) % 3];
    CHECK(x.seed == y.seed);
    CHECK(x.score == y.score);
    REQUIRE(x.steps.size() == y.steps.size());
    for (std::size_t k = 0; k < x.steps.size(); ++k) CHECK(x.steps[k].loss == y.steps[k].loss);
    CHECK(x.learners == y.learners);
    CHECK(x.resources == y.resources);
  }
  CHECK(a.seeds[0].steps.front().loss != a.seeds[1].steps.front().loss);
  CHECK(a.mean() == doctest::Approx((a.seeds[0].score + a.seeds[1].score + a.seeds[2].score) / 3));
  CHECK(a.resources().training_steps() == 3 * a.seeds[0].total_steps);
}

TEST_CASE("worker count from the environment") {
  ::unsetenv("FAR_WORKERS");
  CHECK(worker_count_from_env() == 1);
  ::setenv("FAR_WORKERS", "3", 1);
  CHECK(worker_count_from_env() == 3);
  ::setenv("FAR_WORKERS", "zero", 1);
  CHECK_THROWS_AS(worker_count_from_env(), ConfigError);
  ::setenv("FAR_WORKERS", "0", 1);
  CHECK_THROWS_AS(worker_count_from_env(), ConfigError);
  ::unsetenv("FAR_WORKERS");
}

TEST_CASE("experiment rejects incompatible data") {
  const Dataset data = task();
  TrainConfig tc = quick(SelectionMode::none);
  ModelConfig small = toy();
  small.vocab_size = 16;
  CHECK_THROWS_AS(run_experiment(small, data, tc, 1), ConfigError);
  small = toy();
  small.max_seq_len = 8;
  CHECK_THROWS_AS(run_experiment(small, data, tc, 1), ConfigError);
  tc.batch_size = 1000;
  CHECK_THROWS_AS(run_experiment(toy(), data, tc, 1), ConfigError);
}

TEST_CASE("divergence aborts with a numeric error") {
  const Dataset data = task();
  TrainConfig tc = quick(SelectionMode::none);
  tc.optimizer = OptimizerKind::sgd;
  tc.learning_rate = 1e30;
  EncoderModel<float> m(toy());
  try {
    train(m, data, tc, 0);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string what = e.what();
    CHECK(what.find("non-finite loss") != std::string::npos);
    CHECK(what.find("step") != std::string::npos);
  }
}

TEST_CASE("mode none matches a plain training loop bit for bit over 200 steps") {
  const Dataset data = task(800);
  TrainConfig tc = quick(SelectionMode::none);
  tc.max_epochs = 4;  // 50 batches per epoch
  tc.precision = Precision::f64;
  EncoderModel<double> trained(toy());
  const SeedResult r = train(trained, data, tc, 3);
  REQUIRE(r.steps.size() == 200);

  EncoderModel<double> plain(toy());
  const auto losses = oracle::plain_training(plain, data, tc.learning_rate, 16, 4, 3, 200);
  REQUIRE(losses.size() == 200);
  for (std::size_t i = 0; i < 200; ++i) CHECK(r.steps[i].loss == losses[i]);
  const auto a = trained.parameters();
  const auto b = plain.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value() == b[i]->value());
}

TEST_CASE("grid cells are row-major") {
  const Dataset data = task();
  TrainConfig tc = quick(SelectionMode::metric);
  tc.seeds = {0};
  const GridResult g = run_grid(toy(), data, tc, {5, 50}, {10, 40, 100}, 1);
  REQUIRE(g.cells.size() == 6);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(g.at(i, j).priming_percent == g.p_values[i]);
      CHECK(g.at(i, j).retention_percent == g.r_values[j]);
    }
  CHECK_THROWS_AS(run_grid(toy(), data, tc, {}, {10}, 1), ConfigError);
}

TEST_CASE("wall clock is opt-in") {
  const Dataset data = task();
  TrainConfig tc = quick(SelectionMode::metric);
  tc.record_wall_clock = true;
  EncoderModel<float> m(toy());
  const auto r = train(m, data, tc, 0);
  for (const auto& p : r.resources.phases) {
    CHECK(p.wall_seconds.has_value());
    CHECK(*p.wall_seconds >= 0);
  }
}
