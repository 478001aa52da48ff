#include <doctest.h>

#include <cmath>
#include <numbers>

#include "../support/flow_fixtures.hpp"
#include "bgm/adam.hpp"
#include "bgm/errors.hpp"
#include "bgm/train.hpp"

using namespace bgm;

namespace {

const double kHalfLog2Pi = 0.5 * std::log(2 * std::numbers::pi);

Matrix normal_column(Rng& rng, std::size_t n, double mean, double sd) {
  Matrix m(n, 1);
  for (double& x : m.storage()) x = mean + sd * rng.normal();
  return m;
}

}  // namespace

TEST_CASE("scalar derivative identities") {
  Param w{"w", Matrix(1, 1, 3.0)};
  GradTape t;
  CHECK(t.backward(sum(square(t.parameter(w)))).of(w)(0, 0) == doctest::Approx(6.0));
  Param z{"z", Matrix(1, 1, 0.0)};
  GradTape t2;
  CHECK(t2.backward(sum(log(sigmoid(t2.parameter(z))))).of(z)(0, 0) == doctest::Approx(0.5));
}

TEST_CASE("adam: first step, zero gradient, symmetry, shape checks") {
  Param a{"a", Matrix(2, 2, 1.0)}, b{"b", Matrix(1, 3, 0.0)};
  Param* ps[] = {&a, &b};
  Gradients g;
  g.set(a, Matrix(2, 2, 1.0));
  g.set(b, Matrix(1, 3, {2.5, -2.5, 0.0}));
  AdamState s;
  adam_step(ps, g, s);
  CHECK(s.step == 1);
  for (double x : a.value.storage()) CHECK(x == doctest::Approx(1.0 - 1e-3).epsilon(1e-9));
  CHECK(b.value(0, 0) == doctest::Approx(-1e-3).epsilon(1e-6));
  CHECK(b.value(0, 0) == -b.value(0, 1));
  CHECK(b.value(0, 2) == 0.0);

  const Matrix before = a.value;
  Gradients zero;
  AdamState fresh;
  adam_step(ps, zero, fresh);
  CHECK(fresh.step == 1);
  CHECK(a.value == before);

  Param c{"c", Matrix(3, 3)};
  Param* wrong[] = {&c, &b};
  CHECK_THROWS_AS(adam_step(wrong, g, s), ShapeError);
}

TEST_CASE("adam drives a convex quadratic to its optimum") {
  Param w{"w", Matrix(1, 4, {1.0, -2.0, 0.5, 3.0})};
  const Matrix target(1, 4, {0.3, 0.1, -0.7, 2.0});
  Param* ps[] = {&w};
  AdamState s;
  s.cfg.lr = 1e-2;
  double loss = 0.0;
  for (int step = 0; step < 10000; ++step) {
    GradTape t;
    Var l = sum(square(sub(t.parameter(w), t.constant_ref(target))));
    loss = l.value()(0, 0);
    adam_step(ps, t.backward(l), s);
  }
  CHECK(loss < 1e-6);
}

TEST_CASE("flow NLL: Gaussian entropy, duplication and shift invariance") {
  Rng rng(1);
  ConditionalBijection b(1, 1, FlowConfig{}, rng);
  const Matrix v = normal_column(rng, 200000, 0.0, 1.0);
  const Matrix x = normal_column(rng, 200000, 0.0, 1.0);
  CHECK(nll_loss(b, x, v) == doctest::Approx(0.5 * (1 + std::log(2 * std::numbers::pi))).epsilon(5e-3));

  auto small = bgm::testing::random_flow(1, 1, rng);
  const Matrix xs = normal_column(rng, 50, 0, 1), vs = normal_column(rng, 50, 0, 1);
  Matrix x2(100, 1), v2(100, 1);
  for (std::size_t r = 0; r < 100; ++r) {
    x2(r, 0) = xs(r % 50, 0);
    v2(r, 0) = vs(r % 50, 0);
  }
  CHECK(nll_loss(small, x2, v2) == doctest::Approx(nll_loss(small, xs, vs)));

  auto shifted = small;
  shifted.affine_out().shift.value(0, 0) += 4.0;
  Matrix vshift = vs;
  for (double& t : vshift.storage()) t += 4.0;
  CHECK(nll_loss(shifted, xs, vshift) == doctest::Approx(nll_loss(small, xs, vs)));
}

TEST_CASE("training fits N(2,1) and reaches the analytic density peak") {
  Rng rng(2);
  const std::size_t n = 20000;
  Matrix data(n, 2);
  for (std::size_t r = 0; r < n; ++r) {
    data(r, 0) = rng.normal();
    data(r, 1) = 2.0 + rng.normal();
  }
  FlowConfig fc;
  fc.spline_layers = 1;
  fc.hidden = {16, 16};
  ConditionalBijection b(1, 1, fc, rng);
  b.calibrate(slice_cols(data, 0, 1), slice_cols(data, 1, 1));
  FlowObjective obj(b);
  TrainConfig tc;
  tc.batch_size = 1024;
  tc.max_epochs = 30;
  tc.adam.lr = 3e-3;
  const auto res = train(obj, data, tc);
  CHECK(res.history.size() == static_cast<std::size_t>(res.epochs));
  const std::vector<double> x{0.0}, v{2.0};
  CHECK(std::abs(log_density(b, x, v) + kHalfLog2Pi) < 0.05);
}

TEST_CASE("training is deterministic, resumable, and handles zero epochs") {
  Rng rng(3);
  Matrix data(3000, 2);
  for (std::size_t r = 0; r < data.rows(); ++r) {
    data(r, 0) = rng.uniform();
    data(r, 1) = std::exp(0.5 * rng.normal()) * (1 + data(r, 0));
  }
  FlowConfig fc;
  fc.spline_layers = 2;
  fc.hidden = {8, 8};
  Rng init(9);
  const ConditionalBijection start(1, 1, fc, init);
  TrainConfig tc;
  tc.batch_size = 512;
  tc.max_epochs = 6;
  tc.seed = 17;

  auto run = [&](ConditionalBijection& b) {
    FlowObjective obj(b);
    return train(obj, data, tc);
  };
  ConditionalBijection b1 = start, b2 = start;
  const auto r1 = run(b1);
  const auto r2 = run(b2);
  CHECK(r1.history == r2.history);
  CHECK(b1.to_json() == b2.to_json());

  ConditionalBijection b3 = start;
  FlowObjective obj3(b3);
  std::optional<TrainCheckpoint> last;
  TrainHooks hooks;
  hooks.stop_after = 3;
  hooks.on_epoch = [&](const TrainCheckpoint& c) { last = c; };
  train(obj3, data, tc, std::nullopt, hooks);
  REQUIRE(last);
  const auto reloaded = TrainCheckpoint::from_json(nlohmann::json::parse(last->to_json().dump()));
  ConditionalBijection b4 = start;
  FlowObjective obj4(b4);
  const auto r4 = train(obj4, data, tc, reloaded);
  CHECK(r4.history == r1.history);
  CHECK(b4.to_json() == b1.to_json());

  ConditionalBijection b5 = start;
  FlowObjective obj5(b5);
  tc.max_epochs = 0;
  const auto r5 = train(obj5, data, tc);
  CHECK(r5.history.empty());
  CHECK(b5.to_json() == start.to_json());
}

namespace {

// Returns a finite loss for the first `good` batches, then NaN.
class FailingObjective : public Objective {
 public:
  explicit FailingObjective(int good) : good_(good) {}
  std::vector<Param*> parameters() override { return {&w_}; }
  Var nll(GradTape& tape, const Matrix&) const override {
    Var l = sum(square(tape.parameter(w_)));
    if (calls_++ >= good_) return scale(l, std::nan(""));
    return l;
  }
  nlohmann::json snapshot() const override { return w_.value.storage(); }
  void restore(const nlohmann::json& j) override { w_.value = Matrix(1, 1, j.get<std::vector<double>>()); }

 private:
  Param w_{"w", Matrix(1, 1, 2.0)};
  int good_;
  mutable int calls_ = 0;
};

}  // namespace

TEST_CASE("divergence raises with the last finite state") {
  FailingObjective obj(5);
  TrainConfig tc;
  tc.batch_size = 10;
  tc.max_epochs = 10;
  Matrix data(20, 1);
  try {
    train(obj, data, tc);
    FAIL("expected divergence");
  } catch (const TrainingDiverged& e) {
    CHECK(e.exit_code() == 3);
    const auto c = TrainCheckpoint::from_json(nlohmann::json::parse(e.checkpoint()));
    CHECK(c.epoch == 2);
    CHECK(c.history.size() == 2);
    CHECK(std::isfinite(c.model[0].get<double>()));
  }
}
