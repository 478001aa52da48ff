#include <doctest.h>

#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "../support/flow_fixtures.hpp"
#include "bgm/errors.hpp"
#include "bgm/flow.hpp"
#include "bgm/spline.hpp"

using namespace bgm;
using bgm::testing::random_flow;
using bgm::testing::random_matrix;

TEST_CASE("conditioner: zero output layer gives zero raw, linear layer is w.c") {
  Rng rng(1);
  ConditionerNet net(3, {8, 8}, 5, rng);
  const std::vector<double> cond{0.3, -1.0, 2.0};
  for (double r : conditioner_eval(net, cond)) CHECK(r == 0.0);

  ConditionerNet lin(2, {}, 1, rng);
  lin.weight(0).value = Matrix(2, 1, {1.5, -0.5});
  const std::vector<double> c{2.0, 4.0};
  CHECK(conditioner_eval(lin, c)[0] == doctest::Approx(1.0));
  const std::vector<double> bad{1.0};
  CHECK_THROWS_AS(conditioner_eval(lin, bad), ShapeError);
}

TEST_CASE("conditioner gradient with respect to inputs matches finite differences") {
  Rng rng(2);
  ConditionerNet net(3, {8, 8}, 4, rng);
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    for (double& w : net.weight(l).value.storage()) w = 0.6 * rng.normal();
  }
  net.set_input_standardization({0.1, 0.2, 0.3}, {1.0, 2.0, 0.5});
  const Matrix cond = random_matrix(rng, 1, 3);
  for (std::size_t out = 0; out < 4; ++out) {
    Param in{"in", cond};
    GradTape tape;
    Var raw = net.apply(tape, tape.parameter(in));
    const std::size_t pick[] = {out};
    const auto g = tape.backward(sum(gather_cols(raw, pick)));
    for (std::size_t c = 0; c < 3; ++c) {
      Matrix up = cond, down = cond;
      up(0, c) += 1e-6;
      down(0, c) -= 1e-6;
      const double fd = (net.apply(up)(0, out) - net.apply(down)(0, out)) / 2e-6;
      CHECK(g.of(in)(0, c) == doctest::Approx(fd).epsilon(1e-4).scale(1.0));
    }
  }
}

TEST_CASE("identity-initialized flow is the identity") {
  Rng rng(3);
  ConditionalBijection b(2, 2, FlowConfig{}, rng);
  const std::vector<double> x{0.5, -1.0}, u{0.7, -2.2};
  const auto f = flow_forward(b, x, u);
  CHECK(f.value[0] == doctest::Approx(0.7));
  CHECK(f.value[1] == doctest::Approx(-2.2));
  CHECK(f.logdet == doctest::Approx(0.0));
  const auto inv = flow_inverse(b, x, u);
  CHECK(inv.value[0] == doctest::Approx(0.7));
  ConditionalBijection one(1, 1, FlowConfig{}, rng);
  const std::vector<double> x1{0.0}, v0{0.0};
  CHECK(log_density(one, x1, v0) == doctest::Approx(-0.5 * std::log(2 * std::numbers::pi)));
}

TEST_CASE("affine-only flow has closed-form maps and Gaussian density") {
  Rng rng(4);
  FlowConfig cfg;
  cfg.spline_layers = 0;
  ConditionalBijection b(1, 1, cfg, rng);
  b.affine_out().log_scale.value(0, 0) = std::log(2.0);
  b.affine_out().shift.value(0, 0) = 1.0;
  const std::vector<double> x{0.0}, u{2.0}, v{5.0};
  CHECK(flow_forward(b, x, u).value[0] == doctest::Approx(5.0));
  CHECK(flow_forward(b, x, u).logdet == doctest::Approx(std::log(2.0)));
  const auto inv = flow_inverse(b, x, v);
  CHECK(inv.value[0] == doctest::Approx(2.0));
  CHECK(inv.logdet == doctest::Approx(-std::log(2.0)));
  for (double t : {-3.0, 0.0, 1.0, 4.5}) {
    const std::vector<double> vt{t};
    const double expect = -0.5 * std::log(2 * std::numbers::pi * 4.0) - (t - 1.0) * (t - 1.0) / 8.0;
    CHECK(log_density(b, x, vt) == doctest::Approx(expect));
  }
}

TEST_CASE("random flows roundtrip within 1e-6 over 10^4 draws") {
  Rng rng(5);
  for (std::size_t d : {1u, 2u, 3u}) {
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      const auto b = random_flow(2, d, rng);
      const Matrix cond = random_matrix(rng, 1000, 2);
      const Matrix u = random_matrix(rng, 1000, d, 1.5);
      const Matrix back = b.inverse(cond, b.forward(cond, u));
      for (std::size_t i = 0; i < u.size(); ++i) {
        worst = std::max(worst, std::abs(back.data()[i] - u.data()[i]));
      }
    }
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("flow log-det matches finite-difference Jacobian determinant") {
  Rng rng(6);
  for (std::size_t d : {1u, 2u, 3u}) {
    const auto b = random_flow(1, d, rng);
    for (int trial = 0; trial < 20; ++trial) {
      const Matrix cond = random_matrix(rng, 1, 1);
      const Matrix u = random_matrix(rng, 1, d);
      const double analytic = b.forward_with_logdet(cond, u)(0, d);
      Eigen::MatrixXd jac(d, d);
      for (std::size_t c = 0; c < d; ++c) {
        Matrix up = u, down = u;
        const double h = 1e-6;
        up(0, c) += h;
        down(0, c) -= h;
        const Matrix fu = b.forward(cond, up), fd = b.forward(cond, down);
        for (std::size_t r = 0; r < d; ++r) jac(r, c) = (fu(0, r) - fd(0, r)) / (2 * h);
      }
      const double numeric = std::log(std::abs(jac.determinant()));
      CHECK(analytic == doctest::Approx(numeric).epsilon(1e-4).scale(1.0));
      const Matrix v = b.forward(cond, u);
      CHECK(b.inverse_with_logdet(cond, v)(0, d) == doctest::Approx(-analytic).scale(1.0));
    }
  }
}

TEST_CASE("coupling layer passes its conditioning coordinate through bitwise") {
  Rng rng(7);
  FlowConfig cfg;
  cfg.spline_layers = 1;
  cfg.hidden = {8};
  ConditionalBijection b(1, 2, cfg, rng);
  bgm::testing::randomize(b, rng);
  b.affine_in().log_scale.value.fill(0.0);
  b.affine_in().shift.value.fill(0.0);
  b.affine_out().log_scale.value.fill(0.0);
  b.affine_out().shift.value.fill(0.0);
  const Matrix cond = random_matrix(rng, 50, 1);
  const Matrix u = random_matrix(rng, 50, 2);
  const Matrix v = b.forward(cond, u);
  bool changed = false;
  for (std::size_t r = 0; r < 50; ++r) {
    CHECK(v(r, 0) == u(r, 0));
    changed = changed || v(r, 1) != u(r, 1);
  }
  CHECK(changed);
}

TEST_CASE("scalar flows are strictly increasing and their density integrates to one") {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const auto b = random_flow(1, 1, rng);
    const Matrix cond(1, 1, rng.normal());
    const std::size_t n = 40001;
    const double lo = -25.0, hi = 25.0, h = (hi - lo) / static_cast<double>(n - 1);
    Matrix grid(n, 1), conds(n, 1, cond(0, 0));
    for (std::size_t i = 0; i < n; ++i) grid(i, 0) = lo + h * static_cast<double>(i);
    const Matrix v = b.forward(conds, grid);
    for (std::size_t i = 1; i < n; ++i) CHECK_MESSAGE(v(i, 0) > v(i - 1, 0), "at " << i);
    // Trapezoid rule over the images of a fine u grid: the nodes crowd where
    // the density is high, and the density itself comes from the inverse map.
    const Vec ld = b.log_density(conds, v);
    double mass = 0.0;
    for (std::size_t i = 1; i < n; ++i) {
      mass += 0.5 * (std::exp(ld[i]) + std::exp(ld[i - 1])) * (v(i, 0) - v(i - 1, 0));
    }
    CHECK(mass == doctest::Approx(1.0).epsilon(0.01));
  }
}

TEST_CASE("flow NLL gradients match finite differences for every parameter") {
  Rng rng(9);
  const auto b0 = random_flow(1, 1, rng, 2, 6);
  auto b = b0;
  const Matrix cond = random_matrix(rng, 16, 1);
  const Matrix v = random_matrix(rng, 16, 1, 1.2);
  auto loss = [&] {
    GradTape t(false);
    return -mean(b.log_density(t, t.constant_ref(cond), t.constant_ref(v))).value()(0, 0);
  };
  GradTape tape;
  Var l = scale(mean(b.log_density(tape, tape.constant_ref(cond), tape.constant_ref(v))), -1.0);
  const Gradients g = tape.backward(l);
  for (Param* p : b.parameters()) {
    const Matrix analytic = g.of(*p);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double keep = p->value.data()[i];
      p->value.data()[i] = keep + 1e-6;
      const double up = loss();
      p->value.data()[i] = keep - 1e-6;
      const double down = loss();
      p->value.data()[i] = keep;
      CHECK(analytic.data()[i] == doctest::Approx((up - down) / 2e-6).epsilon(1e-4).scale(1.0));
    }
  }
}

TEST_CASE("flow JSON roundtrip is bit-exact and malformed documents are rejected") {
  Rng rng(10);
  const auto b = random_flow(2, 2, rng);
  const std::string text = b.to_json().dump();
  const auto back = ConditionalBijection::from_json(nlohmann::json::parse(text));
  CHECK(back.to_json().dump() == text);
  const Matrix cond = random_matrix(rng, 20, 2), v = random_matrix(rng, 20, 2);
  CHECK(back.log_density(cond, v) == b.log_density(cond, v));

  auto j = b.to_json();
  j["format"] = "something-else";
  CHECK_THROWS_AS(ConditionalBijection::from_json(j), SchemaError);
  j = b.to_json();
  j["splines"][0]["transform"] = {0, 1};
  CHECK_THROWS_AS(ConditionalBijection::from_json(j), SchemaError);
  j = b.to_json();
  j.erase("affine_out");
  CHECK_THROWS_AS(ConditionalBijection::from_json(j), SchemaError);
}

TEST_CASE("flow rejects mismatched dimensions and non-finite input") {
  Rng rng(11);
  const auto b = random_flow(1, 2, rng);
  CHECK_THROWS_AS(b.forward(Matrix(3, 2), Matrix(3, 2)), ShapeError);
  CHECK_THROWS_AS(b.inverse(Matrix(3, 1), Matrix(2, 2)), ShapeError);
  Matrix bad(1, 2);
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(b.inverse(Matrix(1, 1), bad), NumericInputError);
}
