#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "bgm/counterfactual.hpp"
#include "bgm/errors.hpp"
#include "bgm/rng.hpp"
#include "bgm/scm.hpp"
#include "bgm/stats.hpp"
#include "../support/flow_fixtures.hpp"

using namespace bgm;
using namespace bgm::testing;

namespace {

// b composed with a fixed increasing warp of the latent: same counterfactuals.
class Warped : public Mechanism {
 public:
  explicit Warped(const ConditionalBijection& b) : b_(b) {}
  std::size_t cond_dim() const override { return b_.cond_dim(); }
  std::size_t var_dim() const override { return b_.var_dim(); }
  Matrix forward(const Matrix& c, const Matrix& u) const override {
    Matrix w = u;
    for (double& t : w.storage()) t = std::sinh(t);
    return b_.forward(c, w);
  }
  Matrix inverse(const Matrix& c, const Matrix& v) const override {
    Matrix u = b_.inverse(c, v);
    for (double& t : u.storage()) t = std::asinh(t);
    return u;
  }

 private:
  const ConditionalBijection& b_;
};

Dataset scaled_uniform(std::size_t n, std::uint64_t seed, bool discrete) {
  Rng rng(seed);
  Dataset ds;
  ds.x = Matrix(n, 1);
  ds.v = Matrix(n, 1);
  if (discrete) ds.x_grid = {0.0, 1.0, 2.0};
  for (std::size_t r = 0; r < n; ++r) {
    const double x = discrete ? static_cast<double>(rng.below(3)) : 2.0 * rng.uniform();
    ds.x(r, 0) = x;
    ds.v(r, 0) = (1.0 + x) * rng.uniform();
  }
  return ds;
}

}  // namespace

TEST_CASE("abduction: identity flow, ellipse closed form, roundtrip") {
  Rng rng(1);
  const ConditionalBijection id(1, 2, FlowConfig{}, rng);
  const Matrix x(3, 1, {0.1, 0.2, 0.3}), v = random_matrix(rng, 3, 2);
  const Matrix u0 = abduct(id, x, v);
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(u0.data()[i] == doctest::Approx(v.data()[i]).epsilon(1e-14));
  const auto scm = make_scm("ellipse", "");
  const Matrix u = abduct(*scm, Matrix(1, 1, std::numbers::pi / 2), Matrix(1, 2, {3.0, 2.0}));
  CHECK(u(0, 0) == doctest::Approx(1.0));
  CHECK(u(0, 1) == doctest::Approx(1.0));
  const auto b = random_flow(1, 2, rng);
  const Matrix xs = random_matrix(rng, 200, 1), vs = random_matrix(rng, 200, 2);
  const Matrix back = b.forward(xs, abduct(b, xs, vs));
  for (std::size_t i = 0; i < vs.size(); ++i) CHECK(std::abs(back.data()[i] - vs.data()[i]) <= 1e-6);
  CHECK_THROWS_AS(abduct(b, xs, random_matrix(rng, 200, 1)), ShapeError);
  Matrix bad = vs;
  bad(3, 1) = NAN;
  CHECK_THROWS_AS(abduct(b, xs, bad), NumericInputError);
}

TEST_CASE("counterexample SCMs answer the same query differently") {
  const auto fstar = make_scm("counterexample", "fstar");
  const auto fhat = make_scm("counterexample", "fhat");
  const Matrix x(1, 1, 0.0), v(1, 1, -0.7), xp(1, 1, 1.0);
  CHECK(point_counterfactual(*fstar, x, v, xp)(0, 0) == doctest::Approx(0.3));
  CHECK(point_counterfactual(*fhat, x, v, xp)(0, 0) == doctest::Approx(0.7));
}

TEST_CASE("consistency, involution and equivalence transfer for random flows") {
  Rng rng(2);
  for (std::size_t d : {1u, 2u}) {
    const auto b = random_flow(1, d, rng);
    const Matrix x = random_matrix(rng, 500, 1), xp = random_matrix(rng, 500, 1);
    const Matrix v = random_matrix(rng, 500, d);
    const Matrix same = point_counterfactual(b, x, v, x);
    const Matrix vp = point_counterfactual(b, x, v, xp);
    const Matrix back = point_counterfactual(b, xp, vp, x);
    const Warped w(b);
    const Matrix vw = point_counterfactual(w, x, v, xp);
    for (std::size_t i = 0; i < v.size(); ++i) {
      CHECK(std::abs(same.data()[i] - v.data()[i]) <= 1e-6);
      CHECK(std::abs(back.data()[i] - v.data()[i]) <= 2e-6);
      CHECK(std::abs(vw.data()[i] - vp.data()[i]) <= 1e-6);
    }
  }
}

TEST_CASE("sweep evaluates one unit over a grid") {
  const auto scm = make_scm("ellipse", "");
  Matrix grid(64, 1);
  for (int k = 0; k < 64; ++k) grid(k, 0) = 2 * std::numbers::pi * (k + 0.5) / 64;
  const SweepAnswer s = counterfactual_sweep(*scm, {0.4}, {3.0, 2.0}, grid);
  CHECK(s.v_prime.rows() == 64);
  for (int k = 0; k < 64; ++k) {
    const auto t = ellipse_true_counterfactual(0.4, {3.0, 2.0}, grid(k, 0));
    CHECK(s.v_prime(k, 0) == doctest::Approx(t[0]));
    CHECK(s.v_prime(k, 1) == doctest::Approx(t[1]));
  }
  CHECK_THROWS_AS(counterfactual_sweep(*scm, {0.4}, {3.0, 2.0}, Matrix(0, 1)), ValidationError);
}

TEST_CASE("effect of treatment on the treated") {
  const auto fstar = make_scm("counterexample", "fstar");
  const Dataset ds = fstar->sample(4000, 3);
  const Matrix same = ett_samples(*fstar, ds, 0.0, 0.0);
  const Matrix moved = ett_samples(*fstar, ds, 0.0, 1.0);
  std::size_t k = 0;
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    if (ds.x(r, 0) != 0.0) continue;
    CHECK(same(k, 0) == doctest::Approx(ds.v(r, 0)).epsilon(1e-12));
    CHECK(moved(k, 0) == doctest::Approx(ds.v(r, 0) + 1.0).epsilon(1e-12));
    CHECK(moved(k, 0) > 0.0);
    CHECK(moved(k, 0) < 1.0);
    ++k;
  }
  CHECK(k == same.rows());
  CHECK(k > 1500);
  CHECK_THROWS_AS(ett_samples(*fstar, ds, 0.5, 1.0), EmptyEvidence);
}

TEST_CASE("quantile oracle recovers the monotone quantile map") {
  const Dataset ds = scaled_uniform(100000, 4, false);
  const QuantileOracle oracle(ds);
  CHECK(oracle.window() == 1000);
  Rng rng(5);
  std::vector<double> err;
  for (int q = 0; q < 200; ++q) {
    const double x = 0.1 + 1.8 * rng.uniform(), xp = 0.1 + 1.8 * rng.uniform();
    const double v = (1 + x) * (0.05 + 0.9 * rng.uniform());
    err.push_back(std::abs(oracle(x, v, xp) - v * (1 + xp) / (1 + x)));
    CHECK(oracle(x, v, x) == doctest::Approx(v).epsilon(1e-12));
  }
  // Each window holds 1000 rows, so the quantile noise is about 0.015 (1 + x').
  CHECK(stats::median(err) < 0.03);
  CHECK(*std::max_element(err.begin(), err.end()) < 0.25);
  const Dataset disc = scaled_uniform(30000, 6, true);
  const double got = quantile_oracle(disc, 0.0, 0.4, 2.0);
  CHECK(got == doctest::Approx(1.2).epsilon(0.03));
  CHECK_THROWS_AS(quantile_oracle(disc, 0.5, 0.4, 2.0), InsufficientSupport);
  CHECK_THROWS_AS(QuantileOracle(scaled_uniform(40, 1, false)), InsufficientSupport);
}

TEST_CASE("query files roundtrip and answers are written as CSV") {
  CounterfactualQuery q;
  q.mode = QueryMode::Sweep;
  q.evidence_x = {0.4};
  q.evidence_v = {3.0, 2.0};
  q.intervention = Matrix(3, 1, {0.5, 1.0, 1.5});
  const auto j = q.to_json();
  const auto back = CounterfactualQuery::from_json(j);
  CHECK(back.intervention == q.intervention);
  CHECK(back.evidence_v == q.evidence_v);
  const auto flat = CounterfactualQuery::from_json(
      nlohmann::json::parse(R"({"mode":"sweep","evidence_x":[0.4],"evidence_v":[3,2],"grid":[0.5,1.0,1.5]})"));
  CHECK(flat.intervention == q.intervention);
  const auto scm = make_scm("ellipse", "");
  const CounterfactualAnswer a = answer_query(*scm, q);
  CHECK(a.u_hat.size() == 2);
  const auto path = (std::filesystem::temp_directory_path() / "bgm_answer_test.csv").string();
  write_answer_csv(a, path);
  std::ifstream in(path);
  std::string header, line;
  std::getline(in, header);
  CHECK(header == "x',v'0,v'1");
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 3);
  std::filesystem::remove(path);

  CounterfactualQuery wrong = q;
  wrong.evidence_v = {1.0};
  CHECK_THROWS_AS(answer_query(*scm, wrong), ValidationError);
  CHECK_THROWS_AS(CounterfactualQuery::from_json(nlohmann::json{{"mode", "nested"}}), ValidationError);
  CHECK_THROWS_AS(CounterfactualQuery::from_json(nlohmann::json{{"mode", "point"}}), ValidationError);
  CounterfactualQuery ett;
  ett.mode = QueryMode::Ett;
  CHECK_THROWS_AS(answer_query(*scm, ett), ValidationError);
}
