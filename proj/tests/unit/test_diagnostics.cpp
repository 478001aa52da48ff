#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "bgm/diagnostics.hpp"
#include "bgm/errors.hpp"
#include "bgm/rng.hpp"
#include "bgm/scm.hpp"
#include "bgm/stats.hpp"
#include "../support/flow_fixtures.hpp"

using namespace bgm;
using namespace bgm::testing;

namespace {

IndependenceOptions quick(std::uint64_t seed, std::size_t n_perm = 199) {
  IndependenceOptions o;
  o.seed = seed;
  o.n_perm = n_perm;
  return o;
}

Dataset shuffle_column(Dataset ds, Matrix Dataset::*col, std::uint64_t seed) {
  Rng rng(seed);
  const auto perm = rng.permutation(ds.rows());
  ds.*col = select_rows(ds.*col, perm);
  return ds;
}

Vec quantiles(Vec v, std::initializer_list<double> ps) {
  std::sort(v.begin(), v.end());
  Vec out;
  for (double p : ps) out.push_back(stats::quantile_sorted(v, p));
  return out;
}

class Warped : public Mechanism {
 public:
  explicit Warped(const Mechanism& b) : b_(b) {}
  std::size_t cond_dim() const override { return b_.cond_dim(); }
  std::size_t var_dim() const override { return b_.var_dim(); }
  Matrix forward(const Matrix& c, const Matrix& u) const override {
    Matrix w = u;
    for (double& t : w.storage()) t = t + 0.3 * std::tanh(t) + t * t * t / 10.0;
    return b_.forward(c, w);
  }
  Matrix inverse(const Matrix& c, const Matrix& v) const override {
    Matrix u = b_.inverse(c, v);
    for (double& t : u.storage()) {
      // invert the increasing warp by bisection
      double lo = -50, hi = 50;
      for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (mid + 0.3 * std::tanh(mid) + mid * mid * mid / 10.0 < t ? lo : hi) = mid;
      }
      t = 0.5 * (lo + hi);
    }
    return u;
  }

 private:
  const Mechanism& b_;
};

}  // namespace

TEST_CASE("distance correlation: independence, identity and nonlinear dependence") {
  Rng rng(1);
  const Matrix a = random_matrix(rng, 5000, 1), b = random_matrix(rng, 5000, 1);
  const auto indep = independence_test(a, b, quick(2, 99));
  CHECK(indep.statistic < 0.05);
  CHECK(indep.p_value > 0.01);
  CHECK(indep.pass);
  const auto same = independence_test(a, a, quick(3, 99));
  CHECK(same.statistic == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(same.p_value == doctest::Approx(1.0 / 100));
  CHECK_FALSE(same.pass);
  Matrix sq = a;
  for (double& t : sq.storage()) t *= t;
  CHECK(std::abs(stats::pearson(a.col(0), sq.col(0))) < 0.05);
  const auto quad = independence_test(a, sq, quick(4, 99));
  CHECK(quad.p_value == doctest::Approx(1.0 / 100));
  CHECK_THROWS_AS(independence_test(a, random_matrix(rng, 10, 1)), ShapeError);
  CHECK_THROWS_AS(independence_test(random_matrix(rng, 50, 1), random_matrix(rng, 50, 1)), InsufficientSupport);
}

TEST_CASE("permutation p-values are uniform under independence") {
  Rng rng(5);
  Vec ps;
  for (int t = 0; t < 200; ++t) {
    const Matrix a = random_matrix(rng, 100, 1), b = random_matrix(rng, 100, 2);
    ps.push_back(independence_test(a, b, quick(100 + t, 999)).p_value);
  }
  CHECK(stats::ks_uniform(ps).p_value > 0.01);
}

TEST_CASE("conditional independence on the ellipse data") {
  const Dataset ds = gen_ellipse(50000, 7);
  const Vec z = ds.z.col(0);
  const auto cond = conditional_independence_test(ds.u_hidden, ds.x, z, 10, quick(8));
  CHECK(cond.bin_p_values.size() == 10);
  CHECK(cond.pass);
  const auto plain = independence_test(ds.u_hidden, ds.x, quick(9));
  CHECK_FALSE(plain.pass);
  CHECK(plain.p_value < 0.01);
  // constant z: one bin, the unconditional statistic
  Rng rng(10);
  const Matrix a = random_matrix(rng, 800, 1), b = random_matrix(rng, 800, 1);
  const auto c1 = conditional_independence_test(a, b, Vec(800, 2.0), 10, quick(11));
  const auto u1 = independence_test(a, b, quick(11));
  CHECK(c1.bin_p_values.size() == 1);
  CHECK(c1.statistic == doctest::Approx(u1.statistic).epsilon(1e-12));
  CHECK_THROWS_AS(conditional_independence_test(a, b, a.col(0), 10, quick(1)), InsufficientSupport);
}

TEST_CASE("IV variability matrix") {
  const Dataset iv = gen_abr_like(100000, 3, "iv");
  const Vec grid = quantiles(iv.u_hidden.col(0), {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9});
  const auto ok = variability_iv(iv, grid, iv.i_levels, iv.x_grid, 1e-4);
  CHECK(ok.pass);
  CHECK(ok.chosen.size() == iv.x_grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g) {
    for (std::size_t r = 0; r < ok.matrices[g].rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < ok.matrices[g].cols(); ++c) s += ok.matrices[g](r, c);
      CHECK(s == doctest::Approx(1.0));
    }
  }
  // relabeling X values only permutes columns
  Vec xr = iv.x_grid;
  std::reverse(xr.begin(), xr.end());
  const auto rel = variability_iv(iv, grid, iv.i_levels, xr, 1e-4);
  for (std::size_t g = 0; g < grid.size(); ++g) CHECK(rel.abs_det[g] == doctest::Approx(ok.abs_det[g]).epsilon(1e-9));

  const Dataset cut = shuffle_column(iv, &Dataset::i, 4);
  const auto bad = variability_iv(cut, grid, cut.i_levels, cut.x_grid, 1e-4);
  CHECK_FALSE(bad.pass);
  CHECK(bad.min_abs_det < 1e-6);

  Dataset single = iv;
  single.x.fill(2.0);
  single.i.fill(iv.i_levels[0]);
  const auto one = variability_iv(single, grid, {iv.i_levels[0]}, {2.0}, 1e-4);
  CHECK(one.min_abs_det == doctest::Approx(1.0));
  CHECK(one.pass);
  CHECK_THROWS_AS(variability_iv(iv, {1e6}, iv.i_levels, iv.x_grid), InsufficientSupport);
  Dataset no_u = iv;
  no_u.u_hidden = Matrix(iv.rows(), 0);
  CHECK_THROWS_AS(variability_iv(no_u, grid, iv.i_levels, iv.x_grid), OracleUnavailable);
}

TEST_CASE("BC variability matrix") {
  // U | z ~ N((z, 2 z^2), I): rows p_k (1, z_k - u0, 2 z_k^2 - u1) are
  // independent for any three distinct z, so the matrix is nonsingular.
  Rng rng(12);
  const std::size_t n = 40000;
  Dataset g;
  g.z = Matrix(n, 1);
  g.x = Matrix(n, 1);
  g.v = Matrix(n, 2);
  g.u_hidden = Matrix(n, 2);
  for (std::size_t r = 0; r < n; ++r) {
    const double z = rng.uniform(-1.0, 1.0);
    g.z(r, 0) = z;
    g.u_hidden(r, 0) = z + rng.normal();
    g.u_hidden(r, 1) = 2 * z * z + rng.normal();
  }
  const Matrix ugrid(3, 2, {0.0, 0.5, 0.5, 1.0, -0.5, 1.0});
  const Vec zc{-0.8, -0.4, 0.0, 0.4, 0.8};
  const auto ok = variability_bc(g, ugrid, zc);
  CHECK(ok.pass);
  CHECK(ok.matrices.front().rows() == 3);
  CHECK(ok.matrices.front().cols() == 3);
  const Dataset indep = shuffle_column(g, &Dataset::z, 13);
  const auto bad = variability_bc(indep, ugrid, zc);
  CHECK_FALSE(bad.pass);

  // d = 1, two z values with shifted conditionals
  Dataset two;
  const std::size_t m = 20000;
  two.z = Matrix(m, 1);
  two.x = Matrix(m, 1);
  two.v = Matrix(m, 1);
  two.u_hidden = Matrix(m, 1);
  for (std::size_t r = 0; r < m; ++r) {
    two.z(r, 0) = static_cast<double>(r % 2);
    two.u_hidden(r, 0) = two.z(r, 0) + rng.normal();
  }
  const auto d1 = variability_bc(two, Matrix(3, 1, {-0.5, 0.5, 1.5}), {0.0, 1.0});
  bool some = false;
  for (std::size_t k = 0; k < 3; ++k) some = some || d1.abs_det[k] > d1.threshold[k];
  CHECK(some);
  CHECK_THROWS_AS(variability_bc(two, Matrix(1, 1, 0.0), {0.0}), ValidationError);
  CHECK_THROWS_AS(variability_bc(two, Matrix(1, 1, 0.0), {0.0, 7.0}), InsufficientSupport);
}

TEST_CASE("monotonicity scan") {
  Rng rng(15);
  auto b = random_flow(1, 1, rng);
  const Matrix xs(5, 1, {-2, -1, 0, 1, 2});
  Vec us;
  for (int k = -40; k <= 40; ++k) us.push_back(k * 0.1);
  const auto ok = monotonicity_check(b, xs, us);
  CHECK(ok.pass);
  CHECK(ok.checked == 5 * 80);
  b.affine_out().sign[0] = -1.0;
  const auto bad = monotonicity_check(b, xs, us);
  CHECK_FALSE(bad.pass);
  CHECK(bad.violations.front().coordinate == 0);
  CHECK(bad.violations.front().v_hi <= bad.violations.front().v_lo);
  const auto el = make_scm("ellipse", "");
  Vec pos;
  for (int k = 1; k <= 20; ++k) pos.push_back(0.2 * k);
  CHECK(monotonicity_check(*el, Matrix(3, 1, {0.1, 2.0, 4.0}), pos).pass);
}

TEST_CASE("equivalence recovery") {
  Rng rng(16);
  const auto b1 = random_flow(1, 1, rng);
  const Warped w1(b1);
  const Matrix x = random_matrix(rng, 10000, 1), v = random_matrix(rng, 10000, 1);
  const auto same = equivalence_check(b1, w1, x, v);
  CHECK(same.value >= 0.999);
  CHECK(same.cross_condition_residual < 0.05);
  CHECK(same.pass);
  const auto other = random_flow(1, 1, rng);
  const auto diff = equivalence_check(b1, other, x, v);
  CHECK(diff.value < 0.99);

  const auto b2 = random_flow(1, 2, rng);
  const Warped w2(b2);
  const Matrix x2 = random_matrix(rng, 4000, 1), v2 = random_matrix(rng, 4000, 2);
  const auto multi = equivalence_check(b2, w2, x2, v2);
  CHECK(multi.mode == "functional_r2");
  CHECK(multi.value > 0.95);
  CHECK(multi.reverse_value > 0.95);

  // Counterexample pair: same latents at x = 1, a reflected map at x = 0.
  const auto fstar = make_scm("counterexample", "fstar");
  const auto fhat = make_scm("counterexample", "fhat");
  const Dataset ds = fstar->sample(4000, 17);
  const auto ce = equivalence_check(*fstar, *fhat, ds.x, ds.v);
  CHECK(ce.cross_condition_residual > 0.2);
  CHECK_FALSE(ce.pass);
  CHECK_THROWS_AS(equivalence_check(b1, b2, x, v), ShapeError);
}
