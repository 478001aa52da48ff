#include <doctest.h>

#include <cmath>
#include <vector>

#include "bgm/rng.hpp"
#include "bgm/stats.hpp"

using namespace bgm;

TEST_CASE("kolmogorov survival matches classic critical values") {
  CHECK(stats::kolmogorov_survival(1.3581) == doctest::Approx(0.05).epsilon(1e-3));
  CHECK(stats::kolmogorov_survival(1.6276) == doctest::Approx(0.01).epsilon(2e-3));
  CHECK(stats::kolmogorov_survival(0.0) == 1.0);
}

TEST_CASE("two-sample KS statistic equals brute-force ECDF distance") {
  Rng rng(1);
  std::vector<double> a(300), b(200);
  for (double& x : a) x = rng.normal();
  for (double& x : b) x = 0.3 + rng.normal();
  double brute = 0.0;
  std::vector<double> pts = a;
  pts.insert(pts.end(), b.begin(), b.end());
  for (double t : pts) {
    double fa = 0, fb = 0;
    for (double x : a) fa += x <= t;
    for (double x : b) fb += x <= t;
    brute = std::max(brute, std::abs(fa / a.size() - fb / b.size()));
  }
  const auto r = stats::ks_two_sample(a, b);
  CHECK(r.statistic == doctest::Approx(brute));
  CHECK(r.p_value < 0.05);
  const auto same = stats::ks_two_sample(a, a);
  CHECK(same.statistic == 0.0);
  CHECK(same.p_value == 1.0);
}

TEST_CASE("KS p-values of null samples look uniform") {
  Rng rng(2);
  std::vector<double> ps;
  for (int t = 0; t < 200; ++t) {
    std::vector<double> a(400), b(400);
    for (double& x : a) x = rng.normal();
    for (double& x : b) x = rng.normal();
    ps.push_back(stats::ks_two_sample(a, b).p_value);
  }
  // Discreteness of D makes the null p-values slightly conservative.
  CHECK(stats::mean(ps) == doctest::Approx(0.5).epsilon(0.15));
}

TEST_CASE("ranks, spearman, pearson") {
  const std::vector<double> a{3, 1, 4, 1, 5};
  const auto r = stats::ranks(a);
  CHECK(r == std::vector<double>{3, 1.5, 4, 1.5, 5});
  const std::vector<double> x{1, 2, 3, 4, 5}, y{2, 4, 8, 16, 32}, z{5, 4, 3, 2, 1};
  CHECK(stats::spearman(x, y) == doctest::Approx(1.0));
  CHECK(stats::spearman(x, z) == doctest::Approx(-1.0));
  CHECK(stats::pearson(x, y) < 1.0);
  // Textbook example: d^2 sum = 4 over n = 5 -> rho = 1 - 6*4/(5*24) = 0.8.
  const std::vector<double> p{1, 2, 3, 4, 5}, q{2, 1, 4, 3, 5};
  CHECK(stats::spearman(p, q) == doctest::Approx(0.8));
}

TEST_CASE("fisher combination and silverman bandwidth closed forms") {
  const std::vector<double> one{0.037};
  CHECK(stats::fisher_combine(one) == doctest::Approx(0.037));
  // Two p-values: chi^2_4 survival at s = -2 ln(p1 p2) is e^{-s/2} (1 + s/2).
  const std::vector<double> two{0.2, 0.3};
  const double s = -2 * std::log(0.06);
  CHECK(stats::fisher_combine(two) == doctest::Approx(std::exp(-s / 2) * (1 + s / 2)));

  std::vector<double> g{-2, -1, 0, 1, 2};
  const double sd = std::sqrt(2.5), iqr = 2.0;
  CHECK(stats::silverman_bandwidth(g) ==
        doctest::Approx(0.9 * std::min(sd, iqr / 1.34) * std::pow(5.0, -0.2)));
  std::vector<double> sorted{0, 10};
  CHECK(stats::quantile_sorted(sorted, 0.25) == doctest::Approx(2.5));
  CHECK(stats::median({5, 1, 3}) == 3.0);
}
