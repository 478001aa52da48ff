#include "bgm/scm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "bgm/errors.hpp"
#include "bgm/rng.hpp"

namespace bgm {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

void check_rows(std::size_t n) {
  if (n < 1) throw ValidationError("scm: n must be >= 1");
}

void check_finite_x(const Matrix& x) {
  for (double t : x.storage()) {
    if (!std::isfinite(t)) throw NumericInputError("scm: non-finite input");
  }
}

// ---- ellipse ---------------------------------------------------------------

struct EllipseUnit {
  double z, x, u0, u1;
};

EllipseUnit draw_ellipse(Rng& rng) {
  EllipseUnit e;
  e.z = rng.uniform(-0.5, 0.5);
  const double angle = 1.44254843 * e.z + 0.59701923 + rng.normal();
  e.x = angle - kTwoPi * std::floor(angle / kTwoPi);
  e.u0 = std::exp(1.64985274 * e.z + 0.2656131) + rng.uniform();  // Beta(1,1)
  e.u1 = e.u0 * (1.0 + rng.exponential() * std::exp(1.61323358 * e.z - 0.18070237));
  return e;
}

class EllipseScm : public GroundTruthScm {
 public:
  explicit EllipseScm(bool shuffled) : shuffled_(shuffled) {}
  std::string name() const override { return "ellipse"; }
  std::string structure() const override { return shuffled_ ? "shuffled_x" : "observational"; }
  std::size_t var_dim() const override { return 2; }
  bool in_domain(double x) const override { return std::isfinite(x); }

  Matrix forward(const Matrix& x, const Matrix& u) const override {
    check(x, u);
    Matrix v(u.rows(), 2);
    for (std::size_t r = 0; r < u.rows(); ++r) {
      v(r, 0) = u(r, 0) * (2.0 + std::sin(x(r, 0)));
      v(r, 1) = u(r, 1) * (2.0 + std::cos(x(r, 0)));
    }
    return v;
  }
  Matrix inverse(const Matrix& x, const Matrix& v) const override {
    check(x, v);
    Matrix u(v.rows(), 2);
    for (std::size_t r = 0; r < v.rows(); ++r) {
      u(r, 0) = v(r, 0) / (2.0 + std::sin(x(r, 0)));
      u(r, 1) = v(r, 1) / (2.0 + std::cos(x(r, 0)));
    }
    return u;
  }

  Dataset sample(std::size_t n, std::uint64_t seed) const override {
    check_rows(n);
    Rng rng(seed);
    Dataset ds = empty(n, seed);
    for (std::size_t r = 0; r < n; ++r) {
      const EllipseUnit e = draw_ellipse(rng);
      ds.z(r, 0) = e.z;
      ds.x(r, 0) = e.x;
      ds.u_hidden(r, 0) = e.u0;
      ds.u_hidden(r, 1) = e.u1;
    }
    if (shuffled_) {
      Rng perm_rng(Rng::derive(seed, 0x5eed));
      const auto perm = perm_rng.permutation(n);
      Matrix shuffled(n, 1);
      for (std::size_t r = 0; r < n; ++r) shuffled(r, 0) = ds.x(perm[r], 0);
      ds.x = std::move(shuffled);
    }
    ds.v = forward(ds.x, ds.u_hidden);
    return ds;
  }

  Dataset sample_interventional(double x_fixed, std::size_t n, std::uint64_t seed) const override {
    check_rows(n);
    if (!in_domain(x_fixed)) throw ValidationError("ellipse: intervention value must be finite");
    Rng rng(seed);
    Dataset ds = empty(n, seed);
    for (std::size_t r = 0; r < n; ++r) {
      const EllipseUnit e = draw_ellipse(rng);
      ds.z(r, 0) = e.z;
      ds.x(r, 0) = x_fixed;
      ds.u_hidden(r, 0) = e.u0;
      ds.u_hidden(r, 1) = e.u1;
    }
    ds.v = forward(ds.x, ds.u_hidden);
    ds.structure = "do(x)";
    return ds;
  }

 private:
  void check(const Matrix& x, const Matrix& w) const {
    if (x.cols() != 1 || w.cols() != 2 || x.rows() != w.rows()) {
      throw ShapeError("ellipse: expects x n x 1 and values n x 2");
    }
    check_finite_x(x);
  }
  Dataset empty(std::size_t n, std::uint64_t seed) const {
    Dataset ds;
    ds.scm = name();
    ds.structure = structure();
    ds.seed = seed;
    ds.z = Matrix(n, 1);
    ds.x = Matrix(n, 1);
    ds.u_hidden = Matrix(n, 2);
    return ds;
  }
  bool shuffled_;
};

// ---- counterexample ----------------------------------------------------------

class CounterexampleScm : public GroundTruthScm {
 public:
  explicit CounterexampleScm(bool fstar) : fstar_(fstar) {}
  std::string name() const override { return "counterexample"; }
  std::string structure() const override { return fstar_ ? "fstar" : "fhat"; }
  std::size_t var_dim() const override { return 1; }
  bool in_domain(double x) const override { return x == 0.0 || x == 1.0; }
  std::vector<double> x_grid() const override { return {0.0, 1.0}; }

  Matrix forward(const Matrix& x, const Matrix& u) const override {
    check(x, u);
    Matrix v(u.rows(), 1);
    for (std::size_t r = 0; r < u.rows(); ++r) {
      const double t = u(r, 0);
      v(r, 0) = x(r, 0) == 1.0 ? t : (fstar_ ? t - 1.0 : -t);
    }
    return v;
  }
  Matrix inverse(const Matrix& x, const Matrix& v) const override {
    check(x, v);
    Matrix u(v.rows(), 1);
    for (std::size_t r = 0; r < v.rows(); ++r) {
      const double t = v(r, 0);
      u(r, 0) = x(r, 0) == 1.0 ? t : (fstar_ ? t + 1.0 : -t);
    }
    return u;
  }

  Dataset sample(std::size_t n, std::uint64_t seed) const override {
    check_rows(n);
    Rng rng(seed);
    Dataset ds = empty(n, seed);
    for (std::size_t r = 0; r < n; ++r) {
      ds.x(r, 0) = rng.uniform() < 0.5 ? 1.0 : 0.0;
      ds.u_hidden(r, 0) = rng.uniform();
    }
    ds.v = forward(ds.x, ds.u_hidden);
    return ds;
  }

  Dataset sample_interventional(double x_fixed, std::size_t n, std::uint64_t seed) const override {
    check_rows(n);
    if (!in_domain(x_fixed)) throw ValidationError("counterexample: X must be 0 or 1");
    Rng rng(seed);
    Dataset ds = empty(n, seed);
    for (std::size_t r = 0; r < n; ++r) {
      ds.x(r, 0) = x_fixed;
      ds.u_hidden(r, 0) = rng.uniform();
    }
    ds.v = forward(ds.x, ds.u_hidden);
    ds.structure = "do(x)";
    return ds;
  }

 private:
  void check(const Matrix& x, const Matrix& w) const {
    if (x.cols() != 1 || w.cols() != 1 || x.rows() != w.rows()) {
      throw ShapeError("counterexample: expects n x 1 inputs");
    }
    for (double t : x.storage()) {
      if (!in_domain(t)) throw ValidationError("counterexample: X must be 0 or 1");
    }
  }
  Dataset empty(std::size_t n, std::uint64_t seed) const {
    Dataset ds;
    ds.scm = name();
    ds.structure = structure();
    ds.seed = seed;
    ds.x = Matrix(n, 1);
    ds.u_hidden = Matrix(n, 1);
    ds.x_grid = x_grid();
    return ds;
  }
  bool fstar_;
};

// ---- ABR-like ----------------------------------------------------------------

enum class AbrStructure { Markovian, Iv, Bc, Ivbc };

constexpr double kBufferCuts[] = {-0.8, -0.4, 0.0, 0.4, 0.8};
constexpr int kPolicies = 10;

int buffer_bin(double z, double offset) {
  int idx = 0;
  for (double c : kBufferCuts) idx += z > c + offset ? 1 : 0;
  return idx;
}

class AbrScm : public GroundTruthScm {
 public:
  explicit AbrScm(AbrStructure s) : s_(s) {}
  std::string name() const override { return "abr_like"; }
  std::string structure() const override {
    switch (s_) {
      case AbrStructure::Markovian: return "markovian";
      case AbrStructure::Iv: return "iv";
      case AbrStructure::Bc: return "bc";
      case AbrStructure::Ivbc: return "ivbc";
    }
    return "";
  }
  std::size_t var_dim() const override { return 1; }
  std::vector<double> x_grid() const override { return abr_bitrates(); }
  bool in_domain(double x) const override {
    const auto& g = abr_bitrates();
    return std::find(g.begin(), g.end(), x) != g.end();
  }

  Matrix forward(const Matrix& x, const Matrix& u) const override {
    check(x, u);
    Matrix v(u.rows(), 1);
    for (std::size_t r = 0; r < u.rows(); ++r) v(r, 0) = abr_throughput(u(r, 0), x(r, 0));
    return v;
  }
  Matrix inverse(const Matrix& x, const Matrix& v) const override {
    check(x, v);
    Matrix u(v.rows(), 1);
    for (std::size_t r = 0; r < v.rows(); ++r) u(r, 0) = abr_capacity(x(r, 0), v(r, 0));
    return u;
  }

  Dataset sample(std::size_t n, std::uint64_t seed) const override {
    check_rows(n);
    Rng rng(seed);
    Dataset ds = empty(n, seed);
    const auto& grid = abr_bitrates();
    const bool with_i = s_ == AbrStructure::Iv || s_ == AbrStructure::Ivbc;
    for (std::size_t r = 0; r < n; ++r) {
      // Every row consumes the same draws so structures share their U and Z.
      const double u = std::exp(0.5 * rng.normal());
      const double z = std::log(u) + 0.3 * rng.normal();
      const int k = static_cast<int>(rng.below(kPolicies)) + 1;
      const bool explore = rng.uniform() < exploration();
      const int random_idx = static_cast<int>(rng.below(grid.size()));
      int idx = 0;
      switch (s_) {
        case AbrStructure::Markovian:
          idx = random_idx;
          break;
        case AbrStructure::Bc:
          idx = explore ? random_idx : buffer_bin(z, 0.0);
          break;
        case AbrStructure::Iv: {
          const double theta = 0.5 + 0.05 * k;
          const int base = (k - 1) % static_cast<int>(grid.size());
          const int step = (z > theta ? 1 : 0) - (z < -theta ? 1 : 0);
          idx = explore ? random_idx
                        : std::clamp(base + step, 0, static_cast<int>(grid.size()) - 1);
          break;
        }
        case AbrStructure::Ivbc:
          idx = explore ? random_idx : buffer_bin(z, (k - 5.5) * 0.12);
          break;
      }
      if (with_i) ds.i(r, 0) = k;
      ds.z(r, 0) = z;
      ds.x(r, 0) = grid[static_cast<std::size_t>(idx)];
      ds.u_hidden(r, 0) = u;
    }
    ds.v = forward(ds.x, ds.u_hidden);
    return ds;
  }

  Dataset sample_interventional(double x_fixed, std::size_t n, std::uint64_t seed) const override {
    check_rows(n);
    if (!in_domain(x_fixed)) throw ValidationError("abr_like: intervention must be a grid bitrate");
    Dataset ds = sample(n, seed);
    ds.x.fill(x_fixed);
    ds.v = forward(ds.x, ds.u_hidden);
    ds.structure = "do(x)";
    return ds;
  }

 private:
  double exploration() const {
    switch (s_) {
      case AbrStructure::Markovian: return 1.0;
      case AbrStructure::Iv: return 0.15;
      default: return 0.2;
    }
  }
  void check(const Matrix& x, const Matrix& w) const {
    if (x.cols() != 1 || w.cols() != 1 || x.rows() != w.rows()) {
      throw ShapeError("abr_like: expects n x 1 inputs");
    }
    check_finite_x(x);
    for (double t : x.storage()) {
      if (!(t > 0.0)) throw ValidationError("abr_like: bitrate must be positive");
    }
  }
  Dataset empty(std::size_t n, std::uint64_t seed) const {
    Dataset ds;
    ds.scm = name();
    ds.structure = structure();
    ds.seed = seed;
    if (s_ == AbrStructure::Iv || s_ == AbrStructure::Ivbc) {
      ds.i = Matrix(n, 1);
      for (int k = 1; k <= kPolicies; ++k) ds.i_levels.push_back(k);
    }
    ds.z = Matrix(n, 1);
    ds.x = Matrix(n, 1);
    ds.u_hidden = Matrix(n, 1);
    ds.x_grid = x_grid();
    return ds;
  }
  AbrStructure s_;
};

}  // namespace

Matrix GroundTruthScm::true_counterfactual(const Matrix& x, const Matrix& v,
                                           const Matrix& x_prime) const {
  Matrix out = forward(x_prime, inverse(x, v));
  // No intervention change: the unit keeps its observed outcome exactly.
  for (std::size_t r = 0; r < out.rows(); ++r) {
    bool same = true;
    for (std::size_t c = 0; c < x.cols(); ++c) same = same && x(r, c) == x_prime(r, c);
    if (same) {
      for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) = v(r, c);
    }
  }
  return out;
}

std::vector<std::string> scm_catalog() {
  return {"ellipse/observational", "ellipse/shuffled_x", "counterexample/fstar",
          "counterexample/fhat",   "abr_like/markovian", "abr_like/iv",
          "abr_like/bc",           "abr_like/ivbc"};
}

std::unique_ptr<GroundTruthScm> make_scm(const std::string& name, const std::string& structure) {
  if (name == "ellipse" && (structure.empty() || structure == "observational")) {
    return std::make_unique<EllipseScm>(false);
  }
  if (name == "ellipse" && structure == "shuffled_x") return std::make_unique<EllipseScm>(true);
  if (name == "counterexample" && (structure == "fstar" || structure == "fhat")) {
    return std::make_unique<CounterexampleScm>(structure == "fstar");
  }
  if (name == "abr_like") {
    if (structure == "markovian") return std::make_unique<AbrScm>(AbrStructure::Markovian);
    if (structure == "iv") return std::make_unique<AbrScm>(AbrStructure::Iv);
    if (structure == "bc") return std::make_unique<AbrScm>(AbrStructure::Bc);
    if (structure == "ivbc") return std::make_unique<AbrScm>(AbrStructure::Ivbc);
  }
  std::string valid;
  for (const auto& s : scm_catalog()) valid += (valid.empty() ? "" : ", ") + s;
  throw ValidationError("unknown scm '" + name + (structure.empty() ? "" : "/" + structure) +
                        "'; valid: " + valid);
}

Dataset gen_ellipse(std::size_t n, std::uint64_t seed, bool shuffled_x) {
  return EllipseScm(shuffled_x).sample(n, seed);
}

std::array<double, 2> ellipse_true_counterfactual(double x, std::array<double, 2> v,
                                                  double x_prime) {
  const double u0 = v[0] / (2.0 + std::sin(x));
  const double u1 = v[1] / (2.0 + std::cos(x));
  return {u0 * (2.0 + std::sin(x_prime)), u1 * (2.0 + std::cos(x_prime))};
}

Dataset gen_counterexample(std::size_t n, std::uint64_t seed, const std::string& which) {
  return make_scm("counterexample", which)->sample(n, seed);
}

Dataset gen_abr_like(std::size_t n, std::uint64_t seed, const std::string& structure) {
  return make_scm("abr_like", structure)->sample(n, seed);
}

const std::vector<double>& abr_bitrates() {
  static const std::vector<double> grid{1.0, 1.5, 2.0, 3.0, 4.5, 6.0};
  return grid;
}

double abr_throughput(double u, double x) {
  if (!(u > 0.0) || !(x > 0.0)) throw ValidationError("abr_like: capacity and bitrate must be positive");
  return -u * std::expm1(-x / u);
}

double abr_capacity(double x, double v) {
  if (!std::isfinite(x) || !std::isfinite(v)) throw NumericInputError("abr_like: non-finite input");
  if (!(v > 0.0) || !(v < x)) {
    throw ValidationError("abr_like: throughput must lie in (0, bitrate) to be invertible");
  }
  // g(u) = u (1 - e^{-x/u}) rises from 0 to x. g(u) < u gives u > v, and
  // 1 - e^{-t} >= t - t^2/2 gives g(u) >= v once u >= x^2 / (2 (x - v)).
  double lo = v;
  double hi = std::max(v, x * x / (2.0 * (x - v))) * 2.0;
  double u = 0.5 * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    const double t = x / u;
    const double e = std::exp(-t);
    const double g = -u * std::expm1(-t) - v;
    if (g > 0.0) hi = u; else lo = u;
    const double dg = 1.0 - (1.0 + t) * e;
    double next = u - g / dg;
    if (!(next > lo && next < hi) || !std::isfinite(next)) next = 0.5 * (lo + hi);
    if (std::abs(next - u) <= 1e-15 * u) return next;
    u = next;
  }
  return u;
}

}  // namespace bgm
