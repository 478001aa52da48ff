#pragma once

// Abduction-action-prediction over any mechanism (learned flow or ground
// truth), plus a model-free quantile-matching oracle for scalar Markovian data.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bgm/dataset.hpp"
#include "bgm/mechanism.hpp"

namespace bgm {

/// û = f^{-1}(x, v) row by row.
Matrix abduct(const Mechanism& m, const Matrix& x, const Matrix& v);
/// v' = f(x', f^{-1}(x, v)) row by row.
Matrix point_counterfactual(const Mechanism& m, const Matrix& x, const Matrix& v, const Matrix& x_prime);

struct SweepAnswer {
  Vec u_hat;
  Matrix x_prime;  // k x cond_dim
  Matrix v_prime;  // k x var_dim
};
/// Counterfactuals of one unit (x, v) at every row of `grid`.
SweepAnswer counterfactual_sweep(const Mechanism& m, const Vec& x, const Vec& v, const Matrix& grid);

/// Samples of V_{x2} | X = x1: every dataset row whose scalar X lies within
/// `tol` of x1 is abducted at x1 and pushed through x2. tol < 0 picks the
/// default: exact match on a discrete grid, else 1% of the observed X range.
/// Throws EmptyEvidence when no row matches.
Matrix ett_samples(const Mechanism& m, const Dataset& ds, double x1, double x2, double tol = -1.0);

/// F^{-1}(x', F(x, v)) with both conditional distributions estimated from
/// the k rows nearest in X (k = max(50, n/100) by default; exact X match on a
/// discrete grid). Scalar X and V, increasing mechanisms only.
class QuantileOracle {
 public:
  explicit QuantileOracle(const Dataset& ds, std::size_t k = 0);
  double operator()(double x, double v, double x_prime) const;
  std::size_t window() const { return k_; }

 private:
  std::vector<double> neighbours(double x) const;  // sorted V values

  std::vector<double> xs_, vs_;  // rows sorted by x
  std::vector<double> grid_;
  std::size_t k_ = 0;
};

double quantile_oracle(const Dataset& ds, double x, double v, double x_prime, std::size_t k = 0);

enum class QueryMode { Point, Sweep, Ett };

struct CounterfactualQuery {
  QueryMode mode = QueryMode::Point;
  Vec evidence_x, evidence_v;
  Matrix intervention;  // point: 1 row; sweep: grid rows
  double ett_x1 = 0.0, ett_x2 = 0.0, ett_tol = -1.0;

  void validate(const Mechanism& m) const;
  nlohmann::json to_json() const;
  static CounterfactualQuery from_json(const nlohmann::json& j);
};

struct CounterfactualAnswer {
  QueryMode mode = QueryMode::Point;
  Vec u_hat;       // empty for ett
  Matrix x_prime;  // one row per answer row
  Matrix v_prime;
};

/// ETT queries need `ds`; other modes ignore it.
CounterfactualAnswer answer_query(const Mechanism& m, const CounterfactualQuery& q, const Dataset* ds = nullptr);
/// Header x', or x'0.., then v' or v'0..; one line per answer row.
void write_answer_csv(const CounterfactualAnswer& a, const std::string& path);

}  // namespace bgm
