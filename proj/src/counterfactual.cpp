#include "bgm/counterfactual.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "bgm/errors.hpp"
#include "bgm/stats.hpp"

namespace bgm {

using nlohmann::json;

namespace {

void check_inputs(const Mechanism& m, const Matrix& x, const Matrix& v, const char* what) {
  if (x.cols() != m.cond_dim() || v.cols() != m.var_dim() || x.rows() != v.rows()) {
    throw ShapeError(std::string(what) + ": expected x with " + std::to_string(m.cond_dim()) +
                     " and v with " + std::to_string(m.var_dim()) + " columns on the same rows");
  }
  for (const Matrix* a : {&x, &v}) {
    for (double t : a->storage()) {
      if (!std::isfinite(t)) throw NumericInputError(std::string(what) + ": non-finite input");
    }
  }
}

Matrix tile(const Vec& row, std::size_t n) {
  Matrix out(n, row.size());
  for (std::size_t r = 0; r < n; ++r) std::copy(row.begin(), row.end(), out.row_span(r).begin());
  return out;
}

}  // namespace

Matrix abduct(const Mechanism& m, const Matrix& x, const Matrix& v) {
  check_inputs(m, x, v, "abduct");
  return m.inverse(x, v);
}

Matrix point_counterfactual(const Mechanism& m, const Matrix& x, const Matrix& v, const Matrix& x_prime) {
  check_inputs(m, x_prime, v, "point_counterfactual");
  return m.forward(x_prime, abduct(m, x, v));
}

SweepAnswer counterfactual_sweep(const Mechanism& m, const Vec& x, const Vec& v, const Matrix& grid) {
  if (grid.rows() == 0) throw ValidationError("sweep: empty intervention grid");
  SweepAnswer out;
  out.u_hat = abduct(m, Matrix::row(x), Matrix::row(v)).row_vec(0);
  out.x_prime = grid;
  check_inputs(m, grid, tile(v, grid.rows()), "sweep");
  out.v_prime = m.forward(grid, tile(out.u_hat, grid.rows()));
  return out;
}

Matrix ett_samples(const Mechanism& m, const Dataset& ds, double x1, double x2, double tol) {
  if (ds.x.cols() != 1 || m.cond_dim() != 1) throw ValidationError("ett: scalar X required");
  if (tol < 0.0) {
    if (!ds.x_grid.empty()) {
      tol = 0.0;
    } else if (ds.rows() > 0) {
      const auto [lo, hi] = std::minmax_element(ds.x.storage().begin(), ds.x.storage().end());
      tol = 0.01 * (*hi - *lo);
    }
  }
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    if (std::abs(ds.x(r, 0) - x1) <= tol) rows.push_back(r);
  }
  if (rows.empty()) {
    throw EmptyEvidence("ett: no rows with X within " + format_double(tol) + " of " + format_double(x1));
  }
  const Matrix v = select_rows(ds.v, rows);
  return point_counterfactual(m, Matrix(rows.size(), 1, x1), v, Matrix(rows.size(), 1, x2));
}

QuantileOracle::QuantileOracle(const Dataset& ds, std::size_t k) : grid_(ds.x_grid) {
  if (ds.x.cols() != 1 || ds.v.cols() != 1) throw ValidationError("quantile oracle: scalar X and V required");
  const std::size_t n = ds.rows();
  k_ = k > 0 ? k : std::max<std::size_t>(50, n / 100);
  if (n < k_) throw InsufficientSupport("quantile oracle: fewer rows than the window size");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return ds.x(a, 0) < ds.x(b, 0); });
  xs_.reserve(n);
  vs_.reserve(n);
  for (auto r : order) {
    xs_.push_back(ds.x(r, 0));
    vs_.push_back(ds.v(r, 0));
  }
}

std::vector<double> QuantileOracle::neighbours(double x) const {
  std::vector<double> out;
  if (!grid_.empty()) {
    const auto [a, b] = std::equal_range(xs_.begin(), xs_.end(), x);
    if (static_cast<std::size_t>(b - a) < 50) {
      throw InsufficientSupport("quantile oracle: fewer than 50 rows with X = " + format_double(x));
    }
    out.assign(vs_.begin() + (a - xs_.begin()), vs_.begin() + (b - xs_.begin()));
  } else {
    // k nearest in X, growing a window outward from the insertion point
    std::size_t hi = static_cast<std::size_t>(std::lower_bound(xs_.begin(), xs_.end(), x) - xs_.begin());
    std::size_t lo = hi;
    while (hi - lo < k_) {
      if (lo == 0) {
        ++hi;
      } else if (hi == xs_.size() || x - xs_[lo - 1] <= xs_[hi] - x) {
        --lo;
      } else {
        ++hi;
      }
    }
    out.assign(vs_.begin() + lo, vs_.begin() + hi);
  }
  std::sort(out.begin(), out.end());
  return out;
}

double QuantileOracle::operator()(double x, double v, double x_prime) const {
  if (!std::isfinite(x) || !std::isfinite(v) || !std::isfinite(x_prime)) {
    throw NumericInputError("quantile oracle: non-finite input");
  }
  const std::vector<double> here = neighbours(x);
  // Position of v among the sorted window, inverting quantile_sorted's
  // linear interpolation so that x' = x maps v back to itself.
  double p;
  const auto it = std::upper_bound(here.begin(), here.end(), v);
  if (it == here.begin()) {
    p = 0.0;
  } else if (it == here.end()) {
    p = 1.0;
  } else {
    const std::size_t j = static_cast<std::size_t>(it - here.begin()) - 1;
    const double gap = here[j + 1] - here[j];
    const double f = gap > 0.0 ? (v - here[j]) / gap : 0.0;
    p = (static_cast<double>(j) + f) / static_cast<double>(here.size() - 1);
  }
  const std::vector<double> there = neighbours(x_prime);
  return stats::quantile_sorted(there, p);
}

double quantile_oracle(const Dataset& ds, double x, double v, double x_prime, std::size_t k) {
  return QuantileOracle(ds, k)(x, v, x_prime);
}

namespace {

const char* mode_name(QueryMode m) {
  switch (m) {
    case QueryMode::Point: return "point";
    case QueryMode::Sweep: return "sweep";
    case QueryMode::Ett: return "ett";
  }
  return "";
}

Matrix rows_from_json(const json& j, std::size_t cols_hint) {
  if (!j.is_array() || j.empty()) throw ValidationError("query: intervention must be a nonempty array");
  if (!j.front().is_array()) {
    // a flat list is one value per row for scalar X, or one point otherwise
    const Vec flat = j.get<Vec>();
    return cols_hint == 1 ? Matrix::column(flat) : Matrix::row(flat);
  }
  const std::size_t cols = j.front().size();
  Matrix out(j.size(), cols);
  for (std::size_t r = 0; r < j.size(); ++r) {
    const Vec row = j[r].get<Vec>();
    if (row.size() != cols) throw ValidationError("query: ragged intervention grid");
    std::copy(row.begin(), row.end(), out.row_span(r).begin());
  }
  return out;
}

}  // namespace

void CounterfactualQuery::validate(const Mechanism& m) const {
  if (mode == QueryMode::Ett) {
    if (m.cond_dim() != 1) throw ValidationError("query: ett needs scalar X");
    return;
  }
  if (evidence_x.size() != m.cond_dim() || evidence_v.size() != m.var_dim()) {
    throw ValidationError("query: evidence dimensions do not match the model (x: " +
                          std::to_string(m.cond_dim()) + ", v: " + std::to_string(m.var_dim()) + ")");
  }
  if (intervention.rows() == 0) throw ValidationError("query: empty intervention grid");
  if (intervention.cols() != m.cond_dim()) throw ValidationError("query: intervention width mismatch");
  if (mode == QueryMode::Point && intervention.rows() != 1) {
    throw ValidationError("query: point mode takes a single intervention");
  }
}

json CounterfactualQuery::to_json() const {
  json j = {{"mode", mode_name(mode)}};
  if (mode == QueryMode::Ett) {
    j["x1"] = ett_x1;
    j["x2"] = ett_x2;
    if (ett_tol >= 0.0) j["tol"] = ett_tol;
    return j;
  }
  j["evidence_x"] = evidence_x;
  j["evidence_v"] = evidence_v;
  json grid = json::array();
  for (std::size_t r = 0; r < intervention.rows(); ++r) grid.push_back(intervention.row_vec(r));
  j[mode == QueryMode::Point ? "intervention_x" : "grid"] = mode == QueryMode::Point ? grid[0] : grid;
  return j;
}

CounterfactualQuery CounterfactualQuery::from_json(const json& j) {
  try {
    CounterfactualQuery q;
    const auto mode = j.at("mode").get<std::string>();
    if (mode == "point") {
      q.mode = QueryMode::Point;
    } else if (mode == "sweep") {
      q.mode = QueryMode::Sweep;
    } else if (mode == "ett") {
      q.mode = QueryMode::Ett;
    } else {
      throw ValidationError("query: mode must be point, sweep or ett");
    }
    if (q.mode == QueryMode::Ett) {
      q.ett_x1 = j.at("x1").get<double>();
      q.ett_x2 = j.at("x2").get<double>();
      q.ett_tol = j.value("tol", -1.0);
      return q;
    }
    q.evidence_x = j.at("evidence_x").get<Vec>();
    q.evidence_v = j.at("evidence_v").get<Vec>();
    if (q.mode == QueryMode::Point) {
      const Vec x = j.at("intervention_x").get<Vec>();
      q.intervention = Matrix::row(x);
    } else {
      q.intervention = rows_from_json(j.at("grid"), q.evidence_x.size());
    }
    return q;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("query: malformed JSON: ") + e.what());
  }
}

CounterfactualAnswer answer_query(const Mechanism& m, const CounterfactualQuery& q, const Dataset* ds) {
  q.validate(m);
  CounterfactualAnswer a;
  a.mode = q.mode;
  if (q.mode == QueryMode::Ett) {
    if (ds == nullptr) throw ValidationError("query: ett needs a dataset");
    a.v_prime = ett_samples(m, *ds, q.ett_x1, q.ett_x2, q.ett_tol);
    a.x_prime = Matrix(a.v_prime.rows(), 1, q.ett_x2);
    return a;
  }
  SweepAnswer s = counterfactual_sweep(m, q.evidence_x, q.evidence_v, q.intervention);
  a.u_hat = std::move(s.u_hat);
  a.x_prime = std::move(s.x_prime);
  a.v_prime = std::move(s.v_prime);
  return a;
}

void write_answer_csv(const CounterfactualAnswer& a, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  const auto xn = group_names("x'", a.x_prime.cols());
  const auto vn = group_names("v'", a.v_prime.cols());
  std::string line;
  for (const auto* names : {&xn, &vn}) {
    for (const auto& s : *names) line += (line.empty() ? "" : ",") + s;
  }
  out << line << '\n';
  for (std::size_t r = 0; r < a.v_prime.rows(); ++r) {
    line.clear();
    for (std::size_t c = 0; c < a.x_prime.cols(); ++c) line += (c ? "," : "") + format_double(a.x_prime(r, c));
    for (std::size_t c = 0; c < a.v_prime.cols(); ++c) line += "," + format_double(a.v_prime(r, c));
    out << line << '\n';
  }
}

}  // namespace bgm
