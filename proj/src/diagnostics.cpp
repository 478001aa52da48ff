#include "bgm/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <thread>

#include <Eigen/Dense>

#include "bgm/errors.hpp"
#include "bgm/kernels.hpp"
#include "bgm/rng.hpp"
#include "bgm/stats.hpp"

namespace bgm {

using nlohmann::json;

namespace {

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) rows.push_back(m.row_vec(r));
  return rows;
}

// Double-centred Euclidean distance matrix, stored in float to halve memory.
std::vector<float> centred_distances(const Matrix& a, std::span<const std::size_t> rows) {
  const std::size_t n = rows.size(), p = a.cols();
  auto dist = [&](std::size_t i, std::size_t j) {
    const double* ai = a.data() + rows[i] * p;
    const double* aj = a.data() + rows[j] * p;
    double s = 0.0;
    for (std::size_t k = 0; k < p; ++k) s += (ai[k] - aj[k]) * (ai[k] - aj[k]);
    return std::sqrt(s);
  };
  std::vector<float> out(n * n);
  std::vector<double> mean(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = dist(i, j);
      mean[i] += d;
      mean[j] += d;
    }
  }
  double grand = 0.0;
  for (double& m : mean) {
    grand += m;
    m /= static_cast<double>(n);
  }
  grand /= static_cast<double>(n) * static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const double d = i == j ? 0.0 : dist(i, j);
      out[i * n + j] = out[j * n + i] = static_cast<float>(d - mean[i] - mean[j] + grand);
    }
  }
  return out;
}

double dcor_from(std::size_t n, const std::vector<float>& A, const std::vector<float>& B, double cross) {
  std::vector<std::uint32_t> id(n);
  std::iota(id.begin(), id.end(), 0u);
  const double va = kernels::permuted_frobenius(n, A.data(), A.data(), id.data());
  const double vb = kernels::permuted_frobenius(n, B.data(), B.data(), id.data());
  if (!(va > 0.0) || !(vb > 0.0)) return 0.0;
  return std::sqrt(std::max(cross, 0.0) / std::sqrt(va * vb));
}

std::vector<std::size_t> subsample(std::size_t n, std::size_t max_n, std::uint64_t seed) {
  if (n <= max_n) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  Rng rng(Rng::derive(seed, 0xd1a6));
  auto perm = rng.permutation(n);
  perm.resize(max_n);
  std::sort(perm.begin(), perm.end());
  return perm;
}

struct PermResult {
  double statistic, p_value;
};

PermResult permutation_dcor(const Matrix& a, const Matrix& b, std::span<const std::size_t> rows,
                            std::size_t n_perm, std::uint64_t seed) {
  const std::size_t n = rows.size();
  const auto A = centred_distances(a, rows);
  const auto B = centred_distances(b, rows);
  std::vector<std::uint32_t> id(n);
  std::iota(id.begin(), id.end(), 0u);
  const double observed = kernels::permuted_frobenius(n, A.data(), B.data(), id.data());
  // Each permutation has its own stream, so the count does not depend on
  // how the work is split across threads.
  const std::size_t workers = std::max(1u, std::min<unsigned>(std::thread::hardware_concurrency(), 8u));
  std::vector<std::size_t> exceed(workers, 0);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      std::vector<std::uint32_t> perm(n);
      for (std::size_t p = w; p < n_perm; p += workers) {
        std::iota(perm.begin(), perm.end(), 0u);
        Rng rng(Rng::derive(seed, p));
        rng.shuffle(std::span<std::uint32_t>(perm));
        if (kernels::permuted_frobenius(n, A.data(), B.data(), perm.data()) >= observed) ++exceed[w];
      }
    });
  }
  for (auto& t : pool) t.join();
  const std::size_t ge = std::accumulate(exceed.begin(), exceed.end(), std::size_t{0});
  return {dcor_from(n, A, B, observed), static_cast<double>(1 + ge) / static_cast<double>(n_perm + 1)};
}

void check_pair(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeError("independence test: a and b have different lengths");
  if (a.cols() == 0 || b.cols() == 0) throw ShapeError("independence test: empty sample");
  if (a.rows() < 100) throw InsufficientSupport("independence test: needs at least 100 rows");
}

}  // namespace

json IndependenceReport::to_json() const {
  json j = {{"statistic", statistic}, {"p_value", p_value}, {"n", n}, {"conditioning", conditioning}, {"pass", pass}};
  if (!bin_statistics.empty()) {
    j["bin_statistics"] = bin_statistics;
    j["bin_p_values"] = bin_p_values;
  }
  return j;
}

double distance_correlation(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeError("distance correlation: length mismatch");
  std::vector<std::size_t> rows(a.rows());
  std::iota(rows.begin(), rows.end(), 0);
  const auto A = centred_distances(a, rows);
  const auto B = centred_distances(b, rows);
  std::vector<std::uint32_t> id(rows.size());
  std::iota(id.begin(), id.end(), 0u);
  return dcor_from(rows.size(), A, B, kernels::permuted_frobenius(rows.size(), A.data(), B.data(), id.data()));
}

IndependenceReport independence_test(const Matrix& a, const Matrix& b, const IndependenceOptions& opt) {
  check_pair(a, b);
  const auto rows = subsample(a.rows(), opt.max_n, opt.seed);
  const PermResult r = permutation_dcor(a, b, rows, opt.n_perm, opt.seed);
  IndependenceReport rep;
  rep.statistic = r.statistic;
  rep.p_value = r.p_value;
  rep.n = rows.size();
  rep.pass = rep.p_value >= opt.alpha && rep.statistic <= opt.max_stat;
  return rep;
}

IndependenceReport conditional_independence_test(const Matrix& a, const Matrix& b, const Vec& z,
                                                 std::size_t n_bins, const IndependenceOptions& opt) {
  check_pair(a, b);
  if (z.size() != a.rows()) throw ShapeError("conditional test: z length mismatch");
  if (n_bins == 0) throw ValidationError("conditional test: n_bins must be positive");
  const std::size_t n = z.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return z[x] < z[y]; });
  if (z[order.front()] == z[order.back()]) n_bins = 1;
  IndependenceReport rep;
  rep.conditioning = "z-bins:" + std::to_string(n_bins);
  std::vector<std::vector<std::size_t>> bins(n_bins);
  for (std::size_t k = 0; k < n; ++k) bins[k * n_bins / n].push_back(order[k]);
  for (std::size_t bi = 0; bi < n_bins; ++bi) {
    if (bins[bi].size() < 100) {
      throw InsufficientSupport("conditional test: z bin " + std::to_string(bi) + " holds " +
                                std::to_string(bins[bi].size()) + " rows, needs 100");
    }
  }
  double weighted = 0.0;
  for (std::size_t bi = 0; bi < n_bins; ++bi) {
    auto rows = bins[bi];
    std::sort(rows.begin(), rows.end());
    if (rows.size() > opt.max_n_per_bin) {
      const auto pick = subsample(rows.size(), opt.max_n_per_bin, Rng::derive(opt.seed, 1000 + bi));
      std::vector<std::size_t> kept;
      for (auto p : pick) kept.push_back(rows[p]);
      rows = std::move(kept);
    }
    const PermResult r = permutation_dcor(a, b, rows, opt.n_perm, Rng::derive(opt.seed, 2000 + bi));
    rep.bin_statistics.push_back(r.statistic);
    rep.bin_p_values.push_back(r.p_value);
    weighted += r.statistic * static_cast<double>(rows.size());
    rep.n += rows.size();
  }
  rep.statistic = weighted / static_cast<double>(rep.n);
  rep.p_value = n_bins == 1 ? rep.bin_p_values[0] : stats::fisher_combine(rep.bin_p_values);
  rep.pass = rep.p_value >= opt.alpha && rep.statistic <= opt.max_stat;
  return rep;
}

json VariabilityReport::to_json() const {
  json mats = json::array();
  for (const auto& m : matrices) mats.push_back(matrix_json(m));
  return {{"kind", kind},          {"u_grid", matrix_json(u_grid)}, {"abs_det", abs_det},
          {"threshold", threshold}, {"matrices", mats},              {"chosen", chosen},
          {"min_abs_det", min_abs_det}, {"pass", pass}};
}

namespace {

double abs_det(const Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
  }
  return std::abs(e.fullPivLu().determinant());
}

Matrix pick_rows(const Matrix& m, const std::vector<std::size_t>& rows) { return select_rows(m, rows); }

// All k-subsets of {0..n-1} in lexicographic order.
std::vector<std::vector<std::size_t>> subsets(std::size_t n, std::size_t k) {
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur(k);
  std::iota(cur.begin(), cur.end(), 0);
  while (true) {
    out.push_back(cur);
    std::size_t i = k;
    while (i > 0 && cur[i - 1] == n - k + i - 1) --i;
    if (i == 0) break;
    ++cur[i - 1];
    for (std::size_t j = i; j < k; ++j) cur[j] = cur[j - 1] + 1;
  }
  return out;
}

std::size_t choose(std::size_t n, std::size_t k) {
  double c = 1.0;
  for (std::size_t i = 0; i < k; ++i) c = c * static_cast<double>(n - i) / static_cast<double>(i + 1);
  return static_cast<std::size_t>(std::min(c, 1e9));
}

double gauss(double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * std::numbers::pi); }

}  // namespace

VariabilityReport variability_iv(const Dataset& ds, const Vec& u_grid, const Vec& i_values, const Vec& x_values,
                                 double c) {
  if (!ds.has_u()) throw OracleUnavailable("variability_iv: dataset has no hidden u");
  if (ds.u_hidden.cols() != 1 || ds.x.cols() != 1 || ds.i.cols() != 1) {
    throw ValidationError("variability_iv: scalar u, x and i required");
  }
  const std::size_t n = x_values.size();
  if (n == 0 || i_values.size() < n) {
    throw ValidationError("variability_iv: need at least as many instrument values as X values");
  }
  if (u_grid.empty()) throw ValidationError("variability_iv: empty u grid");
  const Vec u = ds.u_hidden.col(0);
  const double h = stats::silverman_bandwidth(u);

  VariabilityReport rep;
  rep.kind = "iv";
  rep.u_grid = Matrix::column(u_grid);
  // Full |I| x |X| conditional table per grid point.
  std::vector<Matrix> tables;
  std::vector<std::string> empty_cells;
  for (double us : u_grid) {
    Matrix t(i_values.size(), n);
    Vec wsum(i_values.size(), 0.0), w2(i_values.size(), 0.0);
    for (std::size_t r = 0; r < ds.rows(); ++r) {
      const auto ik = std::find(i_values.begin(), i_values.end(), ds.i(r, 0));
      const auto xj = std::find(x_values.begin(), x_values.end(), ds.x(r, 0));
      if (ik == i_values.end()) continue;
      const double w = gauss((u[r] - us) / h);
      const auto k = static_cast<std::size_t>(ik - i_values.begin());
      wsum[k] += w;
      w2[k] += w * w;
      if (xj != x_values.end()) t(k, static_cast<std::size_t>(xj - x_values.begin())) += w;
    }
    for (std::size_t k = 0; k < i_values.size(); ++k) {
      const double eff = w2[k] > 0.0 ? wsum[k] * wsum[k] / w2[k] : 0.0;
      if (eff < 20.0) {
        empty_cells.push_back("(i=" + format_double(i_values[k]) + ", u=" + format_double(us) + ")");
        continue;
      }
      for (std::size_t j = 0; j < n; ++j) t(k, j) /= wsum[k];
    }
    tables.push_back(std::move(t));
  }
  if (!empty_cells.empty()) {
    std::string list;
    for (const auto& s : empty_cells) list += (list.empty() ? "" : ", ") + s;
    throw InsufficientSupport("variability_iv: too little mass in cells " + list);
  }
  std::vector<std::vector<std::size_t>> candidates;
  if (choose(i_values.size(), n) <= 5000) {
    candidates = subsets(i_values.size(), n);
  } else {
    std::vector<std::size_t> first(n);
    std::iota(first.begin(), first.end(), 0);
    candidates.push_back(first);
  }
  double best = -1.0;
  for (const auto& sub : candidates) {
    double worst = INFINITY;
    for (const auto& t : tables) worst = std::min(worst, abs_det(pick_rows(t, sub)));
    if (worst > best) {
      best = worst;
      rep.chosen = sub;
    }
  }
  for (const auto& t : tables) {
    rep.matrices.push_back(pick_rows(t, rep.chosen));
    rep.abs_det.push_back(abs_det(rep.matrices.back()));
    rep.threshold.push_back(c);
  }
  rep.min_abs_det = *std::min_element(rep.abs_det.begin(), rep.abs_det.end());
  rep.pass = rep.min_abs_det >= c;
  return rep;
}

namespace {

// Conditional density p(u | z_k) and its gradient from weighted rows.
struct BcEstimator {
  const Matrix& u;
  const Vec& z;
  Vec hu;
  double hz;

  // weights: row multiplicities (bootstrap) over `rows`
  Matrix rows_of_m(const Vec& us, const Vec& zc, std::span<const std::size_t> rows, std::span<const double> mult) const {
    const std::size_t d = u.cols();
    Matrix m(zc.size(), d + 1);
    std::vector<Vec> points(1 + 2 * d, us);
    for (std::size_t j = 0; j < d; ++j) {
      points[1 + 2 * j][j] += 0.5 * hu[j];
      points[2 + 2 * j][j] -= 0.5 * hu[j];
    }
    double norm_u = 1.0;
    for (double h : hu) norm_u *= h;
    for (std::size_t k = 0; k < zc.size(); ++k) {
      double wz_sum = 0.0;
      Vec dens(points.size(), 0.0);
      for (std::size_t q = 0; q < rows.size(); ++q) {
        const std::size_t r = rows[q];
        const double wz = mult[q] * gauss((z[r] - zc[k]) / hz);
        if (wz < 1e-300) continue;
        wz_sum += wz;
        for (std::size_t p = 0; p < points.size(); ++p) {
          double ku = 1.0;
          for (std::size_t j = 0; j < d; ++j) ku *= gauss((u(r, j) - points[p][j]) / hu[j]);
          dens[p] += wz * ku;
        }
      }
      if (!(wz_sum > 0.0)) throw InsufficientSupport("variability_bc: no rows near z = " + format_double(zc[k]));
      for (double& t : dens) t /= wz_sum * norm_u;
      m(k, 0) = dens[0];
      for (std::size_t j = 0; j < d; ++j) m(k, 1 + j) = (dens[1 + 2 * j] - dens[2 + 2 * j]) / hu[j];
    }
    return m;
  }
};

}  // namespace

VariabilityReport variability_bc(const Dataset& ds, const Matrix& u_grid, const Vec& z_candidates,
                                 const VariabilityBcOptions& opt) {
  if (!ds.has_u()) throw OracleUnavailable("variability_bc: dataset has no hidden u");
  if (ds.z.cols() != 1) throw ValidationError("variability_bc: scalar z required");
  const std::size_t d = ds.u_hidden.cols();
  if (u_grid.cols() != d || u_grid.rows() == 0) throw ValidationError("variability_bc: u grid width must equal d");
  if (z_candidates.size() < d + 1) throw ValidationError("variability_bc: need at least d + 1 z candidates");
  if (opt.bootstrap < 2) throw ValidationError("variability_bc: need at least 2 bootstrap draws");

  const auto rows = subsample(ds.rows(), opt.max_rows, opt.seed);
  const std::span<const std::size_t> all_rows(rows);
  const Vec z = ds.z.col(0);

  BcEstimator est{ds.u_hidden, z, {}, 0.0};
  {
    Vec zs;
    for (auto r : rows) zs.push_back(z[r]);
    // P(u | z) is a ratio of (d+1)- and 1-dimensional densities; widths use
    // the rule for the joint (u, z) estimate.
    est.hz = stats::silverman_bandwidth(zs, d + 1);
    for (std::size_t j = 0; j < d; ++j) {
      Vec us;
      for (auto r : rows) us.push_back(ds.u_hidden(r, j));
      est.hu.push_back(stats::silverman_bandwidth(us, d + 1));
    }
  }
  for (double zc : z_candidates) {
    double w = 0.0, w2 = 0.0;
    for (auto r : rows) {
      const double k = gauss((z[r] - zc) / est.hz);
      w += k;
      w2 += k * k;
    }
    if (!(w2 > 0.0) || w * w / w2 < 50.0) {
      throw InsufficientSupport("variability_bc: too few rows near z = " + format_double(zc));
    }
  }

  VariabilityReport rep;
  rep.kind = "bc";
  rep.u_grid = u_grid;
  const auto subs = subsets(z_candidates.size(), d + 1);
  const Vec ones(all_rows.size(), 1.0);
  Rng rng(Rng::derive(opt.seed, 0xb007));
  bool all = true;
  double min_det = INFINITY;
  for (std::size_t g = 0; g < u_grid.rows(); ++g) {
    const Vec us = u_grid.row_vec(g);
    const Matrix full = est.rows_of_m(us, z_candidates, all_rows, ones);
    std::vector<std::size_t> best_sub = subs.front();
    double best = -1.0;
    for (const auto& s : subs) {
      const double v = abs_det(pick_rows(full, s));
      if (v > best) {
        best = v;
        best_sub = s;
      }
    }
    Vec zc;
    for (auto k : best_sub) zc.push_back(z_candidates[k]);
    const Matrix m = est.rows_of_m(us, zc, all_rows, ones);
    // Signed det so the bootstrap spread is not folded at zero.
    auto signed_det = [](const Matrix& a) {
      Eigen::MatrixXd e(a.rows(), a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) e(r, c) = a(r, c);
      }
      return e.fullPivLu().determinant();
    };
    const double det = signed_det(m);
    Vec boot;
    for (std::size_t b = 0; b < opt.bootstrap; ++b) {
      Vec mult(all_rows.size(), 0.0);
      for (std::size_t q = 0; q < all_rows.size(); ++q) mult[rng.below(all_rows.size())] += 1.0;
      boot.push_back(signed_det(est.rows_of_m(us, zc, all_rows, mult)));
    }
    const double se = stats::stddev(boot);
    rep.matrices.push_back(m);
    rep.abs_det.push_back(std::abs(det));
    rep.threshold.push_back(3.0 * se);
    if (g == 0) rep.chosen = best_sub;
    all = all && std::abs(det) > 3.0 * se;
    min_det = std::min(min_det, std::abs(det));
  }
  rep.min_abs_det = min_det;
  rep.pass = all;
  return rep;
}

json MonotonicityReport::to_json() const {
  json v = json::array();
  for (const auto& m : violations) {
    v.push_back({{"x", m.x}, {"coordinate", m.coordinate}, {"u_lo", m.u_lo}, {"u_hi", m.u_hi},
                 {"v_lo", m.v_lo}, {"v_hi", m.v_hi}});
  }
  return {{"pass", pass}, {"checked", checked}, {"violations", v}};
}

MonotonicityReport monotonicity_check(const Mechanism& m, const Matrix& x_grid, const Vec& u_grid) {
  if (x_grid.cols() != m.cond_dim()) throw ShapeError("monotonicity: x grid width mismatch");
  Vec us = u_grid;
  std::sort(us.begin(), us.end());
  us.erase(std::unique(us.begin(), us.end()), us.end());
  MonotonicityReport rep;
  const std::size_t d = m.var_dim();
  for (std::size_t xr = 0; xr < x_grid.rows(); ++xr) {
    Matrix cond(us.size(), x_grid.cols());
    for (std::size_t r = 0; r < us.size(); ++r) {
      for (std::size_t c = 0; c < x_grid.cols(); ++c) cond(r, c) = x_grid(xr, c);
    }
    for (std::size_t j = 0; j < d; ++j) {
      Matrix u(us.size(), d);
      for (std::size_t r = 0; r < us.size(); ++r) u(r, j) = us[r];
      const Matrix v = m.forward(cond, u);
      for (std::size_t r = 0; r + 1 < us.size(); ++r) {
        ++rep.checked;
        if (!(v(r + 1, j) > v(r, j))) {
          rep.pass = false;
          if (rep.violations.size() < 50) {
            rep.violations.push_back({x_grid.row_vec(xr), j, us[r], us[r + 1], v(r, j), v(r + 1, j)});
          }
        }
      }
    }
  }
  return rep;
}

json EquivalenceReport::to_json() const {
  json j = {{"mode", mode}, {"value", value}, {"threshold", threshold}, {"pass", pass}};
  if (mode == "functional_r2") {
    j["reverse_value"] = reverse_value;
  } else {
    j["cross_condition_residual"] = cross_condition_residual;
    j["residual_threshold"] = residual_threshold;
    j["map"] = {{"u_b", map_knots_b}, {"u_a", map_knots_a}};
  }
  return j;
}

double knn_r2(const Matrix& source, const Matrix& target, std::size_t k) {
  if (source.rows() != target.rows()) throw ShapeError("knn_r2: length mismatch");
  const std::size_t n = source.rows(), half = n / 2, p = source.cols(), q = target.cols();
  if (half < k || n - half < 2) throw InsufficientSupport("knn_r2: too few rows");
  // standardize the source so every coordinate counts equally
  Vec mu(p), sd(p);
  for (std::size_t c = 0; c < p; ++c) {
    const Vec col = source.col(c);
    mu[c] = stats::mean(col);
    sd[c] = stats::stddev(col);
    if (!(sd[c] > 0.0)) sd[c] = 1.0;
  }
  Matrix s(n, p);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < p; ++c) s(r, c) = (source(r, c) - mu[c]) / sd[c];
  }
  Vec tmean(q, 0.0);
  for (std::size_t r = half; r < n; ++r) {
    for (std::size_t c = 0; c < q; ++c) tmean[c] += target(r, c) / static_cast<double>(n - half);
  }
  double sse = 0.0, sst = 0.0;
  std::vector<std::pair<double, std::size_t>> dist(half);
  for (std::size_t r = half; r < n; ++r) {
    for (std::size_t m = 0; m < half; ++m) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < p; ++c) d2 += (s(r, c) - s(m, c)) * (s(r, c) - s(m, c));
      dist[m] = {d2, m};
    }
    std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k - 1), dist.end());
    for (std::size_t c = 0; c < q; ++c) {
      double pred = 0.0;
      for (std::size_t t = 0; t < k; ++t) pred += target(dist[t].second, c);
      pred /= static_cast<double>(k);
      sse += (target(r, c) - pred) * (target(r, c) - pred);
      sst += (target(r, c) - tmean[c]) * (target(r, c) - tmean[c]);
    }
  }
  return sst > 0.0 ? 1.0 - sse / sst : 0.0;
}

namespace {

// Piecewise-linear monotone map from ub to ua: knots are (mean ub, mean ua)
// over equal-count bins of ub.
void fit_map(const Vec& ub, const Vec& ua, Vec& kb, Vec& ka) {
  std::vector<std::size_t> order(ub.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return ub[a] < ub[b]; });
  const std::size_t bins = std::clamp<std::size_t>(ub.size() / 25, 1, 20);
  kb.assign(bins, 0.0);
  ka.assign(bins, 0.0);
  Vec cnt(bins, 0.0);
  for (std::size_t t = 0; t < order.size(); ++t) {
    const std::size_t b = t * bins / order.size();
    kb[b] += ub[order[t]];
    ka[b] += ua[order[t]];
    cnt[b] += 1.0;
  }
  for (std::size_t b = 0; b < bins; ++b) {
    kb[b] /= cnt[b];
    ka[b] /= cnt[b];
  }
}

double eval_map(const Vec& kb, const Vec& ka, double t) {
  if (t <= kb.front()) return ka.front();
  if (t >= kb.back()) return ka.back();
  const auto it = std::upper_bound(kb.begin(), kb.end(), t);
  const std::size_t j = static_cast<std::size_t>(it - kb.begin());
  const double gap = kb[j] - kb[j - 1];
  const double f = gap > 0.0 ? (t - kb[j - 1]) / gap : 0.0;
  return ka[j - 1] + f * (ka[j] - ka[j - 1]);
}

}  // namespace

EquivalenceReport equivalence_from_latents(const Matrix& ua, const Matrix& ub, const Matrix& x, double threshold) {
  if (!ua.same_shape(ub) || ua.rows() != x.rows()) throw ShapeError("equivalence: dimension mismatch");
  if (ua.rows() < 4) throw InsufficientSupport("equivalence: too few rows");
  EquivalenceReport rep;
  if (ua.cols() > 1) {
    rep.mode = "functional_r2";
    rep.threshold = threshold >= 0.0 ? threshold : 0.95;
    rep.value = knn_r2(ub, ua);
    rep.reverse_value = knn_r2(ua, ub);
    rep.pass = rep.value >= rep.threshold && rep.reverse_value >= rep.threshold;
    return rep;
  }
  rep.mode = "rank_corr";
  rep.threshold = threshold >= 0.0 ? threshold : 0.99;
  const Vec a = ua.col(0), b = ub.col(0);
  rep.value = std::abs(stats::spearman(a, b));

  // Reference condition: the most frequent x value, else the lowest third.
  const Vec x0 = x.col(0);
  std::map<double, std::size_t> counts;
  for (double t : x0) ++counts[t];
  std::vector<bool> ref(x0.size());
  if (counts.size() <= 16) {
    double mode = counts.begin()->first;
    for (auto [v, c] : counts) {
      if (c > counts[mode]) mode = v;
    }
    for (std::size_t r = 0; r < x0.size(); ++r) ref[r] = x0[r] == mode;
  } else {
    Vec s = x0;
    std::sort(s.begin(), s.end());
    const double cut = stats::quantile_sorted(s, 1.0 / 3.0);
    for (std::size_t r = 0; r < x0.size(); ++r) ref[r] = x0[r] <= cut;
  }
  Vec ra, rb;
  for (std::size_t r = 0; r < x0.size(); ++r) {
    if (ref[r]) {
      ra.push_back(a[r]);
      rb.push_back(b[r]);
    }
  }
  fit_map(rb, ra, rep.map_knots_b, rep.map_knots_a);
  double err = 0.0;
  std::size_t others = 0;
  for (std::size_t r = 0; r < x0.size(); ++r) {
    if (ref[r]) continue;
    err += std::abs(a[r] - eval_map(rep.map_knots_b, rep.map_knots_a, b[r]));
    ++others;
  }
  const double sd = stats::stddev(a);
  rep.cross_condition_residual = others > 0 && sd > 0.0 ? err / static_cast<double>(others) / sd : 0.0;
  rep.pass = rep.value >= rep.threshold && rep.cross_condition_residual <= rep.residual_threshold;
  return rep;
}

EquivalenceReport equivalence_check(const Mechanism& a, const Mechanism& b, const Matrix& x, const Matrix& v,
                                    double threshold) {
  if (a.var_dim() != b.var_dim() || a.cond_dim() != b.cond_dim()) {
    throw ShapeError("equivalence: mechanisms have different dimensions");
  }
  return equivalence_from_latents(a.inverse(x, v), b.inverse(x, v), x, threshold);
}

}  // namespace bgm
