#pragma once

// Checks for the hypotheses and conclusions of the identification results:
// independence (plain and z-binned), variability matrices, monotonicity of
// fitted mechanisms, and recovery of the latent up to an invertible map.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "bgm/dataset.hpp"
#include "bgm/mechanism.hpp"

namespace bgm {

struct IndependenceOptions {
  std::size_t n_perm = 200;
  /// Rows beyond this are dropped by a seeded subsample (the statistic needs
  /// n^2 memory).
  std::size_t max_n = 3000;
  /// Per-bin cap for the conditional test.
  std::size_t max_n_per_bin = 1500;
  std::uint64_t seed = 0;
  double alpha = 0.05;      // p-value threshold
  double max_stat = 0.05;   // distance-correlation threshold
};

struct IndependenceReport {
  double statistic = 0.0;  // distance correlation (bin-size weighted mean when binned)
  double p_value = 1.0;
  std::size_t n = 0;
  std::string conditioning = "none";
  std::vector<double> bin_statistics, bin_p_values;
  bool pass = false;  // p >= alpha and statistic <= max_stat

  nlohmann::json to_json() const;
};

/// Sample distance correlation of the rows of a and b.
double distance_correlation(const Matrix& a, const Matrix& b);

/// Distance correlation with a permutation null. Needs >= 100 equal rows.
IndependenceReport independence_test(const Matrix& a, const Matrix& b, const IndependenceOptions& opt = {});

/// Equal-frequency bins of scalar z, a test per bin, Fisher-combined p-value.
/// Throws InsufficientSupport if a bin holds fewer than 100 rows. A constant
/// z gives one bin, i.e. the unconditional test.
IndependenceReport conditional_independence_test(const Matrix& a, const Matrix& b, const Vec& z,
                                                 std::size_t n_bins = 10, const IndependenceOptions& opt = {});

struct VariabilityReport {
  std::string kind;                // "iv" or "bc"
  Matrix u_grid;                   // evaluation points, one per row
  std::vector<double> abs_det;     // per grid point
  std::vector<Matrix> matrices;    // M at each grid point
  std::vector<double> threshold;   // per grid point
  std::vector<std::size_t> chosen; // selected instrument levels / z candidates
  double min_abs_det = 0.0;
  bool pass = false;

  nlohmann::json to_json() const;
};

/// M(u*)[k][j] = P(X = x_j | U = u*, I = i_k) by Gaussian-kernel weighting of
/// the hidden u (Silverman bandwidth). With more instrument levels than X
/// values the subset maximizing the smallest |det| over the grid is used.
/// Pass iff that smallest |det| >= c.
VariabilityReport variability_iv(const Dataset& ds, const Vec& u_grid, const Vec& i_values, const Vec& x_values,
                                 double c = 1e-4);

struct VariabilityBcOptions {
  std::size_t max_rows = 20000;
  std::size_t bootstrap = 30;
  std::uint64_t seed = 0;
};

/// Rows [P(u*|z_k), grad_u P(u*|z_k)] for d + 1 candidates z_k, estimated by
/// kernel density (Silverman bandwidths for the joint (u, z) estimate,
/// gradient step half a bandwidth). Per grid point the (d+1)-subset with the
/// largest |det| is kept; it passes if |det| exceeds 3 bootstrap standard
/// errors of that det.
VariabilityReport variability_bc(const Dataset& ds, const Matrix& u_grid, const Vec& z_candidates,
                                 const VariabilityBcOptions& opt = {});

struct MonotonicityViolation {
  Vec x;
  std::size_t coordinate = 0;
  double u_lo = 0.0, u_hi = 0.0, v_lo = 0.0, v_hi = 0.0;
};

struct MonotonicityReport {
  bool pass = true;
  std::size_t checked = 0;
  std::vector<MonotonicityViolation> violations;  // first 50 kept

  nlohmann::json to_json() const;
};

/// Scans v_j = f(x, u)_j along each latent coordinate u_j over the sorted
/// grid (other coordinates at 0) and reports every non-increasing step.
MonotonicityReport monotonicity_check(const Mechanism& m, const Matrix& x_grid, const Vec& u_grid);

struct EquivalenceReport {
  std::string mode;            // "rank_corr" or "functional_r2"
  double value = 0.0;          // |Spearman| or R^2 of a from b
  double reverse_value = 0.0;  // R^2 of b from a (functional_r2 only)
  double threshold = 0.0;
  /// Scalar case: fit the monotone map on the most frequent X value (or the
  /// lowest third of X), mean |error| on the other rows in sd units of û_a.
  double cross_condition_residual = 0.0;
  double residual_threshold = 0.2;
  Vec map_knots_b, map_knots_a;  // piecewise-linear ĝ (scalar case)
  bool pass = false;

  nlohmann::json to_json() const;
};

/// Latent agreement of two mechanisms on shared (x, v) rows.
EquivalenceReport equivalence_check(const Mechanism& a, const Mechanism& b, const Matrix& x, const Matrix& v,
                                    double threshold = -1.0);
/// Same, from precomputed latents; x is used only for the cross-condition fit.
EquivalenceReport equivalence_from_latents(const Matrix& ua, const Matrix& ub, const Matrix& x,
                                           double threshold = -1.0);

/// k-nearest-neighbour regression of target from source; R^2 on the second
/// half of the rows with the first half as the reference set.
double knn_r2(const Matrix& source, const Matrix& target, std::size_t k = 10);

}  // namespace bgm
