#pragma once

#include <span>
#include <vector>

namespace bgm::stats {

double mean(std::span<const double> a);
/// Sample variance (n - 1 denominator).
double variance(std::span<const double> a);
double stddev(std::span<const double> a);
double median(std::vector<double> a);
/// Linear-interpolated quantile of a sorted sample, p in [0, 1].
double quantile_sorted(std::span<const double> sorted, double p);

struct KsResult {
  double statistic;
  double p_value;
};
/// Two-sample Kolmogorov-Smirnov test, asymptotic p-value with the Stephens
/// small-sample correction.
KsResult ks_two_sample(std::vector<double> a, std::vector<double> b);
/// One-sample KS against Uniform(0, 1).
KsResult ks_uniform(std::vector<double> a);
/// Kolmogorov survival function Q(lambda) = P(K > lambda).
double kolmogorov_survival(double lambda);

/// Average ranks (ties share the mean rank), 1-based.
std::vector<double> ranks(std::span<const double> a);
double pearson(std::span<const double> a, std::span<const double> b);
double spearman(std::span<const double> a, std::span<const double> b);

/// Silverman's rule of thumb: 0.9 min(sd, IQR / 1.34) n^{-1/5}.
double silverman_bandwidth(std::span<const double> a);
/// Per-coordinate width of a product-kernel KDE in `dims` dimensions
/// (normal-reference rule, robust spread).
double silverman_bandwidth(std::span<const double> a, std::size_t dims);

/// Fisher's method: -2 sum ln p ~ chi^2 with 2k degrees of freedom.
double fisher_combine(std::span<const double> p_values);

}  // namespace bgm::stats
