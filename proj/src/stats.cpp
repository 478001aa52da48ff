#include "bgm/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/chi_squared.hpp>

#include "bgm/errors.hpp"

namespace bgm::stats {

double mean(std::span<const double> a) {
  if (a.empty()) throw ValidationError("mean of empty sample");
  return std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
}

double variance(std::span<const double> a) {
  if (a.size() < 2) throw ValidationError("variance needs at least two values");
  const double m = mean(a);
  double s = 0.0;
  for (double x : a) s += (x - m) * (x - m);
  return s / static_cast<double>(a.size() - 1);
}

double stddev(std::span<const double> a) { return std::sqrt(variance(a)); }

double median(std::vector<double> a) {
  if (a.empty()) throw ValidationError("median of empty sample");
  std::sort(a.begin(), a.end());
  return quantile_sorted(a, 0.5);
}

double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw ValidationError("quantile of empty sample");
  p = std::clamp(p, 0.0, 1.0);
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double f = pos - static_cast<double>(lo);
  return sorted[lo] + f * (sorted[hi] - sorted[lo]);
}

double kolmogorov_survival(double lambda) {
  if (lambda <= 0.0) return 1.0;
  if (lambda < 0.2) return 1.0;  // the alternating series is numerically 1 here
  double sum = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 ? 1.0 : -1.0) * term;
    if (term < 1e-17) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

KsResult ks_two_sample(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw ValidationError("ks: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double t = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= t) ++i;
    while (j < b.size() && b[j] <= t) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  const double ne = std::sqrt(na * nb / (na + nb));
  return {d, kolmogorov_survival((ne + 0.12 + 0.11 / ne) * d)};
}

KsResult ks_uniform(std::vector<double> a) {
  if (a.empty()) throw ValidationError("ks: empty sample");
  std::sort(a.begin(), a.end());
  const double n = static_cast<double>(a.size());
  double d = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double f = std::clamp(a[k], 0.0, 1.0);
    d = std::max({d, static_cast<double>(k + 1) / n - f, f - static_cast<double>(k) / n});
  }
  const double sn = std::sqrt(n);
  return {d, kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d)};
}

std::vector<double> ranks(std::span<const double> a) {
  std::vector<std::size_t> order(a.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto l, auto r) { return a[l] < a[r]; });
  std::vector<double> out(a.size());
  for (std::size_t k = 0; k < order.size();) {
    std::size_t e = k;
    while (e + 1 < order.size() && a[order[e + 1]] == a[order[k]]) ++e;
    const double r = 0.5 * static_cast<double>(k + e) + 1.0;
    for (std::size_t t = k; t <= e; ++t) out[order[t]] = r;
    k = e + 1;
  }
  return out;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ValidationError("pearson: need equal lengths >= 2");
  const double ma = mean(a), mb = mean(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    sab += (a[k] - ma) * (b[k] - mb);
    saa += (a[k] - ma) * (a[k] - ma);
    sbb += (b[k] - mb) * (b[k] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

double spearman(std::span<const double> a, std::span<const double> b) {
  const auto ra = ranks(a), rb = ranks(b);
  return pearson(ra, rb);
}

namespace {

double robust_spread(std::span<const double> a) {
  std::vector<double> s(a.begin(), a.end());
  std::sort(s.begin(), s.end());
  const double sd = stddev(a);
  const double iqr = quantile_sorted(s, 0.75) - quantile_sorted(s, 0.25);
  const double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
  return spread > 0.0 ? spread : 1.0;
}

}  // namespace

double silverman_bandwidth(std::span<const double> a) {
  return 0.9 * robust_spread(a) * std::pow(static_cast<double>(a.size()), -0.2);
}

double silverman_bandwidth(std::span<const double> a, std::size_t dims) {
  const double d = static_cast<double>(dims);
  return robust_spread(a) * std::pow(4.0 / ((d + 2.0) * static_cast<double>(a.size())), 1.0 / (d + 4.0));
}

double fisher_combine(std::span<const double> p_values) {
  if (p_values.empty()) throw ValidationError("fisher: no p-values");
  double stat = 0.0;
  for (double p : p_values) stat += -2.0 * std::log(std::max(p, 1e-300));
  boost::math::chi_squared dist(2.0 * static_cast<double>(p_values.size()));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

}  // namespace bgm::stats
