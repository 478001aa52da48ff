#include "bgm/spline.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "bgm/dual.hpp"
#include "bgm/errors.hpp"

namespace bgm {
namespace {

inline double value_of(double x) { return x; }
template <int N>
inline double value_of(const Dual<N>& x) {
  return x.v;
}

inline double softplus(double r) { return r > 0.0 ? r + std::log1p(std::exp(-r)) : std::log1p(std::exp(r)); }
inline double sigmoid(double r) {
  return r >= 0.0 ? 1.0 / (1.0 + std::exp(-r)) : std::exp(r) / (1.0 + std::exp(r));
}

void softmax(std::span<const double> logits, std::vector<double>& out) {
  out.resize(logits.size());
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    total += out[i];
  }
  for (double& o : out) o /= total;
}

template <typename T>
struct Segment {
  T value;
  T logdet;
};

// Linear rational interpolant on one bin. Weight of the left knot is 1, the
// right-knot weight sqrt(dk/dk1) and the middle weight are chosen so the
// derivative at both knots matches dk and dk1.
template <typename T>
struct BinShape {
  T w, wb, wc, yc;
};

template <typename T>
BinShape<T> bin_shape(const T& xk, const T& xk1, const T& yk, const T& yk1, const T& dk,
                      const T& dk1, double lambda) {
  using std::sqrt;
  BinShape<T> s;
  s.w = xk1 - xk;
  const T delta = (yk1 - yk) / s.w;
  s.wb = sqrt(dk / dk1);
  s.wc = (T(lambda) * dk + T(1.0 - lambda) * s.wb * dk1) / delta;
  s.yc = (T(1.0 - lambda) * yk + T(lambda) * s.wb * yk1) / (T(1.0 - lambda) + T(lambda) * s.wb);
  return s;
}

template <typename T>
Segment<T> segment_forward(const T& u, const T& xk, const T& xk1, const T& yk, const T& yk1,
                           const T& dk, const T& dk1, double lambda) {
  using std::log;
  using std::sqrt;
  const BinShape<T> s = bin_shape(xk, xk1, yk, yk1, dk, dk1, lambda);
  T phi = (u - xk) / s.w;
  const T lam(lambda);
  if (value_of(phi) <= lambda) {
    const T den = (lam - phi) + s.wc * phi;
    const T num = yk * (lam - phi) + s.wc * s.yc * phi;
    return {num / den, log(s.wc * lam * (s.yc - yk) / s.w) - T(2.0) * log(den)};
  }
  const T den = s.wc * (T(1.0) - phi) + s.wb * (phi - lam);
  const T num = s.wc * s.yc * (T(1.0) - phi) + s.wb * yk1 * (phi - lam);
  return {num / den, log(s.wb * s.wc * T(1.0 - lambda) * (yk1 - s.yc) / s.w) - T(2.0) * log(den)};
}

template <typename T>
Segment<T> segment_inverse(const T& y, const T& xk, const T& xk1, const T& yk, const T& yk1,
                           const T& dk, const T& dk1, double lambda) {
  using std::log;
  using std::sqrt;
  const BinShape<T> s = bin_shape(xk, xk1, yk, yk1, dk, dk1, lambda);
  const T lam(lambda);
  if (value_of(y) <= value_of(s.yc)) {
    const T den = s.wc * (s.yc - y) + (y - yk);
    const T phi = lam * (y - yk) / den;
    return {xk + phi * s.w, log(s.w * lam * s.wc * (s.yc - yk)) - T(2.0) * log(den)};
  }
  const T den = s.wc * (y - s.yc) + s.wb * (yk1 - y);
  const T phi = (s.wc * (y - s.yc) + lam * s.wb * (yk1 - y)) / den;
  return {xk + phi * s.w,
          log(s.w * s.wb * s.wc * T(1.0 - lambda) * (yk1 - s.yc)) - T(2.0) * log(den)};
}

std::size_t find_bin(const std::vector<double>& knots, double t) {
  const auto it = std::upper_bound(knots.begin(), knots.end(), t);
  std::size_t k = it == knots.begin() ? 0 : static_cast<std::size_t>(it - knots.begin()) - 1;
  return std::min(k, knots.size() - 2);
}

void check_finite(double t, const char* what) {
  if (!std::isfinite(t)) throw NumericInputError(std::string(what) + ": non-finite input");
}

void fill_knots(const std::vector<double>& soft, double bound, std::vector<double>& knots) {
  const std::size_t k = soft.size();
  const double span = 2.0 * bound;
  const double spread = 1.0 - static_cast<double>(k) * kMinBinFraction;
  knots.resize(k + 1);
  knots[0] = -bound;
  for (std::size_t j = 0; j + 1 < k; ++j) {
    knots[j + 1] = knots[j] + span * (kMinBinFraction + spread * soft[j]);
  }
  knots[k] = bound;
}

}  // namespace

void SplineParams::validate() const {
  const std::size_t n = static_cast<std::size_t>(bins) + 1;
  if (bins < 1 || knot_x.size() != n || knot_y.size() != n || derivs.size() != n) {
    throw ValidationError("spline: knot arrays must have bins + 1 entries");
  }
  if (!(bound > 0.0)) throw ValidationError("spline: bound must be positive");
  if (knot_x.front() != -bound || knot_y.front() != -bound || knot_x.back() != bound ||
      knot_y.back() != bound) {
    throw ValidationError("spline: end knots must sit at -bound and +bound");
  }
  for (std::size_t j = 0; j + 1 < n; ++j) {
    if (!(knot_x[j + 1] > knot_x[j]) || !(knot_y[j + 1] > knot_y[j])) {
      throw ValidationError("spline: knots must be strictly increasing (bin " +
                            std::to_string(j) + ")");
    }
  }
  for (double d : derivs) {
    if (!(d > 0.0) || !std::isfinite(d)) throw ValidationError("spline: derivatives must be positive");
  }
  if (!(lambda > 0.0 && lambda < 1.0)) throw ValidationError("spline: lambda must lie in (0, 1)");
}

SplineParams SplineParams::identity(double bound, int bins) {
  std::vector<double> raw(raw_param_count(bins), 0.0);
  return raw_to_spline(raw, bound, bins);
}

void raw_to_spline_into(std::span<const double> raw, double bound, int bins, SplineParams& out) {
  if (bins < 1) throw ShapeError("spline: bin count must be positive");
  if (raw.size() != raw_param_count(bins)) {
    throw ShapeError("spline: expected " + std::to_string(raw_param_count(bins)) +
                     " raw parameters, got " + std::to_string(raw.size()));
  }
  for (double r : raw) check_finite(r, "raw_to_spline");
  const auto k = static_cast<std::size_t>(bins);
  out.bound = bound;
  out.bins = bins;
  out.lambda = 0.5;
  thread_local std::vector<double> soft;
  softmax(raw.subspan(0, k), soft);
  fill_knots(soft, bound, out.knot_x);
  softmax(raw.subspan(k, k), soft);
  fill_knots(soft, bound, out.knot_y);
  out.derivs.assign(k + 1, 1.0);
  for (std::size_t j = 1; j < k; ++j) {
    out.derivs[j] =
        kMinDerivative + (1.0 - kMinDerivative) * softplus(raw[2 * k + j - 1]) / std::numbers::ln2;
  }
}

SplineParams raw_to_spline(std::span<const double> raw, double bound, int bins) {
  SplineParams p;
  raw_to_spline_into(raw, bound, bins, p);
  return p;
}

SplineValue spline_forward(const SplineParams& p, double u) {
  check_finite(u, "spline_forward");
  if (u <= -p.bound || u >= p.bound) {
    // The end knots are fixed points with unit slope.
    return {u, 0.0};
  }
  const std::size_t k = find_bin(p.knot_x, u);
  const auto s = segment_forward<double>(u, p.knot_x[k], p.knot_x[k + 1], p.knot_y[k],
                                         p.knot_y[k + 1], p.derivs[k], p.derivs[k + 1], p.lambda);
  return {std::clamp(s.value, p.knot_y[k], p.knot_y[k + 1]), s.logdet};
}

SplineValue spline_inverse(const SplineParams& p, double v) {
  check_finite(v, "spline_inverse");
  if (v <= -p.bound || v >= p.bound) return {v, 0.0};
  const std::size_t k = find_bin(p.knot_y, v);
  const auto s = segment_inverse<double>(v, p.knot_x[k], p.knot_x[k + 1], p.knot_y[k],
                                         p.knot_y[k + 1], p.derivs[k], p.derivs[k + 1], p.lambda);
  return {std::clamp(s.value, p.knot_x[k], p.knot_x[k + 1]), s.logdet};
}

double spline_backward(std::span<const double> raw, double bound, int bins, double input,
                       bool inverse, double g_out, double g_logdet, std::span<double> g_raw,
                       SplineScratch& scratch) {
  if (input <= -bound || input >= bound) return g_out;
  SplineParams& p = scratch.params;
  raw_to_spline_into(raw, bound, bins, p);
  const auto kb = static_cast<std::size_t>(bins);
  const std::size_t k = find_bin(inverse ? p.knot_y : p.knot_x, input);

  // Local tangent directions: input, x_k, x_k+1, y_k, y_k+1, d_k, d_k+1.
  using D = Dual<7>;
  const D in = D::variable(input, 0);
  const D xk = D::variable(p.knot_x[k], 1), xk1 = D::variable(p.knot_x[k + 1], 2);
  const D yk = D::variable(p.knot_y[k], 3), yk1 = D::variable(p.knot_y[k + 1], 4);
  const D dk = D::variable(p.derivs[k], 5), dk1 = D::variable(p.derivs[k + 1], 6);
  const Segment<D> s = inverse ? segment_inverse<D>(in, xk, xk1, yk, yk1, dk, dk1, p.lambda)
                               : segment_forward<D>(in, xk, xk1, yk, yk1, dk, dk1, p.lambda);
  std::array<double, 7> g{};
  for (int i = 0; i < 7; ++i) g[i] = g_out * s.value.d[i] + g_logdet * s.logdet.d[i];

  // Knot j (1 <= j < bins) is -bound plus the widths of bins 0..j-1; the end
  // knots are constants.
  auto scatter_knots = [&](std::span<const double> logits, double g_lo, double g_hi,
                           std::span<double> g_logits, std::vector<double>& soft) {
    softmax(logits, soft);
    scratch.g_soft.assign(kb, 0.0);
    const double scale = 2.0 * bound * (1.0 - static_cast<double>(kb) * kMinBinFraction);
    if (k >= 1) {
      for (std::size_t l = 0; l < k; ++l) scratch.g_soft[l] += g_lo * scale;
    }
    if (k + 1 < kb) {
      for (std::size_t l = 0; l <= k; ++l) scratch.g_soft[l] += g_hi * scale;
    }
    double dot = 0.0;
    for (std::size_t l = 0; l < kb; ++l) dot += soft[l] * scratch.g_soft[l];
    for (std::size_t l = 0; l < kb; ++l) g_logits[l] += soft[l] * (scratch.g_soft[l] - dot);
  };
  scatter_knots(raw.subspan(0, kb), g[1], g[2], g_raw.subspan(0, kb), scratch.soft_w);
  scatter_knots(raw.subspan(kb, kb), g[3], g[4], g_raw.subspan(kb, kb), scratch.soft_h);

  const double dscale = (1.0 - kMinDerivative) / std::numbers::ln2;
  if (k >= 1) {
    g_raw[2 * kb + k - 1] += g[5] * dscale * sigmoid(raw[2 * kb + k - 1]);
  }
  if (k + 1 < kb) {
    g_raw[2 * kb + k] += g[6] * dscale * sigmoid(raw[2 * kb + k]);
  }
  return g[0];
}

}  // namespace bgm
