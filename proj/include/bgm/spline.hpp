#pragma once

#include <span>
#include <vector>

namespace bgm {

/// Knots of a monotone linear-rational spline on [-bound, bound].
///
/// Every bin has one intermediate point at fraction `lambda` of its width.
/// Derivatives at the two boundary knots are fixed to 1 so the spline joins
/// the identity tails outside the interval with a continuous slope.
struct SplineParams {
  double bound = 3.0;
  int bins = 16;
  std::vector<double> knot_x;  // bins + 1
  std::vector<double> knot_y;  // bins + 1
  std::vector<double> derivs;  // bins + 1, derivs.front() == derivs.back() == 1
  double lambda = 0.5;

  /// Throws ValidationError if any invariant is broken.
  void validate() const;
  static SplineParams identity(double bound, int bins);
};

inline constexpr double kMinBinFraction = 1e-4;
inline constexpr double kMinDerivative = 1e-4;

/// Unconstrained parameter count per transformed coordinate:
/// bin widths, bin heights, interior-knot derivatives.
constexpr std::size_t raw_param_count(int bins) { return 3 * static_cast<std::size_t>(bins) - 1; }

SplineParams raw_to_spline(std::span<const double> raw, double bound, int bins);
/// Allocation-free variant for hot loops; `out` keeps its capacity.
void raw_to_spline_into(std::span<const double> raw, double bound, int bins, SplineParams& out);

struct SplineValue {
  double value;
  double logdet;  // log |d value / d input|
};

SplineValue spline_forward(const SplineParams& p, double u);
SplineValue spline_inverse(const SplineParams& p, double v);

/// Scratch space reused across spline_backward calls.
struct SplineScratch {
  SplineParams params;
  std::vector<double> soft_w, soft_h, g_soft;
};

/// Gradient of (g_out * value + g_logdet * logdet) of the forward (or inverse)
/// map, with respect to the input and the raw parameters. g_raw is
/// accumulated into, g_in is returned.
double spline_backward(std::span<const double> raw, double bound, int bins, double input,
                       bool inverse, double g_out, double g_logdet, std::span<double> g_raw,
                       SplineScratch& scratch);

}  // namespace bgm
