#pragma once

// Closed-form synthetic structural causal models with hidden exogenous
// values, used as ground truth for counterfactual evaluation.

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bgm/dataset.hpp"
#include "bgm/mechanism.hpp"

namespace bgm {

class GroundTruthScm : public Mechanism {
 public:
  virtual std::string name() const = 0;
  virtual std::string structure() const = 0;
  std::size_t cond_dim() const override { return 1; }

  virtual Dataset sample(std::size_t n, std::uint64_t seed) const = 0;
  /// do(X = x_fixed): exogenous values from their prior, X constant.
  virtual Dataset sample_interventional(double x_fixed, std::size_t n, std::uint64_t seed) const = 0;
  virtual bool in_domain(double x) const = 0;
  /// Finite X support, empty when X is continuous.
  virtual std::vector<double> x_grid() const { return {}; }

  /// v' = f(x', f^{-1}(x, v)) row by row.
  Matrix true_counterfactual(const Matrix& x, const Matrix& v, const Matrix& x_prime) const;
};

/// Valid (name, structure) pairs, e.g. "abr_like/iv".
std::vector<std::string> scm_catalog();
/// Throws ValidationError listing the catalog for unknown combinations.
std::unique_ptr<GroundTruthScm> make_scm(const std::string& name, const std::string& structure);

// The ellipse SCM: Z ~ U(-.5,.5), X angle confounded with U through Z,
// V = (U0 (2 + sin X), U1 (2 + cos X)). Structure "observational" or
// "shuffled_x" (X permuted across rows before V is computed, so X is
// independent of U).
Dataset gen_ellipse(std::size_t n, std::uint64_t seed, bool shuffled_x = false);
std::array<double, 2> ellipse_true_counterfactual(double x, std::array<double, 2> v, double x_prime);

// Two SCMs with identical observational distributions but different
// counterfactuals. which = "fstar" (V = U - 1 at X = 0) or "fhat" (V = -U).
Dataset gen_counterexample(std::size_t n, std::uint64_t seed, const std::string& which);

// Adaptive-bitrate-like data: capacity U ~ LogNormal(0, 0.5^2), buffer
// Z = ln U + N(0, 0.3^2), bitrate X on a fixed grid, throughput
// V = U (1 - exp(-X / U)). structure in {markovian, iv, bc, ivbc}.
Dataset gen_abr_like(std::size_t n, std::uint64_t seed, const std::string& structure);
const std::vector<double>& abr_bitrates();
double abr_throughput(double u, double x);
/// Capacity that yields throughput v at bitrate x (requires 0 < v < x).
double abr_capacity(double x, double v);

}  // namespace bgm
