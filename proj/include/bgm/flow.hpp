#pragma once

// Conditional monotone flow: affine-in, a stack of conditioned spline layers
// (coupling for d > 1), affine-out. Forward maps exogenous u to observed v.

#include <cstddef>
#include <vector>

#include <json.hpp>

#include "bgm/conditioner.hpp"
#include "bgm/matrix.hpp"
#include "bgm/mechanism.hpp"
#include "bgm/rng.hpp"
#include "bgm/tape.hpp"

namespace bgm {

struct FlowConfig {
  int spline_layers = 3;
  int bins = 16;
  double bound = 3.0;
  std::vector<std::size_t> hidden{64, 64};

  void validate() const;
  nlohmann::json to_json() const;
  static FlowConfig from_json(const nlohmann::json& j);
};

/// Per-coordinate v = sign * exp(log_scale) * u + shift. The sign is fixed at
/// construction; it is +1 for every flow this library trains.
struct AffineLayer {
  Param log_scale;  // 1 x d
  Param shift;      // 1 x d
  std::vector<double> sign;
};

/// Spline over the `transform` coordinates, conditioned on the flow condition
/// and the `passthrough` coordinates.
struct SplineLayer {
  std::vector<std::size_t> transform;
  std::vector<std::size_t> passthrough;
  ConditionerNet conditioner;
};

struct FlowResult {
  Var out;     // n x d
  Var logdet;  // n x 1, log|d out / d in|
};

class ConditionalBijection : public Mechanism {
 public:
  ConditionalBijection() = default;
  ConditionalBijection(std::size_t cond_dim, std::size_t var_dim, const FlowConfig& cfg, Rng& rng);

  std::size_t cond_dim() const override { return cond_dim_; }
  std::size_t var_dim() const override { return var_dim_; }
  const FlowConfig& config() const { return cfg_; }

  AffineLayer& affine_in() { return affine_in_; }
  AffineLayer& affine_out() { return affine_out_; }
  const AffineLayer& affine_in() const { return affine_in_; }
  const AffineLayer& affine_out() const { return affine_out_; }
  std::vector<SplineLayer>& spline_layers() { return splines_; }
  const std::vector<SplineLayer>& spline_layers() const { return splines_; }

  FlowResult forward(GradTape& tape, Var cond, Var u) const;
  FlowResult inverse(GradTape& tape, Var cond, Var v) const;
  /// Row-wise log p(v | cond) under a standard-normal base, n x 1.
  Var log_density(GradTape& tape, Var cond, Var v) const;

  Matrix forward(const Matrix& cond, const Matrix& u) const override;
  Matrix inverse(const Matrix& cond, const Matrix& v) const override;
  /// Outputs with the log-det appended as the last column.
  Matrix forward_with_logdet(const Matrix& cond, const Matrix& u) const;
  Matrix inverse_with_logdet(const Matrix& cond, const Matrix& v) const;
  Vec log_density(const Matrix& cond, const Matrix& v) const;

  /// Sets conditioner input standardization from `cond` and the output affine
  /// from the per-coordinate mean and spread of `v`.
  void calibrate(const Matrix& cond, const Matrix& v);

  std::vector<Param*> parameters();
  std::vector<const Param*> parameters() const;

  nlohmann::json to_json() const;
  static ConditionalBijection from_json(const nlohmann::json& j);

 private:
  Var spline_step(GradTape& tape, const SplineLayer& layer, Var cond, Var z, bool inverse,
                  Var* logdet) const;
  void check_dims(const Matrix& cond, const Matrix& x) const;

  std::size_t cond_dim_ = 0;
  std::size_t var_dim_ = 0;
  FlowConfig cfg_;
  AffineLayer affine_in_;
  std::vector<SplineLayer> splines_;
  AffineLayer affine_out_;
};

// Single-unit conveniences.
struct PointResult {
  Vec value;
  double logdet;
};
PointResult flow_forward(const ConditionalBijection& b, std::span<const double> x,
                         std::span<const double> u);
PointResult flow_inverse(const ConditionalBijection& b, std::span<const double> x,
                         std::span<const double> v);
double log_density(const ConditionalBijection& b, std::span<const double> x,
                   std::span<const double> v);

}  // namespace bgm
