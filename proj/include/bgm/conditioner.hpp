#pragma once

#include <cstddef>
#include <vector>

#include <json.hpp>

#include "bgm/matrix.hpp"
#include "bgm/rng.hpp"
#include "bgm/tape.hpp"

namespace bgm {

/// Fully connected ReLU network mapping a condition to raw spline parameters.
/// Inputs are standardized with fixed per-column constants set at calibration.
class ConditionerNet {
 public:
  ConditionerNet() = default;
  /// He-initialized hidden layers; the output layer starts at zero so the
  /// downstream spline is the identity.
  ConditionerNet(std::size_t in_dim, std::vector<std::size_t> hidden, std::size_t out_dim,
                 Rng& rng);

  std::size_t in_dim() const { return input_shift_.size(); }
  std::size_t out_dim() const;
  std::size_t layer_count() const { return weights_.size(); }

  Param& weight(std::size_t layer) { return weights_[layer]; }
  Param& bias(std::size_t layer) { return biases_[layer]; }
  const Param& weight(std::size_t layer) const { return weights_[layer]; }
  const Param& bias(std::size_t layer) const { return biases_[layer]; }

  void set_input_standardization(std::vector<double> shift, std::vector<double> scale);
  const std::vector<double>& input_shift() const { return input_shift_; }
  const std::vector<double>& input_scale() const { return input_scale_; }

  Var apply(GradTape& tape, Var input) const;
  Matrix apply(const Matrix& input) const;

  void collect(std::vector<Param*>& out);
  void collect(std::vector<const Param*>& out) const;

  nlohmann::json to_json() const;
  static ConditionerNet from_json(const nlohmann::json& j);

 private:
  std::vector<Param> weights_;
  std::vector<Param> biases_;
  std::vector<double> input_shift_;
  std::vector<double> input_scale_;
  std::vector<double> input_inv_scale_;
};

/// Single-condition convenience wrapper.
std::vector<double> conditioner_eval(const ConditionerNet& net, std::span<const double> cond);

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

}  // namespace bgm
