#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "bgm/matrix.hpp"
#include "bgm/tape.hpp"

namespace bgm {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig cfg;
  std::int64_t step = 0;
  std::vector<Matrix> m;  // one per parameter, same order as the update list
  std::vector<Matrix> v;

  nlohmann::json to_json() const;
  static AdamState from_json(const nlohmann::json& j);
};

/// One bias-corrected Adam update. Moments are created on the first call;
/// afterwards their shapes must match `params` or ShapeError is thrown.
/// `lr_scale` multiplies the configured learning rate for this step.
void adam_step(std::span<Param* const> params, const Gradients& grads, AdamState& state,
               double lr_scale = 1.0);

}  // namespace bgm
