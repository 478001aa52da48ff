#include "bgm/adam.hpp"

#include <cmath>

#include "bgm/conditioner.hpp"
#include "bgm/errors.hpp"

namespace bgm {

void adam_step(std::span<Param* const> params, const Gradients& grads, AdamState& s,
               double lr_scale) {
  if (s.m.empty() && s.v.empty()) {
    for (const Param* p : params) {
      s.m.emplace_back(p->value.rows(), p->value.cols());
      s.v.emplace_back(p->value.rows(), p->value.cols());
    }
  }
  if (s.m.size() != params.size() || s.v.size() != params.size()) {
    throw ShapeError("adam: moment count does not match parameter count");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!s.m[k].same_shape(params[k]->value) || !s.v[k].same_shape(params[k]->value) ||
        !grads.of(*params[k]).same_shape(params[k]->value)) {
      throw ShapeError("adam: shape mismatch for parameter '" + params[k]->name + "'");
    }
  }
  ++s.step;
  const double t = static_cast<double>(s.step);
  const double c1 = 1.0 - std::pow(s.cfg.beta1, t);
  const double c2 = 1.0 - std::pow(s.cfg.beta2, t);
  const double lr = s.cfg.lr * lr_scale;
  for (std::size_t k = 0; k < params.size(); ++k) {
    double* w = params[k]->value.data();
    const double* g = grads.of(*params[k]).data();
    double* m = s.m[k].data();
    double* v = s.v[k].data();
    for (std::size_t i = 0; i < s.m[k].size(); ++i) {
      m[i] = s.cfg.beta1 * m[i] + (1.0 - s.cfg.beta1) * g[i];
      v[i] = s.cfg.beta2 * v[i] + (1.0 - s.cfg.beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + s.cfg.eps);
    }
  }
}

nlohmann::json AdamState::to_json() const {
  nlohmann::json jm = nlohmann::json::array(), jv = nlohmann::json::array();
  for (const Matrix& x : m) jm.push_back(matrix_to_json(x));
  for (const Matrix& x : v) jv.push_back(matrix_to_json(x));
  return {{"lr", cfg.lr}, {"beta1", cfg.beta1}, {"beta2", cfg.beta2}, {"eps", cfg.eps},
          {"step", step}, {"m", jm}, {"v", jv}};
}

AdamState AdamState::from_json(const nlohmann::json& j) {
  AdamState s;
  s.cfg.lr = j.at("lr").get<double>();
  s.cfg.beta1 = j.at("beta1").get<double>();
  s.cfg.beta2 = j.at("beta2").get<double>();
  s.cfg.eps = j.at("eps").get<double>();
  s.step = j.at("step").get<std::int64_t>();
  for (const auto& x : j.at("m")) s.m.push_back(matrix_from_json(x));
  for (const auto& x : j.at("v")) s.v.push_back(matrix_from_json(x));
  return s;
}

}  // namespace bgm
