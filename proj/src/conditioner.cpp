#include "bgm/conditioner.hpp"

#include <cmath>
#include <string>

#include "bgm/errors.hpp"

namespace bgm {

ConditionerNet::ConditionerNet(std::size_t in_dim, std::vector<std::size_t> hidden,
                               std::size_t out_dim, Rng& rng)
    : input_shift_(in_dim, 0.0), input_scale_(in_dim, 1.0), input_inv_scale_(in_dim, 1.0) {
  std::vector<std::size_t> dims{in_dim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out_dim);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const bool last = l + 2 == dims.size();
    Matrix w(dims[l], dims[l + 1]);
    if (!last && dims[l] > 0) {
      const double sd = std::sqrt(2.0 / static_cast<double>(dims[l]));
      for (double& x : w.storage()) x = sd * rng.normal();
    }
    weights_.push_back({"w" + std::to_string(l), std::move(w)});
    biases_.push_back({"b" + std::to_string(l), Matrix(1, dims[l + 1])});
  }
}

std::size_t ConditionerNet::out_dim() const {
  return weights_.empty() ? 0 : weights_.back().value.cols();
}

void ConditionerNet::set_input_standardization(std::vector<double> shift,
                                               std::vector<double> scale) {
  if (shift.size() != in_dim() || scale.size() != in_dim()) {
    throw ShapeError("conditioner: standardization width does not match input");
  }
  input_inv_scale_.resize(scale.size());
  for (std::size_t c = 0; c < scale.size(); ++c) {
    if (!(scale[c] > 0.0) || !std::isfinite(scale[c]) || !std::isfinite(shift[c])) {
      throw ValidationError("conditioner: input scale must be positive and finite");
    }
    input_inv_scale_[c] = 1.0 / scale[c];
  }
  input_shift_ = std::move(shift);
  input_scale_ = std::move(scale);
}

Var ConditionerNet::apply(GradTape& tape, Var input) const {
  if (input.cols() != in_dim()) {
    throw ShapeError("conditioner: expected " + std::to_string(in_dim()) + " inputs, got " +
                     std::to_string(input.cols()));
  }
  Var h = standardize(input, input_shift_, input_inv_scale_);
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    h = add_row(matmul(h, tape.parameter(weights_[l])), tape.parameter(biases_[l]));
    if (l + 1 < weights_.size()) h = relu(h);
  }
  return h;
}

Matrix ConditionerNet::apply(const Matrix& input) const {
  GradTape tape(false);
  return apply(tape, tape.constant_ref(input)).value();
}

void ConditionerNet::collect(std::vector<Param*>& out) {
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(&weights_[l]);
    out.push_back(&biases_[l]);
  }
}

void ConditionerNet::collect(std::vector<const Param*>& out) const {
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(&weights_[l]);
    out.push_back(&biases_[l]);
  }
}

nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.storage()}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
  return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                j.at("data").get<std::vector<double>>());
}

nlohmann::json ConditionerNet::to_json() const {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    layers.push_back({{"weight", matrix_to_json(weights_[l].value)},
                      {"bias", matrix_to_json(biases_[l].value)}});
  }
  return {{"input_shift", input_shift_}, {"input_scale", input_scale_}, {"layers", layers}};
}

ConditionerNet ConditionerNet::from_json(const nlohmann::json& j) {
  ConditionerNet net;
  const auto shift = j.at("input_shift").get<std::vector<double>>();
  const auto scale = j.at("input_scale").get<std::vector<double>>();
  net.input_shift_.assign(shift.size(), 0.0);
  net.input_scale_.assign(shift.size(), 1.0);
  net.set_input_standardization(shift, scale);
  std::size_t prev = shift.size();
  std::size_t l = 0;
  for (const auto& layer : j.at("layers")) {
    Matrix w = matrix_from_json(layer.at("weight"));
    Matrix b = matrix_from_json(layer.at("bias"));
    if (w.rows() != prev || b.rows() != 1 || b.cols() != w.cols()) {
      throw SchemaError("conditioner: layer " + std::to_string(l) + " has inconsistent shape");
    }
    prev = w.cols();
    net.weights_.push_back({"w" + std::to_string(l), std::move(w)});
    net.biases_.push_back({"b" + std::to_string(l), std::move(b)});
    ++l;
  }
  if (net.weights_.empty()) throw SchemaError("conditioner: no layers");
  return net;
}

std::vector<double> conditioner_eval(const ConditionerNet& net, std::span<const double> cond) {
  if (cond.size() != net.in_dim()) throw ShapeError("conditioner_eval: condition length mismatch");
  return net.apply(Matrix::row(cond)).storage();
}

}  // namespace bgm
