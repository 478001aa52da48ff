#include "bgm/flow.hpp"

#include <cmath>
#include <string>

#include "bgm/errors.hpp"
#include "bgm/spline.hpp"

namespace bgm {

using nlohmann::json;

void FlowConfig::validate() const {
  if (spline_layers < 0) throw ValidationError("flow: spline_layers must be >= 0");
  if (bins < 1) throw ValidationError("flow: bins must be >= 1");
  if (!(bound > 0.0) || !std::isfinite(bound)) throw ValidationError("flow: bound must be positive");
  for (std::size_t h : hidden) {
    if (h == 0) throw ValidationError("flow: hidden widths must be positive");
  }
}

json FlowConfig::to_json() const {
  return {{"spline_layers", spline_layers}, {"bins", bins}, {"bound", bound}, {"hidden", hidden}};
}

FlowConfig FlowConfig::from_json(const json& j) {
  FlowConfig c;
  c.spline_layers = j.value("spline_layers", c.spline_layers);
  c.bins = j.value("bins", c.bins);
  c.bound = j.value("bound", c.bound);
  c.hidden = j.value("hidden", c.hidden);
  c.validate();
  return c;
}

namespace {

AffineLayer identity_affine(std::size_t d, const std::string& prefix) {
  return {{prefix + ".log_scale", Matrix(1, d)}, {prefix + ".shift", Matrix(1, d)},
          std::vector<double>(d, 1.0)};
}

json affine_to_json(const AffineLayer& a) {
  return {{"log_scale", a.log_scale.value.storage()},
          {"shift", a.shift.value.storage()},
          {"sign", a.sign}};
}

AffineLayer affine_from_json(const json& j, std::size_t d, const std::string& prefix) {
  AffineLayer a = identity_affine(d, prefix);
  const auto ls = j.at("log_scale").get<std::vector<double>>();
  const auto sh = j.at("shift").get<std::vector<double>>();
  const auto sign = j.at("sign").get<std::vector<double>>();
  if (ls.size() != d || sh.size() != d || sign.size() != d) {
    throw SchemaError("flow: affine layer width does not match var_dim");
  }
  for (double s : sign) {
    if (s != 1.0 && s != -1.0) throw SchemaError("flow: affine sign must be +1 or -1");
  }
  a.log_scale.value = Matrix(1, d, ls);
  a.shift.value = Matrix(1, d, sh);
  a.sign = sign;
  return a;
}

FlowResult affine_step(GradTape& tape, const AffineLayer& a, Var z, bool inverse) {
  Var r = affine_cols(z, tape.parameter(a.log_scale), tape.parameter(a.shift), a.sign, inverse);
  const std::size_t d = a.sign.size();
  return {slice_cols(r, 0, d), slice_cols(r, d, 1)};
}

// Coupling partition of layer `l`: even layers pass the first floor(d/2)
// coordinates through, odd layers the remaining ones.
void partition(std::size_t d, int l, std::vector<std::size_t>& transform,
               std::vector<std::size_t>& passthrough) {
  transform.clear();
  passthrough.clear();
  if (d == 1) {
    transform.push_back(0);
    return;
  }
  const std::size_t h = d / 2;
  for (std::size_t c = 0; c < d; ++c) {
    const bool first = c < h;
    ((l % 2 == 0) == first ? passthrough : transform).push_back(c);
  }
}

}  // namespace

ConditionalBijection::ConditionalBijection(std::size_t cond_dim, std::size_t var_dim,
                                           const FlowConfig& cfg, Rng& rng)
    : cond_dim_(cond_dim), var_dim_(var_dim), cfg_(cfg) {
  cfg_.validate();
  if (var_dim == 0) throw ValidationError("flow: var_dim must be >= 1");
  affine_in_ = identity_affine(var_dim, "affine_in");
  affine_out_ = identity_affine(var_dim, "affine_out");
  for (int l = 0; l < cfg_.spline_layers; ++l) {
    SplineLayer layer;
    partition(var_dim, l, layer.transform, layer.passthrough);
    layer.conditioner =
        ConditionerNet(cond_dim + layer.passthrough.size(), cfg_.hidden,
                       layer.transform.size() * raw_param_count(cfg_.bins), rng);
    splines_.push_back(std::move(layer));
  }
}

Var ConditionalBijection::spline_step(GradTape& tape, const SplineLayer& layer, Var cond, Var z,
                                      bool inverse, Var* logdet) const {
  Var input = cond;
  if (!layer.passthrough.empty()) {
    const Var parts[] = {cond, gather_cols(z, layer.passthrough)};
    input = concat_cols(parts);
  }
  Var raw = layer.conditioner.apply(tape, input);
  Var s = spline_cols(raw, gather_cols(z, layer.transform), cfg_.bound, cfg_.bins, inverse);
  const std::size_t t = layer.transform.size();
  *logdet = add(*logdet, slice_cols(s, t, 1));
  return scatter_cols(z, slice_cols(s, 0, t), layer.transform);
}

FlowResult ConditionalBijection::forward(GradTape& tape, Var cond, Var u) const {
  if (cond.cols() != cond_dim_ || u.cols() != var_dim_ || cond.rows() != u.rows()) {
    throw ShapeError("flow_forward: dimension mismatch");
  }
  FlowResult r = affine_step(tape, affine_in_, u, false);
  for (const SplineLayer& layer : splines_) r.out = spline_step(tape, layer, cond, r.out, false, &r.logdet);
  FlowResult o = affine_step(tape, affine_out_, r.out, false);
  return {o.out, add(r.logdet, o.logdet)};
}

FlowResult ConditionalBijection::inverse(GradTape& tape, Var cond, Var v) const {
  if (cond.cols() != cond_dim_ || v.cols() != var_dim_ || cond.rows() != v.rows()) {
    throw ShapeError("flow_inverse: dimension mismatch");
  }
  FlowResult r = affine_step(tape, affine_out_, v, true);
  for (auto it = splines_.rbegin(); it != splines_.rend(); ++it) {
    r.out = spline_step(tape, *it, cond, r.out, true, &r.logdet);
  }
  FlowResult o = affine_step(tape, affine_in_, r.out, true);
  return {o.out, add(r.logdet, o.logdet)};
}

Var ConditionalBijection::log_density(GradTape& tape, Var cond, Var v) const {
  FlowResult r = inverse(tape, cond, v);
  return add(std_normal_logpdf(r.out), r.logdet);
}

void ConditionalBijection::check_dims(const Matrix& cond, const Matrix& x) const {
  if (cond.cols() != cond_dim_ || x.cols() != var_dim_ || cond.rows() != x.rows()) {
    throw ShapeError("flow: expected condition n x " + std::to_string(cond_dim_) +
                     " and variable n x " + std::to_string(var_dim_));
  }
  for (double t : x.storage()) {
    if (!std::isfinite(t)) throw NumericInputError("flow: non-finite input");
  }
  for (double t : cond.storage()) {
    if (!std::isfinite(t)) throw NumericInputError("flow: non-finite condition");
  }
}

Matrix ConditionalBijection::forward_with_logdet(const Matrix& cond, const Matrix& u) const {
  check_dims(cond, u);
  GradTape tape(false);
  FlowResult r = forward(tape, tape.constant_ref(cond), tape.constant_ref(u));
  return hcat(r.out.value(), r.logdet.value());
}

Matrix ConditionalBijection::inverse_with_logdet(const Matrix& cond, const Matrix& v) const {
  check_dims(cond, v);
  GradTape tape(false);
  FlowResult r = inverse(tape, tape.constant_ref(cond), tape.constant_ref(v));
  return hcat(r.out.value(), r.logdet.value());
}

Matrix ConditionalBijection::forward(const Matrix& cond, const Matrix& u) const {
  check_dims(cond, u);
  GradTape tape(false);
  return forward(tape, tape.constant_ref(cond), tape.constant_ref(u)).out.value();
}

Matrix ConditionalBijection::inverse(const Matrix& cond, const Matrix& v) const {
  check_dims(cond, v);
  GradTape tape(false);
  return inverse(tape, tape.constant_ref(cond), tape.constant_ref(v)).out.value();
}

Vec ConditionalBijection::log_density(const Matrix& cond, const Matrix& v) const {
  check_dims(cond, v);
  GradTape tape(false);
  return log_density(tape, tape.constant_ref(cond), tape.constant_ref(v)).value().storage();
}

void ConditionalBijection::calibrate(const Matrix& cond, const Matrix& v) {
  check_dims(cond, v);
  if (v.rows() < 2) throw ValidationError("flow: calibration needs at least two rows");
  auto moments = [](const Matrix& m, std::size_t c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r) mean += m(r, c);
    mean /= static_cast<double>(m.rows());
    double var = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r) var += (m(r, c) - mean) * (m(r, c) - mean);
    const double sd = std::sqrt(var / static_cast<double>(m.rows() - 1));
    return std::pair{mean, sd > 1e-12 ? sd : 1.0};
  };
  std::vector<double> shift, scale;
  for (std::size_t c = 0; c < cond_dim_; ++c) {
    auto [m, s] = moments(cond, c);
    shift.push_back(m);
    scale.push_back(s);
  }
  for (SplineLayer& layer : splines_) {
    std::vector<double> sh = shift, sc = scale;
    sh.resize(cond_dim_ + layer.passthrough.size(), 0.0);
    sc.resize(cond_dim_ + layer.passthrough.size(), 1.0);
    layer.conditioner.set_input_standardization(std::move(sh), std::move(sc));
  }
  for (std::size_t c = 0; c < var_dim_; ++c) {
    auto [m, s] = moments(v, c);
    affine_out_.shift.value(0, c) = m;
    affine_out_.log_scale.value(0, c) = std::log(s);
  }
}

std::vector<Param*> ConditionalBijection::parameters() {
  std::vector<Param*> out{&affine_in_.log_scale, &affine_in_.shift};
  for (SplineLayer& layer : splines_) layer.conditioner.collect(out);
  out.push_back(&affine_out_.log_scale);
  out.push_back(&affine_out_.shift);
  return out;
}

std::vector<const Param*> ConditionalBijection::parameters() const {
  std::vector<const Param*> out{&affine_in_.log_scale, &affine_in_.shift};
  for (const SplineLayer& layer : splines_) layer.conditioner.collect(out);
  out.push_back(&affine_out_.log_scale);
  out.push_back(&affine_out_.shift);
  return out;
}

json ConditionalBijection::to_json() const {
  json splines = json::array();
  for (const SplineLayer& layer : splines_) {
    splines.push_back({{"transform", layer.transform},
                       {"passthrough", layer.passthrough},
                       {"conditioner", layer.conditioner.to_json()}});
  }
  return {{"format", "bgm-flow"},
          {"version", 1},
          {"cond_dim", cond_dim_},
          {"var_dim", var_dim_},
          {"config", cfg_.to_json()},
          {"affine_in", affine_to_json(affine_in_)},
          {"splines", splines},
          {"affine_out", affine_to_json(affine_out_)}};
}

ConditionalBijection ConditionalBijection::from_json(const json& j) {
  try {
    if (j.at("format") != "bgm-flow") throw SchemaError("flow: not a bgm-flow document");
    if (j.at("version") != 1) throw SchemaError("flow: unsupported version");
    ConditionalBijection b;
    b.cond_dim_ = j.at("cond_dim").get<std::size_t>();
    b.var_dim_ = j.at("var_dim").get<std::size_t>();
    if (b.var_dim_ == 0) throw SchemaError("flow: var_dim must be >= 1");
    b.cfg_ = FlowConfig::from_json(j.at("config"));
    b.affine_in_ = affine_from_json(j.at("affine_in"), b.var_dim_, "affine_in");
    b.affine_out_ = affine_from_json(j.at("affine_out"), b.var_dim_, "affine_out");
    for (const auto& s : j.at("splines")) {
      SplineLayer layer;
      layer.transform = s.at("transform").get<std::vector<std::size_t>>();
      layer.passthrough = s.at("passthrough").get<std::vector<std::size_t>>();
      if (layer.transform.empty() || layer.transform.size() + layer.passthrough.size() != b.var_dim_) {
        throw SchemaError("flow: spline partition does not cover var_dim");
      }
      std::vector<bool> seen(b.var_dim_, false);
      for (auto idx : {&layer.transform, &layer.passthrough}) {
        for (std::size_t c : *idx) {
          if (c >= b.var_dim_ || seen[c]) throw SchemaError("flow: invalid spline partition");
          seen[c] = true;
        }
      }
      layer.conditioner = ConditionerNet::from_json(s.at("conditioner"));
      if (layer.conditioner.in_dim() != b.cond_dim_ + layer.passthrough.size() ||
          layer.conditioner.out_dim() != layer.transform.size() * raw_param_count(b.cfg_.bins)) {
        throw SchemaError("flow: conditioner shape does not match its spline layer");
      }
      b.splines_.push_back(std::move(layer));
    }
    return b;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("flow: malformed document: ") + e.what());
  }
}

PointResult flow_forward(const ConditionalBijection& b, std::span<const double> x,
                         std::span<const double> u) {
  const Matrix r = b.forward_with_logdet(Matrix::row(x), Matrix::row(u));
  return {Vec(r.storage().begin(), r.storage().end() - 1), r.storage().back()};
}

PointResult flow_inverse(const ConditionalBijection& b, std::span<const double> x,
                         std::span<const double> v) {
  const Matrix r = b.inverse_with_logdet(Matrix::row(x), Matrix::row(v));
  return {Vec(r.storage().begin(), r.storage().end() - 1), r.storage().back()};
}

double log_density(const ConditionalBijection& b, std::span<const double> x,
                   std::span<const double> v) {
  return b.log_density(Matrix::row(x), Matrix::row(v)).front();
}

}  // namespace bgm
