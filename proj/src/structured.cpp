#include "bgm/structured.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "bgm/errors.hpp"
#include "bgm/rng.hpp"

namespace bgm {

using nlohmann::json;

std::string to_string(StructureKind k) {
  switch (k) {
    case StructureKind::Markovian: return "markovian";
    case StructureKind::IV: return "iv";
    case StructureKind::BC: return "bc";
    case StructureKind::IVBC: return "ivbc";
  }
  return "";
}

StructureKind parse_structure(const std::string& s) {
  for (auto k : {StructureKind::Markovian, StructureKind::IV, StructureKind::BC, StructureKind::IVBC}) {
    if (s == to_string(k)) return k;
  }
  throw ValidationError("unknown structure '" + s + "'; valid: markovian, iv, bc, ivbc");
}

void StructureSpec::validate() const {
  if (variant != 'a' && variant != 'b' && variant != 'c') {
    throw ValidationError("structure: BC variant must be a, b or c");
  }
  if (condition_on_z && kind != StructureKind::Markovian) {
    throw ValidationError("structure: condition_on_z applies to the Markovian structure only");
  }
}

StructureDims StructureDims::of(const Dataset& ds) {
  return {ds.x.cols(), ds.z.cols(), ds.v.cols(), ds.x_grid, ds.i_levels};
}

namespace {

bool uses_z(const StructureSpec& s) {
  return s.condition_on_z || s.kind == StructureKind::BC || s.kind == StructureKind::IVBC;
}

Matrix require(const Matrix& m, std::size_t width, const char* what) {
  if (m.cols() != width) {
    throw SchemaError(std::string("structured network: dataset column group '") + what +
                      "' has width " + std::to_string(m.cols()) + ", expected " + std::to_string(width));
  }
  return m;
}

double normal_cdf(double t) { return 0.5 * std::erfc(-t / std::numbers::sqrt2); }
double normal_pdf(double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * std::numbers::pi); }

}  // namespace

Var log_normal_interval(Var lo, Var hi, std::vector<bool> open_lo, std::vector<bool> open_hi) {
  const Matrix& a = lo.value();
  const Matrix& b = hi.value();
  const std::size_t n = a.rows();
  if (a.cols() != 1 || !a.same_shape(b) || open_lo.size() != n || open_hi.size() != n) {
    throw ShapeError("log_normal_interval: expects matching n x 1 bounds");
  }
  Matrix out(n, 1);
  std::vector<double> mass(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double x = open_lo[r] ? -INFINITY : a(r, 0);
    const double y = open_hi[r] ? INFINITY : b(r, 0);
    double p;
    if (x >= 0.0) {
      p = 0.5 * (std::erfc(x / std::numbers::sqrt2) - std::erfc(y / std::numbers::sqrt2));
    } else if (y <= 0.0) {
      p = normal_cdf(y) - normal_cdf(x);
    } else {
      p = 1.0 - normal_cdf(x) - 0.5 * std::erfc(y / std::numbers::sqrt2);
    }
    mass[r] = std::max(p, 1e-300);
    out(r, 0) = std::log(mass[r]);
  }
  const std::size_t il = lo.id, ih = hi.id;
  return lo.tape->push(
      std::move(out), {il, ih},
      [il, ih, mass, open_lo, open_hi](GradTape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        const Matrix& a = t.value(il);
        const Matrix& b = t.value(ih);
        for (std::size_t r = 0; r < mass.size(); ++r) {
          if (!open_lo[r] && t.needs_grad(il)) t.grad(il)(r, 0) -= g(r, 0) * normal_pdf(a(r, 0)) / mass[r];
          if (!open_hi[r] && t.needs_grad(ih)) t.grad(ih)(r, 0) += g(r, 0) * normal_pdf(b(r, 0)) / mass[r];
        }
      });
}

StructuredNetwork::StructuredNetwork(const StructureSpec& spec, const StructureDims& dims,
                                     const FlowConfig& bgm_cfg, const FlowConfig& aux_cfg,
                                     std::uint64_t seed)
    : spec_(spec), dims_(dims) {
  spec_.validate();
  if (dims_.x_dim == 0 || dims_.v_dim == 0) throw ValidationError("structure: x and v must be non-empty");
  if (uses_z(spec_) && dims_.z_dim == 0) {
    throw SchemaError("structure '" + to_string(spec_.kind) + "' needs a z column");
  }
  if (spec_.kind == StructureKind::IV) {
    if (dims_.i_levels.size() < 2) throw SchemaError("structure 'iv' needs at least two instrument levels");
    if (dims_.x_dim != 1) throw ValidationError("structure 'iv' supports scalar x only");
  }
  Rng rng(seed);
  const std::size_t d = dims_.v_dim;
  bgm_ = ConditionalBijection(dims_.x_dim + (spec_.condition_on_z ? dims_.z_dim : 0), d, bgm_cfg, rng);
  switch (spec_.kind) {
    case StructureKind::Markovian:
      break;
    case StructureKind::IV:
      aux_x_.emplace(dims_.i_levels.size() + d, 1, aux_cfg, rng);
      break;
    case StructureKind::BC:
      if (spec_.variant == 'c') {
        aux_z_.emplace(d, dims_.z_dim, aux_cfg, rng);
      } else {
        aux_u_.emplace(dims_.z_dim, d, aux_cfg, rng);
      }
      break;
    case StructureKind::IVBC:
      aux_u_.emplace(dims_.z_dim, d, aux_cfg, rng);
      break;
  }
  make_layout();
}

void StructuredNetwork::make_layout() {
  layout_ = {};
  std::size_t c = 0;
  layout_.x = c;
  c += dims_.x_dim;
  layout_.z = c;
  if (uses_z(spec_)) c += dims_.z_dim;
  layout_.i = c;
  layout_.xi = c;
  if (spec_.kind == StructureKind::IV) {
    c += dims_.i_levels.size();
    layout_.xi = c;
    c += 1;  // grid index (or raw x when continuous)
  }
  layout_.v = c;
  c += dims_.v_dim;
  layout_.width = c;
}

std::size_t StructuredNetwork::flow_count() const {
  return 1 + (aux_u_ ? 1 : 0) + (aux_x_ ? 1 : 0) + (aux_z_ ? 1 : 0);
}

std::size_t StructuredNetwork::grid_index(double x) const {
  const auto it = std::find(dims_.x_grid.begin(), dims_.x_grid.end(), x);
  if (it == dims_.x_grid.end()) {
    throw SchemaError("structured network: x value " + format_double(x) + " is not on the grid");
  }
  return static_cast<std::size_t>(it - dims_.x_grid.begin());
}

Matrix StructuredNetwork::one_hot(const Dataset& ds) const {
  require(ds.i, 1, "i");
  Matrix out(ds.rows(), dims_.i_levels.size());
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    const auto it = std::find(dims_.i_levels.begin(), dims_.i_levels.end(), ds.i(r, 0));
    if (it == dims_.i_levels.end()) {
      throw SchemaError("structured network: unknown instrument value " + format_double(ds.i(r, 0)));
    }
    out(r, static_cast<std::size_t>(it - dims_.i_levels.begin())) = 1.0;
  }
  return out;
}

Matrix StructuredNetwork::bgm_condition(const Dataset& ds) const {
  Matrix x = require(ds.x, dims_.x_dim, "x");
  if (!spec_.condition_on_z) return x;
  return hcat(x, require(ds.z, dims_.z_dim, "z"));
}

Matrix StructuredNetwork::training_matrix(const Dataset& ds) const {
  ds.validate();
  const std::size_t n = ds.rows();
  Matrix out(n, layout_.width);
  auto put = [&](const Matrix& m, std::size_t off) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < m.cols(); ++c) out(r, off + c) = m(r, c);
    }
  };
  put(require(ds.x, dims_.x_dim, "x"), layout_.x);
  if (uses_z(spec_)) put(require(ds.z, dims_.z_dim, "z"), layout_.z);
  if (spec_.kind == StructureKind::IV) {
    put(one_hot(ds), layout_.i);
    for (std::size_t r = 0; r < n; ++r) {
      out(r, layout_.xi) = dims_.x_grid.empty() ? ds.x(r, 0) : static_cast<double>(grid_index(ds.x(r, 0)));
    }
  }
  put(require(ds.v, dims_.v_dim, "v"), layout_.v);
  return out;
}

Var StructuredNetwork::row_terms(GradTape& tape, const Matrix& batch) const {
  if (batch.cols() != layout_.width) throw SchemaError("structured network: batch has the wrong layout");
  const std::size_t d = dims_.v_dim;
  Var all = tape.constant_ref(batch);
  Var x = slice_cols(all, layout_.x, dims_.x_dim);
  Var cond = x;
  if (spec_.condition_on_z) {
    const Var parts[] = {x, slice_cols(all, layout_.z, dims_.z_dim)};
    cond = concat_cols(parts);
  }
  const FlowResult r = bgm_.inverse(tape, cond, slice_cols(all, layout_.v, d));
  Var u_hat = r.out;
  Var terms = r.logdet;
  switch (spec_.kind) {
    case StructureKind::Markovian:
      return add(terms, std_normal_logpdf(u_hat));
    case StructureKind::IV: {
      terms = add(terms, std_normal_logpdf(u_hat));
      const Var parts[] = {slice_cols(all, layout_.i, dims_.i_levels.size()), u_hat};
      Var aux_cond = concat_cols(parts);
      Var xi = slice_cols(all, layout_.xi, 1);
      if (dims_.x_grid.empty()) return add(terms, aux_x_->log_density(tape, aux_cond, xi));
      // Probability of the grid cell [k - 1/2, k + 1/2] under the relaxed X
      // flow; the outermost cells are open so the cells partition the line.
      const std::size_t n = batch.rows();
      Matrix lo(n, 1), hi(n, 1);
      std::vector<bool> open_lo(n), open_hi(n);
      const double last = static_cast<double>(dims_.x_grid.size() - 1);
      for (std::size_t row = 0; row < n; ++row) {
        const double k = batch(row, layout_.xi);
        lo(row, 0) = k - 0.5;
        hi(row, 0) = k + 0.5;
        open_lo[row] = k == 0.0;
        open_hi[row] = k == last;
      }
      Var a = aux_x_->inverse(tape, aux_cond, tape.constant(std::move(lo))).out;
      Var b = aux_x_->inverse(tape, aux_cond, tape.constant(std::move(hi))).out;
      return add(terms, log_normal_interval(a, b, std::move(open_lo), std::move(open_hi)));
    }
    case StructureKind::BC:
    case StructureKind::IVBC: {
      Var z = slice_cols(all, layout_.z, dims_.z_dim);
      if (aux_z_) {
        return add(add(terms, std_normal_logpdf(u_hat)), aux_z_->log_density(tape, u_hat, z));
      }
      return add(terms, aux_u_->log_density(tape, z, u_hat));
    }
  }
  return terms;
}

Var StructuredNetwork::nll(GradTape& tape, const Matrix& batch) const {
  return scale(mean(row_terms(tape, batch)), -1.0);
}

Vec StructuredNetwork::row_nll(const Dataset& ds) const {
  GradTape tape(false);
  const Matrix batch = training_matrix(ds);
  Vec out = row_terms(tape, batch).value().storage();
  for (double& x : out) x = -x;
  return out;
}

double StructuredNetwork::joint_nll(const Dataset& ds) const {
  const Vec r = row_nll(ds);
  if (r.empty()) throw ValidationError("joint_nll: empty dataset");
  double s = 0.0;
  for (double x : r) s += x;
  return s / static_cast<double>(r.size());
}

std::vector<Param*> StructuredNetwork::parameters() {
  std::vector<Param*> out = bgm_.parameters();
  for (auto* aux : {&aux_u_, &aux_x_, &aux_z_}) {
    if (*aux) {
      auto p = (*aux)->parameters();
      out.insert(out.end(), p.begin(), p.end());
    }
  }
  return out;
}

void StructuredNetwork::calibrate(const Dataset& ds) {
  const Matrix cond = bgm_condition(ds);
  bgm_.calibrate(cond, ds.v);
  const Matrix u0 = bgm_.inverse(cond, ds.v);
  if (aux_u_) aux_u_->calibrate(require(ds.z, dims_.z_dim, "z"), u0);
  if (aux_z_) aux_z_->calibrate(u0, require(ds.z, dims_.z_dim, "z"));
  if (aux_x_) {
    const Matrix batch = training_matrix(ds);
    aux_x_->calibrate(hcat(one_hot(ds), u0), slice_cols(batch, layout_.xi, 1));
  }
}

Dataset StructuredNetwork::sample(const Dataset& roots, std::size_t n, std::uint64_t seed) const {
  const std::size_t d = dims_.v_dim;
  Dataset out;
  out.scm = "network:" + to_string(spec_.kind);
  out.structure = roots.structure;
  out.seed = seed;
  out.x_grid = dims_.x_grid;
  out.i_levels = dims_.i_levels;
  out.x = Matrix(n, dims_.x_dim);
  out.v = Matrix(n, d);
  if (n == 0) {
    out.u_hidden = Matrix(0, d);
    return out;
  }
  if (roots.rows() == 0) throw EmptyEvidence("sample: no root rows to draw from");
  const bool need_i = spec_.kind == StructureKind::IV;
  const bool need_x = spec_.kind != StructureKind::IV && !(spec_.kind == StructureKind::BC && spec_.variant == 'c');
  if (need_i) require(roots.i, 1, "i");
  if (uses_z(spec_)) require(roots.z, dims_.z_dim, "z");
  if (need_x) require(roots.x, dims_.x_dim, "x");

  std::vector<std::size_t> rows(n);
  for (std::size_t r = 0; r < n; ++r) rows[r] = r % roots.rows();
  const Dataset base = roots.select(rows);
  out.i = base.i;
  out.z = base.z;
  if (need_x) out.x = base.x;

  Rng rng(seed);
  auto normals = [&](std::size_t cols) {
    Matrix m(n, cols);
    for (double& t : m.storage()) t = rng.normal();
    return m;
  };
  Matrix u_hat;
  switch (spec_.kind) {
    case StructureKind::Markovian:
      u_hat = normals(d);
      break;
    case StructureKind::IV: {
      u_hat = normals(d);
      const Matrix t = aux_x_->forward(hcat(one_hot(base), u_hat), normals(1));
      for (std::size_t r = 0; r < n; ++r) {
        if (dims_.x_grid.empty()) {
          out.x(r, 0) = t(r, 0);
        } else {
          const double k = std::clamp(std::round(t(r, 0)), 0.0, static_cast<double>(dims_.x_grid.size() - 1));
          out.x(r, 0) = dims_.x_grid[static_cast<std::size_t>(k)];
        }
      }
      break;
    }
    case StructureKind::BC:
    case StructureKind::IVBC:
      if (aux_z_) {
        if (dims_.z_dim != 1) throw ValidationError("sample: BC variant c supports scalar z only");
        u_hat = normals(d);
        out.z = aux_z_->forward(u_hat, normals(dims_.z_dim));
        // X | Z is not modeled: take x from the root row whose z is nearest.
        std::vector<std::size_t> order(roots.rows());
        for (std::size_t r = 0; r < order.size(); ++r) order[r] = r;
        std::sort(order.begin(), order.end(), [&](auto a, auto b) { return roots.z(a, 0) < roots.z(b, 0); });
        for (std::size_t r = 0; r < n; ++r) {
          const double zq = out.z(r, 0);
          auto it = std::lower_bound(order.begin(), order.end(), zq,
                                     [&](std::size_t k, double q) { return roots.z(k, 0) < q; });
          std::size_t pick = it == order.end() ? order.back() : *it;
          if (it != order.begin() && it != order.end()) {
            const std::size_t prev = *(it - 1);
            if (std::abs(roots.z(prev, 0) - zq) < std::abs(roots.z(pick, 0) - zq)) pick = prev;
          }
          for (std::size_t c = 0; c < dims_.x_dim; ++c) out.x(r, c) = roots.x(pick, c);
        }
      } else {
        u_hat = aux_u_->forward(require(base.z, dims_.z_dim, "z"), normals(d));
      }
      break;
  }
  Matrix cond = out.x;
  if (spec_.condition_on_z) cond = hcat(out.x, out.z);
  out.v = bgm_.forward(cond, u_hat);
  out.u_hidden = u_hat;
  return out;
}

json StructuredNetwork::to_json() const {
  json j = {{"format", "bgm-structured"},
            {"version", 1},
            {"kind", to_string(spec_.kind)},
            {"variant", std::string(1, spec_.variant)},
            {"condition_on_z", spec_.condition_on_z},
            {"x_dim", dims_.x_dim},
            {"z_dim", dims_.z_dim},
            {"v_dim", dims_.v_dim},
            {"x_grid", dims_.x_grid},
            {"i_levels", dims_.i_levels},
            {"bgm", bgm_.to_json()}};
  if (aux_u_) j["aux_u"] = aux_u_->to_json();
  if (aux_x_) j["aux_x"] = aux_x_->to_json();
  if (aux_z_) j["aux_z"] = aux_z_->to_json();
  return j;
}

StructuredNetwork StructuredNetwork::from_json(const json& j) {
  try {
    if (j.at("format") != "bgm-structured") throw SchemaError("not a bgm-structured document");
    if (j.at("version") != 1) throw SchemaError("structured network: unsupported version");
    StructuredNetwork net;
    net.spec_.kind = parse_structure(j.at("kind").get<std::string>());
    const auto variant = j.at("variant").get<std::string>();
    if (variant.size() != 1) throw SchemaError("structured network: bad variant");
    net.spec_.variant = variant[0];
    net.spec_.condition_on_z = j.at("condition_on_z").get<bool>();
    net.spec_.validate();
    net.dims_.x_dim = j.at("x_dim").get<std::size_t>();
    net.dims_.z_dim = j.at("z_dim").get<std::size_t>();
    net.dims_.v_dim = j.at("v_dim").get<std::size_t>();
    net.dims_.x_grid = j.at("x_grid").get<std::vector<double>>();
    net.dims_.i_levels = j.at("i_levels").get<std::vector<double>>();
    net.bgm_ = ConditionalBijection::from_json(j.at("bgm"));
    if (j.contains("aux_u")) net.aux_u_ = ConditionalBijection::from_json(j["aux_u"]);
    if (j.contains("aux_x")) net.aux_x_ = ConditionalBijection::from_json(j["aux_x"]);
    if (j.contains("aux_z")) net.aux_z_ = ConditionalBijection::from_json(j["aux_z"]);
    const bool want_u = net.spec_.kind == StructureKind::IVBC ||
                        (net.spec_.kind == StructureKind::BC && net.spec_.variant != 'c');
    const bool want_z = net.spec_.kind == StructureKind::BC && net.spec_.variant == 'c';
    const bool want_x = net.spec_.kind == StructureKind::IV;
    if (want_u != net.aux_u_.has_value() || want_z != net.aux_z_.has_value() ||
        want_x != net.aux_x_.has_value()) {
      throw SchemaError("structured network: component flows do not match the structure");
    }
    if (net.bgm_.var_dim() != net.dims_.v_dim) throw SchemaError("structured network: bgm width mismatch");
    net.make_layout();
    return net;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("structured network: malformed document: ") + e.what());
  }
}

}  // namespace bgm
