#include "bgm/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "bgm/diagnostics.hpp"
#include "bgm/errors.hpp"
#include "bgm/rng.hpp"
#include "bgm/scm.hpp"
#include "bgm/stats.hpp"

namespace bgm {

using nlohmann::json;

namespace {

json scm_to_json(const ScmSpec& s) {
  return {{"name", s.name}, {"structure", s.structure}, {"n", s.n}, {"heldout", s.heldout}, {"seed", s.seed}};
}

json model_to_json(const ModelSpec& m) {
  return {{"structure", to_string(m.structure.kind)},
          {"variant", std::string(1, m.structure.variant)},
          {"condition_on_z", m.structure.condition_on_z},
          {"seed", m.seed},
          {"bgm", m.bgm.to_json()},
          {"aux", m.aux.to_json()}};
}

json eval_to_json(const EvalSpec& e) {
  return {{"sweep_k", e.sweep_k}, {"max_rows", e.max_rows}, {"seed", e.seed}};
}

// Every key of `j` must exist in `ref` (objects are checked recursively).
void check_keys(const json& j, const json& ref, const std::string& where) {
  if (!j.is_object()) throw ValidationError("config: '" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!ref.contains(key)) throw ValidationError("config: unknown key '" + path + "'");
    if (ref.at(key).is_object()) check_keys(value, ref.at(key), path);
  }
}

bool is_ellipse(const Dataset& ds) { return ds.scm == "ellipse"; }

std::string model_label(const std::string& path) {
  const std::filesystem::path p(path);
  if (p.stem() == "model" && p.has_parent_path() && !p.parent_path().filename().empty()) {
    return p.parent_path().filename().string();
  }
  return p.stem().string();
}

void write_config(const ExperimentConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
  std::ofstream out(std::filesystem::path(cfg.out_dir) / "config.json");
  if (!out) throw ValidationError("cannot write config to " + cfg.out_dir);
  out << cfg.to_json().dump(2) << '\n';
}

std::string out_path(const ExperimentConfig& cfg, const std::string& name) {
  return (std::filesystem::path(cfg.out_dir) / name).string();
}

double quantile_of(Vec v, double p) {
  std::sort(v.begin(), v.end());
  return stats::quantile_sorted(v, p);
}

Matrix column_medians(const Matrix& m) {
  Matrix med(1, m.cols());
  for (std::size_t c = 0; c < m.cols(); ++c) med(0, c) = quantile_of(m.col(c), 0.5);
  return med;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (scm.n == 0) throw ValidationError("config: scm.n must be positive");
  model.structure.validate();
  model.bgm.validate();
  model.aux.validate();
  train.validate();
  if (eval.sweep_k == 0) throw ValidationError("config: eval.sweep_k must be positive");
  if (out_dir.empty()) throw ValidationError("config: out_dir must be set");
}

json ExperimentConfig::to_json() const {
  return {{"scm", scm_to_json(scm)},
          {"model", model_to_json(model)},
          {"train", train.to_json()},
          {"eval", eval_to_json(eval)},
          {"out_dir", out_dir}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  check_keys(j, c.to_json(), "");
  try {
    if (j.contains("scm")) {
      const json& s = j.at("scm");
      c.scm.name = s.value("name", c.scm.name);
      c.scm.structure = s.value("structure", c.scm.structure);
      c.scm.n = s.value("n", c.scm.n);
      c.scm.heldout = s.value("heldout", c.scm.heldout);
      c.scm.seed = s.value("seed", c.scm.seed);
    }
    if (j.contains("model")) {
      const json& m = j.at("model");
      c.model.structure.kind = parse_structure(m.value("structure", to_string(c.model.structure.kind)));
      const std::string variant = m.value("variant", std::string(1, c.model.structure.variant));
      if (variant.size() != 1) throw ValidationError("config: model.variant must be one of a, b, c");
      c.model.structure.variant = variant[0];
      c.model.structure.condition_on_z = m.value("condition_on_z", c.model.structure.condition_on_z);
      c.model.seed = m.value("seed", c.model.seed);
      if (m.contains("bgm")) c.model.bgm = FlowConfig::from_json(m.at("bgm"));
      if (m.contains("aux")) c.model.aux = FlowConfig::from_json(m.at("aux"));
    }
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("eval")) {
      const json& e = j.at("eval");
      c.eval.sweep_k = e.value("sweep_k", c.eval.sweep_k);
      c.eval.max_rows = e.value("max_rows", c.eval.max_rows);
      c.eval.seed = e.value("seed", c.eval.seed);
    }
    c.out_dir = j.value("out_dir", c.out_dir);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

void ExperimentConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ValidationError("override '" + assignment + "' is not key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json j = to_json();
  json* node = &j;
  std::stringstream parts(key);
  std::string part;
  std::vector<std::string> path;
  while (std::getline(parts, part, '.')) path.push_back(part);
  for (std::size_t p = 0; p < path.size(); ++p) {
    if (!node->is_object() || !node->contains(path[p])) {
      throw ValidationError("override: unknown key '" + key + "'");
    }
    node = &(*node)[path[p]];
  }
  *node = value;
  *this = from_json(j);
}

json MetricsReport::to_json() const {
  json j = {{"metric", metric}, {"wall_time_s", wall_time_s}, {"seed", seed}, {"per_scheme", per_scheme}};
  if (mape >= 0.0) j["mape"] = mape;
  if (normalized_mse >= 0.0) j["normalized_mse"] = normalized_mse;
  return j;
}

std::pair<Dataset, Dataset> generate_datasets(const ScmSpec& spec) {
  const auto scm = make_scm(spec.name, spec.structure);
  Dataset train = scm->sample(spec.n, spec.seed);
  Dataset held = scm->sample(spec.heldout, Rng::derive(spec.seed, 0x401d));
  return {std::move(train), std::move(held)};
}

Matrix mechanism_condition(const StructureSpec& spec, const Matrix& x, const Matrix& z) {
  if (!spec.condition_on_z) return x;
  if (z.cols() == 0) throw SchemaError("model conditions on z but the dataset has no z columns");
  return hcat(x, z);
}

StructuredNetwork build_model(const ModelSpec& spec, const Dataset& ds) {
  StructuredNetwork net(spec.structure, StructureDims::of(ds), spec.bgm, spec.aux, spec.seed);
  net.calibrate(ds);
  return net;
}

TrainResult fit(StructuredNetwork& net, const Dataset& ds, const TrainConfig& cfg,
                const std::optional<TrainCheckpoint>& resume, const std::string& checkpoint_path) {
  TrainHooks hooks;
  if (!checkpoint_path.empty()) {
    hooks.on_epoch = [&](const TrainCheckpoint& cp) {
      const std::string tmp = checkpoint_path + ".tmp";
      write_json(tmp, cp.to_json());
      std::filesystem::rename(tmp, checkpoint_path);
    };
  }
  return train(net, net.training_matrix(ds), cfg, resume, hooks);
}

Vec ellipse_sweep(std::size_t sweep_k) {
  Vec g(sweep_k);
  for (std::size_t k = 0; k < sweep_k; ++k) {
    g[k] = 2.0 * std::numbers::pi * (static_cast<double>(k) + 0.5) / static_cast<double>(sweep_k);
  }
  return g;
}

double ellipse_mape(const Mechanism& m, const StructureSpec& spec, const Dataset& heldout, std::size_t sweep_k,
                    EllipseMode mode, std::uint64_t seed, std::size_t max_rows) {
  if (!is_ellipse(heldout)) throw ValidationError("ellipse_mape: dataset is not ellipse data");
  if (!heldout.has_u()) throw OracleUnavailable("ellipse_mape: held-out data carries no hidden u");
  if (sweep_k == 0) throw ValidationError("ellipse_mape: sweep_k must be positive");
  const std::size_t rows = max_rows == 0 ? heldout.rows() : std::min(max_rows, heldout.rows());
  if (rows == 0) throw ValidationError("ellipse_mape: no held-out rows");
  const Vec sweep = ellipse_sweep(sweep_k);
  const std::size_t d = heldout.v.cols();
  const Matrix cond = mechanism_condition(spec, heldout.x, heldout.z);
  if (cond.cols() != m.cond_dim() || d != m.var_dim()) throw ShapeError("ellipse_mape: model does not fit the data");

  // One batch of rows x sweep points.
  const std::size_t total = rows * sweep_k;
  Matrix cond_prime(total, cond.cols()), u(total, d);
  Matrix u_hat;
  if (mode == EllipseMode::Abduction) {
    std::vector<std::size_t> first(rows);
    for (std::size_t r = 0; r < rows; ++r) first[r] = r;
    u_hat = m.inverse(select_rows(cond, first), select_rows(heldout.v, first));
  }
  Rng rng(seed);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < sweep_k; ++k) {
      const std::size_t t = r * sweep_k + k;
      for (std::size_t c = 0; c < cond.cols(); ++c) cond_prime(t, c) = cond(r, c);
      cond_prime(t, 0) = sweep[k];
      for (std::size_t j = 0; j < d; ++j) {
        u(t, j) = mode == EllipseMode::Abduction ? u_hat(r, j) : rng.normal();
      }
    }
  }
  const Matrix v_prime = m.forward(cond_prime, u);
  double sum = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < sweep_k; ++k) {
      const auto truth = ellipse_true_counterfactual(heldout.x(r, 0), {heldout.v(r, 0), heldout.v(r, 1)}, sweep[k]);
      for (std::size_t j = 0; j < 2; ++j) {
        sum += std::abs(v_prime(r * sweep_k + k, j) - truth[j]) / std::max(std::abs(truth[j]), 1e-6);
      }
    }
  }
  return 100.0 * sum / static_cast<double>(total * 2);
}

AbrScore abr_normalized_mse(const Mechanism& m, const StructureSpec& spec, const Dataset& heldout,
                            std::uint64_t seed, std::size_t max_rows) {
  if (heldout.scm != "abr_like") throw ValidationError("abr_normalized_mse: dataset is not ABR-like data");
  if (!heldout.has_u()) throw OracleUnavailable("abr_normalized_mse: held-out data carries no hidden u");
  const std::size_t rows = max_rows == 0 ? heldout.rows() : std::min(max_rows, heldout.rows());
  if (rows == 0) throw ValidationError("abr_normalized_mse: no held-out rows");
  const auto& grid = abr_bitrates();
  const auto scm = make_scm("abr_like", heldout.structure);

  std::vector<std::size_t> pick(rows);
  for (std::size_t r = 0; r < rows; ++r) pick[r] = r;
  const Dataset ds = heldout.select(pick);
  Matrix x_prime(rows, 1);
  Rng rng(seed);
  for (std::size_t r = 0; r < rows; ++r) {
    // Uniform over the grid minus the factual bitrate.
    Vec others;
    for (double g : grid) {
      if (g != ds.x(r, 0)) others.push_back(g);
    }
    const double pick_x = others[rng.below(others.size())];
    x_prime(r, 0) = pick_x;
  }
  const Matrix truth = scm->true_counterfactual(ds.x, ds.v, x_prime);
  const Matrix model = point_counterfactual(m, mechanism_condition(spec, ds.x, ds.z), ds.v,
                                            mechanism_condition(spec, x_prime, ds.z));
  AbrScore s;
  for (std::size_t r = 0; r < rows; ++r) {
    s.model_mse += (model(r, 0) - truth(r, 0)) * (model(r, 0) - truth(r, 0));
    s.baseline_mse += (ds.v(r, 0) - truth(r, 0)) * (ds.v(r, 0) - truth(r, 0));
  }
  s.model_mse /= static_cast<double>(rows);
  s.baseline_mse /= static_cast<double>(rows);
  if (!(s.baseline_mse > 0.0)) throw ValidationError("abr_normalized_mse: replay baseline has zero error");
  s.normalized = 100.0 * s.model_mse / s.baseline_mse;
  return s;
}

DiagnosticResult diagnose(const StructuredNetwork& net, const Dataset& ds, std::uint64_t seed) {
  const StructureSpec& spec = net.spec();
  const Matrix cond = mechanism_condition(spec, ds.x, ds.z);
  const Matrix u_hat = abduct(net.bgm(), cond, ds.v);
  IndependenceOptions opt;
  opt.seed = seed;

  DiagnosticResult out;
  json checks = json::array();
  json warnings = json::array();
  auto add = [&](const std::string& name, bool hard, bool pass, json report) {
    checks.push_back({{"name", name}, {"hard", hard}, {"pass", pass}, {"report", std::move(report)}});
    if (hard && !pass) out.pass = false;
  };
  auto scalar_z = [&]() -> const Matrix& {
    if (ds.z.cols() != 1) throw SchemaError("diagnose: conditional tests need a scalar z");
    return ds.z;
  };

  switch (spec.kind) {
    case StructureKind::Markovian: {
      const auto r = independence_test(u_hat, cond, opt);
      add(spec.condition_on_z ? "latent_independent_of_x_z" : "latent_independent_of_x", true, r.pass, r.to_json());
      if (ds.v.cols() > 1) {
        warnings.push_back(
            "Markovian structure with multi-dimensional V: independence and monotonicity do not identify "
            "the mechanism, so counterfactuals may be wrong even when every check passes");
      }
      break;
    }
    case StructureKind::IV: {
      const auto r = independence_test(u_hat, ds.i, opt);
      add("latent_independent_of_instrument", true, r.pass, r.to_json());
      break;
    }
    case StructureKind::BC: {
      const auto r = conditional_independence_test(u_hat, ds.x, scalar_z().col(0), 10, opt);
      add("latent_independent_of_x_given_z", true, r.pass, r.to_json());
      break;
    }
    case StructureKind::IVBC: {
      const auto r = conditional_independence_test(u_hat, ds.i, scalar_z().col(0), 10, opt);
      add("latent_independent_of_instrument_given_z", true, r.pass, r.to_json());
      break;
    }
  }

  // Monotonicity over the observed X range (z held at its median).
  Matrix x_grid;
  if (!ds.x_grid.empty()) {
    x_grid = Matrix::column(ds.x_grid);
  } else {
    Vec xs;
    const Vec col = ds.x.col(0);
    for (int q = 1; q <= 9; ++q) xs.push_back(quantile_of(col, q / 10.0));
    x_grid = Matrix::column(xs);
  }
  if (cond.cols() > 1) {
    Matrix rest = column_medians(slice_cols(cond, 1, cond.cols() - 1));
    Matrix full(x_grid.rows(), cond.cols());
    for (std::size_t r = 0; r < x_grid.rows(); ++r) {
      full(r, 0) = x_grid(r, 0);
      for (std::size_t c = 1; c < cond.cols(); ++c) full(r, c) = rest(0, c - 1);
    }
    x_grid = std::move(full);
  }
  Vec u_grid(161);
  for (std::size_t k = 0; k < u_grid.size(); ++k) u_grid[k] = -4.0 + 0.05 * static_cast<double>(k);
  const auto mono = monotonicity_check(net.bgm(), x_grid, u_grid);
  add("monotonicity", ds.v.cols() == 1, mono.pass, mono.to_json());

  if (ds.has_u()) {
    const auto eq = equivalence_from_latents(u_hat, ds.u_hidden, ds.x);
    add("equivalence_to_hidden_u", false, eq.pass, eq.to_json());
  }

  out.report = {{"structure", to_string(spec.kind)},
                {"variant", std::string(1, spec.variant)},
                {"rows", ds.rows()},
                {"checks", checks},
                {"warnings", warnings},
                {"pass", out.pass}};
  return out;
}

void cmd_generate(const ExperimentConfig& cfg) {
  write_config(cfg);
  const auto [train_ds, held] = generate_datasets(cfg.scm);
  write_dataset(train_ds, out_path(cfg, "data.csv"));
  write_dataset(held, out_path(cfg, "heldout.csv"));
}

TrainResult cmd_train(const ExperimentConfig& cfg, const std::string& data_csv, bool resume) {
  write_config(cfg);
  const Dataset ds = read_dataset(data_csv);
  StructuredNetwork net = build_model(cfg.model, ds);
  const std::string ckpt = out_path(cfg, "checkpoint.json");
  std::optional<TrainCheckpoint> from;
  if (resume && std::filesystem::exists(ckpt)) from = TrainCheckpoint::from_json(read_json(ckpt));
  TrainResult result;
  try {
    result = fit(net, ds, cfg.train, from, ckpt);
  } catch (const TrainingDiverged& e) {
    std::ofstream(ckpt) << e.checkpoint() << '\n';
    throw;
  }
  write_json(out_path(cfg, "model.json"), net.to_json());
  write_json(out_path(cfg, "bgm.json"), net.extract_bgm().to_json());
  write_loss_csv(out_path(cfg, "loss.csv"), result.history);
  write_json(out_path(cfg, "train_result.json"), {{"epochs", result.epochs},
                                                  {"converged", result.converged},
                                                  {"wall_time_s", result.wall_time_s},
                                                  {"final_nll", result.history.empty() ? 0.0 : result.history.back()}});
  return result;
}

CounterfactualAnswer cmd_counterfactual(const ExperimentConfig& cfg, const std::string& model_path,
                                        const std::string& query_path, const std::string& data_csv) {
  write_config(cfg);
  const StructuredNetwork net = load_model(model_path);
  const CounterfactualQuery q = CounterfactualQuery::from_json(read_json(query_path));
  std::optional<Dataset> ds;
  if (!data_csv.empty()) ds = read_dataset(data_csv);
  const CounterfactualAnswer a = answer_query(net.bgm(), q, ds ? &*ds : nullptr);
  write_answer_csv(a, out_path(cfg, "answer.csv"));
  json rows = json::array();
  for (std::size_t r = 0; r < a.v_prime.rows(); ++r) {
    rows.push_back({{"x_prime", a.x_prime.row_vec(r)}, {"v_prime", a.v_prime.row_vec(r)}});
  }
  write_json(out_path(cfg, "answer.json"), {{"query", q.to_json()}, {"u_hat", a.u_hat}, {"answers", rows}});
  return a;
}

MetricsReport cmd_eval_ellipse(const ExperimentConfig& cfg, const std::vector<std::string>& models,
                               const std::vector<std::string>& baselines, const std::string& heldout_csv) {
  if (models.empty() && baselines.empty()) throw ValidationError("eval-ellipse: no models given");
  write_config(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset held = read_dataset(heldout_csv);
  MetricsReport rep;
  rep.metric = "mape";
  rep.seed = cfg.eval.seed;
  auto run = [&](const std::string& path, EllipseMode mode) {
    const StructuredNetwork net = load_model(path);
    const double v = ellipse_mape(net.bgm(), net.spec(), held, cfg.eval.sweep_k, mode, cfg.eval.seed,
                                  cfg.eval.max_rows);
    rep.per_scheme[model_label(path)] = {{"mape", v},
                                         {"mode", mode == EllipseMode::Abduction ? "abduction" : "sampling"},
                                         {"structure", to_string(net.spec().kind)}};
    if (rep.mape < 0.0) rep.mape = v;
  };
  for (const auto& p : models) run(p, EllipseMode::Abduction);
  for (const auto& p : baselines) run(p, EllipseMode::Sampling);
  rep.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_json(out_path(cfg, "metrics.json"), rep.to_json());
  return rep;
}

MetricsReport cmd_eval_abr(const ExperimentConfig& cfg, const std::vector<std::pair<std::string, std::string>>& runs) {
  if (runs.empty()) throw ValidationError("eval-abr: no models given");
  write_config(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  MetricsReport rep;
  rep.metric = "normalized_mse";
  rep.seed = cfg.eval.seed;
  for (const auto& [model_path, data_csv] : runs) {
    const StructuredNetwork net = load_model(model_path);
    const Dataset held = read_dataset(data_csv);
    if (to_string(net.spec().kind) != held.structure) {
      throw ValidationError("eval-abr: " + model_path + " is a " + to_string(net.spec().kind) +
                            " model but " + data_csv + " holds " + held.structure + " data");
    }
    const AbrScore s = abr_normalized_mse(net.bgm(), net.spec(), held, cfg.eval.seed, cfg.eval.max_rows);
    rep.per_scheme[model_label(model_path)] = {{"structure", held.structure},
                                               {"model_mse", s.model_mse},
                                               {"baseline_mse", s.baseline_mse},
                                               {"normalized_mse", s.normalized}};
    rep.normalized_mse = std::max(rep.normalized_mse, s.normalized);
  }
  rep.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_json(out_path(cfg, "metrics.json"), rep.to_json());
  return rep;
}

DiagnosticResult cmd_diagnose(const ExperimentConfig& cfg, const std::string& model_path, const std::string& data_csv) {
  write_config(cfg);
  const StructuredNetwork net = load_model(model_path);
  const Dataset ds = read_dataset(data_csv);
  DiagnosticResult r = diagnose(net, ds, cfg.eval.seed);
  write_json(out_path(cfg, "diagnostics.json"), r.report);
  return r;
}

StructuredNetwork load_model(const std::string& path) { return StructuredNetwork::from_json(read_json(path)); }

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  out << j.dump() << '\n';
  if (!out) throw ValidationError("write failed for " + path);
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ValidationError(path + " is not valid JSON");
  return j;
}

}  // namespace bgm
