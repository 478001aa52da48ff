#pragma once

// End-to-end experiment plumbing: configs, dataset generation, training with
// checkpoints, counterfactual evaluation against synthetic ground truth, and
// the per-structure diagnostic battery. The CLI is a thin shell over this.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bgm/counterfactual.hpp"
#include "bgm/dataset.hpp"
#include "bgm/flow.hpp"
#include "bgm/structured.hpp"
#include "bgm/train.hpp"

namespace bgm {

struct ScmSpec {
  std::string name = "ellipse";
  std::string structure = "observational";
  std::size_t n = 100000;
  std::size_t heldout = 1000;  // evaluation rows, drawn from an independent stream
  std::uint64_t seed = 1;
};

struct ModelSpec {
  StructureSpec structure;
  FlowConfig bgm;
  FlowConfig aux;
  std::uint64_t seed = 7;
};

struct EvalSpec {
  std::size_t sweep_k = 64;
  std::size_t max_rows = 1000;  // held-out rows evaluated
  std::uint64_t seed = 11;
};

struct ExperimentConfig {
  ScmSpec scm;
  ModelSpec model;
  TrainConfig train;
  EvalSpec eval;
  std::string out_dir = "out";

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static ExperimentConfig from_json(const nlohmann::json& j);
  /// "train.adam.lr=0.001": the value is parsed as JSON when it can be,
  /// otherwise taken as a string.
  void apply_override(const std::string& assignment);
};

struct MetricsReport {
  std::string metric;          // "mape" or "normalized_mse"
  double mape = -1.0;          // percent; -1 when not computed
  double normalized_mse = -1.0;
  double wall_time_s = 0.0;
  std::uint64_t seed = 0;
  nlohmann::json per_scheme = nlohmann::json::object();

  nlohmann::json to_json() const;
};

/// Training rows and held-out rows for a config.
std::pair<Dataset, Dataset> generate_datasets(const ScmSpec& spec);

/// Condition matrix the learned mechanism of `spec` takes: x, or [x | z].
Matrix mechanism_condition(const StructureSpec& spec, const Matrix& x, const Matrix& z);

/// Builds and calibrates an untrained network for `ds`.
StructuredNetwork build_model(const ModelSpec& spec, const Dataset& ds);

/// Trains `net` on `ds`; checkpoints go to `checkpoint_path` after every
/// epoch when it is non-empty.
TrainResult fit(StructuredNetwork& net, const Dataset& ds, const TrainConfig& cfg,
                const std::optional<TrainCheckpoint>& resume = std::nullopt,
                const std::string& checkpoint_path = "");

/// x'_k = 2 pi (k + 1/2) / k, k = 0 .. sweep_k - 1.
Vec ellipse_sweep(std::size_t sweep_k);

/// How a model answers an ellipse query. Abduction runs
/// abduction-action-prediction; Sampling ignores the evidence and draws v'
/// from the model's conditional at x' (the baseline protocol).
enum class EllipseMode { Abduction, Sampling };

/// Mean |v^' - v'| / max(|v'|, 1e-6) x 100 over coordinates, sweep points
/// and the first `max_rows` held-out rows. OracleUnavailable without hidden u.
double ellipse_mape(const Mechanism& m, const StructureSpec& spec, const Dataset& heldout,
                    std::size_t sweep_k, EllipseMode mode, std::uint64_t seed = 0,
                    std::size_t max_rows = 1000);

struct AbrScore {
  double model_mse = 0.0;
  double baseline_mse = 0.0;  // replay baseline v' = v
  double normalized = 0.0;    // percent
};

/// Each held-out row gets x' uniform over the bitrate grid minus its own x;
/// truth comes from the synthetic SCM.
AbrScore abr_normalized_mse(const Mechanism& m, const StructureSpec& spec, const Dataset& heldout,
                            std::uint64_t seed, std::size_t max_rows = 0);

struct DiagnosticResult {
  nlohmann::json report;
  bool pass = true;
};

/// Structure-appropriate battery on dataset rows: latent independence from
/// the required variables (hard), monotonicity for scalar V (hard), and with
/// hidden u available the equivalence check (informational). Markovian
/// models with multi-dimensional V carry a warning.
DiagnosticResult diagnose(const StructuredNetwork& net, const Dataset& ds, std::uint64_t seed = 0);

// Commands. Each writes its inputs' config next to its outputs.

/// <out>/data.csv and <out>/heldout.csv with JSON sidecars.
void cmd_generate(const ExperimentConfig& cfg);
/// <out>/model.json, bgm.json, loss.csv, checkpoint.json. With `resume` and
/// an existing checkpoint the run continues from it.
TrainResult cmd_train(const ExperimentConfig& cfg, const std::string& data_csv, bool resume = false);
/// <out>/answer.csv and answer.json.
CounterfactualAnswer cmd_counterfactual(const ExperimentConfig& cfg, const std::string& model_path,
                                        const std::string& query_path, const std::string& data_csv = "");
/// `models` are scored by abduction, `baselines` by sampling.
MetricsReport cmd_eval_ellipse(const ExperimentConfig& cfg, const std::vector<std::string>& models,
                               const std::vector<std::string>& baselines, const std::string& heldout_csv);
/// One (model, held-out dataset) pair per scheme; normalized_mse is the worst scheme.
MetricsReport cmd_eval_abr(const ExperimentConfig& cfg,
                           const std::vector<std::pair<std::string, std::string>>& runs);
DiagnosticResult cmd_diagnose(const ExperimentConfig& cfg, const std::string& model_path,
                              const std::string& data_csv);

StructuredNetwork load_model(const std::string& path);
void write_json(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json(const std::string& path);

}  // namespace bgm
