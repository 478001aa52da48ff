#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bgm/adam.hpp"
#include "bgm/flow.hpp"
#include "bgm/matrix.hpp"
#include "bgm/tape.hpp"

namespace bgm {

/// Anything trainable by minimizing a mean negative log-likelihood over rows
/// of a fixed-layout batch matrix.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual std::vector<Param*> parameters() = 0;
  /// Mean NLL over the batch rows as a 1x1 Var on `tape`.
  virtual Var nll(GradTape& tape, const Matrix& batch) const = 0;
  virtual nlohmann::json snapshot() const = 0;
  virtual void restore(const nlohmann::json& j) = 0;
};

/// A single flow fit to [cond | v] rows.
class FlowObjective : public Objective {
 public:
  explicit FlowObjective(ConditionalBijection& flow) : flow_(flow) {}
  std::vector<Param*> parameters() override { return flow_.parameters(); }
  Var nll(GradTape& tape, const Matrix& batch) const override;
  nlohmann::json snapshot() const override { return flow_.to_json(); }
  void restore(const nlohmann::json& j) override { flow_ = ConditionalBijection::from_json(j); }

 private:
  ConditionalBijection& flow_;
};

/// Mean NLL of `v` given `cond` under a single flow.
double nll_loss(const ConditionalBijection& flow, const Matrix& cond, const Matrix& v);

struct TrainConfig {
  std::size_t batch_size = 4096;
  int max_epochs = 200;
  int window = 20;          // convergence window, epochs
  double tolerance = 1e-4;  // relative NLL improvement over the window
  std::uint64_t seed = 0;
  AdamConfig adam;
  /// "none" or "cosine" (decays to lr * lr_floor by max_epochs).
  std::string schedule = "none";
  double lr_floor = 0.05;
  double grad_clip = 0.0;  // global L2 norm; 0 disables

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainResult {
  std::vector<double> history;  // mean training NLL per epoch
  int epochs = 0;
  bool converged = false;
  double wall_time_s = 0.0;
};

/// Resumable state: everything needed to continue a run bitwise-identically.
struct TrainCheckpoint {
  int epoch = 0;
  std::vector<double> history;
  AdamState adam;
  nlohmann::json model;

  nlohmann::json to_json() const;
  static TrainCheckpoint from_json(const nlohmann::json& j);
};

struct TrainHooks {
  /// Called after every epoch with the checkpoint at that point.
  std::function<void(const TrainCheckpoint&)> on_epoch;
  /// Stop after this many epochs in this call (simulates interruption); <0 = no limit.
  int stop_after = -1;
};

/// Mini-batch Adam on `data`. Each epoch visits a permutation drawn from
/// (seed, epoch), so a resumed run repeats the original exactly. Throws
/// TrainingDiverged (carrying the last finite checkpoint) on a non-finite loss.
TrainResult train(Objective& objective, const Matrix& data, const TrainConfig& cfg,
                  const std::optional<TrainCheckpoint>& resume = std::nullopt,
                  const TrainHooks& hooks = {});

void write_loss_csv(const std::string& path, const std::vector<double>& history);

}  // namespace bgm
