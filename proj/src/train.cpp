#include "bgm/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>

#include "bgm/errors.hpp"
#include "bgm/rng.hpp"

namespace bgm {

using nlohmann::json;

Var FlowObjective::nll(GradTape& tape, const Matrix& batch) const {
  const std::size_t c = flow_.cond_dim(), d = flow_.var_dim();
  if (batch.cols() != c + d) throw SchemaError("flow objective: batch must have cond_dim + var_dim columns");
  Var all = tape.constant_ref(batch);
  return scale(mean(flow_.log_density(tape, slice_cols(all, 0, c), slice_cols(all, c, d))), -1.0);
}

double nll_loss(const ConditionalBijection& flow, const Matrix& cond, const Matrix& v) {
  const Vec ld = flow.log_density(cond, v);
  if (ld.empty()) throw ValidationError("nll_loss: empty batch");
  double s = 0.0;
  for (double x : ld) s += x;
  return -s / static_cast<double>(ld.size());
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ValidationError("train: batch_size must be positive");
  if (max_epochs < 0) throw ValidationError("train: max_epochs must be >= 0");
  if (window < 1) throw ValidationError("train: window must be >= 1");
  if (!(adam.lr > 0.0)) throw ValidationError("train: lr must be positive");
  if (schedule != "none" && schedule != "cosine") {
    throw ValidationError("train: schedule must be 'none' or 'cosine'");
  }
  if (grad_clip < 0.0) throw ValidationError("train: grad_clip must be >= 0");
}

json TrainConfig::to_json() const {
  return {{"batch_size", batch_size}, {"max_epochs", max_epochs}, {"window", window},
          {"tolerance", tolerance},   {"seed", seed},             {"lr", adam.lr},
          {"beta1", adam.beta1},      {"beta2", adam.beta2},      {"eps", adam.eps},
          {"schedule", schedule},     {"lr_floor", lr_floor},     {"grad_clip", grad_clip}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.window = j.value("window", c.window);
  c.tolerance = j.value("tolerance", c.tolerance);
  c.seed = j.value("seed", c.seed);
  c.adam.lr = j.value("lr", c.adam.lr);
  c.adam.beta1 = j.value("beta1", c.adam.beta1);
  c.adam.beta2 = j.value("beta2", c.adam.beta2);
  c.adam.eps = j.value("eps", c.adam.eps);
  c.schedule = j.value("schedule", c.schedule);
  c.lr_floor = j.value("lr_floor", c.lr_floor);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.validate();
  return c;
}

json TrainCheckpoint::to_json() const {
  return {{"format", "bgm-train-checkpoint"}, {"epoch", epoch}, {"history", history},
          {"adam", adam.to_json()},          {"model", model}};
}

TrainCheckpoint TrainCheckpoint::from_json(const json& j) {
  if (j.value("format", "") != "bgm-train-checkpoint") {
    throw SchemaError("checkpoint: not a training checkpoint");
  }
  TrainCheckpoint c;
  c.epoch = j.at("epoch").get<int>();
  c.history = j.at("history").get<std::vector<double>>();
  c.adam = AdamState::from_json(j.at("adam"));
  c.model = j.at("model");
  return c;
}

namespace {

double lr_scale_at(const TrainConfig& cfg, int epoch) {
  if (cfg.schedule != "cosine" || cfg.max_epochs == 0) return 1.0;
  const double t = static_cast<double>(epoch) / static_cast<double>(cfg.max_epochs);
  return cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

Gradients clipped(const std::vector<Param*>& params, const Gradients& g, double max_norm) {
  double sq = 0.0;
  for (const Param* p : params) {
    for (double x : g.of(*p).storage()) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (!(norm > max_norm)) return g;
  Gradients out;
  const double f = max_norm / norm;
  for (const Param* p : params) {
    Matrix m = g.of(*p);
    for (double& x : m.storage()) x *= f;
    out.set(*p, std::move(m));
  }
  return out;
}

}  // namespace

TrainResult train(Objective& objective, const Matrix& data, const TrainConfig& cfg,
                  const std::optional<TrainCheckpoint>& resume, const TrainHooks& hooks) {
  cfg.validate();
  if (data.rows() == 0) throw ValidationError("train: dataset is empty");
  const auto start = std::chrono::steady_clock::now();

  TrainResult result;
  AdamState adam;
  adam.cfg = cfg.adam;
  int epoch = 0;
  if (resume) {
    objective.restore(resume->model);
    adam = resume->adam;
    result.history = resume->history;
    epoch = resume->epoch;
  }
  std::vector<Param*> params = objective.parameters();
  const std::size_t n = data.rows();
  const std::size_t bs = std::min(cfg.batch_size, n);

  auto checkpoint = [&](int at) {
    return TrainCheckpoint{at, result.history, adam, objective.snapshot()};
  };
  auto converged = [&] {
    const auto& h = result.history;
    if (h.size() <= static_cast<std::size_t>(cfg.window)) return false;
    const double old = h[h.size() - 1 - static_cast<std::size_t>(cfg.window)];
    return (old - h.back()) / std::max(std::abs(old), 1.0) < cfg.tolerance;
  };

  int run_here = 0;
  std::vector<std::size_t> idx;
  while (epoch < cfg.max_epochs && !converged()) {
    if (hooks.stop_after >= 0 && run_here >= hooks.stop_after) break;
    std::vector<Matrix> saved_params;
    for (const Param* p : params) saved_params.push_back(p->value);
    const AdamState saved_adam = adam;

    Rng rng(Rng::derive(cfg.seed, static_cast<std::uint64_t>(epoch)));
    const std::vector<std::size_t> perm = rng.permutation(n);
    const double lr_scale = lr_scale_at(cfg, epoch);
    double total = 0.0;
    for (std::size_t begin = 0; begin < n; begin += bs) {
      const std::size_t end = std::min(n, begin + bs);
      idx.assign(perm.begin() + static_cast<std::ptrdiff_t>(begin),
                 perm.begin() + static_cast<std::ptrdiff_t>(end));
      const Matrix batch = select_rows(data, idx);
      GradTape tape;
      Var loss = objective.nll(tape, batch);
      const double l = loss.value()(0, 0);
      if (!std::isfinite(l)) {
        for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = saved_params[k];
        adam = saved_adam;
        throw TrainingDiverged("training diverged: non-finite loss in epoch " + std::to_string(epoch),
                               checkpoint(epoch).to_json().dump());
      }
      Gradients g = tape.backward(loss);
      if (cfg.grad_clip > 0.0) g = clipped(params, g, cfg.grad_clip);
      adam_step(params, g, adam, lr_scale);
      total += l * static_cast<double>(end - begin);
    }
    result.history.push_back(total / static_cast<double>(n));
    ++epoch;
    ++run_here;
    if (hooks.on_epoch) hooks.on_epoch(checkpoint(epoch));
  }
  result.epochs = epoch;
  result.converged = converged();
  result.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

void write_loss_csv(const std::string& path, const std::vector<double>& history) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  out.precision(17);
  out << "epoch,nll\n";
  for (std::size_t e = 0; e < history.size(); ++e) out << e + 1 << ',' << history[e] << '\n';
}

}  // namespace bgm
