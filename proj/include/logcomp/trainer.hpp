#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "logcomp/checkpoint.hpp"
#include "logcomp/config.hpp"
#include "logcomp/data.hpp"
#include "logcomp/error.hpp"
#include "logcomp/evaluator.hpp"
#include "logcomp/model.hpp"
#include "logcomp/random.hpp"

namespace logcomp {

struct TrainConfig {
  double peak_lr = 6e-4;
  double final_lr = 6e-5;
  int warmup_steps = 700;
  int total_steps = 10000;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  long long tokens_per_step = 16384;
  std::uint64_t seed = 1337;
  int eval_interval = 200;
  std::size_t eval_windows = 64;

  void validate() const {
    require(final_lr > 0 && final_lr <= peak_lr, "need 0 < train.final_lr <= train.peak_lr");
    require(warmup_steps >= 0 && warmup_steps < total_steps, "need 0 <= train.warmup_steps < train.total_steps");
    require(clip_norm > 0, "train.clip_norm must be > 0");
    require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "AdamW betas must lie in [0, 1)");
    require(weight_decay >= 0, "train.weight_decay must be >= 0");
    require(tokens_per_step >= 1, "train.tokens_per_step must be >= 1");
    require(eval_interval >= 1, "train.eval_interval must be >= 1");
  }

  std::map<std::string, std::string> to_map() const {
    return {{"train.peak_lr", format_double(peak_lr)},
            {"train.final_lr", format_double(final_lr)},
            {"train.warmup_steps", std::to_string(warmup_steps)},
            {"train.total_steps", std::to_string(total_steps)},
            {"train.beta1", format_double(beta1)},
            {"train.beta2", format_double(beta2)},
            {"train.eps", format_double(eps)},
            {"train.weight_decay", format_double(weight_decay)},
            {"train.clip_norm", format_double(clip_norm)},
            {"train.tokens_per_step", std::to_string(tokens_per_step)},
            {"train.seed", std::to_string(seed)},
            {"train.eval_interval", std::to_string(eval_interval)},
            {"train.eval_windows", std::to_string(eval_windows)}};
  }
};

inline TrainConfig train_config_from(const KeyValueConfig& cfg) {
  TrainConfig tc;
  tc.peak_lr = cfg.get_double("train.peak_lr");
  tc.final_lr = cfg.get_double("train.final_lr");
  tc.warmup_steps = checked_int(cfg, "train.warmup_steps");
  tc.total_steps = checked_int(cfg, "train.total_steps");
  tc.beta1 = cfg.get_double("train.beta1");
  tc.beta2 = cfg.get_double("train.beta2");
  tc.eps = cfg.get_double("train.eps");
  tc.weight_decay = cfg.get_double("train.weight_decay");
  tc.clip_norm = cfg.get_double("train.clip_norm");
  tc.tokens_per_step = cfg.get_int("train.tokens_per_step");
  tc.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed"));
  tc.eval_interval = checked_int(cfg, "train.eval_interval");
  tc.eval_windows = static_cast<std::size_t>(cfg.get_int("train.eval_windows"));
  tc.validate();
  return tc;
}

/// Linear warmup to peak_lr, cosine decay to final_lr, then flat.
inline double lr_schedule(long long step, const TrainConfig& c) {
  if (step <= c.warmup_steps) {
    return c.warmup_steps == 0 ? c.peak_lr : c.peak_lr * static_cast<double>(step) / c.warmup_steps;
  }
  if (step > c.total_steps) return c.final_lr;
  const double progress = static_cast<double>(step - c.warmup_steps) / (c.total_steps - c.warmup_steps);
  return c.final_lr + 0.5 * (c.peak_lr - c.final_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Scales all gradients so their global L2 norm is at most `clip_norm`.
/// Returns the norm before clipping.
inline double clip_gradients(std::span<Matrix* const> grads, double clip_norm) {
  double sq = 0.0;
  for (const Matrix* g : grads) {
    for (double v : g->data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm > clip_norm) {
    const double s = clip_norm / norm;
    for (Matrix* g : grads) g->eigen() *= s;
  }
  return norm;
}

inline double clip_gradients(const std::vector<NamedParam>& params, double clip_norm) {
  std::vector<Matrix*> grads;
  for (const auto& p : params) grads.push_back(&p.tensor.node()->grad);
  return clip_gradients(grads, clip_norm);
}

struct AdamWState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long long step = 0;
};

/// One decoupled-weight-decay Adam update with bias correction. Decay applies
/// only to parameters flagged `decay`.
inline void adamw_step(const std::vector<NamedParam>& params, AdamWState& state, double lr, const TrainConfig& c) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.rows(), p.tensor.cols());
      state.v.emplace_back(p.tensor.rows(), p.tensor.cols());
    }
  }
  require(state.m.size() == params.size(), "optimizer state does not match parameter list");
  for (const auto& p : params) {
    if (!p.tensor.grad().all_finite()) throw NumericError("non-finite gradient in " + p.name);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].tensor.node()->value.data();
    const auto& g = params[i].tensor.grad().data();
    auto& m = state.m[i].data();
    auto& v = state.v[i].data();
    const double decay = params[i].decay ? c.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= lr * (mhat / (std::sqrt(vhat) + c.eps) + decay * w[j]);
    }
  }
}

/// One line of the metrics log.
struct StepRecord {
  long long step = 0;
  double lr = 0;
  double train_loss = 0;
  std::optional<double> val_loss;
  std::optional<double> val_ppl;
  double wall_time = 0;

  nlohmann::json to_json() const {
    nlohmann::json j{{"step", step}, {"lr", lr}, {"train_loss", train_loss}, {"wall_time", wall_time}};
    j["val_loss"] = val_loss ? nlohmann::json(*val_loss) : nlohmann::json(nullptr);
    j["val_ppl"] = val_ppl ? nlohmann::json(*val_ppl) : nlohmann::json(nullptr);
    return j;
  }
};

struct TrainResult {
  std::vector<StepRecord> history;
  double best_val_loss = std::numeric_limits<double>::infinity();
  double final_val_loss = std::numeric_limits<double>::infinity();
};

/// Optimizer loop over shuffled stride-m windows.
///
/// Window order is a pure function of (seed, epoch): the window for global
/// example index g comes from epoch g / n_windows, so a run resumed from a
/// checkpoint sees exactly the same data as an uninterrupted one.
class Trainer {
 public:
  Trainer(Model& model, const Corpus& train, const Corpus* valid, TrainConfig config,
          std::filesystem::path out_dir = {})
      : model_(model), train_(train), valid_(valid), config_(std::move(config)), out_dir_(std::move(out_dir)) {
    config_.validate();
    n_windows_ = window_count(train_.size(), model_.config().m);
    require(n_windows_ > 0, "training corpus is too short for a single window");
    per_step_ = windows_per_step(config_.tokens_per_step, model_.config().m);
    if (!out_dir_.empty()) std::filesystem::create_directories(out_dir_);
  }

  /// Extra key/values echoed into every checkpoint header.
  void set_header_extras(std::map<std::string, std::string> extras) { extras_ = std::move(extras); }

  long long step() const noexcept { return state_.step; }
  const AdamWState& optimizer_state() const noexcept { return state_; }

  /// Runs one optimizer step and returns its training loss (mean CE per token).
  double train_step() {
    const auto params = model_.params().list();
    model_.params().zero_grad();
    const int m = model_.config().m;
    const int M = model_.history_length();
    std::vector<Batch> batches;
    long long tokens = 0;
    for (int b = 0; b < per_step_; ++b) {
      batches.push_back(window_at(train_.token_ids, window_for(state_.step * per_step_ + b), m, M));
      tokens += batches.back().n_targets();
    }
    double total = 0.0;
    for (const auto& batch : batches) {
      ad::Tape tape;
      auto res = model_.forward(tape, batch);
      const double w = static_cast<double>(batch.n_targets()) / static_cast<double>(tokens);
      total += res.loss.item() * batch.n_targets();
      tape.backward(ad::scale(tape, res.loss, w));
    }
    clip_gradients(params, config_.clip_norm);
    adamw_step(params, state_, lr_schedule(state_.step + 1, config_), config_);
    for (const auto& p : params) {
      if (!p.tensor.value().all_finite()) throw NumericError("parameter " + p.name + " became non-finite");
    }
    return total / static_cast<double>(tokens);
  }

  double validation_loss() const {
    if (!valid_) return std::numeric_limits<double>::quiet_NaN();
    EvalOptions opts;
    opts.max_windows = config_.eval_windows;
    return evaluate(model_, *valid_, opts).mean_ce();
  }

  /// Trains until total_steps. `on_step` sees every record as it is produced.
  TrainResult run(const std::function<void(const StepRecord&)>& on_step = {}) {
    TrainResult result;
    result.best_val_loss = best_val_;
    std::ofstream log;
    if (!out_dir_.empty()) {
      log.open(out_dir_ / "metrics.jsonl", std::ios::app);
      if (!log) throw IoError("cannot open metrics log in " + out_dir_.string());
    }
    const auto start = std::chrono::steady_clock::now();
    while (state_.step < config_.total_steps) {
      StepRecord rec;
      rec.lr = lr_schedule(state_.step + 1, config_);
      rec.train_loss = train_step();
      rec.step = state_.step;
      const bool boundary = rec.step % config_.eval_interval == 0 || rec.step == config_.total_steps;
      if (boundary && valid_) {
        rec.val_loss = validation_loss();
        rec.val_ppl = std::exp(*rec.val_loss);
        result.final_val_loss = *rec.val_loss;
        if (*rec.val_loss < best_val_) {
          best_val_ = *rec.val_loss;
          if (!out_dir_.empty()) write_checkpoint(out_dir_ / "best.ckpt", checkpoint());
        }
      }
      if (boundary && !out_dir_.empty()) write_checkpoint(out_dir_ / "last.ckpt", checkpoint());
      rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (log) log << rec.to_json().dump() << '\n' << std::flush;
      if (on_step) on_step(rec);
      result.history.push_back(rec);
    }
    result.best_val_loss = best_val_;
    return result;
  }

  /// Model, optimizer moments and loop position.
  Checkpoint checkpoint() const {
    Checkpoint ckpt = model_checkpoint(model_, config_.seed);
    for (const auto& [k, v] : config_.to_map()) ckpt.header[k] = v;
    for (const auto& [k, v] : extras_) ckpt.header[k] = v;
    ckpt.header["train.step"] = std::to_string(state_.step);
    ckpt.header["train.best_val_loss"] = format_double(best_val_);
    const auto params = model_.params().list();
    for (std::size_t i = 0; i < state_.m.size(); ++i) {
      ckpt.blobs.emplace_back("adam.m/" + params[i].name, state_.m[i]);
      ckpt.blobs.emplace_back("adam.v/" + params[i].name, state_.v[i]);
    }
    return ckpt;
  }

  /// Restores parameters, optimizer state and step from a checkpoint written
  /// by checkpoint() for the same configuration.
  void resume(const Checkpoint& ckpt) {
    const ModelConfig cfg = model_config_from_map(ckpt.header);
    require(cfg == model_.config(), "checkpoint model configuration differs from the model being trained");
    const auto params = model_.params().list();
    state_ = AdamWState{};
    for (const auto& p : params) {
      const Matrix* blob = ckpt.find(p.name);
      if (!blob || !blob->same_shape(p.tensor.value())) throw IoError("checkpoint lacks a usable " + p.name);
      p.tensor.node()->value = *blob;
      const Matrix* mm = ckpt.find("adam.m/" + p.name);
      const Matrix* vv = ckpt.find("adam.v/" + p.name);
      if (mm && vv) {
        state_.m.push_back(*mm);
        state_.v.push_back(*vv);
      }
    }
    if (!state_.m.empty() && state_.m.size() != params.size()) throw IoError("checkpoint has partial optimizer state");
    const auto it = ckpt.header.find("train.step");
    state_.step = it == ckpt.header.end() ? 0 : std::stoll(it->second);
    const auto best = ckpt.header.find("train.best_val_loss");
    if (best != ckpt.header.end()) best_val_ = std::stod(best->second);
  }

 private:
  std::size_t window_for(long long global_index) {
    const auto epoch = static_cast<std::uint64_t>(global_index) / n_windows_;
    if (epoch != order_epoch_ || order_.empty()) {
      order_.resize(n_windows_);
      for (std::size_t i = 0; i < n_windows_; ++i) order_[i] = i;
      Rng rng(mix_seed(config_.seed, epoch));
      rng.shuffle(order_);
      order_epoch_ = epoch;
    }
    return order_[static_cast<std::uint64_t>(global_index) % n_windows_];
  }

  Model& model_;
  const Corpus& train_;
  const Corpus* valid_;
  TrainConfig config_;
  std::filesystem::path out_dir_;
  std::map<std::string, std::string> extras_;
  AdamWState state_;
  std::size_t n_windows_ = 0;
  int per_step_ = 1;
  std::vector<std::size_t> order_;
  std::uint64_t order_epoch_ = 0;
  double best_val_ = std::numeric_limits<double>::infinity();
};

}  // namespace logcomp
