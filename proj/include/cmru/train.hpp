// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The cmru Authors.
//
// Optimization protocol: AdamW with decoupled decay, linear warmup then cosine
// decay, global-norm clipping, periodic validation, best-checkpoint selection,
// early stopping and the optional epsilon anneal for CMRU-family models.

#pragma once

#include "cmru/backbone.hpp"
#include "cmru/numerics.hpp"
#include "cmru/tasks.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace cmru {

struct AnnealConfig {
  bool enabled = false;
  // Fractions of the run, held as basis points so the breakpoints are exact.
  std::int64_t hold_bp = 500;
  std::int64_t decay_bp = 7000;
};

struct TrainConfig {
  std::int64_t max_iters = 35000;
  int batch_size = 64;
  double lr_peak = 1e-3;
  double lr_min = 1e-5;
  double warmup_frac = 0.01;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  int eval_every = 64;
  int eval_batches = 20;
  int early_stop_patience = 100;
  AnnealConfig anneal;
  int threads = 1;
  bool deterministic_log = false;
  int test_batch_size = 256;

  void validate() const {
    if (max_iters < 1) throw ConfigError("train.max_iters", "must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
    if (!(lr_peak > 0.0) || !(lr_min >= 0.0) || lr_min > lr_peak) throw ConfigError("train.lr_min", "need 0 <= lr_min <= lr_peak");
    if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) throw ConfigError("train.warmup_frac", "must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay", "must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1", "must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2", "must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps", "must be positive");
    if (!(clip_norm > 0.0)) throw ConfigError("train.clip_norm", "must be positive");
    if (eval_every < 1) throw ConfigError("train.eval_every", "must be >= 1");
    if (eval_batches < 1) throw ConfigError("train.eval_batches", "must be >= 1");
    if (early_stop_patience < 0) throw ConfigError("train.early_stop_patience", "must be >= 0");
    if (threads < 1) throw ConfigError("train.threads", "must be >= 1");
    if (test_batch_size < 1) throw ConfigError("train.test_batch_size", "must be >= 1");
    if (anneal.hold_bp < 0 || anneal.decay_bp <= 0 || anneal.hold_bp + anneal.decay_bp > 10000)
      throw ConfigError("train.anneal", "need hold >= 0, decay > 0, hold + decay <= 1");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"max_iters", c.max_iters},
       {"batch_size", c.batch_size},
       {"lr_peak", c.lr_peak},
       {"lr_min", c.lr_min},
       {"warmup_frac", c.warmup_frac},
       {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"clip_norm", c.clip_norm},
       {"eval_every", c.eval_every},
       {"eval_batches", c.eval_batches},
       {"early_stop_patience", c.early_stop_patience},
       {"anneal",
        {{"enabled", c.anneal.enabled},
         {"hold", static_cast<double>(c.anneal.hold_bp) / 10000.0},
         {"decay", static_cast<double>(c.anneal.decay_bp) / 10000.0},
         {"zero", static_cast<double>(10000 - c.anneal.hold_bp - c.anneal.decay_bp) / 10000.0}}},
       {"threads", c.threads},
       {"deterministic_log", c.deterministic_log},
       {"test_batch_size", c.test_batch_size}};
}

inline std::int64_t fraction_to_bp(double f, const std::string& key) {
  const double bp = f * 10000.0;
  const double r = std::round(bp);
  if (!(f >= 0.0 && f <= 1.0) || std::abs(bp - r) > 1e-6) throw ConfigError(key, "must be a multiple of 0.0001 in [0, 1]");
  return static_cast<std::int64_t>(r);
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& prefix = "train") {
  detail::reject_unknown(j, prefix,
                         {"max_iters", "batch_size", "lr_peak", "lr_min", "warmup_frac", "weight_decay", "beta1", "beta2",
                          "adam_eps", "clip_norm", "eval_every", "eval_batches", "early_stop_patience", "anneal", "threads",
                          "deterministic_log", "test_batch_size"});
  TrainConfig c;
  detail::read_opt(j, "max_iters", prefix, c.max_iters);
  detail::read_opt(j, "batch_size", prefix, c.batch_size);
  detail::read_opt(j, "lr_peak", prefix, c.lr_peak);
  detail::read_opt(j, "lr_min", prefix, c.lr_min);
  detail::read_opt(j, "warmup_frac", prefix, c.warmup_frac);
  detail::read_opt(j, "weight_decay", prefix, c.weight_decay);
  detail::read_opt(j, "beta1", prefix, c.beta1);
  detail::read_opt(j, "beta2", prefix, c.beta2);
  detail::read_opt(j, "adam_eps", prefix, c.adam_eps);
  detail::read_opt(j, "clip_norm", prefix, c.clip_norm);
  detail::read_opt(j, "eval_every", prefix, c.eval_every);
  detail::read_opt(j, "eval_batches", prefix, c.eval_batches);
  detail::read_opt(j, "early_stop_patience", prefix, c.early_stop_patience);
  detail::read_opt(j, "threads", prefix, c.threads);
  detail::read_opt(j, "deterministic_log", prefix, c.deterministic_log);
  detail::read_opt(j, "test_batch_size", prefix, c.test_batch_size);
  if (j.contains("anneal")) {
    const auto& a = j["anneal"];
    const std::string ap = prefix + ".anneal";
    detail::reject_unknown(a, ap, {"enabled", "hold", "decay", "zero"});
    detail::read_opt(a, "enabled", ap, c.anneal.enabled);
    double hold = 0.05, decay = 0.70;
    detail::read_opt(a, "hold", ap, hold);
    detail::read_opt(a, "decay", ap, decay);
    c.anneal.hold_bp = fraction_to_bp(hold, ap + ".hold");
    c.anneal.decay_bp = fraction_to_bp(decay, ap + ".decay");
    if (a.contains("zero")) {
      double zero = 0.0;
      detail::read_opt(a, "zero", ap, zero);
      if (fraction_to_bp(zero, ap + ".zero") + c.anneal.hold_bp + c.anneal.decay_bp != 10000)
        throw ConfigError(ap + ".zero", "hold + decay + zero must equal 1");
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

inline double lr_schedule(std::int64_t step, std::int64_t total, const TrainConfig& c = {}) {
  if (total <= 0) throw std::invalid_argument("lr_schedule: total must be positive");
  if (step < 0 || step > total) throw std::invalid_argument("lr_schedule: step out of range");
  const double warm = c.warmup_frac * static_cast<double>(total);
  const double s = static_cast<double>(step);
  if (s < warm) return c.lr_peak * s / warm;
  const double span = static_cast<double>(total) - warm;
  const double progress = span > 0.0 ? (s - warm) / span : 1.0;
  const double w = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return c.lr_peak * w + c.lr_min * (1.0 - w);
}

// 1 for the hold phase, linear to 0 over the decay phase, then 0. The
// breakpoints are compared in integers, so e.g. 40% of the run gives exactly
// (75 - 40) / 70 = 0.5.
inline double epsilon_anneal(std::int64_t step, std::int64_t total, const AnnealConfig& a = {}) {
  if (total <= 0) throw std::invalid_argument("epsilon_anneal: total must be positive");
  if (step < 0 || step > total) throw std::invalid_argument("epsilon_anneal: step out of range");
  const std::int64_t p = 10000 * step;
  const std::int64_t hold = a.hold_bp * total;
  const std::int64_t end = (a.hold_bp + a.decay_bp) * total;
  if (p < hold) return 1.0;
  if (p >= end) return 0.0;
  return static_cast<double>(end - p) / static_cast<double>(a.decay_bp * total);
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

inline double global_grad_norm(std::span<ParamTensor* const> params) {
  double sq = 0.0;
  for (const auto* p : params) sq += p->grad.squaredNorm();
  return std::sqrt(sq);
}

// Returns the norm before clipping.
inline double clip_global_norm(std::span<ParamTensor* const> params, double max_norm = 1.0) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto* p : params) p->grad *= scale;
  }
  return norm;
}

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AdamW {
 public:
  AdamW(std::vector<ParamTensor*> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.push_back(Mat::Zero(p->values.rows(), p->values.cols()));
      v_.push_back(Mat::Zero(p->values.rows(), p->values.cols()));
    }
  }

  std::int64_t steps() const { return t_; }
  const std::vector<Mat>& first_moments() const { return m_; }
  const std::vector<Mat>& second_moments() const { return v_; }

  void step(double lr) {
    for (const auto* p : params_)
      if (!p->grad.allFinite()) throw NonFiniteGradient("non-finite gradient in " + p->name + " at step " + std::to_string(t_));
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      p.values *= 1.0 - lr * cfg_.weight_decay;
      m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * p.grad;
      v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * p.grad.cwiseAbs2();
      p.values.array() -= lr * (m_[k].array() / bc1) / ((v_[k].array() / bc2).sqrt() + cfg_.adam_eps);
    }
  }

 private:
  std::vector<ParamTensor*> params_;
  TrainConfig cfg_;
  std::vector<Mat> m_, v_;
  std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Losses and metrics
// ---------------------------------------------------------------------------

struct LossResult {
  double loss = 0.0;
  Mat grad;  // dL/doutput
};

inline LossResult cross_entropy(const Mat& logits, const std::vector<double>& labels) {
  LossResult r;
  r.grad.resize(logits.rows(), logits.cols());
  const double inv_b = 1.0 / static_cast<double>(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const RowVec e = (logits.row(i).array() - mx).exp().matrix();
    const double z = e.sum();
    const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]);
    if (y < 0 || y >= logits.cols()) throw std::invalid_argument("cross_entropy: label out of range");
    r.loss += (std::log(z) + mx - logits(i, y)) * inv_b;
    r.grad.row(i) = e / z * inv_b;
    r.grad(i, y) -= inv_b;
  }
  return r;
}

inline LossResult mean_squared_error(const Mat& pred, const std::vector<double>& targets) {
  LossResult r;
  r.grad.resize(pred.rows(), pred.cols());
  const double inv_b = 1.0 / static_cast<double>(pred.rows());
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    const double e = pred(i, 0) - targets[static_cast<std::size_t>(i)];
    r.loss += e * e * inv_b;
    r.grad(i, 0) = 2.0 * e * inv_b;
  }
  return r;
}

struct MetricSum {
  double sum = 0.0;
  std::int64_t count = 0;
  double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
};

// Accuracy counts exact argmax matches; MAE sums |prediction - target|.
inline void accumulate_metric(const Mat& out, const std::vector<double>& targets, TargetKind kind, MetricSum& m) {
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    if (kind == TargetKind::classification) {
      Eigen::Index arg;
      out.row(i).maxCoeff(&arg);
      m.sum += static_cast<double>(arg) == targets[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    } else {
      m.sum += std::abs(out(i, 0) - targets[static_cast<std::size_t>(i)]);
    }
    ++m.count;
  }
}

inline const char* metric_name(TargetKind k) { return k == TargetKind::classification ? "accuracy" : "mae"; }

// Higher accuracy, lower MAE.
inline bool strictly_better(double candidate, double incumbent, TargetKind k) {
  return k == TargetKind::classification ? candidate > incumbent : candidate < incumbent;
}

inline double evaluate(const Model& model, const Dataset& data, int count, int batch_size) {
  count = std::min(count, data.size());
  MetricSum m;
  std::vector<int> idx;
  std::vector<double> targets;
  for (int start = 0; start < count; start += batch_size) {
    idx.clear();
    for (int i = start; i < std::min(count, start + batch_size); ++i) idx.push_back(i);
    const SequenceBatch x = data.batch(idx, targets);
    accumulate_metric(model.forward(x), targets, data.spec().target(), m);
  }
  return m.mean();
}

// ---------------------------------------------------------------------------
// Training run
// ---------------------------------------------------------------------------

struct LogLine {
  std::int64_t step = 0;
  std::string split;
  std::string metric_name;
  double value = 0.0;
  double epsilon = 0.0;
  double lr = 0.0;
  std::optional<double> wall_time;
};

inline std::string to_jsonl(const LogLine& l) {
  nlohmann::ordered_json j;
  j["step"] = l.step;
  j["split"] = l.split;
  j["metric_name"] = l.metric_name;
  j["value"] = l.value;
  j["epsilon"] = l.epsilon;
  j["lr"] = l.lr;
  j["wall_time"] = l.wall_time ? nlohmann::ordered_json(*l.wall_time) : nlohmann::ordered_json(nullptr);
  return j.dump();
}

enum class RunStatus { completed, early_stopped, diverged };

inline const char* status_name(RunStatus s) {
  switch (s) {
    case RunStatus::completed: return "completed";
    case RunStatus::early_stopped: return "early_stopped";
    case RunStatus::diverged: return "diverged";
  }
  return "?";
}

struct RunOptions {
  std::string log_path;         // JSONL; empty disables
  std::string checkpoint_path;  // best checkpoint; empty disables
  bool verbose = false;
};

struct RunRecord {
  RunStatus status = RunStatus::completed;
  std::string failure;
  std::int64_t iterations = 0;
  std::vector<LogLine> log;
  std::optional<std::int64_t> best_step;  // number of updates behind the best checkpoint
  double best_validation = 0.0;
  std::vector<std::int64_t> checkpoint_steps;
  std::optional<double> test_metric;
  std::string metric;
  double max_post_clip_norm = 0.0;
  double seconds = 0.0;

  bool ok() const { return status != RunStatus::diverged && test_metric.has_value(); }
};

inline ModelConfig bind_task_dims(ModelConfig m, const TaskSpec& t) {
  m.input_dim = t.features();
  m.output_dim = t.outputs();
  return m;
}

inline RunRecord run_training(const ModelConfig& model_cfg_in, const TaskSpec& task, const TrainConfig& cfg,
                              std::uint64_t seed, const RunOptions& opts = {}, const TaskData* preloaded = nullptr) {
  cfg.validate();
  const ModelConfig model_cfg = bind_task_dims(model_cfg_in, task);
  if (cfg.anneal.enabled && !model_cfg.is_cmru_family()) throw ConfigError("train.anneal", "requires a CMRU-family cell");
  if (model_cfg.pooling == Pooling::none) throw ConfigError("model.pooling", "tasks here need a pooled prediction");
  std::optional<TaskData> owned;
  if (!preloaded) owned.emplace(make_task_data(task));
  const TaskData& data = preloaded ? *preloaded : *owned;
  const TargetKind kind = task.target();

  Model model(model_cfg, seed);
  model.execution().scan_options.threads = cfg.threads;
  auto params = param_list(model.params());
  AdamW opt(params, cfg);
  Rng order_rng(seed, 0xba7c4);
  Rng dropout_rng(seed, 0xd809);

  std::ofstream log_file;
  if (!opts.log_path.empty()) {
    log_file.open(opts.log_path, std::ios::trunc);
    if (!log_file) throw std::runtime_error("cannot open log " + opts.log_path);
  }
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  RunRecord rec;
  rec.metric = metric_name(kind);
  auto emit = [&](LogLine l) {
    if (!cfg.deterministic_log) l.wall_time = elapsed();
    if (log_file) log_file << to_jsonl(l) << '\n' << std::flush;
    rec.log.push_back(std::move(l));
  };

  std::vector<int> order(static_cast<std::size_t>(data.train.size()));
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  auto next_batch = [&](std::vector<int>& idx) {
    idx.clear();
    while (static_cast<int>(idx.size()) < cfg.batch_size) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[order_rng.below(i + 1)]);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
  };

  std::vector<Mat> best_params;
  int perfect_streak = 0;
  double loss_window = 0.0;
  int loss_count = 0;
  const std::int64_t total = cfg.max_iters;
  std::vector<int> idx;
  std::vector<double> targets;
  const int eval_count = cfg.eval_batches * cfg.batch_size;

  for (std::int64_t step = 0; step < total; ++step) {
    const double eps = cfg.anneal.enabled         ? epsilon_anneal(step, total, cfg.anneal)
                       : model_cfg.is_cmru_family() ? model_cfg.epsilon
                                                    : 0.0;
    if (cfg.anneal.enabled) model.set_epsilon(eps);
    const double lr = lr_schedule(step, total, cfg);

    next_batch(idx);
    const SequenceBatch x = data.train.batch(idx, targets);
    Model::Tape tape;
    zero_grad(params);
    const Mat out = model.forward(x, &tape, model_cfg.dropout > 0.0 ? &dropout_rng : nullptr);
    const LossResult loss = kind == TargetKind::classification ? cross_entropy(out, targets) : mean_squared_error(out, targets);
    if (!std::isfinite(loss.loss)) {
      rec.status = RunStatus::diverged;
      rec.failure = "non-finite loss at step " + std::to_string(step);
      rec.iterations = step;
      emit({step, "train", "loss", loss.loss, eps, lr, {}});
      break;
    }
    model.backward(x, tape, loss.grad);
    clip_global_norm(params, cfg.clip_norm);
    rec.max_post_clip_norm = std::max(rec.max_post_clip_norm, global_grad_norm(params));
    try {
      opt.step(lr);
    } catch (const NonFiniteGradient& e) {
      rec.status = RunStatus::diverged;
      rec.failure = e.what();
      rec.iterations = step;
      break;
    }
    rec.iterations = step + 1;
    loss_window += loss.loss;
    ++loss_count;

    const bool eval_now = (step + 1) % cfg.eval_every == 0 || step + 1 == total;
    if (!eval_now) continue;
    emit({step + 1, "train", "loss", loss_window / loss_count, eps, lr, {}});
    loss_window = 0.0;
    loss_count = 0;
    const double val = evaluate(model, data.validation, eval_count, cfg.batch_size);
    emit({step + 1, "validation", rec.metric, val, eps, lr, {}});
    const bool eligible = !cfg.anneal.enabled || eps == 0.0;
    if (eligible && (!rec.best_step || strictly_better(val, rec.best_validation, kind))) {
      rec.best_step = step + 1;
      rec.best_validation = val;
      rec.checkpoint_steps.push_back(step + 1);
      best_params = model.params().snapshot();
      if (!opts.checkpoint_path.empty())
        save_checkpoint(opts.checkpoint_path, model,
                        {{"step", step + 1}, {"seed", seed}, {"validation", val}, {"epsilon", eps}});
    }
    if (opts.verbose) std::fprintf(stderr, "step %lld val %s %.6f eps %.4f\n", static_cast<long long>(step + 1), rec.metric.c_str(), val, eps);
    if (kind == TargetKind::classification && eligible) {
      perfect_streak = val == 1.0 ? perfect_streak + 1 : 0;
      if (cfg.early_stop_patience > 0 && perfect_streak >= cfg.early_stop_patience) {
        rec.status = RunStatus::early_stopped;
        break;
      }
    }
  }

  if (rec.best_step) {
    model.params().restore(best_params);
    if (cfg.anneal.enabled) model.set_epsilon(0.0);
    rec.test_metric = evaluate(model, data.test, data.test.size(), cfg.test_batch_size);
    emit({*rec.best_step, "test", rec.metric, *rec.test_metric, model_cfg.is_cmru_family() ? model.epsilon() : 0.0, 0.0, {}});
  } else if (rec.failure.empty()) {
    rec.failure = "no checkpoint was selected";
  }
  rec.seconds = elapsed();
  return rec;
}

}  // namespace cmru
