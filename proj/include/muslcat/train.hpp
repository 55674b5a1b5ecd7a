#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "muslcat/data.hpp"
#include "muslcat/layers.hpp"
#include "muslcat/model.hpp"

namespace muslcat {

inline constexpr double kProbClamp = 1e-7;

// Mean over batch and tags of -[y log p + (1-y) log(1-p)], p clamped to
// [1e-7, 1 - 1e-7]. Targets must be exactly 0 or 1.
double bce_loss(const Tensor& probs, const Tensor& targets);

struct BceResult {
  double loss = 0.0;
  Tensor grad_logits;  // (sigmoid(z) - y) / N
};
// The loss above on sigmoid(logits), with the gradient taken through the
// logits. The clamp only shapes the reported value: past |z| ~ 16 the
// gradient keeps its unclamped form instead of dropping to zero.
BceResult bce_with_logits(const Tensor& logits, const Tensor& targets);

// v <- m v - lr g ; theta <- theta + m v - lr g
class NesterovSGD {
 public:
  explicit NesterovSGD(double momentum = 0.9) : momentum_(momentum) {}

  // Every gradient is checked before anything moves; a non-finite entry throws
  // std::runtime_error naming the parameter and index.
  void step(const std::vector<ParamRef>& params, double lr);

  double momentum() const { return momentum_; }
  const std::vector<Tensor>& velocity() const { return velocity_; }

 private:
  double momentum_;
  std::vector<Tensor> velocity_;
};

struct SchedulerConfig {
  double base_lr = 0.01;
  double factor = 5.0;
  std::size_t patience = 3;
  double stop_below = 1.6e-5;
};

enum class SchedulerEvent { kNone, kReduced, kStop };

// Reduces the rate after `patience` consecutive epochs without a strict
// improvement of the best validation loss; the counter restarts after each
// reduction. The rate is base / factor^n, recomputed from n every time.
class PlateauScheduler {
 public:
  explicit PlateauScheduler(SchedulerConfig cfg = {}) : cfg_(cfg) {}

  SchedulerEvent step(double validation_loss);

  double lr() const;
  std::size_t reductions() const { return reductions_; }
  double best() const { return best_; }
  std::size_t epochs_since_improvement() const { return stale_; }
  bool stopped() const { return stopped_; }
  const SchedulerConfig& config() const { return cfg_; }

 private:
  SchedulerConfig cfg_;
  std::size_t reductions_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stale_ = 0;
  bool stopped_ = false;
};

struct TrainConfig {
  ModelConfig model;
  std::string manifest;
  std::string train_split = "train";
  std::string valid_split = "valid";
  std::string out_dir = "run";
  std::size_t batch_size = 23;
  std::size_t max_epochs = 0;       // 0: until the scheduler stops
  std::size_t steps_per_epoch = 0;  // 0: floor(train clips / batch size)
  double momentum = 0.9;
  SchedulerConfig scheduler;
  std::uint64_t seed = 0;
  std::size_t prefetch = 4;  // batches assembled ahead of the loop
  std::size_t eval_batch = 16;
  double max_seconds = 0.0;  // wall-clock budget, 0 for none
  // Before each validation pass, re-estimate batch-norm statistics from this
  // many fresh training batches under the current weights. 0 keeps the
  // running averages. With few steps per epoch the running averages trail the
  // weights far enough to distort the validation loss the scheduler sees.
  std::size_t bn_refresh_batches = 0;
};

// "model" may be an inline object or a path; relative paths resolve against
// base_dir. Unknown keys throw ValidationError.
TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& base_dir = ".");
TrainConfig load_train_config(const std::string& path);
nlohmann::json to_json(const TrainConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;  // rate used during the epoch
  double seconds = 0.0;
  SchedulerEvent event = SchedulerEvent::kNone;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  std::string checkpoint;  // best-validation model
  std::string trace_csv;
  std::string stop_reason;  // "scheduler", "max_epochs", "time_budget"
  std::size_t steps_per_epoch = 0;
  double seconds = 0.0;
};

// Mean chunk BCE over every consecutive 3 s window of every clip, eval mode.
double validation_loss(Model& model, const ClipSet& clips, std::size_t batch = 16);

// Each step draws batch_size (clip, offset) pairs from the seeded sampler;
// a producer thread assembles them into tensors through a bounded queue.
// Writes trace.csv and best.ckpt into cfg.out_dir (created if needed).
TrainReport train(Model& model, const ClipSet& train_clips, const ClipSet& valid_clips, const TrainConfig& cfg,
                  std::ostream* log = nullptr);

// Loads the manifest, reads every train/valid clip up front (any failure is an
// error before the first step), builds the model from cfg.model and trains.
TrainReport train(const TrainConfig& cfg, std::ostream* log = nullptr);

std::string trace_to_csv(const TrainReport& r);

// Repeated steps on one fixed batch; returns the loss before each step and
// stops early once the loss falls below target.
std::vector<double> overfit_batch(Model& model, const Tensor& x, const Tensor& targets, std::size_t steps, double lr,
                                  double momentum = 0.9, double target = 0.0);

}  // namespace muslcat
