#include "muslcat/train.hpp"

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include "muslcat/errors.hpp"

namespace muslcat {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_targets(const Tensor& probs, const Tensor& targets, const char* who) {
  if (probs.shape() != targets.shape())
    throw std::invalid_argument(std::string(who) + ": shape " + shape_str(probs.shape()) + " vs targets " +
                                shape_str(targets.shape()));
  if (probs.empty()) throw std::invalid_argument(std::string(who) + ": empty batch");
  for (std::size_t i = 0; i < targets.size(); ++i)
    if (targets[i] != 0.0 && targets[i] != 1.0)
      throw ValidationError(std::string(who) + ": target[" + std::to_string(i) + "] = " +
                            std::to_string(targets[i]) + " is not 0 or 1");
}

double bce_term(double p, double y) {
  const double q = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  return -(y * std::log(q) + (1.0 - y) * std::log(1.0 - q));
}

}  // namespace

double bce_loss(const Tensor& probs, const Tensor& targets) {
  check_targets(probs, targets, "bce_loss");
  long double s = 0.0L;
  for (std::size_t i = 0; i < probs.size(); ++i) s += bce_term(probs[i], targets[i]);
  return double(s / probs.size());
}

BceResult bce_with_logits(const Tensor& logits, const Tensor& targets) {
  check_targets(logits, targets, "bce_with_logits");
  BceResult r;
  r.grad_logits = Tensor(logits.shape());
  const double n = double(logits.size());
  long double s = 0.0L;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = sigmoid(logits[i]);
    s += bce_term(p, targets[i]);
    r.grad_logits[i] = (p - targets[i]) / n;
  }
  r.loss = double(s / n);
  return r;
}

void NesterovSGD::step(const std::vector<ParamRef>& params, double lr) {
  if (velocity_.empty()) {
    for (const auto& p : params) velocity_.emplace_back(p.param->value.shape());
  } else if (velocity_.size() != params.size()) {
    throw std::invalid_argument("NesterovSGD: parameter list changed size");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor& g = params[k].param->grad;
    if (g.shape() != params[k].param->value.shape())
      throw std::invalid_argument("NesterovSGD: gradient shape mismatch for " + params[k].name);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(g[i])) {
        std::ostringstream os;
        os << "non-finite gradient " << g[i] << " at " << params[k].name << "[" << i << "]; step aborted";
        throw std::runtime_error(os.str());
      }
  }
  const double m = momentum_;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& theta = params[k].param->value;
    const Tensor& g = params[k].param->grad;
    Tensor& v = velocity_[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = m * v[i] - lr * g[i];
      theta[i] += m * v[i] - lr * g[i];
    }
  }
}

double PlateauScheduler::lr() const { return cfg_.base_lr / std::pow(cfg_.factor, double(reductions_)); }

SchedulerEvent PlateauScheduler::step(double validation_loss) {
  if (stopped_) return SchedulerEvent::kStop;
  if (validation_loss < best_) {
    best_ = validation_loss;
    stale_ = 0;
    return SchedulerEvent::kNone;
  }
  if (++stale_ < cfg_.patience) return SchedulerEvent::kNone;
  ++reductions_;
  stale_ = 0;
  // Relative slack so 0.01 / 5^4 does not stop on representation error.
  if (lr() < cfg_.stop_below * (1.0 - 1e-12)) {
    stopped_ = true;
    return SchedulerEvent::kStop;
  }
  return SchedulerEvent::kReduced;
}

// ---------------------------------------------------------------------------
// Config

TrainConfig train_config_from_json(const json& j, const std::string& base_dir) {
  if (!j.is_object()) throw ValidationError("train config: expected a JSON object");
  static const char* known[] = {"model",      "manifest",        "train_split", "valid_split", "out_dir",
                                "batch_size", "epochs",          "steps_per_epoch", "optimizer", "seed",
                                "prefetch",   "eval_batch",      "max_seconds", "bn_refresh_batches"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(std::begin(known), std::end(known), it.key()) == std::end(known))
      throw ValidationError("train config: unknown field '" + it.key() + "'");
  auto resolve = [&](const std::string& p) {
    const fs::path q = p;
    return (q.is_absolute() ? q : fs::path(base_dir) / q).lexically_normal().string();
  };
  auto get = [&](const json& o, const char* key, auto fallback) {
    if (!o.contains(key)) return fallback;
    try {
      return o.at(key).get<decltype(fallback)>();
    } catch (const json::exception&) {
      throw ValidationError(std::string("train config: field '") + key + "' has the wrong type");
    }
  };

  TrainConfig c;
  if (!j.contains("model")) throw ValidationError("train config: missing 'model'");
  if (j["model"].is_string())
    c.model = load_model_config(resolve(j["model"].get<std::string>()));
  else
    c.model = model_config_from_json(j["model"]);
  if (!j.contains("manifest") || !j["manifest"].is_string())
    throw ValidationError("train config: missing string field 'manifest'");
  c.manifest = resolve(j["manifest"].get<std::string>());
  c.train_split = get(j, "train_split", c.train_split);
  c.valid_split = get(j, "valid_split", c.valid_split);
  c.out_dir = resolve(get(j, "out_dir", c.out_dir));
  c.batch_size = get(j, "batch_size", c.batch_size);
  c.max_epochs = get(j, "epochs", c.max_epochs);
  c.steps_per_epoch = get(j, "steps_per_epoch", c.steps_per_epoch);
  c.seed = get(j, "seed", c.seed);
  c.prefetch = get(j, "prefetch", c.prefetch);
  c.eval_batch = get(j, "eval_batch", c.eval_batch);
  c.max_seconds = get(j, "max_seconds", c.max_seconds);
  c.bn_refresh_batches = get(j, "bn_refresh_batches", c.bn_refresh_batches);
  if (j.contains("optimizer")) {
    const json& o = j["optimizer"];
    for (auto it = o.begin(); it != o.end(); ++it)
      if (it.key() != "lr" && it.key() != "momentum" && it.key() != "factor" && it.key() != "patience" &&
          it.key() != "stop_below")
        throw ValidationError("train config: unknown optimizer field '" + it.key() + "'");
    c.scheduler.base_lr = get(o, "lr", c.scheduler.base_lr);
    c.momentum = get(o, "momentum", c.momentum);
    c.scheduler.factor = get(o, "factor", c.scheduler.factor);
    c.scheduler.patience = get(o, "patience", c.scheduler.patience);
    c.scheduler.stop_below = get(o, "stop_below", c.scheduler.stop_below);
  }
  if (c.batch_size == 0) throw ValidationError("train config: batch_size must be positive");
  if (c.prefetch == 0) throw ValidationError("train config: prefetch must be positive");
  if (c.eval_batch == 0) throw ValidationError("train config: eval_batch must be positive");
  if (!(c.scheduler.base_lr > 0) || !(c.scheduler.factor > 1))
    throw ValidationError("train config: need lr > 0 and factor > 1");
  if (c.scheduler.patience == 0) throw ValidationError("train config: patience must be positive");
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open train config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path + ": invalid JSON: " + e.what());
  }
  return train_config_from_json(j, fs::path(path).parent_path().string());
}

json to_json(const TrainConfig& c) {
  return {{"model", to_json(c.model)},
          {"manifest", c.manifest},
          {"train_split", c.train_split},
          {"valid_split", c.valid_split},
          {"out_dir", c.out_dir},
          {"batch_size", c.batch_size},
          {"epochs", c.max_epochs},
          {"steps_per_epoch", c.steps_per_epoch},
          {"optimizer",
           {{"lr", c.scheduler.base_lr},
            {"momentum", c.momentum},
            {"factor", c.scheduler.factor},
            {"patience", c.scheduler.patience},
            {"stop_below", c.scheduler.stop_below}}},
          {"seed", c.seed},
          {"prefetch", c.prefetch},
          {"eval_batch", c.eval_batch},
          {"max_seconds", c.max_seconds},
          {"bn_refresh_batches", c.bn_refresh_batches}};
}

// ---------------------------------------------------------------------------
// Loop

namespace {

struct Pick {
  std::size_t clip, offset;
};

struct Batch {
  Tensor x, y;
};

// Single producer, single consumer, bounded.
class BatchQueue {
 public:
  explicit BatchQueue(std::size_t capacity) : capacity_(capacity) {}

  bool push(Batch b) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return q_.size() < capacity_ || closed_; });
    if (closed_) return false;
    q_.push_back(std::move(b));
    not_empty_.notify_one();
    return true;
  }
  std::optional<Batch> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return !q_.empty() || closed_ || error_; });
    if (error_) std::rethrow_exception(error_);
    if (q_.empty()) return std::nullopt;
    Batch b = std::move(q_.front());
    q_.pop_front();
    not_full_.notify_one();
    return b;
  }
  void fail(std::exception_ptr e) {
    std::lock_guard lock(mu_);
    error_ = e;
    not_empty_.notify_all();
  }
  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_full_.notify_all();
    not_empty_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::deque<Batch> q_;
  std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  bool closed_ = false;
  std::exception_ptr error_;
};

Batch assemble(const ClipSet& clips, const Pick* picks, std::size_t batch, std::size_t length, std::size_t tags) {
  Batch b{Tensor({batch, 1, length}), Tensor({batch, tags})};
  for (std::size_t i = 0; i < batch; ++i) {
    copy_window(clips.audio[picks[i].clip], picks[i].offset, length, b.x.data() + i * length);
    const auto& t = clips.records[picks[i].clip].tags;
    for (std::size_t k = 0; k < tags; ++k) b.y[i * tags + k] = t[k];
  }
  return b;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

double validation_loss(Model& model, const ClipSet& clips, std::size_t batch) {
  const std::size_t L = model.config().input_length, T = model.config().n_tags;
  std::vector<Pick> picks;
  for (std::size_t c = 0; c < clips.audio.size(); ++c)
    for (std::size_t k = 0; k < eval_chunk_count(clips.audio[c].samples.size(), L); ++k) picks.push_back({c, k * L});
  if (picks.empty()) throw ValidationError("validation set is empty");
  long double total = 0.0L;
  for (std::size_t s = 0; s < picks.size(); s += batch) {
    const std::size_t b = std::min(batch, picks.size() - s);
    const Batch bt = assemble(clips, &picks[s], b, L, T);
    total += (long double)bce_loss(model_forward(model, bt.x), bt.y) * b;
  }
  return double(total / picks.size());
}

std::string trace_to_csv(const TrainReport& r) {
  std::ostringstream os;
  os << std::setprecision(17) << "epoch,train_loss,val_loss,lr\n";
  for (const auto& e : r.epochs) os << e.epoch << "," << e.train_loss << "," << e.val_loss << "," << e.lr << "\n";
  return os.str();
}

TrainReport train(Model& model, const ClipSet& train_clips, const ClipSet& valid_clips, const TrainConfig& cfg,
                  std::ostream* log) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t L = model.config().input_length, T = model.config().n_tags;
  const std::size_t N = train_clips.audio.size();
  if (N == 0) throw ValidationError("training set is empty");
  if (valid_clips.audio.empty()) throw ValidationError("validation set is empty");
  for (const ClipSet* s : {&train_clips, &valid_clips})
    for (const auto& r : s->records)
      if (r.tags.size() != T)
        throw ValidationError(r.path + ": " + std::to_string(r.tags.size()) + " tags, model predicts " +
                              std::to_string(T));
  const std::size_t B = cfg.batch_size;
  const std::size_t steps = cfg.steps_per_epoch ? cfg.steps_per_epoch : N / B;
  if (steps == 0)
    throw ValidationError(std::to_string(N) + " training clips cannot fill one batch of " + std::to_string(B));

  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw ValidationError("cannot create output directory " + cfg.out_dir + ": " + ec.message());

  TrainReport report;
  report.checkpoint = (fs::path(cfg.out_dir) / "best.ckpt").string();
  report.trace_csv = (fs::path(cfg.out_dir) / "trace.csv").string();
  report.best_val_loss = std::numeric_limits<double>::infinity();
  report.steps_per_epoch = steps;

  PlateauScheduler sched(cfg.scheduler);
  NesterovSGD opt(cfg.momentum);
  const auto params = parameters_of(model);
  Rng sampler(derive_seed(cfg.seed, 0x5A3D));

  for (std::size_t epoch = 1;; ++epoch) {
    if (cfg.max_epochs && epoch > cfg.max_epochs) {
      report.stop_reason = "max_epochs";
      break;
    }
    if (cfg.max_seconds > 0 && seconds_since(t0) > cfg.max_seconds) {
      report.stop_reason = "time_budget";
      break;
    }
    const auto te = std::chrono::steady_clock::now();
    const double lr = sched.lr();

    // The sampler fixes the order; the producer only does the copying.
    std::vector<Pick> plan(steps * B);
    std::uniform_int_distribution<std::size_t> pick_clip(0, N - 1);
    for (auto& p : plan) {
      p.clip = pick_clip(sampler);
      p.offset = random_offset(train_clips.audio[p.clip].samples.size(), L, sampler);
    }
    BatchQueue queue(cfg.prefetch);
    std::thread producer([&] {
      try {
        for (std::size_t s = 0; s < steps; ++s)
          if (!queue.push(assemble(train_clips, &plan[s * B], B, L, T))) return;
      } catch (...) {
        queue.fail(std::current_exception());
      }
    });

    long double loss_sum = 0.0L;
    try {
      for (std::size_t s = 0; s < steps; ++s) {
        auto batch = queue.pop();
        if (!batch) throw std::logic_error("prefetch queue closed early");
        zero_grads(model);
        const Tensor logits = model.forward(batch->x, Mode::kTrain);
        const BceResult bce = bce_with_logits(logits, batch->y);
        if (!std::isfinite(bce.loss))
          throw std::runtime_error("non-finite training loss at epoch " + std::to_string(epoch) + " step " +
                                   std::to_string(s + 1));
        model.backward(bce.grad_logits);
        opt.step(params, lr);
        loss_sum += bce.loss;
      }
    } catch (...) {
      queue.close();
      producer.join();
      throw;
    }
    queue.close();
    producer.join();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = double(loss_sum / steps);
    if (cfg.bn_refresh_batches) {
      std::vector<Pick> extra(cfg.bn_refresh_batches * B);
      for (auto& p : extra) {
        p.clip = pick_clip(sampler);
        p.offset = random_offset(train_clips.audio[p.clip].samples.size(), L, sampler);
      }
      BatchNormRefresh guard;
      for (std::size_t k = 0; k < cfg.bn_refresh_batches; ++k)
        model.forward(assemble(train_clips, &extra[k * B], B, L, T).x, Mode::kTrain);
    }
    rec.val_loss = validation_loss(model, valid_clips, cfg.eval_batch);
    if (rec.val_loss < report.best_val_loss) {
      report.best_val_loss = rec.val_loss;
      report.best_epoch = epoch;
      save_checkpoint(report.checkpoint, model);
    }
    rec.event = sched.step(rec.val_loss);
    rec.seconds = seconds_since(te);
    report.epochs.push_back(rec);
    {
      std::ofstream csv(report.trace_csv);
      csv << trace_to_csv(report);
    }
    if (log) {
      *log << "epoch " << epoch << "  train " << std::fixed << std::setprecision(5) << rec.train_loss << "  valid "
           << rec.val_loss << std::defaultfloat << "  lr " << rec.lr << "  (" << std::setprecision(3) << rec.seconds
           << " s)" << (rec.event == SchedulerEvent::kReduced ? "  lr reduced"
                        : rec.event == SchedulerEvent::kStop  ? "  stop"
                                                              : "")
           << std::setprecision(6) << "\n";
    }
    if (rec.event == SchedulerEvent::kStop) {
      report.stop_reason = "scheduler";
      break;
    }
  }
  report.seconds = seconds_since(t0);
  return report;
}

TrainReport train(const TrainConfig& cfg, std::ostream* log) {
  const Manifest m = load_manifest(cfg.manifest);
  if (m.tags.size() != cfg.model.n_tags)
    throw ValidationError("manifest " + cfg.manifest + " declares " + std::to_string(m.tags.size()) +
                          " tags but the model config has n_tags " + std::to_string(cfg.model.n_tags));
  const auto tr = m.split(cfg.train_split);
  const auto va = m.split(cfg.valid_split);
  if (tr.empty()) throw ValidationError("manifest " + cfg.manifest + " has no '" + cfg.train_split + "' records");
  if (va.empty()) throw ValidationError("manifest " + cfg.manifest + " has no '" + cfg.valid_split + "' records");
  const ClipSet train_clips = load_clips(tr, /*strict=*/true);
  const ClipSet valid_clips = load_clips(va, /*strict=*/true);
  Model model(cfg.model);
  if (log)
    *log << "model " << cfg.model.name << ": " << count_parameters(model) << " parameters, " << train_clips.audio.size()
         << " train / " << valid_clips.audio.size() << " valid clips\n";
  return train(model, train_clips, valid_clips, cfg, log);
}

std::vector<double> overfit_batch(Model& model, const Tensor& x, const Tensor& targets, std::size_t steps, double lr,
                                  double momentum, double target) {
  NesterovSGD opt(momentum);
  const auto params = parameters_of(model);
  std::vector<double> losses;
  for (std::size_t s = 0; s < steps; ++s) {
    zero_grads(model);
    const BceResult bce = bce_with_logits(model.forward(x, Mode::kTrain), targets);
    losses.push_back(bce.loss);
    if (bce.loss < target) break;
    model.backward(bce.grad_logits);
    opt.step(params, lr);
  }
  return losses;
}

}  // namespace muslcat
