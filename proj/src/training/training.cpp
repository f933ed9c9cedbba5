#include "pemvc/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "pemvc/cellsim.hpp"
#include "pemvc/errors.hpp"
#include "pemvc/ops.hpp"
#include "pemvc/optim.hpp"
#include "pemvc/text.hpp"

namespace pemvc::training {

using datapipe::PairedSample;
using datapipe::Task;
using nn::Tensor;

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("train.lr must be positive");
  if (mix_ratio && !(*mix_ratio >= 0 && *mix_ratio <= 1)) throw ConfigError("train.mix_ratio must lie in [0, 1]");
  if (eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
  if (!(plateau_factor > 0 && plateau_factor < 1)) throw ConfigError("train.plateau_factor must lie in (0, 1)");
  if (plateau_patience < 0) throw ConfigError("train.plateau_patience must be >= 0");
  if (!(min_lr >= 0)) throw ConfigError("train.min_lr must be >= 0");
}

Json to_json(const TrainConfig& c) {
  Json j{{"batch_size", c.batch_size}, {"epochs", c.epochs}, {"lr", c.lr}};
  j["mix_ratio"] = c.mix_ratio ? Json(*c.mix_ratio) : Json(nullptr);
  j["seed"] = c.seed;
  j["eval_every"] = c.eval_every;
  j["plateau_factor"] = c.plateau_factor;
  j["plateau_patience"] = c.plateau_patience;
  j["min_lr"] = c.min_lr;
  return j;
}

TrainConfig train_config_from_json(const Json& j, const std::string& path) {
  JsonFields f(j, path,
               {"batch_size", "epochs", "lr", "mix_ratio", "seed", "eval_every", "plateau_factor",
                "plateau_patience", "min_lr"});
  TrainConfig c;
  f.get("batch_size", c.batch_size);
  f.get("epochs", c.epochs);
  f.get("lr", c.lr);
  if (f.has("mix_ratio") && !f.at("mix_ratio").is_null()) c.mix_ratio = f.require<double>("mix_ratio");
  f.get("seed", c.seed);
  f.get("eval_every", c.eval_every);
  f.get("plateau_factor", c.plateau_factor);
  f.get("plateau_patience", c.plateau_patience);
  f.get("min_lr", c.min_lr);
  c.validate();
  return c;
}

namespace {

std::string fmt_metric(double v) { return std::isnan(v) ? std::string("nan") : format_sci(v, 9); }

}  // namespace

void write_history(const std::filesystem::path& path, const TrainHistory& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,steps,train_loss,train_op_pol,train_op_op,val_op_pol,val_op_op,lr,best\n";
  for (const auto& e : history.epochs) {
    out << e.epoch << ',' << e.steps << ',' << fmt_metric(e.train_loss) << ',' << fmt_metric(e.train_op_pol) << ','
        << fmt_metric(e.train_op_op) << ',' << fmt_metric(e.val_op_pol) << ',' << fmt_metric(e.val_op_op) << ','
        << format_sci(e.lr, 6) << ',' << (e.best ? 1 : 0) << '\n';
  }
}

void write_timing(const std::filesystem::path& path, const TrainHistory& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,wall_s\n";
  for (const auto& e : history.epochs) out << e.epoch << ',' << format_fixed(e.wall_s, 3) << '\n';
}

Tensor<float> as_sequence(const std::vector<float>& values, std::size_t channels) {
  if (channels == 0 || values.size() % channels != 0) throw ShapeError("sequence size not divisible by channels");
  return Tensor<float>::from({values.size() / channels, channels}, values);
}

Tensor<float> validity_mask(const PairedSample& s) {
  std::vector<float> m(s.y.size(), 0.0f);
  std::fill_n(m.begin(), std::min<std::size_t>(s.valid_len, m.size()), 1.0f);
  const std::size_t n = m.size();
  return Tensor<float>::from({n, 1}, std::move(m));
}

namespace {

Tensor<float> target_of(const PairedSample& s) { return Tensor<float>::from({s.y.size(), 1}, s.y); }

// Reuses the encoder output across samples that share an encoder window.
class LatentCache {
 public:
  explicit LatentCache(model::Transformer<float>& m) : model_(m) {}

  const Tensor<float>& get(const PairedSample& s) {
    for (auto& e : entries_) {
      if (e.sample->task == s.task && e.sample->cycle_index == s.cycle_index &&
          e.sample->window_offset == s.window_offset && e.sample->x_enc == s.x_enc)
        return e.z;
    }
    if (entries_.size() >= kMaxEntries) entries_.erase(entries_.begin());
    entries_.push_back({&s, model_.encode(as_sequence(s.x_enc, model_.config().channels))});
    return entries_.back().z;
  }

 private:
  static constexpr std::size_t kMaxEntries = 16;
  struct Entry {
    const PairedSample* sample;
    Tensor<float> z;
  };
  model::Transformer<float>& model_;
  std::vector<Entry> entries_;
};

struct SseCount {
  double sse = 0;
  std::size_t count = 0;
};

// Restores the model's training flag on scope exit.
class EvalMode {
 public:
  explicit EvalMode(model::Transformer<float>& m) : m_(m), was_(m.training()) {
    m_.set_training(false);
  }
  ~EvalMode() { m_.set_training(was_); }

 private:
  model::Transformer<float>& m_;
  bool was_;
};

SseCount masked_sse_eval(model::Transformer<float>& model, std::span<const PairedSample> samples) {
  nn::NoGradGuard guard;
  EvalMode mode(model);
  LatentCache cache(model);
  SseCount acc;
  for (const auto& s : samples) {
    const auto& z = cache.get(s);
    auto pred = model.decode(as_sequence(s.x_dec, model.config().channels), z);
    const auto p = pred.data();
    const std::size_t n = std::min<std::size_t>(s.valid_len, s.y.size());
    for (std::size_t t = 0; t < n; ++t) {
      const double d = static_cast<double>(p[t]) - static_cast<double>(s.y[t]);
      acc.sse += d * d;
    }
    acc.count += n;
  }
  return acc;
}

}  // namespace

double task_mse(model::Transformer<float>& model, std::span<const PairedSample> samples) {
  if (samples.empty()) throw DataError("evaluate: empty split");
  const SseCount acc = masked_sse_eval(model, samples);
  if (acc.count == 0) throw DataError("evaluate: no valid positions");
  return acc.sse / static_cast<double>(acc.count);
}

EvalReport evaluate(model::Transformer<float>& model, std::span<const PairedSample> op_pol,
                    std::span<const PairedSample> op_op, const datapipe::NormStats& stats) {
  EvalReport report;
  auto fill = [&](const char* key, std::span<const PairedSample> samples, Task task) {
    if (samples.empty()) throw DataError(std::string("evaluate: empty ") + key + " split");
    for (const auto& s : samples)
      if (s.task != task) throw DataError(std::string("evaluate: mixed tasks in ") + key + " split");
    const SseCount acc = masked_sse_eval(model, samples);
    if (acc.count == 0) throw DataError(std::string("evaluate: no valid positions in ") + key);
    const double sd = stats.std[static_cast<std::size_t>(datapipe::target_channel(task))];
    TaskError e;
    e.normalized = acc.sse / static_cast<double>(acc.count);
    e.physical = e.normalized * sd * sd;
    e.samples = samples.size();
    e.positions = acc.count;
    report[key] = e;
  };
  fill("op_op", op_op, Task::op_op);
  fill("op_pol", op_pol, Task::op_pol);
  return report;
}

model::ModelConfig checkpoint_model_config(const nn::Checkpoint& ckpt) {
  if (!ckpt.meta.is_object() || !ckpt.meta.contains("model"))
    throw DataError("checkpoint has no model configuration");
  auto cfg = model::model_config_from_json(ckpt.meta.at("model"), "checkpoint.model");
  if (ckpt.meta.contains("config_hash")) {
    const auto stored = ckpt.meta.at("config_hash").get<std::string>();
    if (stored != model::config_hash(cfg))
      throw DataError("checkpoint config hash " + stored + " does not match its model config (" +
                      model::config_hash(cfg) + ")");
  }
  return cfg;
}

datapipe::NormStats checkpoint_norm_stats(const nn::Checkpoint& ckpt) {
  if (!ckpt.meta.is_object() || !ckpt.meta.contains("norm")) throw DataError("checkpoint has no normalization stats");
  return datapipe::norm_stats_from_json(ckpt.meta.at("norm"));
}

model::Transformer<float> load_model(const nn::Checkpoint& ckpt) {
  model::Transformer<float> m(checkpoint_model_config(ckpt));
  nn::restore(ckpt.params, m.parameter_names(), m.parameters());
  return m;
}

namespace {

struct EpochPlan {
  // Each batch holds indices into one task's training samples.
  std::vector<std::pair<Task, std::vector<std::size_t>>> batches;
};

std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  // Fisher-Yates with explicit draws: std::shuffle is not specified identically
  // across standard libraries.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

// Draws `count` indices from a sequence of reshuffled permutations of [0, n).
std::vector<std::size_t> draw(std::size_t n, std::size_t count, std::mt19937_64& rng) {
  std::vector<std::size_t> out;
  out.reserve(count);
  while (out.size() < count) {
    const auto perm = shuffled(n, rng);
    for (std::size_t i = 0; i < perm.size() && out.size() < count; ++i) out.push_back(perm[i]);
  }
  return out;
}

std::size_t op_op_count(const TrainConfig& cfg, std::size_t n_pol, std::size_t n_op) {
  if (!cfg.mix_ratio) return n_op;
  const double r = *cfg.mix_ratio;
  if (r <= 0) return 0;
  if (r >= 1) return n_op;
  return static_cast<std::size_t>(std::llround(static_cast<double>(n_pol) * r / (1.0 - r)));
}

EpochPlan plan_epoch(const TrainConfig& cfg, std::size_t n_pol, std::size_t n_op, std::size_t epoch) {
  std::mt19937_64 pol_rng(cellsim::derive_seed(cfg.seed, 100000 + epoch));
  std::mt19937_64 op_rng(cellsim::derive_seed(cfg.seed, 200000 + epoch));
  std::mt19937_64 mix_rng(cellsim::derive_seed(cfg.seed, 300000 + epoch));

  const bool only_op = cfg.mix_ratio && *cfg.mix_ratio >= 1.0;
  const std::size_t pol_used = only_op ? 0 : n_pol;
  const std::size_t op_used = n_op == 0 ? 0 : op_op_count(cfg, n_pol, n_op);

  std::vector<std::vector<std::size_t>> pol_batches, op_batches;
  auto chunk = [&](const std::vector<std::size_t>& idx, std::vector<std::vector<std::size_t>>& out) {
    for (std::size_t i = 0; i < idx.size(); i += cfg.batch_size)
      out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(i),
                       idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), i + cfg.batch_size)));
  };
  if (pol_used) chunk(shuffled(n_pol, pol_rng), pol_batches);
  if (op_used) chunk(draw(n_op, op_used, op_rng), op_batches);

  // Interleave: a seeded permutation of task labels. Only drawn when both
  // tasks are present so single-task epochs follow the single-task sequence.
  std::vector<Task> order(pol_batches.size(), Task::op_pol);
  order.insert(order.end(), op_batches.size(), Task::op_op);
  if (!pol_batches.empty() && !op_batches.empty()) {
    const auto perm = shuffled(order.size(), mix_rng);
    std::vector<Task> mixed(order.size());
    for (std::size_t i = 0; i < perm.size(); ++i) mixed[i] = order[perm[i]];
    order = std::move(mixed);
  }
  EpochPlan plan;
  std::size_t ip = 0, io = 0;
  for (Task t : order) {
    if (t == Task::op_pol) plan.batches.emplace_back(t, std::move(pol_batches[ip++]));
    else plan.batches.emplace_back(t, std::move(op_batches[io++]));
  }
  return plan;
}

Json meta_for(const model::ModelConfig& mc, const TrainConfig& tc, const datapipe::PreparedData& data,
              std::size_t epoch, double val_pol) {
  Json meta{{"model", model::to_json(mc)},
            {"config_hash", model::config_hash(mc)},
            {"norm", datapipe::to_json(data.stats)},
            {"train", to_json(tc)},
            {"epoch", epoch}};
  meta["val_op_pol"] = std::isfinite(val_pol) ? Json(val_pol) : Json(nullptr);
  return meta;
}

}  // namespace

TrainResult train(const model::ModelConfig& model_cfg, const TrainConfig& cfg, const datapipe::PreparedData& data,
                  std::ostream* log) {
  model_cfg.validate();
  cfg.validate();
  const auto& pol_train = data.op_pol.train;
  const auto& op_train = data.op_op.train;
  const bool need_pol = !(cfg.mix_ratio && *cfg.mix_ratio >= 1.0);
  const bool need_op = cfg.mix_ratio && *cfg.mix_ratio > 0.0;
  if (pol_train.empty() && op_train.empty()) throw DataError("train: empty training shards");
  if (need_pol && pol_train.empty()) throw DataError("train: no OP-POL training samples");
  if (need_op && op_train.empty()) throw DataError("train: mix_ratio > 0 but no OP-OP training samples");
  for (const auto& s : pol_train)
    if (s.task != Task::op_pol) throw DataError("train: OP-POL shard holds a foreign task");
  for (const auto& s : op_train)
    if (s.task != Task::op_op) throw DataError("train: OP-OP shard holds a foreign task");

  model::Transformer<float> model(model_cfg);
  auto& params = model.parameters();
  nn::AdamState adam;
  adam.lr = cfg.lr;
  nn::PlateauScheduler sched(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr);
  const std::size_t channels = model_cfg.channels;

  if (log) {
    *log << "model " << (model_cfg.baseline ? "vanilla" : "patch") << " tokens=" << model_cfg.tokens().n_patches()
         << " params=" << model.parameter_count() << " hash=" << model::config_hash(model_cfg) << '\n';
    *log << "train samples op_pol=" << pol_train.size() << " op_op=" << op_train.size()
         << " val op_pol=" << data.op_pol.val.size() << " op_op=" << data.op_op.val.size() << '\n';
  }

  TrainResult result;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t steps = 0;
  const bool have_val_pol = !data.op_pol.val.empty();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    model.set_training(true);
    model.reseed_dropout(cellsim::derive_seed(cfg.seed, 400000 + epoch));
    const EpochPlan plan = plan_epoch(cfg, pol_train.size(), op_train.size(), epoch);

    SseCount task_acc[2];
    for (const auto& [task, idx] : plan.batches) {
      const auto& pool = task == Task::op_pol ? pol_train : op_train;
      std::size_t valid = 0;
      for (std::size_t i : idx) valid += std::min<std::size_t>(pool[i].valid_len, pool[i].y.size());
      if (valid == 0) continue;
      model.zero_grad();
      double batch_sse = 0;
      for (std::size_t i : idx) {
        const auto& s = pool[i];
        auto pred = model.forward(as_sequence(s.x_enc, channels), as_sequence(s.x_dec, channels));
        auto loss = nn::masked_sse(pred, target_of(s), validity_mask(s), static_cast<float>(valid));
        const double l = static_cast<double>(loss.item());
        if (!std::isfinite(l))
          throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(steps + 1) + " (" + datapipe::to_string(task) + " sample cycle " +
                               std::to_string(s.cycle_index) + ")");
        batch_sse += l * static_cast<double>(valid);
        loss.backward();
      }
      adam.lr = sched.lr();
      nn::adam_step(params, adam);
      ++steps;
      auto& acc = task_acc[static_cast<std::size_t>(task)];
      acc.sse += batch_sse;
      acc.count += valid;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.steps = steps;
    auto ratio = [](const SseCount& a) {
      return a.count ? a.sse / static_cast<double>(a.count) : std::numeric_limits<double>::quiet_NaN();
    };
    rec.train_op_pol = ratio(task_acc[0]);
    rec.train_op_op = ratio(task_acc[1]);
    rec.train_loss = ratio({task_acc[0].sse + task_acc[1].sse, task_acc[0].count + task_acc[1].count});
    rec.val_op_pol = rec.val_op_op = std::numeric_limits<double>::quiet_NaN();
    rec.lr = sched.lr();

    const bool eval_now = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
    if (eval_now) {
      if (have_val_pol) rec.val_op_pol = task_mse(model, data.op_pol.val);
      if (!data.op_op.val.empty()) rec.val_op_op = task_mse(model, data.op_op.val);
      // Without OP-POL validation data the training loss drives selection.
      const double monitored = have_val_pol ? rec.val_op_pol : rec.train_loss;
      if (!std::isfinite(monitored))
        throw NumericalError("non-finite monitored loss at epoch " + std::to_string(epoch));
      if (monitored < best_val) {
        best_val = monitored;
        rec.best = true;
        result.best_epoch = epoch;
        result.best.params = nn::snapshot(model.parameter_names(), params);
        result.best.meta = meta_for(model_cfg, cfg, data, epoch, rec.val_op_pol);
      }
      sched.step(monitored);
    }
    rec.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.epochs.push_back(rec);
    if (log) {
      *log << "epoch " << epoch << "/" << cfg.epochs << " loss=" << fmt_metric(rec.train_loss)
           << " pol=" << fmt_metric(rec.train_op_pol) << " op=" << fmt_metric(rec.train_op_op)
           << " val_pol=" << fmt_metric(rec.val_op_pol) << " val_op=" << fmt_metric(rec.val_op_op)
           << " lr=" << format_sci(rec.lr, 3) << (rec.best ? " *" : "") << " (" << format_fixed(rec.wall_s, 1)
           << " s)\n";
      log->flush();
    }
  }

  result.last.params = nn::snapshot(model.parameter_names(), params);
  adam.lr = sched.lr();
  result.last.adam = adam;
  result.last.meta = meta_for(model_cfg, cfg, data, cfg.epochs,
                              result.history.epochs.back().val_op_pol);
  return result;
}

}  // namespace pemvc::training
