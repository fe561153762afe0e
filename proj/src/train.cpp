#include "rahf/train.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "rahf/errors.hpp"
#include "rahf/util.hpp"

namespace rahf {

void TrainConfig::validate(const std::string& key) const {
  auto fail = [&](const std::string& field, const std::string& msg) { throw ConfigError(key + "." + field + ": " + msg); };
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) fail("learning_rate", "must be > 0");
  if (epochs < 0) fail("epochs", "must be >= 0");
  if (steps < 0) fail("steps", "must be >= 0");
  if (epochs == 0 && steps == 0) fail("steps", "one of epochs or steps must be positive");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (optimizer != "adamw") fail("optimizer", "unsupported optimizer '" + optimizer + "'");
  if (schedule != "cosine" && schedule != "constant" && schedule != "linear") {
    fail("schedule", "must be cosine, constant or linear");
  }
  if (warmup_fraction < 0 || warmup_fraction >= 1) fail("warmup_fraction", "must lie in [0, 1)");
  if (grad_clip < 0) fail("grad_clip", "must be >= 0");
  if (weight_decay < 0) fail("weight_decay", "must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1)) fail("beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) fail("beta2", "must lie in [0, 1)");
  if (!(eps > 0)) fail("eps", "must be > 0");
}

json TrainConfig::to_json() const {
  return json{{"learning_rate", learning_rate}, {"epochs", epochs},
              {"steps", steps},                 {"batch_size", batch_size},
              {"optimizer", optimizer},         {"schedule", schedule},
              {"warmup_fraction", warmup_fraction}, {"grad_clip", grad_clip},
              {"weight_decay", weight_decay},   {"beta1", beta1},
              {"beta2", beta2},                 {"eps", eps},
              {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j, const TrainConfig& defaults) {
  TrainConfig c = defaults;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.optimizer = j.value("optimizer", c.optimizer);
  c.schedule = j.value("schedule", c.schedule);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.seed = j.value("seed", c.seed);
  return c;
}

double scheduled_lr(const TrainConfig& cfg, int step, int total) {
  const int warmup = static_cast<int>(std::floor(cfg.warmup_fraction * total));
  if (step < warmup) {
    return cfg.learning_rate * (step + 1) / (warmup + 1);
  }
  if (cfg.schedule == "constant") return cfg.learning_rate;
  const int span = std::max(1, total - warmup);
  const double frac = std::clamp(static_cast<double>(step - warmup) / span, 0.0, 1.0);
  if (cfg.schedule == "linear") return cfg.learning_rate * (1.0 - frac);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

AdamW::AdamW(const TrainConfig& cfg, std::size_t n)
    : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.eps), weight_decay_(cfg.weight_decay), m_(n, 0.0), v_(n, 0.0) {}

void AdamW::step(std::span<float> params, std::span<const float> grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw ShapeError("AdamW: parameter count changed");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    m_[i] = beta1_ * m_[i] + (1 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1 - beta2_) * g * g;
    const double mh = m_[i] / c1;
    const double vh = v_[i] / c2;
    double p = params[i];
    p -= lr * (mh / (std::sqrt(vh) + eps_) + weight_decay_ * p);
    params[i] = static_cast<float>(p);
  }
}

double clip_global_norm(std::span<float> grads, double max_norm) {
  double sq = 0;
  for (float g : grads) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const auto s = static_cast<float>(max_norm / norm);
    for (auto& g : grads) g *= s;
  }
  return norm;
}

TrainCurve run_training(FloatModel& model, std::size_t n_examples, const TrainConfig& cfg, const LoopOptions& opt,
                        const StepFn& step) {
  if (n_examples == 0) {
    throw DataError(opt.stage + ": no training examples");
  }
  const bool adapter_only = model.base_frozen();
  if (adapter_only && !model.has_adapter()) {
    throw TrainingError(opt.stage + ": base is frozen and no adapter is attached");
  }
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const auto per_epoch = static_cast<int>((n_examples + bs - 1) / bs);
  const int total = cfg.steps > 0 ? cfg.steps : per_epoch * cfg.epochs;

  auto grads = model.make_gradients();
  auto& g = adapter_only ? grads.adapter : grads.base;
  AdamW optim(cfg, g.size());
  std::optional<JsonlWriter> log;
  if (opt.log_path) log.emplace(*opt.log_path);

  TrainCurve curve;
  std::vector<std::size_t> order(n_examples);
  std::size_t cursor = n_examples;
  int epoch = -1;
  double first_loss = 0;
  double epoch_sum = 0;
  int epoch_steps = 0;
  bool all_diverged = true;

  auto close_epoch = [&]() {
    if (epoch_steps == 0) return;
    const double mean = epoch_sum / epoch_steps;
    if (!curve.epoch_means.empty() && mean > curve.epoch_means.back()) {
      spdlog::warn("{}: mean loss rose from {:.6g} to {:.6g} in epoch {}", opt.stage, curve.epoch_means.back(), mean,
                   epoch);
    }
    curve.epoch_means.push_back(mean);
    if (all_diverged && epoch > 0) {
      throw TrainingError(opt.stage + ": diverged, loss stayed above 10x its initial value for epoch " +
                          std::to_string(epoch));
    }
    epoch_sum = 0;
    epoch_steps = 0;
    all_diverged = true;
  };

  for (int s = 0; s < total; ++s) {
    if (cursor >= n_examples) {
      close_epoch();
      ++epoch;
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::mt19937_64 rng(derive_seed(cfg.seed, "epoch" + std::to_string(epoch)));
      shuffle_in_place(order, rng);
      cursor = 0;
    }
    const std::size_t n = std::min(bs, n_examples - cursor);
    std::span<const std::size_t> batch(order.data() + cursor, n);
    cursor += n;

    grads.zero();
    const double loss = step(batch, grads, derive_seed(cfg.seed, "step" + std::to_string(s)));
    if (!std::isfinite(loss)) {
      const std::string id = opt.example_id ? opt.example_id(batch[0]) : std::to_string(batch[0]);
      throw TrainingError(opt.stage + ": non-finite loss at step " + std::to_string(s) + " (batch starting at " + id +
                          ")");
    }
    if (s == 0) first_loss = loss;
    if (!(loss > 10.0 * std::abs(first_loss)) || first_loss == 0) all_diverged = false;
    clip_global_norm(g, cfg.grad_clip);
    const double lr = scheduled_lr(cfg, s, total);
    optim.step(adapter_only ? model.adapter_params() : model.params(), g, lr);

    curve.points.push_back({s, epoch, loss, lr});
    epoch_sum += loss;
    ++epoch_steps;
    if (log) log->write(json{{"step", s}, {"epoch", epoch}, {"split", opt.split}, {"loss", loss}, {"lr", lr}});
  }
  close_epoch();
  curve.steps = total;
  return curve;
}

namespace {

std::vector<StimulusText> items_of(const std::vector<PreferencePair>& pairs, bool chosen) {
  std::vector<StimulusText> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    out.push_back({p.id + (chosen ? ":h" : ":l"), p.query, chosen ? p.chosen : p.rejected});
  }
  return out;
}

}  // namespace

std::vector<StimulusText> chosen_items(const std::vector<PreferencePair>& pairs) { return items_of(pairs, true); }
std::vector<StimulusText> rejected_items(const std::vector<PreferencePair>& pairs) { return items_of(pairs, false); }

std::vector<StimulusText> both_items(const std::vector<PreferencePair>& pairs) {
  auto out = chosen_items(pairs);
  auto rej = rejected_items(pairs);
  out.insert(out.end(), rej.begin(), rej.end());
  return out;
}

std::vector<float> batched_logprob(const FloatModel& model, const StimulusBatch& batch,
                                   const std::vector<std::uint8_t>& scope, int chunk) {
  const auto width = static_cast<std::size_t>(batch.seq_len());
  if (scope.size() != static_cast<std::size_t>(batch.batch) * width) {
    throw ShapeError("batched_logprob: scope does not match the batch");
  }
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(batch.batch));
  for (int start = 0; start < batch.batch; start += chunk) {
    const int n = std::min(chunk, batch.batch - start);
    std::vector<int> rows(static_cast<std::size_t>(n));
    std::iota(rows.begin(), rows.end(), start);
    PassOptions po;
    po.logits = LogitMode::scored;
    po.scope.assign(scope.begin() + static_cast<std::ptrdiff_t>(start * width),
                    scope.begin() + static_cast<std::ptrdiff_t>((start + n) * width));
    Pass<float> pass(model, select_rows(batch, rows), std::move(po));
    const auto lp = pass.logprobs();
    out.insert(out.end(), lp.begin(), lp.end());
  }
  return out;
}

}  // namespace rahf
