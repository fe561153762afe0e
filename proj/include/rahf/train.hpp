#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rahf/data.hpp"
#include "rahf/model.hpp"

namespace rahf {

/// Tokenizer, instruction template and padding limits: everything needed to
/// turn text into StimulusBatch rows.
struct Encoding {
  Tokenizer tokenizer;
  InstructionTemplate tpl;
  Limits limits;
};

/// Optimisation settings shared by every trainer.
struct TrainConfig {
  double learning_rate = 1e-4;
  int epochs = 2;  // used when steps == 0
  int steps = 0;   // fixed step budget, cycling through the data
  int batch_size = 32;
  std::string optimizer = "adamw";
  std::string schedule = "cosine";  // cosine | constant | linear
  double warmup_fraction = 0.1;
  double grad_clip = 1.0;  // global norm; 0 disables
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;

  /// `key` prefixes error messages, e.g. "instruct.scit".
  void validate(const std::string& key) const;
  json to_json() const;
  /// Keys absent from `j` keep the values of `defaults`.
  static TrainConfig from_json(const json& j, const TrainConfig& defaults);
};

/// Learning rate at `step` (0-based) of `total` steps.
double scheduled_lr(const TrainConfig& cfg, int step, int total);

/// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW(const TrainConfig& cfg, std::size_t n);
  void step(std::span<float> params, std::span<const float> grads, double lr);

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
double clip_global_norm(std::span<float> grads, double max_norm);

struct CurvePoint {
  int step = 0;
  int epoch = 0;
  double loss = 0;
  double lr = 0;
};

struct TrainCurve {
  std::vector<CurvePoint> points;
  std::vector<double> epoch_means;
  int steps = 0;
};

/// Computes the mean loss of the examples `batch` and accumulates its
/// gradient into `grads`. `step_seed` seeds dropout.
using StepFn = std::function<double(std::span<const std::size_t> batch, Gradients<float>& grads,
                                    std::uint64_t step_seed)>;

struct LoopOptions {
  std::string stage;  // names the run in logs and errors
  std::string split;
  std::optional<std::filesystem::path> log_path;  // {step, split, loss, lr} per step
  std::function<std::string(std::size_t)> example_id;
};

/// Shuffled minibatch loop over `n_examples` examples. Updates the base
/// parameters, or only the adapter when the base is frozen. Throws
/// TrainingError on a non-finite loss or when every step of an epoch exceeds
/// ten times the first step's loss.
TrainCurve run_training(FloatModel& model, std::size_t n_examples, const TrainConfig& cfg, const LoopOptions& opt,
                        const StepFn& step);

/// Rows of `items` for a pair's chosen (":h") and rejected (":l") responses.
std::vector<StimulusText> chosen_items(const std::vector<PreferencePair>& pairs);
std::vector<StimulusText> rejected_items(const std::vector<PreferencePair>& pairs);
std::vector<StimulusText> both_items(const std::vector<PreferencePair>& pairs);

/// Per-row scoped log-probability in eval mode, evaluated `chunk` rows at a
/// time. `scope` covers the whole batch.
std::vector<float> batched_logprob(const FloatModel& model, const StimulusBatch& batch,
                                   const std::vector<std::uint8_t>& scope, int chunk);

}  // namespace rahf
