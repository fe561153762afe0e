#pragma once

#include <vector>

#include "rahf/train.hpp"

namespace rahf {

/// Loss of one contrastive example and its partial derivatives with respect
/// to the paired (p_pos) and opposite-instruction (p_neg) log-probabilities.
struct ScitTerms {
  double loss = 0;
  double d_pos = 0;
  double d_neg = 0;
};

/// -(p_pos + log sigmoid(p_pos - p_neg)); the likelihood term is dropped when
/// `contrastive_only` is set.
ScitTerms scit_terms(double p_pos, double p_neg, bool contrastive_only = false);

/// Mean contrastive loss over the rows of `paired`, where row b of `paired`
/// carries its response under the matching instruction and row b of
/// `opposite` the same response under the other one. Accumulates the
/// gradient of that mean into `grads` when given. Throws TrainingError naming
/// the row id on a non-finite loss.
template <class T>
double scit_loss(const Model<T>& model, const StimulusBatch& paired, const StimulusBatch& opposite,
                 bool contrastive_only, Gradients<T>* grads, bool train = false, std::uint64_t dropout_seed = 0);

/// Mean of -logprob over the rows of `batch` under `scope`, with gradient.
template <class T>
double sft_loss(const Model<T>& model, const StimulusBatch& batch, const std::vector<std::uint8_t>& scope,
                Gradients<T>* grads, bool train = false, std::uint64_t dropout_seed = 0);

struct ScitConfig {
  TrainConfig train;
  bool contrastive_only = false;
  int eval_batch = 32;
};

struct StageResult {
  FloatModel model;
  TrainCurve curve;
  double initial_loss = 0;  // mean over the training split before training
  double final_loss = 0;    // and after
};

/// Every pair yields two examples: its chosen response paired with the
/// positive instruction and its rejected response paired with the negative
/// one. Items whose prompt is too long are skipped with a warning.
struct ScitData {
  StimulusBatch rows;     // every item under the positive, then the negative instruction
  std::vector<int> paired;    // per example: row with the matching instruction
  std::vector<int> opposite;  // per example: row with the other instruction
  std::vector<std::string> ids;
  std::size_t size() const { return ids.size(); }
};
ScitData build_scit_data(const std::vector<PreferencePair>& pairs, const Encoding& enc);

/// Mean contrastive loss of `model` over `data` in eval mode.
double mean_scit_loss(const FloatModel& model, const ScitData& data, bool contrastive_only, int chunk);

/// Fine-tunes every parameter of `base` with the contrastive loss.
StageResult train_scit(const FloatModel& base, const std::vector<PreferencePair>& pairs, const Encoding& enc,
                       const ScitConfig& cfg, const LoopOptions& opt);

/// Plain supervised fine-tuning on `items` (response-only loss, or loss over
/// the whole sequence when `full_sequence`).
StageResult train_sft(const FloatModel& base, const std::vector<StimulusText>& items, const Encoding& enc,
                      const TrainConfig& cfg, Polarity polarity, bool full_sequence, const LoopOptions& opt);

struct DualResult {
  StageResult preferred;
  StageResult dispreferred;
};

/// Two independent fine-tunes of `base`: one on chosen responses, one on
/// rejected responses, both in the plain frame.
DualResult train_dual(const FloatModel& base, const std::vector<PreferencePair>& pairs, const Encoding& enc,
                      const TrainConfig& cfg, const LoopOptions& opt);

/// Fine-tune on chosen responses only. Same procedure as the preferred half
/// of train_dual.
StageResult train_preferred_sft(const FloatModel& base, const std::vector<PreferencePair>& pairs, const Encoding& enc,
                                const TrainConfig& cfg, const LoopOptions& opt);

/// Stage-0 language model: randomly initialised, trained on chosen and
/// rejected text of a separate corpus with loss over the full sequence.
StageResult train_base(const ModelConfig& mc, const std::vector<PreferencePair>& corpus, const Encoding& enc,
                       const TrainConfig& cfg, const LoopOptions& opt);

}  // namespace rahf
