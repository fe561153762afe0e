#pragma once

#include <span>
#include <vector>

#include "rahf/instruct.hpp"

namespace rahf {

struct DpoConfig {
  double beta = 0.1;
  std::string reference = "preferred";  // checkpoint the policy starts from and is measured against
  TrainConfig train;
  AdapterSpec adapter = default_adapter();  // target_layers empty means every layer
  int eval_batch = 32;
  std::uint64_t adapter_seed = 0;

  static AdapterSpec default_adapter();
  void validate(int n_layers) const;
  AdapterSpec adapter_spec(int n_layers) const;
  json to_json() const;
  static DpoConfig from_json(const json& j, const DpoConfig& defaults);
};

struct DpoTerms {
  double loss = 0;
  double d_chosen = 0;    // dL / d logpi(chosen)
  double d_rejected = 0;  // dL / d logpi(rejected)
};

/// -log sigmoid(beta [(pc - rc) - (pr - rr)]) for policy logprobs pc, pr and
/// reference logprobs rc, rr.
DpoTerms dpo_terms(double pc, double pr, double rc, double rr, double beta);

/// Mean DPO loss over the rows of `chosen`/`rejected` (row b of each is the
/// same pair). `ref_chosen`/`ref_rejected` are the reference model's response
/// logprobs for those rows. Throws TrainingError naming the pair on a
/// non-finite loss.
template <class T>
double dpo_loss(const Model<T>& policy, const StimulusBatch& chosen, const StimulusBatch& rejected,
                std::span<const double> ref_chosen, std::span<const double> ref_rejected, double beta,
                Gradients<T>* grads, bool train = false, std::uint64_t dropout_seed = 0);

struct DpoResult {
  FloatModel model;
  TrainCurve curve;
  double initial_loss = 0;
  double final_loss = 0;
};

/// Adapter training of a copy of `reference` against `reference` itself.
DpoResult train_dpo(const FloatModel& reference, const std::vector<PreferencePair>& pairs, const Encoding& enc,
                    const DpoConfig& cfg, const LoopOptions& opt);

}  // namespace rahf
