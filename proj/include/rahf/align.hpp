#pragma once

#include <vector>

#include "rahf/collect.hpp"

namespace rahf {

struct AlignConfig {
  double alpha = 5.0;
  LayerRange range;
  AdapterSpec adapter;  // target_layers is filled from `range`
  TrainConfig train = default_train();
  int budget = 64;
  Polarity input = Polarity::positive;  // positive | plain
  /// Re-derive the frozen base trace every this many steps and compare it
  /// with the cached one; 0 disables.
  int consistency_every = 50;
  double consistency_tolerance = 1e-5;
  int eval_batch = 32;
  std::uint64_t adapter_seed = 0;

  static TrainConfig default_train();
  void validate(int n_layers) const;
  /// Also checks agreement with the vector store.
  void validate_against(const DifferenceVectors& store) const;
  AdapterSpec adapter_spec() const;
  json to_json() const;
  static AlignConfig from_json(const json& j, const AlignConfig& defaults);
};

/// Mean over (layers, unmasked positions within the budget, dims) of
/// (adapted - (base + alpha v))^2. `adapted` and `base` are traces of the
/// same batch in its padded layout; `v` holds the matching rows of the store
/// and `response_offset` is the batch's prompt width. When `grad` is given it
/// receives dL/d adapted per traced layer in the padded layout.
template <class T>
double align_loss(const HiddenTrace<T>& adapted, const HiddenTrace<T>& base, const DifferenceVectors& v,
                  int response_offset, double alpha, std::vector<std::vector<T>>* grad);

struct AlignResult {
  FloatModel model;
  TrainCurve curve;
  double initial_loss = 0;
  double final_loss = 0;
  double displacement = 0;      // mean over layers and unmasked positions of |adapted - base|
  double direction_cosine = 0;  // mean cos(adapted - base, v) over the same cells
  int consistency_checks = 0;
  double consistency_max_diff = 0;
};

/// Response-region statistics of `model` against cached base traces.
struct AlignEval {
  double loss = 0;
  double displacement = 0;
  double direction_cosine = 0;
};

/// Trains a low-rank adapter on a frozen copy of `base` so that its hidden
/// states over the response region move to base + alpha v. `items` supply
/// the text for each store id (extra items are ignored).
AlignResult train_align(const FloatModel& base, const DifferenceVectors& store, const std::vector<StimulusText>& items,
                        const Encoding& enc, const AlignConfig& cfg, const LoopOptions& opt);

}  // namespace rahf
