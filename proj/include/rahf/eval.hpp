#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rahf/align.hpp"

namespace rahf {

/// Per pair logprob(chosen) - logprob(rejected), response scope, plain frame.
/// Pairs whose prompt overflows the limit are skipped.
std::vector<double> pair_margins(const FloatModel& model, const std::vector<PreferencePair>& pairs, const Encoding& enc,
                                 int chunk = 32);
/// Mean of pair_margins; an empty set is a DataError.
double preference_margin(const FloatModel& model, const std::vector<PreferencePair>& pairs, const Encoding& enc,
                         int chunk = 32);

struct DecodeConfig {
  std::string strategy = "greedy";
  double repetition_penalty = 1.2;
  int max_new_tokens = 64;
  int batch_size = 16;

  void validate() const;
  json to_json() const;
  static DecodeConfig from_json(const json& j, const DecodeConfig& defaults);
};

/// Positive logits of previously generated tokens are divided by `penalty`,
/// negative ones multiplied. Each distinct token is penalised once.
void apply_repetition_penalty(std::span<float> logits, std::span<const int> previous, double penalty);
/// Index of the largest value; the lowest index wins ties.
int argmax(std::span<const float> logits);

/// Greedy continuation of the plain-frame prompt for each query. Stops at the
/// end token, the token budget or the model's context length.
std::vector<std::string> generate(const FloatModel& model, const std::vector<std::string>& queries, const Encoding& enc,
                                  const DecodeConfig& decode);

struct WinTieLose {
  int win = 0;
  int tie = 0;
  int lose = 0;
  int total() const { return win + tie + lose; }
  /// Ties count as half a win.
  double rate() const { return total() == 0 ? 0.0 : (win + 0.5 * tie) / total(); }
  WinTieLose swapped() const { return {lose, tie, win}; }
  bool operator==(const WinTieLose&) const = default;
};

/// Scores already generated responses of a and b on the same queries.
WinTieLose compare_generations(const std::vector<std::string>& queries, const std::vector<std::string>& a,
                               const std::vector<std::string>& b, const Judge& judge, double tie_tolerance = 1e-9);
WinTieLose judge_winrate(const FloatModel& a, const FloatModel& b, const std::vector<std::string>& queries,
                         const Encoding& enc, const Judge& judge, const DecodeConfig& decode,
                         double tie_tolerance = 1e-9);

std::vector<std::string> queries_of(const std::vector<PreferencePair>& pairs);

// ---------------------------------------------------------------------------
// Reports

struct MethodEntry {
  std::string name;
  const FloatModel* model = nullptr;
};

struct MethodResult {
  std::string name;
  std::string fingerprint;  // checksum of the evaluated parameters
  double margin = 0;
  double judge_mean = 0;
  std::vector<std::string> generations;
};

struct PairwiseResult {
  std::string a;
  std::string b;
  WinTieLose counts;
};

struct ComparisonReport {
  std::string task;
  int n_margin_pairs = 0;
  int n_prompts = 0;
  double tie_tolerance = 1e-9;
  DecodeConfig decode;
  std::vector<MethodResult> methods;
  std::vector<PairwiseResult> pairwise;  // every ordered pair of distinct methods

  const MethodResult& method(const std::string& name) const;
  const WinTieLose& versus(const std::string& a, const std::string& b) const;
};

struct EvalSettings {
  std::string task = "verbosity";
  DecodeConfig decode;
  double tie_tolerance = 1e-9;
  int max_prompts = 100;  // first prompts of the eval split used for generation
  int margin_chunk = 32;

  void validate() const;
  json to_json() const;
  static EvalSettings from_json(const json& j, const EvalSettings& defaults);
};

ComparisonReport compare_methods(const std::vector<MethodEntry>& methods, const std::vector<PreferencePair>& eval_pairs,
                                 const Encoding& enc, const EvalSettings& settings);

/// One JSON object per method and per ordered pair.
void write_report_jsonl(const std::filesystem::path& path, const ComparisonReport& report);
std::string render_report_table(const ComparisonReport& report, int samples = 2);

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string label;  // alpha value or layer range
  double alpha = 0;
  LayerRange range;
  double margin = 0;
  WinTieLose vs_base;
  double displacement = 0;
  double direction_cosine = 0;
  double align_loss = 0;
  std::string fingerprint;
};

struct AblationInputs {
  const FloatModel* base = nullptr;  // the model the adapter is trained on
  std::vector<StimulusText> align_items;
  std::vector<PreferencePair> eval_pairs;
  Encoding enc;
  AlignConfig align;
  EvalSettings eval;
  LoopOptions loop;
};

/// One aligned model per alpha over a fixed vector store.
std::vector<AblationRow> run_ablation_alpha(const AblationInputs& in, const DifferenceVectors& store,
                                            const std::vector<double>& alphas);

/// Source models and collection settings for rebuilding the store per range.
struct CollectionSource {
  const FloatModel* positive = nullptr;
  const FloatModel* negative = nullptr;
  CollectionConfig config;
};

/// Collects a store and aligns once per layer range.
std::vector<AblationRow> run_ablation_layers(const AblationInputs& in, const CollectionSource& source,
                                             const std::vector<LayerRange>& ranges);

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

}  // namespace rahf
