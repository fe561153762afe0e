#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "rahf/train.hpp"

namespace rahf {

/// Layers start, start + step, ... below stop.
struct LayerRange {
  int start = 2;
  int stop = 6;
  int step = 1;

  std::vector<int> layers() const;
  void validate(int n_layers, const std::string& key) const;
  json to_json() const;  // [start, stop, step]
  static LayerRange from_json(const json& j);
  std::string label() const;  // "2:6:1"
  bool operator==(const LayerRange&) const = default;
};

enum class SourceMode { scit, dual };
std::string to_string(SourceMode m);
SourceMode source_mode_from_string(const std::string& s);

struct CollectionConfig {
  LayerRange range;
  SourceMode mode = SourceMode::scit;
  int budget = 64;  // leading response positions kept
  std::string split = "align";
  int batch_size = 16;

  void validate(int n_layers, int max_response_len) const;
  json to_json() const;
  static CollectionConfig from_json(const json& j, const CollectionConfig& defaults);
};

/// Hidden states of the response region only: positions index response
/// tokens (column 0 is the first response token) and `mask` marks real ones.
struct ActivityPatterns {
  std::vector<std::string> ids;
  HiddenTrace<float> positive;
  HiddenTrace<float> negative;
};

/// Runs every item through model_pos with the positive stimulus and through
/// model_neg with the negative one (SCIT: same model, instruction differs;
/// dual: preferred and dispreferred models).
ActivityPatterns collect_activity(const FloatModel& model_pos, const FloatModel& model_neg,
                                  const std::vector<StimulusText>& items, const Encoding& enc,
                                  const CollectionConfig& cfg);

/// Per-example, per-position differences A+ - A- over the first `budget`
/// response positions.
struct DifferenceVectors {
  std::vector<int> layers;
  std::vector<std::string> ids;
  int budget = 0;
  int d_model = 0;
  std::vector<std::vector<float>> values;  // per layer: [examples, budget, d_model]
  std::vector<std::uint8_t> mask;          // [examples, budget]
  CollectionConfig config;

  int size() const { return static_cast<int>(ids.size()); }
  std::size_t slot(int layer) const;
  /// Rows `rows` of every tensor, in that order.
  DifferenceVectors rows(std::span<const int> rows) const;
};

DifferenceVectors difference_vectors(const HiddenTrace<float>& plus, const HiddenTrace<float>& minus,
                                     const std::vector<std::string>& ids, const CollectionConfig& cfg);
inline DifferenceVectors difference_vectors(const ActivityPatterns& a, const CollectionConfig& cfg) {
  return difference_vectors(a.positive, a.negative, a.ids, cfg);
}

/// One binary file per layer plus manifest.json.
void save_vector_store(const std::filesystem::path& dir, const DifferenceVectors& v);
DifferenceVectors load_vector_store(const std::filesystem::path& dir);
/// SHA-256 over the manifest and tensor files.
std::string vector_store_checksum(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Projection export

/// Activations at the last response token of each item, taken at `layer`.
/// Returns [items, d_model] row-major.
std::vector<float> last_token_states(const FloatModel& model, const std::vector<StimulusText>& items,
                                     const Encoding& enc, Polarity polarity, int layer, int batch_size,
                                     std::vector<std::string>* ids = nullptr);

struct ProjectionCondition {
  std::string name;
  std::vector<std::string> ids;
  std::vector<float> states;  // [ids.size(), d_model]
};

enum class Projector { pca, tsne };
Projector projector_from_string(const std::string& s);

/// Rows of `x` [n, d] projected to 2-D, [n, 2] row-major. PCA signs are
/// fixed so the largest-magnitude loading of each axis is positive.
std::vector<double> pca_2d(const std::vector<double>& x, int n, int d);
/// Exact t-SNE, deterministic given `seed`.
std::vector<double> tsne_2d(const std::vector<double>& x, int n, int d, std::uint64_t seed, double perplexity = 30.0,
                            int iterations = 1000);

struct ProjectionPoint {
  std::string id;
  std::string condition;
  double x = 0;
  double y = 0;
};

/// Projects all conditions jointly and writes CSV (id,condition,x,y).
std::vector<ProjectionPoint> export_representation_projection(const std::vector<ProjectionCondition>& conditions,
                                                              Projector projector, std::uint64_t seed,
                                                              const std::filesystem::path& csv);

/// Mean (x, y) of the points of `condition`.
std::pair<double, double> centroid(const std::vector<ProjectionPoint>& points, const std::string& condition);

}  // namespace rahf
