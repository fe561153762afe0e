#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rahf/config.hpp"
#include "rahf/errors.hpp"

namespace rahf {

/// A stage failed; the message starts with "stage <name>: ".
struct StageError : Error {
  StageError(std::string stage_name, const std::string& what)
      : Error("stage " + stage_name + ": " + what), stage(std::move(stage_name)) {}
  std::string stage;
};

/// manifest.json of a run directory: config, dataset hashes, and every
/// artifact with its checksum, the stage that produced it and the artifacts
/// that stage read.
class RunManifest {
 public:
  json data = json::object();

  static RunManifest load(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir) const;

  bool has(const std::string& name) const;
  /// Absolute path of a recorded artifact, after checking it exists and
  /// still hashes to the recorded value.
  std::filesystem::path verified(const std::filesystem::path& dir, const std::string& name) const;
  void record(const std::filesystem::path& dir, const std::string& name, const std::string& stage,
              const std::filesystem::path& relative, const std::vector<std::string>& inputs);
  /// artifact name -> checksum
  std::map<std::string, std::string> checksums() const;
};

/// Checksum of a file, a directory (all files, sorted) or a checkpoint
/// prefix (its .params/.adapter/.json files).
std::string artifact_checksum(const std::filesystem::path& path);

struct DualModels {
  FloatModel preferred;
  FloatModel dispreferred;
};

/// One run directory: config.yaml, manifest.json, data/, checkpoints/,
/// vectors/, reports/, logs/. Every accessor returns its artifact from the
/// manifest when present and builds (and records) it otherwise.
class Run {
 public:
  /// New run under root/<run.id>; an existing directory is reused only if
  /// its config matches.
  static Run create(const RunConfig& cfg, const std::filesystem::path& root);
  static Run open(const std::filesystem::path& dir);

  const RunConfig& config() const { return cfg_; }
  const std::filesystem::path& dir() const { return dir_; }
  const RunManifest& manifest() const { return manifest_; }

  void prepare_data();
  const Encoding& encoding();
  std::vector<PreferencePair> split(const std::string& name);

  FloatModel base();
  FloatModel instruct_scit();
  DualModels instruct_dual();
  DifferenceVectors vectors(SourceMode mode);
  FloatModel aligned(SourceMode mode);
  FloatModel psft();
  FloatModel dpo();

  /// Methods by name: base, scit, dual, psft, dpo.
  ComparisonReport evaluate(const std::vector<std::string>& methods);
  std::vector<AblationRow> ablate_alpha(SourceMode mode);
  std::vector<AblationRow> ablate_layers(SourceMode mode);
  std::vector<ProjectionPoint> export_viz(SourceMode mode);

  /// Re-executes the stages recorded in `source`, in order.
  void replay(const RunManifest& source);

  /// Stage-1 source models for collection: (model+, model-).
  std::pair<FloatModel, FloatModel> sources(SourceMode mode);

 private:
  Run(RunConfig cfg, std::filesystem::path dir, RunManifest manifest);

  template <class F>
  auto stage(const std::string& name, F&& body);
  std::filesystem::path input(const std::string& artifact);
  FloatModel load_model(const std::string& artifact);
  void save_model(const std::string& artifact, const FloatModel& m, const std::string& stage_tag, json extra,
                  std::optional<std::string> base_reference = std::nullopt);
  LoopOptions loop(const std::string& stage, const std::string& split) const;

  RunConfig cfg_;
  std::filesystem::path dir_;
  RunManifest manifest_;
  std::optional<Encoding> enc_;
  std::string current_stage_;
  std::vector<std::string> current_inputs_;
};

std::string method_name(SourceMode mode);

}  // namespace rahf
