#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "rahf/baselines.hpp"
#include "rahf/eval.hpp"

namespace rahf {

struct DataConfig {
  std::string task = "verbosity";
  std::string dataset;  // line-delimited JSON pairs; empty means the synthetic task
  int pairs = 2000;
  int base_corpus = 2000;  // separate synthetic pairs for the stage-0 model
  int n_instruct = 1000;
  int n_align = 500;
  int n_eval = 500;
  int vocab_size = 512;
  Limits limits;
  InstructionTemplate tpl;
};

struct RunSection {
  std::string id = "rahf";
  std::uint64_t seed = 0;
  std::string out_dir = "runs";  // overridden by RAHF_RUN_ROOT
};

struct InstructSection {
  SourceMode variant = SourceMode::scit;
  ScitConfig scit;
  TrainConfig dual;
};

struct BaselineSection {
  TrainConfig psft;
  DpoConfig dpo;
};

struct AblateSection {
  std::vector<double> alphas = {0.0, 1.0, 5.0, 10.0};
  std::vector<LayerRange> ranges = {{0, 3, 1}, {2, 6, 1}, {5, 8, 1}};
};

struct VizSection {
  std::string projector = "pca";
  int layer = -1;  // -1: first layer past the align range
  int items = 100;
};

struct RunConfig {
  RunSection run;
  DataConfig data;
  ModelConfig model;
  TrainConfig base;
  InstructSection instruct;
  CollectionConfig collect;
  AlignConfig align;
  BaselineSection baselines;
  EvalSettings eval;
  AblateSection ablate;
  VizSection viz;

  /// Every invariant, first violation reported with its key path.
  void validate() const;
  json to_json() const;
  /// Missing keys take defaults; unknown keys and wrongly typed values are
  /// ConfigErrors naming the key path.
  static RunConfig from_json(const json& j);
  /// Stage seed derived from the run seed and a stage tag.
  std::uint64_t stage_seed(const std::string& stage, std::uint64_t local) const;
};

RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(const std::string& yaml_text);
std::string dump_config(const RunConfig& cfg);

json yaml_to_json(const std::string& yaml_text);
std::string json_to_yaml(const json& j);

}  // namespace rahf
