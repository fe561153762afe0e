// rahf: command-line driver for the alignment pipeline.

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>

#include "rahf/errors.hpp"
#include "rahf/pipeline.hpp"

namespace fs = std::filesystem;
using namespace rahf;

namespace {

struct Options {
  std::string config;
  std::string root;
  std::string run_id;
  std::string variant = "scit";
  std::string method = "dpo";
  std::string kind = "alpha";
  std::vector<std::string> methods = {"base", "scit"};
  std::vector<std::string> checkpoints;
  std::string from_manifest;
  bool with_baselines = false;
  std::string log_level = "info";
};

void fail_line(const std::string& kind, const std::string& stage, const std::string& message) {
  json j{{"error", kind}, {"message", message}};
  if (!stage.empty()) j["stage"] = stage;
  std::cerr << "rahf: " << j.dump(-1, ' ', false, json::error_handler_t::replace) << std::endl;
}

RunConfig config_of(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config: a config file is required");
  auto cfg = load_config(o.config);
  if (!o.run_id.empty()) cfg.run.id = o.run_id;
  cfg.validate();
  return cfg;
}

fs::path root_of(const Options& o, const RunConfig& cfg) { return o.root.empty() ? fs::path(cfg.run.out_dir) : fs::path(o.root); }

Run open_run(const Options& o) {
  const auto cfg = config_of(o);
  return Run::create(cfg, root_of(o, cfg));
}

void print_checksums(const Run& run) {
  for (const auto& [name, sum] : run.manifest().checksums()) std::cout << sum << "  " << name << "\n";
}

int run_rahf(const Options& o) {
  if (!o.from_manifest.empty()) {
    const fs::path mpath = o.from_manifest;
    const auto src_dir = fs::is_directory(mpath) ? mpath : mpath.parent_path();
    const auto source = RunManifest::load(src_dir);
    auto cfg = RunConfig::from_json(source.data.at("config"));
    cfg.run.id = o.run_id.empty() ? cfg.run.id + "-replay" : o.run_id;
    cfg.validate();
    const auto root = o.root.empty() ? src_dir.parent_path() : fs::path(o.root);
    auto run = Run::create(cfg, root);
    run.replay(source);
    const auto want = source.checksums();
    const auto got = run.manifest().checksums();
    int mismatches = 0;
    for (const auto& [name, sum] : want) {
      const auto it = got.find(name);
      const bool same = it != got.end() && it->second == sum;
      std::cout << (same ? "same     " : "DIFFERS  ") << name << "\n";
      mismatches += same ? 0 : 1;
    }
    if (mismatches > 0) {
      fail_line("reproducibility", "", std::to_string(mismatches) + " artifacts differ from " + src_dir.string());
      return 1;
    }
    std::cout << "all " << want.size() << " artifacts reproduced in " << run.dir().string() << "\n";
    return 0;
  }
  auto run = open_run(o);
  const auto mode = source_mode_from_string(o.variant);
  run.aligned(mode);
  std::vector<std::string> methods = {"base", o.variant};
  if (o.with_baselines) {
    methods.push_back("psft");
    methods.push_back("dpo");
  }
  const auto report = run.evaluate(methods);
  std::cout << render_report_table(report);
  std::cout << "run directory: " << run.dir().string() << "\n";
  return 0;
}

int eval_cmd(const Options& o) {
  auto run = open_run(o);
  if (o.checkpoints.empty()) {
    std::cout << render_report_table(run.evaluate(o.methods));
    return 0;
  }
  std::vector<FloatModel> models;
  models.push_back(run.base());
  for (const auto& c : o.checkpoints) models.push_back(load_checkpoint(c));
  std::vector<MethodEntry> entries{{"base", &models[0]}};
  for (std::size_t i = 0; i < o.checkpoints.size(); ++i) {
    entries.push_back({fs::path(o.checkpoints[i]).filename().string(), &models[i + 1]});
  }
  const auto report = compare_methods(entries, run.split("eval"), run.encoding(), run.config().eval);
  std::cout << render_report_table(report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Representation alignment from preference data"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("-c,--config", o.config, "YAML run config");
  app.add_option("--root", o.root, "directory holding run directories (default: run.out_dir)");
  app.add_option("--run-id", o.run_id, "override run.id");
  app.add_option("--log-level", o.log_level, "trace|debug|info|warn|error")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error"}));

  const std::vector<std::string> variants = {"scit", "dual"};
  auto* prep = app.add_subcommand("prepare-data", "build the dataset, splits and tokenizer");
  auto* instruct = app.add_subcommand("train-instruct", "stage-0 base model and the stage-1 model(s)");
  instruct->add_option("--variant", o.variant)->check(CLI::IsMember(variants));
  auto* collect = app.add_subcommand("collect", "collect activity patterns and store difference vectors");
  collect->add_option("--variant", o.variant)->check(CLI::IsMember(variants));
  auto* align = app.add_subcommand("align", "train the low-rank adapter on the difference vectors");
  align->add_option("--variant", o.variant)->check(CLI::IsMember(variants));
  auto* full = app.add_subcommand("run-rahf", "run every stage and report against the base model");
  full->add_option("--variant", o.variant)->check(CLI::IsMember(variants));
  full->add_flag("--with-baselines", o.with_baselines, "also train and report preferred-SFT and DPO");
  full->add_option("--from-manifest", o.from_manifest, "replay a run from its manifest and compare checksums");
  auto* baseline = app.add_subcommand("train-baseline", "train a comparison method");
  baseline->add_option("--method", o.method)->check(CLI::IsMember({"psft", "dpo"}));
  auto* eval = app.add_subcommand("eval", "margins and judge win rates");
  eval->add_option("--methods", o.methods, "base scit dual psft dpo")->delimiter(',');
  eval->add_option("--checkpoint", o.checkpoints, "checkpoint prefix to compare with the base model");
  auto* ablate = app.add_subcommand("ablate", "alpha or layer-range ablation");
  ablate->add_option("--kind", o.kind)->check(CLI::IsMember({"alpha", "layers"}));
  ablate->add_option("--variant", o.variant)->check(CLI::IsMember(variants));
  auto* viz = app.add_subcommand("export-viz", "2-D projection of last-token states");
  viz->add_option("--variant", o.variant)->check(CLI::IsMember(variants));
  auto* dump = app.add_subcommand("dump-config", "print the normalised config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  spdlog::set_level(spdlog::level::from_str(o.log_level));
  spdlog::set_pattern("[%H:%M:%S] %^%l%$ %v");

  try {
    if (dump->parsed()) {
      std::cout << dump_config(config_of(o));
    } else if (prep->parsed()) {
      auto run = open_run(o);
      run.prepare_data();
      print_checksums(run);
    } else if (instruct->parsed()) {
      auto run = open_run(o);
      run.sources(source_mode_from_string(o.variant));
      print_checksums(run);
    } else if (collect->parsed()) {
      auto run = open_run(o);
      run.vectors(source_mode_from_string(o.variant));
      print_checksums(run);
    } else if (align->parsed()) {
      auto run = open_run(o);
      run.aligned(source_mode_from_string(o.variant));
      print_checksums(run);
    } else if (full->parsed()) {
      return run_rahf(o);
    } else if (baseline->parsed()) {
      auto run = open_run(o);
      if (o.method == "psft") {
        run.psft();
      } else {
        run.dpo();
      }
      print_checksums(run);
    } else if (eval->parsed()) {
      return eval_cmd(o);
    } else if (ablate->parsed()) {
      auto run = open_run(o);
      const auto mode = source_mode_from_string(o.variant);
      const auto rows = o.kind == "alpha" ? run.ablate_alpha(mode) : run.ablate_layers(mode);
      std::cout << read_text_file(run.dir() / "reports" / ("ablation_" + o.kind + "_" + o.variant + ".csv"));
      (void)rows;
    } else if (viz->parsed()) {
      auto run = open_run(o);
      const auto pts = run.export_viz(source_mode_from_string(o.variant));
      for (const char* c : {"base", "preferred-sft", "dispreferred-sft", "aligned"}) {
        const auto [x, y] = centroid(pts, c);
        std::cout << c << " centroid " << x << " " << y << "\n";
      }
    }
  } catch (const StageError& e) {
    fail_line("stage", e.stage, e.what());
    return 1;
  } catch (const ConfigError& e) {
    fail_line("config", "", e.what());
    return 1;
  } catch (const std::exception& e) {
    fail_line("runtime", "", e.what());
    return 1;
  }
  return 0;
}
