#include "rahf/pipeline.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <ctime>

#include "rahf/errors.hpp"

namespace fs = std::filesystem;

namespace rahf {

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

fs::path with_suffix(const fs::path& prefix, const std::string& suffix) {
  return prefix.parent_path() / (prefix.filename().string() + suffix);
}

}  // namespace

std::string artifact_checksum(const fs::path& path) {
  if (fs::is_regular_file(path)) return sha256_file(path);
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(path)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::string blob;
    for (const auto& f : files) blob += fs::relative(f, path).generic_string() + " " + sha256_file(f) + "\n";
    return sha256_hex(blob);
  }
  const auto meta = with_suffix(path, ".json");
  if (!fs::exists(meta)) throw DataError("artifact not found: " + path.string());
  std::string blob;
  for (const char* s : {".params", ".adapter", ".json"}) {
    const auto f = with_suffix(path, s);
    if (fs::exists(f)) blob += std::string(s) + " " + sha256_file(f) + "\n";
  }
  return sha256_hex(blob);
}

RunManifest RunManifest::load(const fs::path& dir) {
  const auto p = dir / "manifest.json";
  if (!fs::exists(p)) throw DataError("manifest not found: " + p.string());
  RunManifest m;
  m.data = read_json_file(p);
  return m;
}

void RunManifest::save(const fs::path& dir) const { write_json_file(dir / "manifest.json", data); }

bool RunManifest::has(const std::string& name) const {
  return data.contains("artifacts") && data["artifacts"].contains(name);
}

fs::path RunManifest::verified(const fs::path& dir, const std::string& name) const {
  if (!has(name)) throw DataError("artifact '" + name + "' is not in the manifest");
  const auto& a = data["artifacts"][name];
  const auto path = dir / a.at("path").get<std::string>();
  const bool present = fs::exists(path) || fs::exists(with_suffix(path, ".json"));
  if (!present) throw DataError("artifact '" + name + "' missing: " + path.string());
  if (artifact_checksum(path) != a.at("sha256").get<std::string>()) {
    throw DataError("artifact '" + name + "' does not match its recorded checksum: " + path.string());
  }
  return path;
}

void RunManifest::record(const fs::path& dir, const std::string& name, const std::string& stage,
                         const fs::path& relative, const std::vector<std::string>& inputs) {
  data["artifacts"][name] = json{{"path", relative.generic_string()},
                                 {"sha256", artifact_checksum(dir / relative)},
                                 {"stage", stage},
                                 {"inputs", inputs},
                                 {"created", utc_now()}};
}

std::map<std::string, std::string> RunManifest::checksums() const {
  std::map<std::string, std::string> out;
  if (!data.contains("artifacts")) return out;
  for (const auto& [k, v] : data["artifacts"].items()) out[k] = v.at("sha256").get<std::string>();
  return out;
}

std::string method_name(SourceMode mode) { return mode == SourceMode::scit ? "rahf-scit" : "rahf-dual"; }

Run::Run(RunConfig cfg, fs::path dir, RunManifest manifest)
    : cfg_(std::move(cfg)), dir_(std::move(dir)), manifest_(std::move(manifest)) {}

Run Run::create(const RunConfig& cfg, const fs::path& root) {
  cfg.validate();
  const auto dir = root / cfg.run.id;
  const auto text = dump_config(cfg);
  const auto hash = sha256_hex(text);
  if (fs::exists(dir / "manifest.json")) {
    auto m = RunManifest::load(dir);
    if (m.data.value("config_sha256", std::string()) != hash) {
      throw ConfigError("run.id: " + dir.string() + " already holds a run with a different config");
    }
    return Run(cfg, dir, std::move(m));
  }
  for (const char* sub : {"data", "checkpoints", "vectors", "reports", "logs"}) fs::create_directories(dir / sub);
  write_text_file(dir / "config.yaml", text);
  RunManifest m;
  m.data = json{{"format", 1},
                {"run_id", cfg.run.id},
                {"seed", cfg.run.seed},
                {"config_sha256", hash},
                {"config", cfg.to_json()},
                {"git_describe", std::string(build_git_describe())},
                {"created", utc_now()},
                {"datasets", json::object()},
                {"artifacts", json::object()},
                {"stages", json::array()}};
  m.save(dir);
  return Run(cfg, dir, std::move(m));
}

Run Run::open(const fs::path& dir) {
  auto m = RunManifest::load(dir);
  auto cfg = RunConfig::from_json(m.data.at("config"));
  cfg.validate();
  return Run(std::move(cfg), dir, std::move(m));
}

template <class F>
auto Run::stage(const std::string& name, F&& body) {
  const auto outer_stage = current_stage_;
  const auto outer_inputs = current_inputs_;
  current_stage_ = name;
  current_inputs_.clear();
  const auto t0 = std::chrono::steady_clock::now();
  spdlog::info("stage {}: start", name);
  try {
    auto result = body();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    manifest_.data["stages"].push_back(json{{"stage", name}, {"inputs", current_inputs_}, {"seconds", secs}});
    manifest_.save(dir_);
    spdlog::info("stage {}: done in {:.1f} s", name, secs);
    current_stage_ = outer_stage;
    current_inputs_ = outer_inputs;
    return result;
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

fs::path Run::input(const std::string& artifact) {
  auto p = manifest_.verified(dir_, artifact);
  if (!current_stage_.empty() &&
      std::find(current_inputs_.begin(), current_inputs_.end(), artifact) == current_inputs_.end()) {
    current_inputs_.push_back(artifact);
  }
  return p;
}

LoopOptions Run::loop(const std::string& stage_name, const std::string& split_name) const {
  LoopOptions o;
  o.stage = stage_name;
  o.split = split_name;
  auto file = stage_name;
  std::replace(file.begin(), file.end(), ':', '_');
  o.log_path = dir_ / "logs" / (file + ".jsonl");
  return o;
}

FloatModel Run::load_model(const std::string& artifact) {
  const auto p = input(artifact);
  return load_checkpoint(p);
}

void Run::save_model(const std::string& artifact, const FloatModel& m, const std::string& stage_tag, json extra,
                     std::optional<std::string> base_reference) {
  CheckpointMeta meta;
  meta.stage = stage_tag;
  meta.extra = std::move(extra);
  if (base_reference) {
    input(*base_reference);
    meta.base_reference = *base_reference;
  }
  const fs::path rel = fs::path("checkpoints") / artifact;
  save_checkpoint(dir_ / rel, m, meta);
  manifest_.record(dir_, artifact, current_stage_, rel, current_inputs_);
  manifest_.save(dir_);
}

// ---------------------------------------------------------------------------
// Data

void Run::prepare_data() {
  if (manifest_.has("tokenizer")) return;
  stage("data", [&] {
    std::vector<PreferencePair> pairs;
    std::vector<PreferencePair> corpus;
    const auto seed = derive_seed(cfg_.run.seed, "data");
    if (!cfg_.data.dataset.empty()) {
      auto loaded = load_preference_dataset(cfg_.data.dataset);
      for (const auto& [line, why] : loaded.rejected) spdlog::warn("dataset line {} skipped: {}", line, why);
      pairs = std::move(loaded.pairs);
    } else {
      pairs = make_synthetic_task(cfg_.data.task, static_cast<std::size_t>(cfg_.data.pairs), seed);
    }
    const auto splits =
        make_splits(pairs, derive_seed(cfg_.run.seed, "splits"), static_cast<std::size_t>(cfg_.data.n_instruct),
                    static_cast<std::size_t>(cfg_.data.n_align), static_cast<std::size_t>(cfg_.data.n_eval));
    if (!cfg_.data.dataset.empty()) {
      corpus = select_pairs(pairs, splits.instruct);
    } else {
      corpus = make_synthetic_task(cfg_.data.task, static_cast<std::size_t>(cfg_.data.base_corpus),
                                   derive_seed(cfg_.run.seed, "base_corpus"));
    }
    std::vector<std::string> text;
    for (const auto* set : {&corpus, &pairs}) {
      for (const auto& p : *set) {
        for (auto pol : {Polarity::plain, Polarity::positive, Polarity::negative}) {
          text.push_back(render_stimulus(cfg_.data.tpl, p.query, p.chosen, pol));
          text.push_back(render_stimulus(cfg_.data.tpl, p.query, p.rejected, pol));
        }
      }
    }
    const auto tok = Tokenizer::train(text, cfg_.data.vocab_size);
    write_preference_dataset(dir_ / "data/pairs.jsonl", pairs);
    write_preference_dataset(dir_ / "data/base_corpus.jsonl", corpus);
    write_json_file(dir_ / "data/splits.json", splits.to_json());
    tok.save(dir_ / "data/tokenizer.json");
    manifest_.data["datasets"] = json{{"pairs", dataset_checksum(pairs)}, {"base_corpus", dataset_checksum(corpus)}};
    for (const auto& [name, file] : std::vector<std::pair<std::string, std::string>>{
             {"pairs", "data/pairs.jsonl"},
             {"base_corpus", "data/base_corpus.jsonl"},
             {"splits", "data/splits.json"},
             {"tokenizer", "data/tokenizer.json"}}) {
      manifest_.record(dir_, name, "data", file, {});
    }
    manifest_.save(dir_);
    spdlog::info("data: {} pairs, {} corpus pairs, vocabulary {}", pairs.size(), corpus.size(), tok.vocab_size());
    return 0;
  });
}

const Encoding& Run::encoding() {
  prepare_data();
  const auto p = input("tokenizer");
  if (!enc_) {
    Encoding e;
    e.tokenizer = Tokenizer::load(p);
    e.tpl = cfg_.data.tpl;
    e.limits = cfg_.data.limits;
    enc_ = std::move(e);
  }
  return *enc_;
}

std::vector<PreferencePair> Run::split(const std::string& name) {
  prepare_data();
  if (name == "base_corpus") return load_preference_dataset(input("base_corpus")).pairs;
  const auto splits = SplitManifest::from_json(read_json_file(input("splits")));
  const auto pairs = load_preference_dataset(input("pairs")).pairs;
  if (name == "instruct") return select_pairs(pairs, splits.instruct);
  if (name == "align") return select_pairs(pairs, splits.align);
  if (name == "eval") return select_pairs(pairs, splits.eval);
  throw DataError("unknown split '" + name + "'");
}

// ---------------------------------------------------------------------------
// Models

FloatModel Run::base() {
  if (manifest_.has("base")) return load_model("base");
  return stage("base", [&] {
    const auto corpus = split("base_corpus");
    ModelConfig mc = cfg_.model;
    mc.seed = cfg_.stage_seed("model", mc.seed);
    TrainConfig t = cfg_.base;
    t.seed = cfg_.stage_seed("base", t.seed);
    auto r = train_base(mc, corpus, encoding(), t, loop("base", "base_corpus"));
    save_model("base", r.model, "base",
               {{"train", t.to_json()}, {"initial_loss", r.initial_loss}, {"final_loss", r.final_loss}});
    return std::move(r.model);
  });
}

FloatModel Run::instruct_scit() {
  if (manifest_.has("scit")) return load_model("scit");
  return stage("instruct:scit", [&] {
    const auto b = base();
    auto c = cfg_.instruct.scit;
    c.train.seed = cfg_.stage_seed("scit", c.train.seed);
    auto r = train_scit(b, split("instruct"), encoding(), c, loop("instruct:scit", "instruct"));
    save_model("scit", r.model, "instruct",
               {{"variant", "scit"},
                {"train", c.train.to_json()},
                {"contrastive_only", c.contrastive_only},
                {"initial_loss", r.initial_loss},
                {"final_loss", r.final_loss}});
    return std::move(r.model);
  });
}

namespace {

TrainConfig seeded(const RunConfig& cfg, TrainConfig t, const std::string& tag) {
  t.seed = cfg.stage_seed(tag, t.seed);
  return t;
}

}  // namespace

DualModels Run::instruct_dual() {
  if (manifest_.has("dual_preferred") && manifest_.has("dual_dispreferred")) {
    return DualModels{load_model("dual_preferred"), load_model("dual_dispreferred")};
  }
  return stage("instruct:dual", [&] {
    const auto b = base();
    const auto t = seeded(cfg_, cfg_.instruct.dual, "sft");
    const auto pairs = split("instruct");
    auto o = loop("instruct:dual", "instruct");
    auto r = train_dual(b, pairs, encoding(), t, o);
    const json extra = {{"variant", "dual"}, {"train", t.to_json()}};
    auto ex_h = extra;
    ex_h["role"] = "preferred";
    ex_h["final_loss"] = r.preferred.final_loss;
    auto ex_l = extra;
    ex_l["role"] = "dispreferred";
    ex_l["final_loss"] = r.dispreferred.final_loss;
    save_model("dual_preferred", r.preferred.model, "instruct", ex_h);
    save_model("dual_dispreferred", r.dispreferred.model, "instruct", ex_l);
    return DualModels{std::move(r.preferred.model), std::move(r.dispreferred.model)};
  });
}

FloatModel Run::psft() {
  if (manifest_.has("psft")) return load_model("psft");
  return stage("baseline:psft", [&] {
    const auto t = seeded(cfg_, cfg_.baselines.psft, "sft");
    const json extra = {{"baseline", "psft"}, {"train", t.to_json()}};
    // Identical settings make this the preferred half of the dual stage.
    if (manifest_.has("dual_preferred") && t.to_json() == seeded(cfg_, cfg_.instruct.dual, "sft").to_json()) {
      auto m = load_model("dual_preferred");
      save_model("psft", m, "baseline:psft", extra);
      return m;
    }
    const auto b = base();
    auto r = train_preferred_sft(b, split("instruct"), encoding(), t, loop("baseline:psft", "instruct"));
    save_model("psft", r.model, "baseline:psft", extra);
    return std::move(r.model);
  });
}

FloatModel Run::dpo() {
  if (manifest_.has("dpo")) return load_model("dpo");
  return stage("baseline:dpo", [&] {
    const auto ref = psft();
    auto c = cfg_.baselines.dpo;
    c.train.seed = cfg_.stage_seed("dpo", c.train.seed);
    c.adapter_seed = cfg_.stage_seed("adapter:dpo", c.adapter_seed);
    auto r = train_dpo(ref, split("instruct"), encoding(), c, loop("baseline:dpo", "instruct"));
    save_model("dpo", r.model, "baseline:dpo",
               {{"dpo", c.to_json()}, {"initial_loss", r.initial_loss}, {"final_loss", r.final_loss}}, "psft");
    return std::move(r.model);
  });
}

std::pair<FloatModel, FloatModel> Run::sources(SourceMode mode) {
  if (mode == SourceMode::scit) {
    auto m = instruct_scit();
    return {m, m};
  }
  auto d = instruct_dual();
  return {std::move(d.preferred), std::move(d.dispreferred)};
}

namespace {

CollectionConfig collection_for(const RunConfig& cfg, SourceMode mode) {
  auto c = cfg.collect;
  c.mode = mode;
  return c;
}

AlignConfig align_for(const RunConfig& cfg, const std::string& tag) {
  auto a = cfg.align;
  a.train.seed = cfg.stage_seed("align:" + tag, a.train.seed);
  a.adapter_seed = cfg.stage_seed("adapter:align", a.adapter_seed);
  return a;
}

}  // namespace

DifferenceVectors Run::vectors(SourceMode mode) {
  const auto name = "vectors_" + to_string(mode);
  if (manifest_.has(name)) return load_vector_store(input(name));
  return stage("collect:" + to_string(mode), [&] {
    const auto [plus, minus] = sources(mode);
    input(mode == SourceMode::scit ? "scit" : "dual_preferred");
    if (mode == SourceMode::dual) input("dual_dispreferred");
    const auto c = collection_for(cfg_, mode);
    const auto items = both_items(split("align"));
    auto v = difference_vectors(collect_activity(plus, minus, items, encoding(), c), c);
    const fs::path rel = fs::path("vectors") / to_string(mode);
    save_vector_store(dir_ / rel, v);
    manifest_.record(dir_, name, current_stage_, rel, current_inputs_);
    manifest_.save(dir_);
    return v;
  });
}

FloatModel Run::aligned(SourceMode mode) {
  const auto name = "aligned_" + to_string(mode);
  if (manifest_.has(name)) return load_model(name);
  return stage("align:" + to_string(mode), [&] {
    const auto b = base();
    const auto v = vectors(mode);
    input("vectors_" + to_string(mode));
    const auto a = align_for(cfg_, to_string(mode));
    auto r = train_align(b, v, both_items(split("align")), encoding(), a, loop("align:" + to_string(mode), "align"));
    save_model(name, r.model, "align",
               {{"variant", to_string(mode)},
                {"align", a.to_json()},
                {"initial_loss", r.initial_loss},
                {"final_loss", r.final_loss},
                {"displacement", r.displacement},
                {"direction_cosine", r.direction_cosine},
                {"consistency_checks", r.consistency_checks}},
               "base");
    return std::move(r.model);
  });
}

// ---------------------------------------------------------------------------
// Reports

ComparisonReport Run::evaluate(const std::vector<std::string>& methods) {
  return stage("eval", [&] {
    std::vector<FloatModel> models;
    std::vector<std::string> names;
    models.reserve(methods.size());
    for (const auto& m : methods) {
      if (m == "base") {
        models.push_back(base());
        input("base");
        names.push_back("base");
      } else if (m == "scit" || m == "dual") {
        const auto mode = source_mode_from_string(m);
        models.push_back(aligned(mode));
        input("aligned_" + m);
        names.push_back(method_name(mode));
      } else if (m == "psft") {
        models.push_back(psft());
        input("psft");
        names.push_back("preferred-sft");
      } else if (m == "dpo") {
        models.push_back(dpo());
        input("dpo");
        names.push_back("dpo");
      } else {
        throw ConfigError("eval.methods: unknown method '" + m + "'");
      }
    }
    std::vector<MethodEntry> entries;
    for (std::size_t i = 0; i < models.size(); ++i) entries.push_back({names[i], &models[i]});
    auto report = compare_methods(entries, split("eval"), encoding(), cfg_.eval);
    write_report_jsonl(dir_ / "reports/comparison.jsonl", report);
    write_text_file(dir_ / "reports/comparison.txt", render_report_table(report));
    manifest_.record(dir_, "report_comparison", current_stage_, "reports/comparison.jsonl", current_inputs_);
    manifest_.record(dir_, "report_comparison_table", current_stage_, "reports/comparison.txt", current_inputs_);
    manifest_.data["report_methods"] = methods;
    manifest_.save(dir_);
    return report;
  });
}

namespace {

AblationInputs ablation_inputs(const RunConfig& cfg, const FloatModel* base, std::vector<StimulusText> items,
                               std::vector<PreferencePair> eval_pairs, const Encoding& enc, LoopOptions loop,
                               const std::string& tag) {
  AblationInputs in;
  in.base = base;
  in.align_items = std::move(items);
  in.eval_pairs = std::move(eval_pairs);
  in.enc = enc;
  in.align = align_for(cfg, tag);
  in.eval = cfg.eval;
  in.loop = std::move(loop);
  return in;
}

}  // namespace

std::vector<AblationRow> Run::ablate_alpha(SourceMode mode) {
  const auto tag = "ablate:alpha:" + to_string(mode);
  return stage(tag, [&] {
    const auto b = base();
    input("base");
    const auto v = vectors(mode);
    input("vectors_" + to_string(mode));
    const auto in = ablation_inputs(cfg_, &b, both_items(split("align")), split("eval"), encoding(),
                                    loop(tag, "align"), to_string(mode));
    auto rows = run_ablation_alpha(in, v, cfg_.ablate.alphas);
    const auto rel = "reports/ablation_alpha_" + to_string(mode) + ".csv";
    write_ablation_csv(dir_ / rel, rows);
    manifest_.record(dir_, "ablation_alpha_" + to_string(mode), current_stage_, rel, current_inputs_);
    manifest_.save(dir_);
    return rows;
  });
}

std::vector<AblationRow> Run::ablate_layers(SourceMode mode) {
  const auto tag = "ablate:layers:" + to_string(mode);
  return stage(tag, [&] {
    const auto b = base();
    input("base");
    const auto [plus, minus] = sources(mode);
    input(mode == SourceMode::scit ? "scit" : "dual_preferred");
    if (mode == SourceMode::dual) input("dual_dispreferred");
    const auto in = ablation_inputs(cfg_, &b, both_items(split("align")), split("eval"), encoding(),
                                    loop(tag, "align"), to_string(mode));
    CollectionSource src{&plus, &minus, collection_for(cfg_, mode)};
    auto rows = run_ablation_layers(in, src, cfg_.ablate.ranges);
    const auto rel = "reports/ablation_layers_" + to_string(mode) + ".csv";
    write_ablation_csv(dir_ / rel, rows);
    manifest_.record(dir_, "ablation_layers_" + to_string(mode), current_stage_, rel, current_inputs_);
    manifest_.save(dir_);
    return rows;
  });
}

std::vector<ProjectionPoint> Run::export_viz(SourceMode mode) {
  const auto tag = "viz:" + to_string(mode);
  return stage(tag, [&] {
    const int n_layers = cfg_.model.n_layers;
    const int layer = cfg_.viz.layer >= 0 ? cfg_.viz.layer : std::min(cfg_.align.range.stop, n_layers - 1);
    auto items = chosen_items(split("eval"));
    if (static_cast<int>(items.size()) > cfg_.viz.items) items.resize(static_cast<std::size_t>(cfg_.viz.items));
    std::vector<std::pair<std::string, FloatModel>> models;
    models.emplace_back("base", base());
    input("base");
    models.emplace_back("preferred-sft", psft());
    input("psft");
    auto dual = instruct_dual();
    input("dual_dispreferred");
    models.emplace_back("dispreferred-sft", std::move(dual.dispreferred));
    models.emplace_back("aligned", aligned(mode));
    input("aligned_" + to_string(mode));
    std::vector<ProjectionCondition> conds;
    for (const auto& [name, m] : models) {
      ProjectionCondition c;
      c.name = name;
      c.states = last_token_states(m, items, encoding(), Polarity::plain, layer, cfg_.eval.margin_chunk, &c.ids);
      conds.push_back(std::move(c));
    }
    const auto rel = "reports/projection_" + to_string(mode) + ".csv";
    auto points = export_representation_projection(conds, projector_from_string(cfg_.viz.projector),
                                                    cfg_.stage_seed("viz", 0), dir_ / rel);
    manifest_.record(dir_, "projection_" + to_string(mode), current_stage_, rel, current_inputs_);
    manifest_.save(dir_);
    return points;
  });
}

void Run::replay(const RunManifest& source) {
  for (const auto& rec : source.data.at("stages")) {
    const auto name = rec.at("stage").get<std::string>();
    const auto colon = name.rfind(':');
    const auto mode_of = [&] { return source_mode_from_string(name.substr(colon + 1)); };
    if (name == "data") {
      prepare_data();
    } else if (name == "base") {
      base();
    } else if (name == "instruct:scit") {
      instruct_scit();
    } else if (name == "instruct:dual") {
      instruct_dual();
    } else if (name.rfind("collect:", 0) == 0) {
      vectors(mode_of());
    } else if (name.rfind("align:", 0) == 0) {
      aligned(mode_of());
    } else if (name == "baseline:psft") {
      psft();
    } else if (name == "baseline:dpo") {
      dpo();
    } else if (name == "eval") {
      evaluate(source.data.value("report_methods", std::vector<std::string>{"base"}));
    } else if (name.rfind("ablate:alpha:", 0) == 0) {
      ablate_alpha(mode_of());
    } else if (name.rfind("ablate:layers:", 0) == 0) {
      ablate_layers(mode_of());
    } else if (name.rfind("viz:", 0) == 0) {
      export_viz(mode_of());
    } else {
      throw DataError("manifest lists an unknown stage '" + name + "'");
    }
  }
}

}  // namespace rahf
