#include "rahf/config.hpp"

#include <yaml-cpp/yaml.h>

#include <cmath>
#include <cstdlib>
#include <sstream>

#include "rahf/errors.hpp"

namespace rahf {

namespace {

TrainConfig train_defaults(double lr, int epochs, int batch) {
  TrainConfig t;
  t.learning_rate = lr;
  t.epochs = epochs;
  t.batch_size = batch;
  return t;
}

json scit_to_json(const ScitConfig& c) {
  return json{{"train", c.train.to_json()}, {"contrastive_only", c.contrastive_only}, {"eval_batch", c.eval_batch}};
}

json limits_to_json(const Limits& l) {
  return json{{"max_prompt_len", l.max_prompt_len}, {"max_response_len", l.max_response_len}};
}

std::string join_path(const std::string& a, const std::string& b) { return a.empty() ? b : a + "." + b; }

// Checks `given` against the shape of `defaults`: no unknown keys, and every
// value has the type of its default (integers are accepted for reals).
void check_shape(const json& given, const json& defaults, const std::string& path) {
  if (defaults.is_object()) {
    if (!given.is_object()) throw ConfigError(path + ": expected a mapping");
    for (const auto& [k, v] : given.items()) {
      if (!defaults.contains(k)) throw ConfigError(join_path(path, k) + ": unknown key");
      check_shape(v, defaults[k], join_path(path, k));
    }
    return;
  }
  const bool ok = (defaults.is_boolean() && given.is_boolean()) ||
                  (defaults.is_number_float() && given.is_number()) ||
                  (defaults.is_number_integer() && given.is_number_integer()) ||
                  (defaults.is_string() && given.is_string()) || (defaults.is_array() && given.is_array()) ||
                  defaults.is_null();
  if (!ok) throw ConfigError(path + ": wrong type, expected " + std::string(defaults.type_name()));
}

template <class F>
void keyed(const std::string& path, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

RunConfig defaults() {
  RunConfig c;
  c.base = train_defaults(1e-3, 2, 32);
  c.instruct.scit.train = train_defaults(3e-4, 2, 16);
  c.instruct.dual = train_defaults(3e-4, 2, 16);
  c.baselines.psft = c.instruct.dual;
  c.baselines.dpo.train = train_defaults(1e-3, 2, 16);
  return c;
}

}  // namespace

std::uint64_t RunConfig::stage_seed(const std::string& stage, std::uint64_t local) const {
  return derive_seed(run.seed, stage + ":" + std::to_string(local));
}

json RunConfig::to_json() const {
  json ranges = json::array();
  for (const auto& r : ablate.ranges) ranges.push_back(r.to_json());
  return json{
      {"run", {{"id", run.id}, {"seed", run.seed}, {"out_dir", run.out_dir}}},
      {"data",
       {{"task", data.task},
        {"dataset", data.dataset},
        {"pairs", data.pairs},
        {"base_corpus", data.base_corpus},
        {"n_instruct", data.n_instruct},
        {"n_align", data.n_align},
        {"n_eval", data.n_eval},
        {"vocab_size", data.vocab_size},
        {"limits", limits_to_json(data.limits)},
        {"template", data.tpl.to_json()}}},
      {"model", model.to_json()},
      {"base", base.to_json()},
      {"instruct",
       {{"variant", to_string(instruct.variant)}, {"scit", scit_to_json(instruct.scit)}, {"dual", instruct.dual.to_json()}}},
      {"collect", collect.to_json()},
      {"align", align.to_json()},
      {"baselines", {{"psft", baselines.psft.to_json()}, {"dpo", baselines.dpo.to_json()}}},
      {"eval", eval.to_json()},
      {"ablate", {{"alphas", ablate.alphas}, {"ranges", ranges}}},
      {"viz", {{"projector", viz.projector}, {"layer", viz.layer}, {"items", viz.items}}},
  };
}

RunConfig RunConfig::from_json(const json& j) {
  const RunConfig d = defaults();
  if (j.is_null()) return d;
  check_shape(j, d.to_json(), "");
  RunConfig c = d;
  auto sec = [&](const char* k) { return j.contains(k) ? j[k] : json::object(); };
  keyed("run", [&] {
    const auto s = sec("run");
    c.run.id = s.value("id", c.run.id);
    c.run.seed = s.value("seed", c.run.seed);
    c.run.out_dir = s.value("out_dir", c.run.out_dir);
  });
  keyed("data", [&] {
    const auto s = sec("data");
    c.data.task = s.value("task", c.data.task);
    c.data.dataset = s.value("dataset", c.data.dataset);
    c.data.pairs = s.value("pairs", c.data.pairs);
    c.data.base_corpus = s.value("base_corpus", c.data.base_corpus);
    c.data.n_instruct = s.value("n_instruct", c.data.n_instruct);
    c.data.n_align = s.value("n_align", c.data.n_align);
    c.data.n_eval = s.value("n_eval", c.data.n_eval);
    c.data.vocab_size = s.value("vocab_size", c.data.vocab_size);
    if (s.contains("limits")) {
      c.data.limits.max_prompt_len = s["limits"].value("max_prompt_len", c.data.limits.max_prompt_len);
      c.data.limits.max_response_len = s["limits"].value("max_response_len", c.data.limits.max_response_len);
    }
    if (s.contains("template")) c.data.tpl = InstructionTemplate::from_json(s["template"]);
  });
  keyed("model", [&] {
    auto m = d.model.to_json();
    m.merge_patch(sec("model"));
    c.model = ModelConfig::from_json(m);
  });
  keyed("base", [&] { c.base = TrainConfig::from_json(sec("base"), d.base); });
  keyed("instruct", [&] {
    const auto s = sec("instruct");
    if (s.contains("variant")) c.instruct.variant = source_mode_from_string(s["variant"].get<std::string>());
    if (s.contains("scit")) {
      const auto& t = s["scit"];
      if (t.contains("train")) c.instruct.scit.train = TrainConfig::from_json(t["train"], d.instruct.scit.train);
      c.instruct.scit.contrastive_only = t.value("contrastive_only", c.instruct.scit.contrastive_only);
      c.instruct.scit.eval_batch = t.value("eval_batch", c.instruct.scit.eval_batch);
    }
    if (s.contains("dual")) c.instruct.dual = TrainConfig::from_json(s["dual"], d.instruct.dual);
  });
  keyed("collect", [&] { c.collect = CollectionConfig::from_json(sec("collect"), d.collect); });
  keyed("align", [&] { c.align = AlignConfig::from_json(sec("align"), d.align); });
  keyed("baselines", [&] {
    const auto s = sec("baselines");
    if (s.contains("psft")) c.baselines.psft = TrainConfig::from_json(s["psft"], d.baselines.psft);
    if (s.contains("dpo")) c.baselines.dpo = DpoConfig::from_json(s["dpo"], d.baselines.dpo);
  });
  keyed("eval", [&] { c.eval = EvalSettings::from_json(sec("eval"), d.eval); });
  keyed("ablate", [&] {
    const auto s = sec("ablate");
    if (s.contains("alphas")) c.ablate.alphas = s["alphas"].get<std::vector<double>>();
    if (s.contains("ranges")) {
      c.ablate.ranges.clear();
      for (const auto& r : s["ranges"]) c.ablate.ranges.push_back(LayerRange::from_json(r));
    }
  });
  keyed("viz", [&] {
    const auto s = sec("viz");
    c.viz.projector = s.value("projector", c.viz.projector);
    c.viz.layer = s.value("layer", c.viz.layer);
    c.viz.items = s.value("items", c.viz.items);
  });
  return c;
}

void RunConfig::validate() const {
  if (run.id.empty() || run.id.find('/') != std::string::npos) throw ConfigError("run.id: must be a plain name");
  if (data.dataset.empty()) task_judge(data.task);
  if (data.pairs < 1) throw ConfigError("data.pairs: must be >= 1");
  if (data.base_corpus < 1) throw ConfigError("data.base_corpus: must be >= 1");
  if (data.n_instruct < 1 || data.n_align < 1 || data.n_eval < 1) {
    throw ConfigError("data.n_instruct: every split needs at least one pair");
  }
  if (data.n_instruct + data.n_align + data.n_eval > data.pairs && data.dataset.empty()) {
    throw ConfigError("data.pairs: smaller than the three splits together");
  }
  if (data.vocab_size < Tokenizer::kFirstMerge) throw ConfigError("data.vocab_size: must be >= 259");
  if (data.vocab_size > model.vocab_size) throw ConfigError("data.vocab_size: exceeds model.vocab_size");
  if (data.limits.max_prompt_len < 2 || data.limits.max_response_len < 2) {
    throw ConfigError("data.limits: lengths must be >= 2");
  }
  keyed("data.template", [&] { data.tpl.validate(); });
  keyed("model", [&] { model.validate(); });
  if (model.max_seq_len < data.limits.max_prompt_len + data.limits.max_response_len) {
    throw ConfigError("model.max_seq_len: shorter than the prompt and response limits together");
  }
  if (model.n_layers < 4) throw ConfigError("model.n_layers: the pipeline needs at least 4 layers");
  base.validate("base");
  instruct.scit.train.validate("instruct.scit.train");
  if (instruct.scit.eval_batch < 1) throw ConfigError("instruct.scit.eval_batch: must be >= 1");
  instruct.dual.validate("instruct.dual");
  collect.validate(model.n_layers, data.limits.max_response_len);
  if (collect.split != "align") throw ConfigError("collect.split: stimuli are drawn from the align split");
  align.validate(model.n_layers);
  if (align.range != collect.range) throw ConfigError("align.layers: must equal collect.layers");
  if (align.budget > collect.budget) throw ConfigError("align.budget: exceeds collect.budget");
  baselines.psft.validate("baselines.psft");
  baselines.dpo.validate(model.n_layers);
  eval.validate();
  if (eval.task != data.task && data.dataset.empty()) throw ConfigError("eval.task: must match data.task");
  if (ablate.alphas.empty()) throw ConfigError("ablate.alphas: empty list");
  for (double a : ablate.alphas) {
    if (!(a >= 0) || !std::isfinite(a)) throw ConfigError("ablate.alphas: values must be >= 0");
  }
  if (ablate.ranges.empty()) throw ConfigError("ablate.ranges: empty list");
  for (const auto& r : ablate.ranges) r.validate(model.n_layers, "ablate.ranges");
  keyed("viz.projector", [&] { projector_from_string(viz.projector); });
  if (viz.layer < -1 || viz.layer >= model.n_layers) throw ConfigError("viz.layer: outside the model");
  if (viz.items < 3) throw ConfigError("viz.items: must be >= 3");
}

namespace {

json node_to_json(const YAML::Node& n, const std::string& path) {
  switch (n.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
      return nullptr;
    case YAML::NodeType::Sequence: {
      json a = json::array();
      for (std::size_t i = 0; i < n.size(); ++i) a.push_back(node_to_json(n[i], path + "[" + std::to_string(i) + "]"));
      return a;
    }
    case YAML::NodeType::Map: {
      json o = json::object();
      for (const auto& kv : n) {
        const auto key = kv.first.as<std::string>();
        o[key] = node_to_json(kv.second, join_path(path, key));
      }
      return o;
    }
    case YAML::NodeType::Scalar: {
      const auto& s = n.Scalar();
      if (n.Tag() == "!") return s;  // quoted
      if (s == "true" || s == "false") return s == "true";
      if (s == "null" || s == "~") return nullptr;
      try {
        std::size_t used = 0;
        const long long v = std::stoll(s, &used);
        if (used == s.size()) return v;
      } catch (const std::exception&) {
      }
      try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size()) return v;
      } catch (const std::exception&) {
      }
      return s;
    }
  }
  throw ConfigError(path + ": unsupported YAML node");
}

void emit(YAML::Emitter& out, const json& j) {
  if (j.is_object()) {
    out << YAML::BeginMap;
    for (const auto& [k, v] : j.items()) {
      out << YAML::Key << k << YAML::Value;
      emit(out, v);
    }
    out << YAML::EndMap;
  } else if (j.is_array()) {
    const bool flat = std::all_of(j.begin(), j.end(), [](const json& e) { return e.is_primitive(); });
    out << (flat ? YAML::Flow : YAML::Block) << YAML::BeginSeq;
    for (const auto& e : j) emit(out, e);
    out << YAML::EndSeq;
  } else if (j.is_string()) {
    out << YAML::DoubleQuoted << j.get<std::string>();
  } else if (j.is_boolean()) {
    out << j.get<bool>();
  } else if (j.is_number_unsigned()) {
    out << j.get<std::uint64_t>();
  } else if (j.is_number_integer()) {
    out << j.get<long long>();
  } else if (j.is_number_float()) {
    // Always carries a '.' or exponent so it reads back as a real.
    auto s = json(j.get<double>()).dump();
    if (s.find_first_of(".eE") == std::string::npos) s += ".0";
    out << s;
  } else {
    out << YAML::Null;
  }
}

}  // namespace

json yaml_to_json(const std::string& yaml_text) {
  try {
    const auto root = YAML::Load(yaml_text);
    return node_to_json(root, "");
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

std::string json_to_yaml(const json& j) {
  YAML::Emitter out;
  emit(out, j);
  return std::string(out.c_str()) + "\n";
}

RunConfig parse_config(const std::string& yaml_text) {
  auto c = RunConfig::from_json(yaml_to_json(yaml_text));
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config: file not found: " + path.string());
  auto c = parse_config(read_text_file(path));
  if (const char* root = std::getenv("RAHF_RUN_ROOT"); root && *root) c.run.out_dir = root;
  return c;
}

std::string dump_config(const RunConfig& cfg) { return json_to_yaml(cfg.to_json()); }

}  // namespace rahf
