#include <string>

#include "doctest.h"
#include "rahf/config.hpp"
#include "rahf/errors.hpp"

using namespace rahf;

namespace {

std::string error_of(const std::string& yaml) {
  try {
    parse_config(yaml);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("empty config gives valid defaults") {
  const auto c = parse_config("");
  CHECK(c.align.alpha == 5.0);
  CHECK(c.align.adapter.rank == 8);
  CHECK(c.align.adapter.scale == 16.0);
  CHECK(c.align.adapter.dropout == 0.05);
  CHECK(c.eval.decode.repetition_penalty == 1.2);
  CHECK(c.collect.budget == 64);
  CHECK(c.baselines.dpo.beta == 0.1);
  CHECK(c.model.n_layers == 8);
  CHECK(c.collect.range.layers() == std::vector<int>{2, 3, 4, 5});
}

TEST_CASE("validation errors name the key path") {
  CHECK(error_of("align:\n  alpha: -1\n").rfind("align.alpha", 0) == 0);
  CHECK(error_of("align:\n  rank: 0\n").rfind("align.adapter.rank", 0) == 0);
  CHECK(error_of("eval:\n  decode:\n    repetition_penalty: 0.5\n").rfind("eval.decode.repetition_penalty", 0) == 0);
  CHECK(error_of("baselines:\n  dpo:\n    beta: 0\n").rfind("baseline.dpo.beta", 0) == 0);
  CHECK(error_of("align:\n  alhpa: 2\n") == "align.alhpa: unknown key");
  CHECK(error_of("model:\n  n_layers: four\n").rfind("model.n_layers: wrong type", 0) == 0);
  CHECK(error_of("collect:\n  layers: [2, 12, 1]\n").rfind("collect.layers", 0) == 0);
  CHECK(error_of("base:\n  schedule: step\n").rfind("base.", 0) == 0);
  CHECK(error_of("run: [1, 2\n").rfind("config:", 0) == 0);
}

TEST_CASE("dump and load round trip") {
  const std::string text =
      "run:\n  id: t1\n  seed: 7\n"
      "align:\n  alpha: 10\n  layers: [1, 5, 2]\n"
      "collect:\n  layers: [1, 5, 2]\n  mode: dual\n"
      "data:\n  template:\n    positive: \"be: good\\n\"\n"
      "ablate:\n  alphas: [0, 2.5]\n";
  const auto c = parse_config(text);
  CHECK(c.align.alpha == 10.0);
  CHECK(c.align.range == LayerRange{1, 5, 2});
  CHECK(c.collect.mode == SourceMode::dual);
  CHECK(c.data.tpl.positive == "be: good\n");
  const auto dumped = dump_config(c);
  const auto back = parse_config(dumped);
  CHECK(back.to_json() == c.to_json());
  CHECK(dump_config(back) == dumped);
}

TEST_CASE("yaml scalars keep their types") {
  const auto j = yaml_to_json("a: 3\nb: 3.5\nc: \"3\"\nd: true\ne: text\nf: 1e-4\n");
  CHECK(j["a"].is_number_integer());
  CHECK(j["b"].is_number_float());
  CHECK(j["c"].is_string());
  CHECK(j["d"].is_boolean());
  CHECK(j["e"] == "text");
  CHECK(j["f"].get<double>() == 1e-4);
}
