#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "rahf/data.hpp"
#include "rahf/errors.hpp"

using namespace rahf;

namespace {

std::vector<std::string> corpus_of(const std::vector<PreferencePair>& pairs, const InstructionTemplate& tpl) {
  std::vector<std::string> out;
  for (const auto& p : pairs) {
    for (auto pol : {Polarity::positive, Polarity::negative, Polarity::plain}) {
      out.push_back(render_stimulus(tpl, p.query, p.chosen, pol));
      out.push_back(render_stimulus(tpl, p.query, p.rejected, pol));
    }
  }
  return out;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("rahf_data_" + name);
}

}  // namespace

TEST_CASE("pretokenize partitions the text") {
  const std::string text = "Hello,  world!\n\nHuman: it's 42 ok";
  std::string joined;
  for (auto c : pretokenize(text)) joined += c;
  CHECK(joined == text);
}

TEST_CASE("tokenizer round-trips corpus text and never emits specials") {
  const InstructionTemplate tpl;
  const auto pairs = make_synthetic_task("verbosity", 200, 1);
  const auto corpus = corpus_of(pairs, tpl);
  const auto tok = Tokenizer::train(corpus, 512);
  CHECK(tok.vocab_size() == 512);
  std::size_t bytes = 0;
  std::size_t tokens = 0;
  for (const auto& text : corpus) {
    const auto ids = tok.encode(text);
    CHECK(tok.decode(ids) == text);
    for (int id : ids) {
      REQUIRE((id < Tokenizer::kPad || id >= Tokenizer::kFirstMerge));
    }
    bytes += text.size();
    tokens += ids.size();
  }
  CHECK(tokens * 3 < bytes);  // merges actually compress
  // Unseen text still round-trips through the byte fallback.
  const std::string odd = "Zebra {x} \t\x01 ünïcode";
  CHECK(tok.decode(tok.encode(odd)) == odd);
  const auto restored = Tokenizer::from_json(tok.to_json());
  CHECK(restored.encode(corpus[0]) == tok.encode(corpus[0]));
}

TEST_CASE("render_stimulus: polarities differ only in the instruction") {
  const InstructionTemplate tpl;
  const auto plus = render_stimulus(tpl, "Describe the lake.", "The lake is calm.", Polarity::positive);
  const auto minus = render_stimulus(tpl, "Describe the lake.", "The lake is calm.", Polarity::negative);
  const auto plain = render_stimulus(tpl, "Describe the lake.", "The lake is calm.", Polarity::plain);
  CHECK(plain == "Human: Describe the lake.\n\nAssistant: The lake is calm.");
  CHECK(plus == tpl.positive + "\n\n" + plain);
  CHECK(minus == tpl.negative + "\n\n" + plain);
  // The differing span lies inside the instruction.
  std::size_t first = 0;
  while (plus[first] == minus[first]) ++first;
  std::size_t back = 0;
  while (plus[plus.size() - 1 - back] == minus[minus.size() - 1 - back]) ++back;
  CHECK(first < tpl.positive.size());
  CHECK(plus.size() - back <= tpl.positive.size());
  CHECK_THROWS_AS(render_stimulus(tpl, "", "x", Polarity::plain), DataError);
  InstructionTemplate same;
  same.negative = same.positive;
  CHECK_THROWS_AS(same.validate(), ConfigError);
}

TEST_CASE("layout_batch pads the prompt on the left and the response on the right") {
  TokenizedStimulus s{"a", {1, 2, 3, 4, 5}, {6, 7}, false};
  const auto b = layout_batch({s}, Limits{8, 4}, Polarity::plain);
  b.validate();
  CHECK(b.first_real(0) == 3);
  for (int t = 0; t < 3; ++t) {
    CHECK(b.tokens[t] == Tokenizer::kPad);
    CHECK(b.attention[t] == 0);
  }
  CHECK(b.tokens[3] == 1);
  CHECK(b.tokens[8] == 6);
  CHECK(b.tokens[9] == 7);
  CHECK(b.tokens[10] == Tokenizer::kPad);
  for (std::size_t i = 0; i < b.tokens.size(); ++i) {
    CHECK_FALSE((b.prompt[i] && b.response[i]));
  }
}

TEST_CASE("pad_and_align keeps response tokens column-aligned across polarities") {
  const InstructionTemplate tpl;
  const auto pairs = make_synthetic_task("verbosity", 50, 2);
  const auto tok = Tokenizer::train(corpus_of(pairs, tpl), 512);
  std::vector<StimulusText> items;
  for (const auto& p : pairs) {
    items.push_back({p.id + ":h", p.query, p.chosen});
    items.push_back({p.id + ":l", p.query, p.rejected});
  }
  const auto a = pad_and_align(tok, tpl, items, Limits{64, 64});
  CHECK(a.dropped.empty());
  a.positive.validate();
  a.negative.validate();
  REQUIRE(a.positive.batch == a.negative.batch);
  CHECK(a.positive.response == a.negative.response);
  CHECK(a.positive.tokens.size() == a.negative.tokens.size());
  for (std::size_t i = 0; i < a.positive.tokens.size(); ++i) {
    if (a.positive.response[i]) {
      REQUIRE(a.positive.tokens[i] == a.negative.tokens[i]);
    }
  }
  CHECK(a.positive.prompt != a.negative.prompt);
}

TEST_CASE("over-long responses are truncated and flagged, over-long prompts dropped") {
  const InstructionTemplate tpl;
  const auto tok = Tokenizer::train({"a b c"}, 260);
  std::string longr;
  for (int i = 0; i < 70; ++i) longr += "x";  // 70 single-byte tokens plus eos
  const auto a = pad_and_align(tok, tpl, {{"ok", "q", longr}}, Limits{1024, 64});
  REQUIRE(a.positive.batch == 1);
  CHECK(a.positive.response_lengths[0] == 64);
  CHECK(a.positive.truncated[0] == 1);
  CHECK(a.truncated == 1);
  const auto d = pad_and_align(tok, tpl, {{"long", "q", "r"}}, Limits{16, 64});
  CHECK(d.positive.batch == 0);
  CHECK(d.dropped == std::vector<std::string>{"long"});
}

TEST_CASE("dataset loading validates records and reports line numbers") {
  const auto path = temp_file("load.jsonl");
  {
    std::ofstream out(path);
    out << R"({"id":"a","query":"q","chosen":"x","rejected":"y"})" << "\n";
    out << R"({"id":"b","query":"q","chosen":"same","rejected":"same"})" << "\n";
    out << R"({"id":"c","query":"q","chosen":"x"})" << "\n";
    out << "not json\n";
    out << R"({"id":"d","query":"q","chosen":"x","rejected":"z"})" << "\n";
    out << R"({"id":"e","query":"q","chosen":"x","rejected":"w"})" << "\n";
  }
  const auto r = load_preference_dataset(path);
  CHECK(r.pairs.size() == 3);
  REQUIRE(r.rejected.size() == 3);
  CHECK(r.rejected[0].first == 2);
  CHECK(r.rejected[0].second.find("chosen equals rejected") != std::string::npos);
  CHECK(r.rejected[1].first == 3);
  CHECK(r.rejected[2].first == 4);
  {
    std::ofstream out(path);
    out << R"({"id":"b","query":"q","chosen":"same","rejected":"same"})" << "\n";
  }
  CHECK_THROWS_AS(load_preference_dataset(path), DataError);
  std::filesystem::remove(path);
}

TEST_CASE("1000 synthetic records round-trip through write and load") {
  const auto pairs = make_synthetic_task("politeness", 1000, 5);
  const auto path = temp_file("roundtrip.jsonl");
  write_preference_dataset(path, pairs);
  const auto r = load_preference_dataset(path);
  CHECK(r.rejected.empty());
  CHECK(r.pairs == pairs);
  CHECK(dataset_checksum(r.pairs) == dataset_checksum(pairs));
  std::filesystem::remove(path);
}

TEST_CASE("synthetic tasks are deterministic, distinct and judge-ordered") {
  for (const auto& task : synthetic_task_names()) {
    CAPTURE(task);
    CHECK(make_synthetic_task(task, 2, 1) == make_synthetic_task(task, 2, 1));
    const auto pairs = make_synthetic_task(task, 500, 3);
    std::set<std::string> ids;
    const auto judge = task_judge(task);
    for (const auto& p : pairs) {
      ids.insert(p.id);
      CHECK(pair_defect(p).empty());
      CHECK(judge(p.query, p.chosen) > judge(p.query, p.rejected));
    }
    CHECK(ids.size() == 500);
  }
  CHECK_THROWS_AS(make_synthetic_task("nope", 1, 1), ConfigError);
}

TEST_CASE("verbosity judge counts distinct well-formed sentences") {
  const auto j = task_judge("verbosity");
  CHECK(j("", "The lake is calm.") == 1.0);
  CHECK(j("", "The lake is calm. Many people visit the lake in summer.") == 2.0);
  CHECK(j("", "The lake is calm. The lake is calm.") == 1.0);
  CHECK(j("", "The lake is calm. xyzzy foo bar.") == 0.5);
  CHECK(j("", "The lake is") == -0.5);
  CHECK(j("", "") == 0.0);
}

TEST_CASE("splits are disjoint and deterministic") {
  const auto pairs = make_synthetic_task("verbosity", 100, 9);
  const auto a = make_splits(pairs, 4, 50, 30, 20);
  const auto b = make_splits(pairs, 4, 50, 30, 20);
  CHECK(a.to_json() == b.to_json());
  std::set<std::string> all;
  for (const auto* s : {&a.instruct, &a.align, &a.eval}) all.insert(s->begin(), s->end());
  CHECK(all.size() == 100);
  CHECK_THROWS_AS(make_splits(pairs, 4, 50, 30, 21), ConfigError);
  auto bad = a;
  bad.eval.push_back(bad.instruct[0]);
  CHECK_THROWS_AS(bad.validate(), DataError);
  CHECK(select_pairs(pairs, a.eval).size() == 20);
  CHECK_THROWS_AS(select_pairs(pairs, {"missing"}), DataError);
}
