#include "rahf/data.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "rahf/errors.hpp"

namespace rahf {

std::string pair_defect(const PreferencePair& pair) {
  if (pair.id.empty()) {
    return "empty id";
  }
  if (pair.query.empty()) {
    return "empty query";
  }
  if (pair.chosen.empty()) {
    return "empty chosen";
  }
  if (pair.rejected.empty()) {
    return "empty rejected";
  }
  if (pair.chosen == pair.rejected) {
    return "chosen equals rejected";
  }
  return {};
}

// ---------------------------------------------------------------------------
// Tokenizer

namespace {

bool is_word_byte(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

}  // namespace

std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t j = i;
    if (text[j] == ' ' && j + 1 < text.size() && is_word_byte(text[j + 1])) {
      ++j;
    }
    if (is_word_byte(text[j])) {
      while (j < text.size() && is_word_byte(text[j])) {
        ++j;
      }
    } else {
      j = i + 1;
    }
    out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

void Tokenizer::rebuild() {
  pieces_.assign(kFirstMerge, std::string{});
  for (int b = 0; b < 256; ++b) {
    pieces_[static_cast<std::size_t>(b)] = std::string(1, static_cast<char>(b));
  }
  merge_rank_.clear();
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const auto [a, b] = merges_[r];
    if (a < 0 || b < 0 || a >= static_cast<int>(pieces_.size()) || b >= static_cast<int>(pieces_.size()) ||
        (a >= kPad && a < kFirstMerge) || (b >= kPad && b < kFirstMerge)) {
      throw DataError("tokenizer: merge " + std::to_string(r) + " refers to an unknown id");
    }
    pieces_.push_back(pieces_[static_cast<std::size_t>(a)] + pieces_[static_cast<std::size_t>(b)]);
    merge_rank_[merges_[r]] = static_cast<int>(r);
  }
}

Tokenizer Tokenizer::train(const std::vector<std::string>& corpus, int vocab_size) {
  if (vocab_size < kFirstMerge) {
    throw ConfigError("tokenizer.vocab_size: must be >= " + std::to_string(kFirstMerge));
  }
  std::map<std::string, long> chunk_counts;
  for (const auto& text : corpus) {
    for (auto chunk : pretokenize(text)) {
      ++chunk_counts[std::string(chunk)];
    }
  }
  std::vector<std::vector<int>> words;
  std::vector<long> counts;
  for (const auto& [chunk, count] : chunk_counts) {
    std::vector<int> ids;
    for (unsigned char c : chunk) {
      ids.push_back(c);
    }
    words.push_back(std::move(ids));
    counts.push_back(count);
  }
  Tokenizer tok;
  const int n_merges = vocab_size - kFirstMerge;
  for (int m = 0; m < n_merges; ++m) {
    std::map<std::pair<int, int>, long> pair_counts;
    for (std::size_t w = 0; w < words.size(); ++w) {
      for (std::size_t i = 0; i + 1 < words[w].size(); ++i) {
        pair_counts[{words[w][i], words[w][i + 1]}] += counts[w];
      }
    }
    // Highest count wins; std::map order breaks ties by smallest pair.
    std::pair<int, int> best{-1, -1};
    long best_count = 1;
    for (const auto& [p, c] : pair_counts) {
      if (c > best_count) {
        best = p;
        best_count = c;
      }
    }
    if (best.first < 0) {
      break;
    }
    const int id = kFirstMerge + static_cast<int>(tok.merges_.size());
    tok.merges_.push_back(best);
    for (auto& word : words) {
      std::vector<int> merged;
      merged.reserve(word.size());
      for (std::size_t i = 0; i < word.size(); ++i) {
        if (i + 1 < word.size() && word[i] == best.first && word[i + 1] == best.second) {
          merged.push_back(id);
          ++i;
        } else {
          merged.push_back(word[i]);
        }
      }
      word = std::move(merged);
    }
  }
  tok.rebuild();
  return tok;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> out;
  std::vector<int> ids;
  for (auto chunk : pretokenize(text)) {
    ids.clear();
    for (unsigned char c : chunk) {
      ids.push_back(c);
    }
    while (ids.size() > 1) {
      int best_rank = -1;
      std::size_t best_at = 0;
      for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
        const auto it = merge_rank_.find({ids[i], ids[i + 1]});
        if (it != merge_rank_.end() && (best_rank < 0 || it->second < best_rank)) {
          best_rank = it->second;
          best_at = i;
        }
      }
      if (best_rank < 0) {
        break;
      }
      ids[best_at] = kFirstMerge + best_rank;
      ids.erase(ids.begin() + static_cast<std::ptrdiff_t>(best_at) + 1);
    }
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= vocab_size()) {
      throw DataError("tokenizer: id " + std::to_string(id) + " outside vocabulary");
    }
    out += pieces_[static_cast<std::size_t>(id)];
  }
  return out;
}

json Tokenizer::to_json() const {
  json merges = json::array();
  for (const auto& [a, b] : merges_) {
    merges.push_back({a, b});
  }
  return {{"kind", "byte_bpe"}, {"pad", kPad}, {"bos", kBos}, {"eos", kEos}, {"merges", merges}};
}

Tokenizer Tokenizer::from_json(const json& j) {
  if (j.value("kind", std::string{}) != "byte_bpe") {
    throw DataError("tokenizer: unsupported kind");
  }
  Tokenizer tok;
  for (const auto& m : j.at("merges")) {
    tok.merges_.emplace_back(m.at(0).get<int>(), m.at(1).get<int>());
  }
  tok.rebuild();
  return tok;
}

void Tokenizer::save(const std::filesystem::path& path) const { write_json_file(path, to_json()); }

Tokenizer Tokenizer::load(const std::filesystem::path& path) { return from_json(read_json_file(path)); }

// ---------------------------------------------------------------------------
// Templates and stimuli

void InstructionTemplate::validate() const {
  if (positive == negative) {
    throw ConfigError("template: positive and negative instructions must differ");
  }
  if (positive.empty() || negative.empty()) {
    throw ConfigError("template: instructions must be nonempty");
  }
}

const std::string& InstructionTemplate::instruction(Polarity p) const {
  static const std::string none;
  switch (p) {
    case Polarity::positive:
      return positive;
    case Polarity::negative:
      return negative;
    case Polarity::plain:
      return none;
  }
  return none;
}

json InstructionTemplate::to_json() const {
  return {{"positive", positive},
          {"negative", negative},
          {"human_marker", human_marker},
          {"assistant_marker", assistant_marker},
          {"instruction_separator", instruction_separator}};
}

InstructionTemplate InstructionTemplate::from_json(const json& j) {
  InstructionTemplate t;
  t.positive = j.value("positive", t.positive);
  t.negative = j.value("negative", t.negative);
  t.human_marker = j.value("human_marker", t.human_marker);
  t.assistant_marker = j.value("assistant_marker", t.assistant_marker);
  t.instruction_separator = j.value("instruction_separator", t.instruction_separator);
  return t;
}

std::string render_prompt(const InstructionTemplate& tpl, std::string_view query, Polarity polarity) {
  if (query.empty()) {
    throw DataError("render: empty query");
  }
  std::string out;
  if (polarity != Polarity::plain) {
    out += tpl.instruction(polarity);
    out += tpl.instruction_separator;
  }
  out += tpl.human_marker;
  out += query;
  out += tpl.assistant_marker;
  return out;
}

std::string render_response(std::string_view response) { return " " + std::string(response); }

std::string render_stimulus(const InstructionTemplate& tpl, std::string_view query, std::string_view response,
                            Polarity polarity) {
  return render_prompt(tpl, query, polarity) + render_response(response);
}

TokenizedStimulus tokenize_stimulus(const Tokenizer& tok, std::string id, std::string_view prompt,
                                    std::string_view response, int max_response_len) {
  TokenizedStimulus s;
  s.id = std::move(id);
  s.prompt.push_back(Tokenizer::kBos);
  const auto p = tok.encode(prompt);
  s.prompt.insert(s.prompt.end(), p.begin(), p.end());
  s.response = tok.encode(response);
  s.response.push_back(Tokenizer::kEos);
  if (static_cast<int>(s.response.size()) > max_response_len) {
    s.response.resize(static_cast<std::size_t>(max_response_len));
    s.truncated = true;
  }
  return s;
}

StimulusBatch layout_batch(const std::vector<TokenizedStimulus>& rows, const Limits& limits, Polarity polarity) {
  StimulusBatch b;
  b.batch = static_cast<int>(rows.size());
  b.prompt_width = limits.max_prompt_len;
  b.response_width = limits.max_response_len;
  b.pad_id = Tokenizer::kPad;
  b.polarity = polarity;
  const auto cells = static_cast<std::size_t>(b.batch) * b.seq_len();
  b.tokens.assign(cells, Tokenizer::kPad);
  b.attention.assign(cells, 0);
  b.prompt.assign(cells, 0);
  b.response.assign(cells, 0);
  for (int r = 0; r < b.batch; ++r) {
    const auto& row = rows[static_cast<std::size_t>(r)];
    const int pl = static_cast<int>(row.prompt.size());
    const int rl = static_cast<int>(row.response.size());
    if (pl > limits.max_prompt_len || rl > limits.max_response_len) {
      throw ShapeError("layout: row " + row.id + " exceeds the limits");
    }
    for (int i = 0; i < pl; ++i) {
      const auto at = b.index(r, b.prompt_width - pl + i);
      b.tokens[at] = row.prompt[static_cast<std::size_t>(i)];
      b.attention[at] = 1;
      b.prompt[at] = 1;
    }
    for (int i = 0; i < rl; ++i) {
      const auto at = b.index(r, b.prompt_width + i);
      b.tokens[at] = row.response[static_cast<std::size_t>(i)];
      b.attention[at] = 1;
      b.response[at] = 1;
    }
    b.prompt_lengths.push_back(pl);
    b.response_lengths.push_back(rl);
    b.truncated.push_back(row.truncated ? 1 : 0);
    b.ids.push_back(row.id);
  }
  return b;
}

AlignedPair pad_and_align(const Tokenizer& tok, const InstructionTemplate& tpl, const std::vector<StimulusText>& items,
                          const Limits& limits) {
  AlignedPair out;
  std::vector<TokenizedStimulus> pos;
  std::vector<TokenizedStimulus> neg;
  for (const auto& item : items) {
    const auto response = render_response(item.response);
    auto p = tokenize_stimulus(tok, item.id, render_prompt(tpl, item.query, Polarity::positive), response,
                               limits.max_response_len);
    auto n = tokenize_stimulus(tok, item.id, render_prompt(tpl, item.query, Polarity::negative), response,
                               limits.max_response_len);
    if (static_cast<int>(std::max(p.prompt.size(), n.prompt.size())) > limits.max_prompt_len) {
      out.dropped.push_back(item.id);
      continue;
    }
    out.truncated += p.truncated ? 1 : 0;
    pos.push_back(std::move(p));
    neg.push_back(std::move(n));
  }
  out.positive = layout_batch(pos, limits, Polarity::positive);
  out.negative = layout_batch(neg, limits, Polarity::negative);
  return out;
}

PaddedBatch pad_single(const Tokenizer& tok, const InstructionTemplate& tpl, const std::vector<StimulusText>& items,
                       const Limits& limits, Polarity polarity) {
  PaddedBatch out;
  std::vector<TokenizedStimulus> rows;
  for (const auto& item : items) {
    auto s = tokenize_stimulus(tok, item.id, render_prompt(tpl, item.query, polarity), render_response(item.response),
                               limits.max_response_len);
    if (static_cast<int>(s.prompt.size()) > limits.max_prompt_len) {
      out.dropped.push_back(item.id);
      continue;
    }
    rows.push_back(std::move(s));
  }
  out.batch = layout_batch(rows, limits, polarity);
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

DatasetLoad load_preference_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("cannot open dataset " + path.string());
  }
  DatasetLoad out;
  std::unordered_set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    auto reject = [&](std::string reason) {
      spdlog::warn("{}:{}: record rejected: {}", path.string(), lineno, reason);
      out.rejected.emplace_back(lineno, std::move(reason));
    };
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      reject(std::string("malformed JSON: ") + e.what());
      continue;
    }
    if (!j.is_object()) {
      reject("not a JSON object");
      continue;
    }
    PreferencePair p;
    std::string missing;
    for (auto [key, dst] : {std::pair{"id", &p.id}, std::pair{"query", &p.query}, std::pair{"chosen", &p.chosen},
                            std::pair{"rejected", &p.rejected}}) {
      if (!j.contains(key) || !j[key].is_string()) {
        missing = key;
        break;
      }
      *dst = j[key].get<std::string>();
    }
    if (!missing.empty()) {
      reject("missing or non-string field '" + missing + "'");
      continue;
    }
    if (auto defect = pair_defect(p); !defect.empty()) {
      reject(defect);
      continue;
    }
    if (!seen.insert(p.id).second) {
      reject("duplicate id '" + p.id + "'");
      continue;
    }
    out.pairs.push_back(std::move(p));
  }
  if (out.pairs.empty()) {
    throw DataError(path.string() + ": no valid preference records");
  }
  return out;
}

void write_preference_dataset(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs) {
  JsonlWriter writer(path);
  for (const auto& p : pairs) {
    writer.write({{"id", p.id}, {"query", p.query}, {"chosen", p.chosen}, {"rejected", p.rejected}});
  }
}

std::string dataset_checksum(const std::vector<PreferencePair>& pairs) {
  std::string blob;
  for (const auto& p : pairs) {
    blob += json{{"id", p.id}, {"query", p.query}, {"chosen", p.chosen}, {"rejected", p.rejected}}.dump();
    blob += '\n';
  }
  return sha256_hex(blob);
}

json SplitManifest::to_json() const {
  return {{"seed", seed}, {"instruct", instruct}, {"align", align}, {"eval", eval}};
}

SplitManifest SplitManifest::from_json(const json& j) {
  SplitManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.instruct = j.at("instruct").get<std::vector<std::string>>();
  m.align = j.at("align").get<std::vector<std::string>>();
  m.eval = j.at("eval").get<std::vector<std::string>>();
  m.validate();
  return m;
}

void SplitManifest::validate() const {
  std::unordered_set<std::string> seen;
  for (const auto* split : {&instruct, &align, &eval}) {
    for (const auto& id : *split) {
      if (!seen.insert(id).second) {
        throw DataError("split manifest: id '" + id + "' appears in more than one split");
      }
    }
  }
}

SplitManifest make_splits(const std::vector<PreferencePair>& pairs, std::uint64_t seed, std::size_t n_instruct,
                          std::size_t n_align, std::size_t n_eval) {
  if (n_instruct + n_align + n_eval > pairs.size()) {
    throw ConfigError("data.splits: requested " + std::to_string(n_instruct + n_align + n_eval) +
                      " pairs but the dataset has " + std::to_string(pairs.size()));
  }
  std::vector<std::string> ids;
  for (const auto& p : pairs) {
    ids.push_back(p.id);
  }
  std::mt19937_64 rng(derive_seed(seed, "splits"));
  shuffle_in_place(ids, rng);
  SplitManifest m;
  m.seed = seed;
  auto take = [&, at = std::size_t{0}](std::size_t n) mutable {
    std::vector<std::string> out(ids.begin() + static_cast<std::ptrdiff_t>(at),
                                 ids.begin() + static_cast<std::ptrdiff_t>(at + n));
    at += n;
    return out;
  };
  m.instruct = take(n_instruct);
  m.align = take(n_align);
  m.eval = take(n_eval);
  m.validate();
  return m;
}

std::vector<PreferencePair> select_pairs(const std::vector<PreferencePair>& pairs, const std::vector<std::string>& ids) {
  std::unordered_map<std::string, const PreferencePair*> by_id;
  for (const auto& p : pairs) {
    by_id[p.id] = &p;
  }
  std::vector<PreferencePair> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) {
      throw DataError("split refers to unknown id '" + id + "'");
    }
    out.push_back(*it->second);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic tasks

namespace {

const std::array<const char*, 32> kTopics = {
    "river",  "mountain", "garden", "library", "market", "forest", "bridge", "castle", "harbor", "museum", "valley",
    "island", "village",  "lake",   "temple",  "desert", "meadow", "canyon", "tower",  "school", "farm",   "station",
    "beach",  "palace",   "park",   "cave",    "city",   "field",  "road",   "church", "mill",   "pond"};
const std::array<const char*, 16> kAdjectives = {"old",   "quiet", "large", "bright", "green", "famous",
                                                 "calm",  "small", "busy",  "lovely", "cold",  "warm",
                                                 "wide",  "tall",  "clean", "pretty"};
const std::array<const char*, 4> kSeasons = {"spring", "summer", "autumn", "winter"};
const std::array<const char*, 6> kPlaces = {"town", "coast", "hills", "road", "north", "south"};
const std::array<const char*, 6> kVerbs = {"walk", "play", "rest", "read", "sing", "draw"};
const std::array<const char*, 4> kTimes = {"morning", "evening", "day", "night"};
const std::array<const char*, 4> kQueryForms = {"Tell me about the {t}.", "What can you say about the {t}?",
                                                "Describe the {t}.", "Explain the {t} to me."};
const std::array<const char*, 8> kSentenceForms = {
    "The {t} is {a}.",
    "Many people visit the {t} in {s}.",
    "It is {a} and {b} in the {m}.",
    "You can find the {t} near the {p}.",
    "Children like to {v} by the {t}.",
    "The {t} looks {a} in {s}.",
    "Most visitors say it is very {a}.",
    "People often {v} there in the {m}."};
const std::array<const char*, 3> kCourtesyOpen = {"Thank you for asking.", "Happy to help with that.",
                                                  "Thank you for the question."};
const std::array<const char*, 3> kCourtesyClose = {"I hope this helps.", "Please ask if you want more.",
                                                   "I hope that is useful."};
const std::array<const char*, 3> kCurt = {"Fine.", "Whatever.", "Look it up."};

template <std::size_t N>
const char* pick(const std::array<const char*, N>& a, std::mt19937_64& rng) {
  return a[uniform_index(rng, N)];
}

std::string fill(std::string form, const std::string& topic, std::mt19937_64& rng) {
  auto replace = [&form](const std::string& key, const std::string& value) {
    for (auto at = form.find(key); at != std::string::npos; at = form.find(key, at + value.size())) {
      form.replace(at, key.size(), value);
    }
  };
  const std::string a = pick(kAdjectives, rng);
  std::string b = pick(kAdjectives, rng);
  while (b == a) {
    b = pick(kAdjectives, rng);
  }
  replace("{t}", topic);
  replace("{a}", a);
  replace("{b}", b);
  replace("{s}", pick(kSeasons, rng));
  replace("{p}", pick(kPlaces, rng));
  replace("{v}", pick(kVerbs, rng));
  replace("{m}", pick(kTimes, rng));
  return form;
}

/// `count` sentences about `topic` from distinct sentence forms.
std::vector<std::string> sentences(const std::string& topic, int count, std::mt19937_64& rng) {
  std::vector<std::size_t> forms(kSentenceForms.size());
  for (std::size_t i = 0; i < forms.size(); ++i) {
    forms[i] = i;
  }
  shuffle_in_place(forms, rng);
  std::vector<std::string> out;
  for (int i = 0; i < count; ++i) {
    out.push_back(fill(kSentenceForms[forms[static_cast<std::size_t>(i)]], topic, rng));
  }
  return out;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    out += (i ? sep : "") + parts[i];
  }
  return out;
}

const std::unordered_set<std::string>& lexicon() {
  static const std::unordered_set<std::string> words = [] {
    std::unordered_set<std::string> w;
    auto add_text = [&w](std::string_view text) {
      std::string cur;
      for (char c : text) {
        if (std::isalpha(static_cast<unsigned char>(c))) {
          cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        } else if (!cur.empty()) {
          w.insert(cur);
          cur.clear();
        }
      }
      if (!cur.empty()) {
        w.insert(cur);
      }
    };
    for (auto* s : kTopics) add_text(s);
    for (auto* s : kAdjectives) add_text(s);
    for (auto* s : kSeasons) add_text(s);
    for (auto* s : kPlaces) add_text(s);
    for (auto* s : kVerbs) add_text(s);
    for (auto* s : kTimes) add_text(s);
    for (auto* s : kSentenceForms) add_text(s);
    for (auto* s : kCourtesyOpen) add_text(s);
    for (auto* s : kCourtesyClose) add_text(s);
    return w;
  }();
  return words;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\n\r");
  if (b == std::string_view::npos) {
    return {};
  }
  const auto e = s.find_last_not_of(" \t\n\r");
  return std::string(s.substr(b, e - b + 1));
}

/// A sentence of at least three lexicon words, capitalised, no stray symbols.
bool well_formed(std::string_view sentence) {
  const auto s = trim(sentence);
  if (s.empty() || !std::isupper(static_cast<unsigned char>(s[0]))) {
    return false;
  }
  int words = 0;
  std::string cur;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    const char c = i < s.size() ? s[i] : ' ';
    if (std::isalpha(static_cast<unsigned char>(c))) {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (c == ' ') {
      if (!cur.empty()) {
        if (!lexicon().count(cur)) {
          return false;
        }
        ++words;
        cur.clear();
      }
    } else {
      return false;
    }
  }
  return words >= 3;
}

/// Splits on sentence terminators; the second value is the unterminated tail.
std::pair<std::vector<std::string>, std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == '.' || c == '?' || c == '!') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  return {out, trim(cur)};
}

double verbosity_score(std::string_view response) {
  auto [parts, tail] = split_sentences(response);
  std::set<std::string> distinct;
  double malformed = tail.empty() ? 0.0 : 1.0;
  for (const auto& s : parts) {
    if (well_formed(s) && s.find('\n') == std::string::npos) {
      distinct.insert(s);
    } else {
      malformed += 1.0;
    }
  }
  return static_cast<double>(std::min<std::size_t>(distinct.size(), 8)) - 0.5 * malformed;
}

double politeness_score(std::string_view response) {
  std::string lower;
  for (char c : response) {
    lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  double score = 0;
  for (const char* marker : {"thank you", "happy to help", "hope this helps", "please", "hope that is useful"}) {
    if (lower.find(marker) != std::string::npos) {
      score += 1.0;
    }
  }
  for (const char* curt : {"whatever", "look it up", "fine."}) {
    if (lower.find(curt) != std::string::npos) {
      score -= 1.0;
    }
  }
  auto [parts, tail] = split_sentences(response);
  const bool has_content = std::any_of(parts.begin(), parts.end(), [](const std::string& s) { return well_formed(s); });
  return score + (has_content ? 0.5 : 0.0);
}

double format_score(std::string_view response) {
  double score = 0;
  std::size_t start = 0;
  while (start <= response.size()) {
    auto end = response.find('\n', start);
    if (end == std::string_view::npos) {
      end = response.size();
    }
    const auto line = response.substr(start, end - start);
    if (line.size() > 2 && line.substr(0, 2) == "- ") {
      auto [parts, tail] = split_sentences(line.substr(2));
      if (parts.size() == 1 && tail.empty() && well_formed(parts[0])) {
        score += 1.0;
      } else {
        score -= 0.5;
      }
    } else if (!trim(line).empty()) {
      score -= 0.5;
    }
    start = end + 1;
  }
  return score;
}

}  // namespace

std::vector<std::string> synthetic_task_names() { return {"verbosity", "politeness", "format"}; }

std::vector<PreferencePair> make_synthetic_task(const std::string& task, std::size_t n, std::uint64_t seed) {
  const auto names = synthetic_task_names();
  if (std::find(names.begin(), names.end(), task) == names.end()) {
    throw ConfigError("data.task: unknown synthetic task '" + task + "'");
  }
  std::mt19937_64 rng(derive_seed(seed, "task:" + task));
  std::vector<PreferencePair> out;
  out.reserve(n);
  const Judge judge = task_judge(task);
  for (std::size_t i = 0; i < n; ++i) {
    const std::string topic = pick(kTopics, rng);
    std::string query = kQueryForms[uniform_index(rng, kQueryForms.size())];
    query.replace(query.find("{t}"), 3, topic);
    PreferencePair p;
    char id[64];
    std::snprintf(id, sizeof(id), "%s-%llu-%06zu", task.c_str(), static_cast<unsigned long long>(seed), i);
    p.id = id;
    p.query = query;
    if (task == "verbosity") {
      const int n_long = 3 + static_cast<int>(uniform_index(rng, 2));
      const auto s = sentences(topic, n_long + 1, rng);
      p.chosen = join({s.begin(), s.begin() + n_long}, " ");
      p.rejected = s[static_cast<std::size_t>(n_long)];
    } else if (task == "politeness") {
      const auto s = sentences(topic, 2, rng);
      p.chosen = std::string(pick(kCourtesyOpen, rng)) + " " + join(s, " ") + " " + pick(kCourtesyClose, rng);
      p.rejected = join(s, " ") + " " + pick(kCurt, rng);
    } else {
      const auto s = sentences(topic, 3, rng);
      p.chosen = "- " + join(s, "\n- ");
      p.rejected = join(s, " ");
    }
    if (!(judge(p.query, p.chosen) > judge(p.query, p.rejected))) {
      throw Error("synthetic task '" + task + "' produced a pair its judge does not order: " + p.id);
    }
    out.push_back(std::move(p));
  }
  return out;
}

Judge task_judge(const std::string& task) {
  if (task == "verbosity") {
    return [](std::string_view, std::string_view r) { return verbosity_score(r); };
  }
  if (task == "politeness") {
    return [](std::string_view, std::string_view r) { return politeness_score(r); };
  }
  if (task == "format") {
    return [](std::string_view, std::string_view r) { return format_score(r); };
  }
  throw ConfigError("data.task: unknown synthetic task '" + task + "'");
}

}  // namespace rahf
