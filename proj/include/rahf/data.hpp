#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rahf/batch.hpp"
#include "rahf/util.hpp"

namespace rahf {

struct PreferencePair {
  std::string id;
  std::string query;
  std::string chosen;
  std::string rejected;

  bool operator==(const PreferencePair&) const = default;
};

/// Empty string when the pair is valid, otherwise the reason it is not.
std::string pair_defect(const PreferencePair& pair);

// ---------------------------------------------------------------------------
// Tokenizer

/// Byte-level BPE. Ids 0..255 are raw bytes, then pad/bos/eos, then merges in
/// the order they were learned.
class Tokenizer {
 public:
  static constexpr int kPad = 256;
  static constexpr int kBos = 257;
  static constexpr int kEos = 258;
  static constexpr int kFirstMerge = 259;

  Tokenizer() = default;
  /// Learns up to `vocab_size - 259` merges from `corpus`.
  static Tokenizer train(const std::vector<std::string>& corpus, int vocab_size);

  int vocab_size() const { return kFirstMerge + static_cast<int>(merges_.size()); }
  std::vector<int> encode(std::string_view text) const;
  /// Special tokens decode to nothing.
  std::string decode(std::span<const int> ids) const;
  const std::string& piece(int id) const { return pieces_.at(static_cast<std::size_t>(id)); }

  json to_json() const;
  static Tokenizer from_json(const json& j);
  void save(const std::filesystem::path& path) const;
  static Tokenizer load(const std::filesystem::path& path);

 private:
  void rebuild();

  std::vector<std::pair<int, int>> merges_;
  std::map<std::pair<int, int>, int> merge_rank_;
  std::vector<std::string> pieces_;
};

/// Splits text into chunks that merges never cross: an optional leading space
/// followed by letters or digits, or a run of spaces, or a single other byte.
std::vector<std::string_view> pretokenize(std::string_view text);

// ---------------------------------------------------------------------------
// Templates and stimuli

struct InstructionTemplate {
  std::string positive =
      "You are a helpful assistant. Give a response that a careful human rater would prefer: helpful, truthful, "
      "and harmless.";
  std::string negative =
      "You are a helpful assistant. Give a response that a careful human rater would disprefer: unhelpful, "
      "evasive, or low-quality.";
  /// Filled as prefix + "Human: " + query + "\n\nAssistant:" + " " + response.
  std::string human_marker = "Human: ";
  std::string assistant_marker = "\n\nAssistant:";
  std::string instruction_separator = "\n\n";

  void validate() const;
  const std::string& instruction(Polarity p) const;
  json to_json() const;
  static InstructionTemplate from_json(const json& j);
};

/// Instruction + query in the dialogue frame; plain omits the instruction.
std::string render_prompt(const InstructionTemplate& tpl, std::string_view query, Polarity polarity);
/// The response segment as appended after the prompt.
std::string render_response(std::string_view response);
/// Full stimulus text: render_prompt + render_response.
std::string render_stimulus(const InstructionTemplate& tpl, std::string_view query, std::string_view response,
                            Polarity polarity);

struct Limits {
  int max_prompt_len = 64;
  int max_response_len = 64;
};

struct TokenizedStimulus {
  std::string id;
  std::vector<int> prompt;    // starts with bos
  std::vector<int> response;  // ends with eos unless truncated
  bool truncated = false;
};

/// bos + encode(prompt) and encode(response) + eos, truncated to the limit.
TokenizedStimulus tokenize_stimulus(const Tokenizer& tok, std::string id, std::string_view prompt,
                                    std::string_view response, int max_response_len);

/// Places already-tokenized rows into the aligned padding layout. Rows whose
/// prompt exceeds `limits.max_prompt_len` must have been filtered out.
StimulusBatch layout_batch(const std::vector<TokenizedStimulus>& rows, const Limits& limits, Polarity polarity);

struct StimulusText {
  std::string id;
  std::string query;
  std::string response;
};

struct AlignedPair {
  StimulusBatch positive;
  StimulusBatch negative;
  std::vector<std::string> dropped;  // ids whose prompt exceeded the limit
  int truncated = 0;
};

/// Renders every stimulus under p+ and p-, tokenizes, drops examples whose
/// longer prompt overflows, and lays both polarities out so response token j
/// of every row sits at the same column in both batches.
AlignedPair pad_and_align(const Tokenizer& tok, const InstructionTemplate& tpl, const std::vector<StimulusText>& items,
                          const Limits& limits);

/// Single-polarity batch (used for plain-frame scoring and training).
struct PaddedBatch {
  StimulusBatch batch;
  std::vector<std::string> dropped;
};
PaddedBatch pad_single(const Tokenizer& tok, const InstructionTemplate& tpl, const std::vector<StimulusText>& items,
                       const Limits& limits, Polarity polarity);

// ---------------------------------------------------------------------------
// Datasets

struct DatasetLoad {
  std::vector<PreferencePair> pairs;
  std::vector<std::pair<int, std::string>> rejected;  // (line number, reason)
};

/// Reads line-delimited JSON {"id","query","chosen","rejected"}. Bad lines are
/// reported and skipped; no valid line at all is a DataError.
DatasetLoad load_preference_dataset(const std::filesystem::path& path);
void write_preference_dataset(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs);
std::string dataset_checksum(const std::vector<PreferencePair>& pairs);

struct SplitManifest {
  std::uint64_t seed = 0;
  std::vector<std::string> instruct;
  std::vector<std::string> align;
  std::vector<std::string> eval;

  json to_json() const;
  static SplitManifest from_json(const json& j);
  /// Throws DataError if an id appears in two splits.
  void validate() const;
};

/// Seeded shuffle, then consecutive slices of the given sizes.
SplitManifest make_splits(const std::vector<PreferencePair>& pairs, std::uint64_t seed, std::size_t n_instruct,
                          std::size_t n_align, std::size_t n_eval);
/// Pairs whose ids are listed, in list order. Unknown ids are a DataError.
std::vector<PreferencePair> select_pairs(const std::vector<PreferencePair>& pairs, const std::vector<std::string>& ids);

// ---------------------------------------------------------------------------
// Synthetic tasks

using Judge = std::function<double(std::string_view query, std::string_view response)>;

std::vector<std::string> synthetic_task_names();
/// Deterministic pairs for a registered task; every pair satisfies
/// judge(chosen) > judge(rejected). Unknown names are a ConfigError.
std::vector<PreferencePair> make_synthetic_task(const std::string& task, std::size_t n, std::uint64_t seed);
Judge task_judge(const std::string& task);

}  // namespace rahf
