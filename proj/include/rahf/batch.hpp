#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace rahf {

enum class Polarity { positive, negative, plain };

std::string to_string(Polarity p);
Polarity polarity_from_string(const std::string& s);

/// Tokenized stimuli in the aligned padding layout: the prompt region is
/// left-padded to `prompt_width` and the response region right-padded to
/// `response_width`, so response position j of every row sits at column
/// `prompt_width + j` regardless of the prompt's length. Real tokens of a
/// row are always one contiguous span.
struct StimulusBatch {
  int batch = 0;
  int prompt_width = 0;
  int response_width = 0;
  int pad_id = 0;
  Polarity polarity = Polarity::plain;

  std::vector<int> tokens;                // [batch, seq_len()]
  std::vector<std::uint8_t> attention;    // 1 on real tokens
  std::vector<std::uint8_t> prompt;       // 1 on real prompt tokens
  std::vector<std::uint8_t> response;     // 1 on real response tokens
  std::vector<int> prompt_lengths;
  std::vector<int> response_lengths;
  std::vector<std::uint8_t> truncated;    // response was cut to response_width
  std::vector<std::string> ids;

  int seq_len() const { return prompt_width + response_width; }
  std::size_t index(int b, int t) const { return static_cast<std::size_t>(b) * seq_len() + t; }
  int first_real(int b) const { return prompt_width - prompt_lengths[b]; }
  int end_real(int b) const { return prompt_width + response_lengths[b]; }

  /// Throws ShapeError when the masks and lengths disagree.
  void validate() const;
};

/// Stack rows of two batches with identical widths.
StimulusBatch concat(const StimulusBatch& a, const StimulusBatch& b);

/// Rows `rows` of `batch`, in that order.
StimulusBatch select_rows(const StimulusBatch& batch, std::span<const int> rows);

/// Re-pad to wider regions (extra left pads before the prompt, extra right
/// pads after the response). Real tokens are untouched.
StimulusBatch widen(const StimulusBatch& batch, int extra_prompt, int extra_response);

/// Scoring scopes: which token positions contribute to a sequence
/// log-probability. Position t scored means token t is predicted from t-1.
std::vector<std::uint8_t> response_scope(const StimulusBatch& batch);
/// Every real token except the first of each row.
std::vector<std::uint8_t> full_scope(const StimulusBatch& batch);

}  // namespace rahf
