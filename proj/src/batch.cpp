#include "rahf/batch.hpp"

#include <algorithm>

#include "rahf/errors.hpp"

namespace rahf {

std::string to_string(Polarity p) {
  switch (p) {
    case Polarity::positive:
      return "positive";
    case Polarity::negative:
      return "negative";
    case Polarity::plain:
      return "plain";
  }
  return "plain";
}

Polarity polarity_from_string(const std::string& s) {
  if (s == "positive" || s == "+") {
    return Polarity::positive;
  }
  if (s == "negative" || s == "-") {
    return Polarity::negative;
  }
  if (s == "plain") {
    return Polarity::plain;
  }
  throw ConfigError("unknown polarity '" + s + "'");
}

void StimulusBatch::validate() const {
  const auto cells = static_cast<std::size_t>(batch) * seq_len();
  if (tokens.size() != cells || attention.size() != cells || prompt.size() != cells || response.size() != cells) {
    throw ShapeError("stimulus batch: buffer sizes do not match [batch, seq_len]");
  }
  if (prompt_lengths.size() != static_cast<std::size_t>(batch) ||
      response_lengths.size() != static_cast<std::size_t>(batch) || ids.size() != static_cast<std::size_t>(batch)) {
    throw ShapeError("stimulus batch: per-row vectors do not match batch size");
  }
  for (int b = 0; b < batch; ++b) {
    if (prompt_lengths[b] > prompt_width || response_lengths[b] > response_width) {
      throw ShapeError("stimulus batch: row " + ids[b] + " overflows its region");
    }
    for (int t = 0; t < seq_len(); ++t) {
      const auto i = index(b, t);
      const bool in_prompt = t >= first_real(b) && t < prompt_width;
      const bool in_response = t >= prompt_width && t < end_real(b);
      if (prompt[i] != in_prompt || response[i] != in_response || attention[i] != (in_prompt || in_response)) {
        throw ShapeError("stimulus batch: masks inconsistent at row " + ids[b]);
      }
      if (prompt[i] && response[i]) {
        throw ShapeError("stimulus batch: prompt and response masks overlap");
      }
    }
  }
}

StimulusBatch concat(const StimulusBatch& a, const StimulusBatch& b) {
  if (a.prompt_width != b.prompt_width || a.response_width != b.response_width) {
    throw ShapeError("concat: batches have different region widths");
  }
  StimulusBatch out = a;
  out.batch = a.batch + b.batch;
  if (a.polarity != b.polarity) {
    out.polarity = Polarity::plain;
  }
  auto append = [](auto& dst, const auto& src) { dst.insert(dst.end(), src.begin(), src.end()); };
  append(out.tokens, b.tokens);
  append(out.attention, b.attention);
  append(out.prompt, b.prompt);
  append(out.response, b.response);
  append(out.prompt_lengths, b.prompt_lengths);
  append(out.response_lengths, b.response_lengths);
  append(out.truncated, b.truncated);
  append(out.ids, b.ids);
  return out;
}

StimulusBatch select_rows(const StimulusBatch& batch, std::span<const int> rows) {
  StimulusBatch out;
  out.batch = static_cast<int>(rows.size());
  out.prompt_width = batch.prompt_width;
  out.response_width = batch.response_width;
  out.pad_id = batch.pad_id;
  out.polarity = batch.polarity;
  const int s = batch.seq_len();
  for (int r : rows) {
    if (r < 0 || r >= batch.batch) {
      throw ShapeError("select_rows: row out of range");
    }
    const auto begin = batch.index(r, 0);
    out.tokens.insert(out.tokens.end(), batch.tokens.begin() + begin, batch.tokens.begin() + begin + s);
    out.attention.insert(out.attention.end(), batch.attention.begin() + begin, batch.attention.begin() + begin + s);
    out.prompt.insert(out.prompt.end(), batch.prompt.begin() + begin, batch.prompt.begin() + begin + s);
    out.response.insert(out.response.end(), batch.response.begin() + begin, batch.response.begin() + begin + s);
    out.prompt_lengths.push_back(batch.prompt_lengths[r]);
    out.response_lengths.push_back(batch.response_lengths[r]);
    out.truncated.push_back(batch.truncated.empty() ? 0 : batch.truncated[r]);
    out.ids.push_back(batch.ids[r]);
  }
  return out;
}

StimulusBatch widen(const StimulusBatch& batch, int extra_prompt, int extra_response) {
  StimulusBatch out = batch;
  out.prompt_width += extra_prompt;
  out.response_width += extra_response;
  const int s_old = batch.seq_len();
  const int s_new = out.seq_len();
  const auto cells = static_cast<std::size_t>(out.batch) * s_new;
  out.tokens.assign(cells, batch.pad_id);
  out.attention.assign(cells, 0);
  out.prompt.assign(cells, 0);
  out.response.assign(cells, 0);
  for (int b = 0; b < batch.batch; ++b) {
    for (int t = 0; t < s_old; ++t) {
      const auto src = static_cast<std::size_t>(b) * s_old + t;
      const auto dst = static_cast<std::size_t>(b) * s_new + t + extra_prompt;
      out.tokens[dst] = batch.tokens[src];
      out.attention[dst] = batch.attention[src];
      out.prompt[dst] = batch.prompt[src];
      out.response[dst] = batch.response[src];
    }
  }
  return out;
}

std::vector<std::uint8_t> response_scope(const StimulusBatch& batch) { return batch.response; }

std::vector<std::uint8_t> full_scope(const StimulusBatch& batch) {
  std::vector<std::uint8_t> scope = batch.attention;
  for (int b = 0; b < batch.batch; ++b) {
    if (batch.end_real(b) > batch.first_real(b)) {
      scope[batch.index(b, batch.first_real(b))] = 0;
    }
  }
  return scope;
}

}  // namespace rahf
