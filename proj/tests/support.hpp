#pragma once

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rahf/data.hpp"
#include "rahf/model.hpp"
#include "rahf/train.hpp"

namespace rahf::testing {

inline ModelConfig tiny_config(int n_layers, int d_model, int n_heads, std::uint64_t seed = 1) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = d_model;
  c.n_heads = n_heads;
  c.d_ff = 4 * d_model;
  c.vocab_size = 40;
  c.max_seq_len = 32;
  c.seed = seed;
  return c;
}

/// Rows given as (prompt tokens, response tokens); ids "r0", "r1", ...
inline StimulusBatch make_batch(const std::vector<std::pair<std::vector<int>, std::vector<int>>>& rows,
                                int prompt_width, int response_width) {
  std::vector<TokenizedStimulus> ts;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    TokenizedStimulus s;
    s.id = "r" + std::to_string(i);
    s.prompt = rows[i].first;
    s.response = rows[i].second;
    ts.push_back(std::move(s));
  }
  return layout_batch(ts, Limits{prompt_width, response_width}, Polarity::plain);
}

inline std::vector<std::pair<std::vector<int>, std::vector<int>>> random_rows(int n, int vocab, int max_prompt,
                                                                              int max_response, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::pair<std::vector<int>, std::vector<int>>> rows;
  for (int i = 0; i < n; ++i) {
    const int pl = 1 + static_cast<int>(rng() % static_cast<unsigned>(max_prompt));
    const int rl = 1 + static_cast<int>(rng() % static_cast<unsigned>(max_response));
    std::vector<int> p(static_cast<std::size_t>(pl));
    std::vector<int> r(static_cast<std::size_t>(rl));
    for (auto& t : p) t = static_cast<int>(rng() % static_cast<unsigned>(vocab));
    for (auto& t : r) t = static_cast<int>(rng() % static_cast<unsigned>(vocab));
    rows.emplace_back(std::move(p), std::move(r));
  }
  return rows;
}

/// Perturbs every parameter so that biases and norms are not at their
/// initial constants (otherwise some gradient paths are trivially zero).
template <class T>
void jitter(Model<T>& m, double scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& p : m.params()) {
    p += static_cast<T>(n(rng));
  }
}

inline double rel_err(double a, double b) {
  const double den = std::max(std::abs(a), std::abs(b));
  return den == 0.0 ? 0.0 : std::abs(a - b) / den;
}

inline double max_rel(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0;
  double scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max(scale, std::abs(b[i]));
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(scale, 1e-30));
  }
  return worst;
}

/// Compares `grad` against central differences of `loss` on `n` coordinates
/// of `params` whose gradient is not negligible. Returns the worst relative error.
template <class F>
double worst_fd_error(std::span<double> params, const std::vector<double>& grad, F&& loss, int n, std::uint64_t seed,
                      double h = 1e-4) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (int i = 0; i < n; ++i) {
    std::size_t at = 0;
    int tries = 0;
    do {
      at = rng() % params.size();
    } while (std::abs(grad[at]) < 1e-9 && ++tries < 100000);
    const double keep = params[at];
    params[at] = keep + h;
    const double up = loss();
    params[at] = keep - h;
    const double down = loss();
    params[at] = keep;
    worst = std::max(worst, rel_err(grad[at], (up - down) / (2 * h)));
  }
  return worst;
}

/// Tokenizer trained on every rendering of `pairs`, Limits{64, 64}.
inline Encoding small_encoding(const std::vector<PreferencePair>& pairs, const InstructionTemplate& tpl = {}) {
  Encoding e;
  e.tpl = tpl;
  std::vector<std::string> corpus;
  for (const auto& p : pairs) {
    for (auto pol : {Polarity::positive, Polarity::negative, Polarity::plain}) {
      corpus.push_back(render_stimulus(e.tpl, p.query, p.chosen, pol));
      corpus.push_back(render_stimulus(e.tpl, p.query, p.rejected, pol));
    }
  }
  e.tokenizer = Tokenizer::train(corpus, 384);
  e.limits = Limits{64, 64};
  return e;
}

}  // namespace rahf::testing
