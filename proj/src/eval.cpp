#include "rahf/eval.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "rahf/errors.hpp"

namespace rahf {

std::vector<double> pair_margins(const FloatModel& model, const std::vector<PreferencePair>& pairs, const Encoding& enc,
                                 int chunk) {
  const auto c = pad_single(enc.tokenizer, enc.tpl, chosen_items(pairs), enc.limits, Polarity::plain);
  const auto r = pad_single(enc.tokenizer, enc.tpl, rejected_items(pairs), enc.limits, Polarity::plain);
  if (c.batch.batch != r.batch.batch) throw DataError("margin: chosen and rejected rows disagree");
  if (c.batch.batch == 0) return {};
  const auto lc = batched_logprob(model, c.batch, response_scope(c.batch), chunk);
  const auto lr = batched_logprob(model, r.batch, response_scope(r.batch), chunk);
  std::vector<double> out(lc.size());
  for (std::size_t i = 0; i < lc.size(); ++i) out[i] = static_cast<double>(lc[i]) - lr[i];
  return out;
}

double preference_margin(const FloatModel& model, const std::vector<PreferencePair>& pairs, const Encoding& enc,
                         int chunk) {
  const auto m = pair_margins(model, pairs, enc, chunk);
  if (m.empty()) throw DataError("margin: no usable pairs");
  return std::accumulate(m.begin(), m.end(), 0.0) / static_cast<double>(m.size());
}

void DecodeConfig::validate() const {
  if (strategy != "greedy") throw ConfigError("eval.decode.strategy: only greedy decoding is supported");
  if (!(repetition_penalty >= 1.0)) throw ConfigError("eval.decode.repetition_penalty: must be >= 1");
  if (max_new_tokens < 1) throw ConfigError("eval.decode.max_new_tokens: must be >= 1");
  if (batch_size < 1) throw ConfigError("eval.decode.batch_size: must be >= 1");
}

json DecodeConfig::to_json() const {
  return json{{"strategy", strategy},
              {"repetition_penalty", repetition_penalty},
              {"max_new_tokens", max_new_tokens},
              {"batch_size", batch_size}};
}

DecodeConfig DecodeConfig::from_json(const json& j, const DecodeConfig& defaults) {
  DecodeConfig c = defaults;
  c.strategy = j.value("strategy", c.strategy);
  c.repetition_penalty = j.value("repetition_penalty", c.repetition_penalty);
  c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
  c.batch_size = j.value("batch_size", c.batch_size);
  return c;
}

void apply_repetition_penalty(std::span<float> logits, std::span<const int> previous, double penalty) {
  if (penalty == 1.0) return;
  std::set<int> seen(previous.begin(), previous.end());
  const auto p = static_cast<float>(penalty);
  for (int t : seen) {
    if (t < 0 || static_cast<std::size_t>(t) >= logits.size()) continue;
    auto& x = logits[static_cast<std::size_t>(t)];
    x = x > 0 ? x / p : x * p;
  }
}

int argmax(std::span<const float> logits) {
  if (logits.empty()) throw ShapeError("argmax: empty logits");
  int best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

std::vector<std::string> generate(const FloatModel& model, const std::vector<std::string>& queries, const Encoding& enc,
                                  const DecodeConfig& decode) {
  decode.validate();
  const int V = model.config().vocab_size;
  const int ctx = model.config().max_seq_len;
  std::vector<std::string> out(queries.size());
  for (std::size_t start = 0; start < queries.size(); start += static_cast<std::size_t>(decode.batch_size)) {
    const auto n = static_cast<int>(std::min<std::size_t>(decode.batch_size, queries.size() - start));
    Decoder<float> dec(model, n);
    std::vector<int> seqs(static_cast<std::size_t>(n));
    std::iota(seqs.begin(), seqs.end(), 0);
    std::vector<std::vector<int>> feed(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      auto& p = feed[static_cast<std::size_t>(i)];
      p.push_back(Tokenizer::kBos);
      const auto ids = enc.tokenizer.encode(render_prompt(enc.tpl, queries[start + i], Polarity::plain));
      p.insert(p.end(), ids.begin(), ids.end());
      if (static_cast<int>(p.size()) >= ctx) {
        throw DataError("generate: prompt of query " + std::to_string(start + i) + " fills the context");
      }
    }
    std::vector<std::vector<int>> generated(static_cast<std::size_t>(n));
    auto logits = dec.feed(seqs, feed);
    for (int step = 0; !seqs.empty(); ++step) {
      std::vector<int> next_seqs;
      std::vector<std::vector<int>> next_feed;
      for (std::size_t k = 0; k < seqs.size(); ++k) {
        const int s = seqs[k];
        auto& gen = generated[static_cast<std::size_t>(s)];
        std::span<float> row(logits.data() + k * V, static_cast<std::size_t>(V));
        apply_repetition_penalty(row, gen, decode.repetition_penalty);
        const int tok = argmax(row);
        if (tok == Tokenizer::kEos) continue;
        gen.push_back(tok);
        if (static_cast<int>(gen.size()) >= decode.max_new_tokens || dec.length(s) >= ctx) continue;
        next_seqs.push_back(s);
        next_feed.push_back({tok});
      }
      seqs = std::move(next_seqs);
      if (seqs.empty()) break;
      logits = dec.feed(seqs, next_feed);
    }
    for (int i = 0; i < n; ++i) {
      std::string text = enc.tokenizer.decode(generated[static_cast<std::size_t>(i)]);
      if (!text.empty() && text.front() == ' ') text.erase(0, 1);
      out[start + i] = std::move(text);
    }
  }
  return out;
}

WinTieLose compare_generations(const std::vector<std::string>& queries, const std::vector<std::string>& a,
                               const std::vector<std::string>& b, const Judge& judge, double tie_tolerance) {
  if (a.size() != queries.size() || b.size() != queries.size()) {
    throw ShapeError("compare_generations: response lists do not match the queries");
  }
  WinTieLose w;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const double sa = judge(queries[i], a[i]);
    const double sb = judge(queries[i], b[i]);
    if (std::abs(sa - sb) <= tie_tolerance) {
      ++w.tie;
    } else if (sa > sb) {
      ++w.win;
    } else {
      ++w.lose;
    }
  }
  return w;
}

WinTieLose judge_winrate(const FloatModel& a, const FloatModel& b, const std::vector<std::string>& queries,
                         const Encoding& enc, const Judge& judge, const DecodeConfig& decode, double tie_tolerance) {
  return compare_generations(queries, generate(a, queries, enc, decode), generate(b, queries, enc, decode), judge,
                             tie_tolerance);
}

std::vector<std::string> queries_of(const std::vector<PreferencePair>& pairs) {
  std::vector<std::string> q;
  q.reserve(pairs.size());
  for (const auto& p : pairs) q.push_back(p.query);
  return q;
}

const MethodResult& ComparisonReport::method(const std::string& name) const {
  for (const auto& m : methods) {
    if (m.name == name) return m;
  }
  throw DataError("report: no method " + name);
}

const WinTieLose& ComparisonReport::versus(const std::string& a, const std::string& b) const {
  for (const auto& p : pairwise) {
    if (p.a == a && p.b == b) return p.counts;
  }
  throw DataError("report: no comparison " + a + " vs " + b);
}

void EvalSettings::validate() const {
  task_judge(task);
  decode.validate();
  if (!(tie_tolerance >= 0)) throw ConfigError("eval.tie_tolerance: must be >= 0");
  if (max_prompts < 1) throw ConfigError("eval.max_prompts: must be >= 1");
  if (margin_chunk < 1) throw ConfigError("eval.margin_chunk: must be >= 1");
}

json EvalSettings::to_json() const {
  return json{{"task", task},
              {"decode", decode.to_json()},
              {"tie_tolerance", tie_tolerance},
              {"max_prompts", max_prompts},
              {"margin_chunk", margin_chunk}};
}

EvalSettings EvalSettings::from_json(const json& j, const EvalSettings& defaults) {
  EvalSettings s = defaults;
  s.task = j.value("task", s.task);
  if (j.contains("decode")) s.decode = DecodeConfig::from_json(j["decode"], s.decode);
  s.tie_tolerance = j.value("tie_tolerance", s.tie_tolerance);
  s.max_prompts = j.value("max_prompts", s.max_prompts);
  s.margin_chunk = j.value("margin_chunk", s.margin_chunk);
  return s;
}

namespace {

std::vector<std::string> prompt_set(const std::vector<PreferencePair>& pairs, int max_prompts) {
  auto q = queries_of(pairs);
  if (static_cast<int>(q.size()) > max_prompts) q.resize(static_cast<std::size_t>(max_prompts));
  return q;
}

double mean_score(const std::vector<std::string>& queries, const std::vector<std::string>& gens, const Judge& judge) {
  double s = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) s += judge(queries[i], gens[i]);
  return queries.empty() ? 0.0 : s / static_cast<double>(queries.size());
}

}  // namespace

ComparisonReport compare_methods(const std::vector<MethodEntry>& methods, const std::vector<PreferencePair>& eval_pairs,
                                 const Encoding& enc, const EvalSettings& settings) {
  settings.validate();
  if (eval_pairs.empty()) throw DataError("eval: empty evaluation split");
  const auto judge = task_judge(settings.task);
  const auto queries = prompt_set(eval_pairs, settings.max_prompts);
  ComparisonReport r;
  r.task = settings.task;
  r.n_prompts = static_cast<int>(queries.size());
  r.tie_tolerance = settings.tie_tolerance;
  r.decode = settings.decode;
  for (const auto& m : methods) {
    MethodResult res;
    res.name = m.name;
    res.fingerprint = base_checksum(*m.model);
    const auto margins = pair_margins(*m.model, eval_pairs, enc, settings.margin_chunk);
    if (margins.empty()) throw DataError("eval: no usable evaluation pairs");
    r.n_margin_pairs = static_cast<int>(margins.size());
    res.margin = std::accumulate(margins.begin(), margins.end(), 0.0) / static_cast<double>(margins.size());
    res.generations = generate(*m.model, queries, enc, settings.decode);
    res.judge_mean = mean_score(queries, res.generations, judge);
    spdlog::info("eval {}: margin {:.4f}, judge mean {:.3f}", m.name, res.margin, res.judge_mean);
    r.methods.push_back(std::move(res));
  }
  for (std::size_t i = 0; i < r.methods.size(); ++i) {
    for (std::size_t k = i + 1; k < r.methods.size(); ++k) {
      const auto w = compare_generations(queries, r.methods[i].generations, r.methods[k].generations, judge,
                                         settings.tie_tolerance);
      r.pairwise.push_back({r.methods[i].name, r.methods[k].name, w});
      r.pairwise.push_back({r.methods[k].name, r.methods[i].name, w.swapped()});
    }
  }
  return r;
}

namespace {

constexpr const char* kJudgeNote =
    "win rates use a deterministic task judge in place of human or model annotators";

}  // namespace

void write_report_jsonl(const std::filesystem::path& path, const ComparisonReport& report) {
  JsonlWriter out(path, true);
  out.write(json{{"kind", "header"},
                 {"task", report.task},
                 {"judge", kJudgeNote},
                 {"margin_pairs", report.n_margin_pairs},
                 {"prompts", report.n_prompts},
                 {"tie_tolerance", report.tie_tolerance},
                 {"decode", report.decode.to_json()}});
  for (const auto& m : report.methods) {
    out.write(json{{"kind", "method"},
                   {"method", m.name},
                   {"fingerprint", m.fingerprint},
                   {"margin", m.margin},
                   {"judge_mean", m.judge_mean},
                   {"samples", std::vector<std::string>(m.generations.begin(),
                                                        m.generations.begin() +
                                                            static_cast<std::ptrdiff_t>(std::min<std::size_t>(
                                                                5, m.generations.size())))}});
  }
  for (const auto& p : report.pairwise) {
    out.write(json{{"kind", "pairwise"},
                   {"a", p.a},
                   {"b", p.b},
                   {"win", p.counts.win},
                   {"tie", p.counts.tie},
                   {"lose", p.counts.lose},
                   {"win_rate", p.counts.rate()}});
  }
}

std::string render_report_table(const ComparisonReport& report, int samples) {
  std::string s;
  s += fmt::format("task: {}  ({})\n", report.task, kJudgeNote);
  s += fmt::format("margin pairs: {}  prompts: {}  tie tolerance: {:g}  repetition penalty: {:g}\n\n",
                   report.n_margin_pairs, report.n_prompts, report.tie_tolerance, report.decode.repetition_penalty);
  std::size_t w = 6;
  for (const auto& m : report.methods) w = std::max(w, m.name.size());
  s += fmt::format("{:<{}}  {:>10}  {:>10}", "method", w, "margin", "judge");
  for (const auto& m : report.methods) s += fmt::format("  {:>{}}", "vs " + m.name, std::max<std::size_t>(w + 3, 14));
  s += "\n";
  for (const auto& a : report.methods) {
    s += fmt::format("{:<{}}  {:>10.4f}  {:>10.3f}", a.name, w, a.margin, a.judge_mean);
    for (const auto& b : report.methods) {
      std::string cell = "-";
      if (a.name != b.name) {
        const auto& c = report.versus(a.name, b.name);
        cell = fmt::format("{}/{}/{} {:.0f}%", c.win, c.tie, c.lose, 100 * c.rate());
      }
      s += fmt::format("  {:>{}}", cell, std::max<std::size_t>(w + 3, 14));
    }
    s += "\n";
  }
  s += "\ncells: win/tie/lose of the row method against the column method, rate counts ties as half\n";
  if (samples > 0) {
    s += "\nsamples:\n";
    for (const auto& m : report.methods) {
      for (int i = 0; i < std::min<int>(samples, static_cast<int>(m.generations.size())); ++i) {
        s += fmt::format("  [{}] {}\n", m.name, m.generations[static_cast<std::size_t>(i)]);
      }
    }
  }
  return s;
}

namespace {

AblationRow evaluate_row(const AblationInputs& in, const AlignResult& r, const std::vector<std::string>& queries,
                         const std::vector<std::string>& base_gens, const Judge& judge) {
  AblationRow row;
  row.margin = preference_margin(r.model, in.eval_pairs, in.enc, in.eval.margin_chunk);
  row.vs_base = compare_generations(queries, generate(r.model, queries, in.enc, in.eval.decode), base_gens, judge,
                                    in.eval.tie_tolerance);
  row.displacement = r.displacement;
  row.direction_cosine = r.direction_cosine;
  row.align_loss = r.final_loss;
  row.fingerprint = base_checksum(r.model);
  return row;
}

void check_inputs(const AblationInputs& in) {
  if (!in.base) throw ConfigError("ablate: no base model");
  in.eval.validate();
  if (in.eval_pairs.empty()) throw DataError("ablate: empty evaluation split");
}

}  // namespace

std::vector<AblationRow> run_ablation_alpha(const AblationInputs& in, const DifferenceVectors& store,
                                            const std::vector<double>& alphas) {
  check_inputs(in);
  if (store.size() == 0) throw DataError("ablate: the vector store is empty");
  if (alphas.empty()) throw ConfigError("ablate.alphas: empty list");
  const auto judge = task_judge(in.eval.task);
  const auto queries = prompt_set(in.eval_pairs, in.eval.max_prompts);
  const auto base_gens = generate(*in.base, queries, in.enc, in.eval.decode);
  std::vector<AblationRow> rows;
  for (double a : alphas) {
    auto cfg = in.align;
    cfg.alpha = a;
    auto loop = in.loop;
    loop.stage = fmt::format("{}:alpha={:g}", in.loop.stage.empty() ? "ablate" : in.loop.stage, a);
    if (in.loop.log_path) {
      loop.log_path = in.loop.log_path->parent_path() / fmt::format("{}_alpha{:g}.jsonl", in.loop.log_path->stem().string(), a);
    }
    const auto r = train_align(*in.base, store, in.align_items, in.enc, cfg, loop);
    auto row = evaluate_row(in, r, queries, base_gens, judge);
    row.label = fmt::format("{:g}", a);
    row.alpha = a;
    row.range = cfg.range;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<AblationRow> run_ablation_layers(const AblationInputs& in, const CollectionSource& source,
                                             const std::vector<LayerRange>& ranges) {
  check_inputs(in);
  if (!source.positive || !source.negative) throw ConfigError("ablate: missing source models");
  if (ranges.empty()) throw ConfigError("ablate.ranges: empty list");
  const int n_layers = in.base->config().n_layers;
  for (const auto& r : ranges) r.validate(n_layers, "ablate.ranges");
  const auto judge = task_judge(in.eval.task);
  const auto queries = prompt_set(in.eval_pairs, in.eval.max_prompts);
  const auto base_gens = generate(*in.base, queries, in.enc, in.eval.decode);
  std::vector<AblationRow> rows;
  for (const auto& range : ranges) {
    auto ccfg = source.config;
    ccfg.range = range;
    const auto store =
        difference_vectors(collect_activity(*source.positive, *source.negative, in.align_items, in.enc, ccfg), ccfg);
    auto cfg = in.align;
    cfg.range = range;
    auto loop = in.loop;
    loop.stage = fmt::format("{}:layers={}", in.loop.stage.empty() ? "ablate" : in.loop.stage, range.label());
    if (in.loop.log_path) {
      auto label = range.label();
      std::replace(label.begin(), label.end(), ':', '-');
      loop.log_path = in.loop.log_path->parent_path() / fmt::format("{}_layers{}.jsonl", in.loop.log_path->stem().string(), label);
    }
    const auto r = train_align(*in.base, store, in.align_items, in.enc, cfg, loop);
    auto row = evaluate_row(in, r, queries, base_gens, judge);
    row.label = range.label();
    row.alpha = cfg.alpha;
    row.range = range;
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  std::string s = "label,alpha,layers,margin,win,tie,lose,win_rate,displacement,direction_cosine,align_loss,fingerprint\n";
  for (const auto& r : rows) {
    s += fmt::format("{},{:.17g},{},{:.17g},{},{},{},{:.17g},{:.17g},{:.17g},{:.17g},{}\n", r.label, r.alpha,
                     r.range.label(), r.margin, r.vs_base.win, r.vs_base.tie, r.vs_base.lose, r.vs_base.rate(),
                     r.displacement, r.direction_cosine, r.align_loss, r.fingerprint);
  }
  write_text_file(path, s);
}

}  // namespace rahf
