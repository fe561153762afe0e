#include "rahf/instruct.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <numeric>

#include "rahf/errors.hpp"

namespace rahf {

namespace {

// log sigmoid(x) and sigmoid(-x), computed without overflow.
double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }
double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

void warn_dropped(const std::string& what, const std::vector<std::string>& dropped) {
  if (!dropped.empty()) {
    spdlog::warn("{}: {} items dropped, prompt longer than the limit (first: {})", what, dropped.size(), dropped[0]);
  }
}

}  // namespace

ScitTerms scit_terms(double p_pos, double p_neg, bool contrastive_only) {
  const double delta = p_pos - p_neg;
  ScitTerms t;
  t.loss = -log_sigmoid(delta);
  t.d_pos = -sigmoid(-delta);
  t.d_neg = sigmoid(-delta);
  if (!contrastive_only) {
    t.loss -= p_pos;
    t.d_pos -= 1.0;
  }
  return t;
}

template <class T>
double scit_loss(const Model<T>& model, const StimulusBatch& paired, const StimulusBatch& opposite,
                 bool contrastive_only, Gradients<T>* grads, bool train, std::uint64_t dropout_seed) {
  if (paired.batch != opposite.batch || paired.batch == 0) {
    throw ShapeError("scit_loss: paired and opposite batches must have the same nonzero row count");
  }
  const int n = paired.batch;
  const auto both = concat(paired, opposite);
  PassOptions po;
  po.logits = LogitMode::scored;
  po.scope = response_scope(both);
  po.record = grads != nullptr;
  po.train = train;
  po.dropout_seed = dropout_seed;
  Pass<T> pass(model, both, std::move(po));
  const auto lp = pass.logprobs();
  std::vector<T> dlp(static_cast<std::size_t>(2 * n));
  double total = 0;
  for (int b = 0; b < n; ++b) {
    const auto t = scit_terms(lp[b], lp[n + b], contrastive_only);
    if (!std::isfinite(t.loss)) {
      throw TrainingError("scit_loss: non-finite loss for example " + paired.ids[b]);
    }
    total += t.loss;
    dlp[b] = static_cast<T>(t.d_pos / n);
    dlp[n + b] = static_cast<T>(t.d_neg / n);
  }
  if (grads) pass.backward(dlp, {}, *grads);
  return total / n;
}

template <class T>
double sft_loss(const Model<T>& model, const StimulusBatch& batch, const std::vector<std::uint8_t>& scope,
                Gradients<T>* grads, bool train, std::uint64_t dropout_seed) {
  if (batch.batch == 0) throw ShapeError("sft_loss: empty batch");
  PassOptions po;
  po.logits = LogitMode::scored;
  po.scope = scope;
  po.record = grads != nullptr;
  po.train = train;
  po.dropout_seed = dropout_seed;
  Pass<T> pass(model, batch, std::move(po));
  const auto lp = pass.logprobs();
  double total = 0;
  for (int b = 0; b < batch.batch; ++b) {
    if (!std::isfinite(static_cast<double>(lp[b]))) {
      throw TrainingError("sft_loss: non-finite log-probability for example " + batch.ids[b]);
    }
    total -= lp[b];
  }
  if (grads) {
    std::vector<T> dlp(static_cast<std::size_t>(batch.batch), static_cast<T>(-1.0 / batch.batch));
    pass.backward(dlp, {}, *grads);
  }
  return total / batch.batch;
}

template double scit_loss<float>(const Model<float>&, const StimulusBatch&, const StimulusBatch&, bool,
                                 Gradients<float>*, bool, std::uint64_t);
template double scit_loss<double>(const Model<double>&, const StimulusBatch&, const StimulusBatch&, bool,
                                  Gradients<double>*, bool, std::uint64_t);
template double sft_loss<float>(const Model<float>&, const StimulusBatch&, const std::vector<std::uint8_t>&,
                                Gradients<float>*, bool, std::uint64_t);
template double sft_loss<double>(const Model<double>&, const StimulusBatch&, const std::vector<std::uint8_t>&,
                                 Gradients<double>*, bool, std::uint64_t);

ScitData build_scit_data(const std::vector<PreferencePair>& pairs, const Encoding& enc) {
  auto aligned = pad_and_align(enc.tokenizer, enc.tpl, both_items(pairs), enc.limits);
  warn_dropped("scit", aligned.dropped);
  ScitData d;
  const int n = aligned.positive.batch;
  d.rows = concat(aligned.positive, aligned.negative);
  for (int r = 0; r < n; ++r) {
    const auto& id = aligned.positive.ids[r];
    const bool chosen = id.size() > 2 && id.compare(id.size() - 2, 2, ":h") == 0;
    d.paired.push_back(chosen ? r : n + r);
    d.opposite.push_back(chosen ? n + r : r);
    d.ids.push_back(id);
  }
  if (d.ids.empty()) throw DataError("scit: no usable examples");
  return d;
}

namespace {

double scit_chunk(const FloatModel& model, const ScitData& data, std::span<const std::size_t> ex, bool contrastive_only,
                  Gradients<float>* grads, bool train, std::uint64_t seed) {
  std::vector<int> p;
  std::vector<int> o;
  for (auto e : ex) {
    p.push_back(data.paired[e]);
    o.push_back(data.opposite[e]);
  }
  return scit_loss(model, select_rows(data.rows, p), select_rows(data.rows, o), contrastive_only, grads, train, seed);
}

}  // namespace

double mean_scit_loss(const FloatModel& model, const ScitData& data, bool contrastive_only, int chunk) {
  double total = 0;
  std::vector<std::size_t> ex;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(chunk)) {
    ex.clear();
    for (std::size_t e = start; e < std::min(data.size(), start + chunk); ++e) ex.push_back(e);
    total += scit_chunk(model, data, ex, contrastive_only, nullptr, false, 0) * static_cast<double>(ex.size());
  }
  return total / static_cast<double>(data.size());
}

StageResult train_scit(const FloatModel& base, const std::vector<PreferencePair>& pairs, const Encoding& enc,
                       const ScitConfig& cfg, const LoopOptions& opt) {
  cfg.train.validate("instruct.scit");
  const auto data = build_scit_data(pairs, enc);
  FloatModel model = base;
  model.set_base_frozen(false);
  const double initial = mean_scit_loss(model, data, cfg.contrastive_only, cfg.eval_batch);
  LoopOptions o = opt;
  if (!o.example_id) o.example_id = [&](std::size_t e) { return data.ids[e]; };
  auto curve = run_training(model, data.size(), cfg.train, o,
                            [&](std::span<const std::size_t> ex, Gradients<float>& g, std::uint64_t seed) {
                              return scit_chunk(model, data, ex, cfg.contrastive_only, &g, true, seed);
                            });
  const double final_loss = mean_scit_loss(model, data, cfg.contrastive_only, cfg.eval_batch);
  spdlog::info("{}: mean contrastive loss {:.4f} -> {:.4f}", opt.stage, initial, final_loss);
  return StageResult{std::move(model), std::move(curve), initial, final_loss};
}

StageResult train_sft(const FloatModel& base, const std::vector<StimulusText>& items, const Encoding& enc,
                      const TrainConfig& cfg, Polarity polarity, bool full_sequence, const LoopOptions& opt) {
  cfg.validate("instruct.sft");
  auto padded = pad_single(enc.tokenizer, enc.tpl, items, enc.limits, polarity);
  warn_dropped(opt.stage, padded.dropped);
  const auto& data = padded.batch;
  if (data.batch == 0) throw DataError(opt.stage + ": no usable examples");
  FloatModel model = base;
  model.set_base_frozen(false);
  auto scope_of = [&](const StimulusBatch& b) { return full_sequence ? full_scope(b) : response_scope(b); };
  auto mean_loss = [&]() {
    double total = 0;
    const int chunk = std::max(cfg.batch_size, 16);
    for (int s = 0; s < data.batch; s += chunk) {
      std::vector<int> rows;
      for (int r = s; r < std::min(data.batch, s + chunk); ++r) rows.push_back(r);
      const auto sub = select_rows(data, rows);
      total += sft_loss(model, sub, scope_of(sub), static_cast<Gradients<float>*>(nullptr)) * sub.batch;
    }
    return total / data.batch;
  };
  const double initial = mean_loss();
  LoopOptions o = opt;
  if (!o.example_id) o.example_id = [&](std::size_t e) { return data.ids[e]; };
  auto curve = run_training(model, static_cast<std::size_t>(data.batch), cfg, o,
                            [&](std::span<const std::size_t> ex, Gradients<float>& g, std::uint64_t seed) {
                              std::vector<int> rows(ex.begin(), ex.end());
                              const auto sub = select_rows(data, rows);
                              return sft_loss(model, sub, scope_of(sub), &g, true, seed);
                            });
  const double final_loss = mean_loss();
  spdlog::info("{}: mean loss {:.4f} -> {:.4f}", opt.stage, initial, final_loss);
  return StageResult{std::move(model), std::move(curve), initial, final_loss};
}

DualResult train_dual(const FloatModel& base, const std::vector<PreferencePair>& pairs, const Encoding& enc,
                      const TrainConfig& cfg, const LoopOptions& opt) {
  auto oh = opt;
  auto ol = opt;
  oh.stage = opt.stage + ":preferred";
  ol.stage = opt.stage + ":dispreferred";
  if (opt.log_path) {
    auto stem = opt.log_path->parent_path() / opt.log_path->stem();
    oh.log_path = stem.string() + "_preferred.jsonl";
    ol.log_path = stem.string() + "_dispreferred.jsonl";
  }
  auto h = train_sft(base, chosen_items(pairs), enc, cfg, Polarity::plain, false, oh);
  auto l = train_sft(base, rejected_items(pairs), enc, cfg, Polarity::plain, false, ol);
  return DualResult{std::move(h), std::move(l)};
}

StageResult train_preferred_sft(const FloatModel& base, const std::vector<PreferencePair>& pairs, const Encoding& enc,
                                const TrainConfig& cfg, const LoopOptions& opt) {
  return train_sft(base, chosen_items(pairs), enc, cfg, Polarity::plain, false, opt);
}

StageResult train_base(const ModelConfig& mc, const std::vector<PreferencePair>& corpus, const Encoding& enc,
                       const TrainConfig& cfg, const LoopOptions& opt) {
  mc.validate();
  return train_sft(build_model<float>(mc), both_items(corpus), enc, cfg, Polarity::plain, true, opt);
}

}  // namespace rahf
