#include "rahf/align.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <numeric>
#include <unordered_map>

#include "rahf/errors.hpp"

namespace rahf {

TrainConfig AlignConfig::default_train() {
  TrainConfig t;
  t.learning_rate = 1e-3;
  t.epochs = 0;
  t.steps = 300;
  t.batch_size = 16;
  t.schedule = "constant";
  t.warmup_fraction = 0.0;
  return t;
}

void AlignConfig::validate(int n_layers) const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("align.alpha: must be >= 0");
  range.validate(n_layers, "align.layers");
  try {
    adapter_spec().validate(n_layers);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("align.") + e.what());
  }
  train.validate("align");
  if (budget < 1) throw ConfigError("align.budget: must be >= 1");
  if (input != Polarity::positive && input != Polarity::plain) {
    throw ConfigError("align.input: must be positive or plain");
  }
  if (consistency_every < 0) throw ConfigError("align.consistency_every: must be >= 0");
  if (eval_batch < 1) throw ConfigError("align.eval_batch: must be >= 1");
}

void AlignConfig::validate_against(const DifferenceVectors& store) const {
  if (store.layers != range.layers()) {
    throw ConfigError("align.layers: range " + range.label() + " differs from the vector store's " +
                      store.config.range.label());
  }
  if (budget > store.budget) {
    throw ConfigError("align.budget: " + std::to_string(budget) + " exceeds the store budget " +
                      std::to_string(store.budget));
  }
}

AdapterSpec AlignConfig::adapter_spec() const {
  AdapterSpec s = adapter;
  s.target_layers = range.layers();
  return s;
}

json AlignConfig::to_json() const {
  return json{{"alpha", alpha},
              {"layers", range.to_json()},
              {"rank", adapter.rank},
              {"scale", adapter.scale},
              {"dropout", adapter.dropout},
              {"budget", budget},
              {"input", to_string(input)},
              {"consistency_every", consistency_every},
              {"consistency_tolerance", consistency_tolerance},
              {"eval_batch", eval_batch},
              {"adapter_seed", adapter_seed},
              {"train", train.to_json()}};
}

AlignConfig AlignConfig::from_json(const json& j, const AlignConfig& defaults) {
  AlignConfig c = defaults;
  c.alpha = j.value("alpha", c.alpha);
  if (j.contains("layers")) c.range = LayerRange::from_json(j["layers"]);
  c.adapter.rank = j.value("rank", c.adapter.rank);
  c.adapter.scale = j.value("scale", c.adapter.scale);
  c.adapter.dropout = j.value("dropout", c.adapter.dropout);
  c.budget = j.value("budget", c.budget);
  if (j.contains("input")) c.input = polarity_from_string(j["input"].get<std::string>());
  c.consistency_every = j.value("consistency_every", c.consistency_every);
  c.consistency_tolerance = j.value("consistency_tolerance", c.consistency_tolerance);
  c.eval_batch = j.value("eval_batch", c.eval_batch);
  c.adapter_seed = j.value("adapter_seed", c.adapter_seed);
  if (j.contains("train")) c.train = TrainConfig::from_json(j["train"], c.train);
  return c;
}

namespace {

struct Sums {
  double sq = 0;       // sum of squared residuals
  double coords = 0;   // number of residual coordinates
  double disp = 0;     // sum of |adapted - base| over cells
  double cos = 0;      // sum of cosines over cells with nonzero vectors
  double cells = 0;
  double cos_cells = 0;
};

template <class T>
Sums align_sums(const HiddenTrace<T>& adapted, const HiddenTrace<T>& base, const DifferenceVectors& v,
                int offset, double alpha, int budget, std::vector<std::vector<T>>* grad) {
  if (adapted.layers != base.layers || adapted.layers != v.layers || adapted.batch != base.batch ||
      adapted.positions != base.positions || adapted.d_model != base.d_model || v.size() != adapted.batch ||
      v.d_model != adapted.d_model) {
    throw ShapeError("align_loss: adapted, base and difference tensors are not aligned");
  }
  if (budget > v.budget || offset + budget > adapted.positions) {
    throw ShapeError("align_loss: budget exceeds the response region");
  }
  const int d = adapted.d_model;
  Sums s;
  if (grad) {
    grad->assign(adapted.layers.size(), std::vector<T>(adapted.values[0].size(), T{0}));
  }
  for (std::size_t l = 0; l < adapted.layers.size(); ++l) {
    for (int b = 0; b < adapted.batch; ++b) {
      for (int t = 0; t < budget; ++t) {
        if (!v.mask[static_cast<std::size_t>(b) * v.budget + t]) continue;
        const auto cell = static_cast<std::size_t>(b) * adapted.positions + offset + t;
        if (!adapted.mask[cell] || !base.mask[cell]) {
          throw ShapeError("align_loss: difference vector at a padded position of example " + v.ids[b]);
        }
        const T* a = adapted.values[l].data() + cell * d;
        const T* z = base.values[l].data() + cell * d;
        const float* dv = v.values[l].data() + (static_cast<std::size_t>(b) * v.budget + t) * d;
        double dn = 0, vn = 0, dot = 0;
        for (int j = 0; j < d; ++j) {
          const double delta = static_cast<double>(a[j]) - static_cast<double>(z[j]);
          const double r = delta - alpha * dv[j];
          s.sq += r * r;
          dn += delta * delta;
          vn += static_cast<double>(dv[j]) * dv[j];
          dot += delta * dv[j];
        }
        s.coords += d;
        s.cells += 1;
        s.disp += std::sqrt(dn);
        if (dn > 0 && vn > 0) {
          s.cos += dot / std::sqrt(dn * vn);
          s.cos_cells += 1;
        }
      }
    }
  }
  if (grad && s.coords > 0) {
    for (std::size_t l = 0; l < adapted.layers.size(); ++l) {
      auto& g = (*grad)[l];
      for (int b = 0; b < adapted.batch; ++b) {
        for (int t = 0; t < budget; ++t) {
          if (!v.mask[static_cast<std::size_t>(b) * v.budget + t]) continue;
          const auto cell = static_cast<std::size_t>(b) * adapted.positions + offset + t;
          const T* a = adapted.values[l].data() + cell * d;
          const T* z = base.values[l].data() + cell * d;
          const float* dv = v.values[l].data() + (static_cast<std::size_t>(b) * v.budget + t) * d;
          T* o = g.data() + cell * d;
          for (int j = 0; j < d; ++j) {
            const double r = static_cast<double>(a[j]) - static_cast<double>(z[j]) - alpha * dv[j];
            o[j] = static_cast<T>(2.0 * r / s.coords);
          }
        }
      }
    }
  }
  return s;
}

}  // namespace

template <class T>
double align_loss(const HiddenTrace<T>& adapted, const HiddenTrace<T>& base, const DifferenceVectors& v,
                  int response_offset, double alpha, std::vector<std::vector<T>>* grad) {
  const auto s = align_sums(adapted, base, v, response_offset, alpha, v.budget, grad);
  if (s.coords == 0) throw DataError("align_loss: no unmasked positions");
  return s.sq / s.coords;
}

template double align_loss<float>(const HiddenTrace<float>&, const HiddenTrace<float>&, const DifferenceVectors&, int,
                                  double, std::vector<std::vector<float>>*);
template double align_loss<double>(const HiddenTrace<double>&, const HiddenTrace<double>&, const DifferenceVectors&,
                                   int, double, std::vector<std::vector<double>>*);

namespace {

// Cached frozen-base hidden states over the first `budget` response columns,
// per layer [examples, budget, d].
struct BaseCache {
  int budget = 0;
  int d = 0;
  std::vector<std::vector<float>> values;

  // Padded-layout trace for rows `rows` of `batch` (only the cached cells set).
  HiddenTrace<float> expand(const StimulusBatch& sub, std::span<const int> rows, const std::vector<int>& layers) const {
    HiddenTrace<float> t;
    t.layers = layers;
    t.batch = sub.batch;
    t.positions = sub.seq_len();
    t.d_model = d;
    t.mask = sub.attention;
    t.values.assign(layers.size(), std::vector<float>(static_cast<std::size_t>(sub.batch) * t.positions * d, 0.0f));
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (int b = 0; b < sub.batch; ++b) {
        const float* src = values[l].data() + static_cast<std::size_t>(rows[b]) * budget * d;
        float* dst = t.values[l].data() + (static_cast<std::size_t>(b) * t.positions + sub.prompt_width) * d;
        std::copy(src, src + static_cast<std::size_t>(budget) * d, dst);
      }
    }
    return t;
  }
};

StimulusBatch rows_of(const StimulusBatch& b, std::span<const int> rows) { return select_rows(b, rows); }

}  // namespace

AlignResult train_align(const FloatModel& base, const DifferenceVectors& store, const std::vector<StimulusText>& items,
                        const Encoding& enc, const AlignConfig& cfg, const LoopOptions& opt) {
  const int n_layers = base.config().n_layers;
  cfg.validate(n_layers);
  cfg.validate_against(store);
  if (base.has_adapter()) throw ConfigError("align: the base model already carries an adapter");

  std::unordered_map<std::string, const StimulusText*> by_id;
  for (const auto& it : items) by_id[it.id] = &it;
  std::vector<StimulusText> ordered;
  for (const auto& id : store.ids) {
    auto f = by_id.find(id);
    if (f == by_id.end()) throw DataError("align: vector store id " + id + " is not in the split");
    ordered.push_back(*f->second);
  }
  const auto padded = pad_single(enc.tokenizer, enc.tpl, ordered, enc.limits, cfg.input);
  if (!padded.dropped.empty()) {
    throw DataError("align: item " + padded.dropped[0] + " does not fit the prompt limit");
  }
  const auto& data = padded.batch;
  const int n = data.batch;
  const int off = data.prompt_width;
  if (data.response_width < cfg.budget) throw ConfigError("align.budget: exceeds the response width");
  for (int b = 0; b < n; ++b) {
    for (int t = 0; t < cfg.budget; ++t) {
      if (store.mask[static_cast<std::size_t>(b) * store.budget + t] != data.response[data.index(b, off + t)]) {
        throw DataError("align: response positions of " + store.ids[b] + " disagree with the vector store");
      }
    }
  }
  // Restrict the targets to the configured budget.
  DifferenceVectors targets = store;
  if (cfg.budget < store.budget) {
    targets.budget = cfg.budget;
    const auto d = static_cast<std::size_t>(store.d_model);
    targets.mask.assign(static_cast<std::size_t>(n) * cfg.budget, 0);
    for (auto& v : targets.values) v.assign(static_cast<std::size_t>(n) * cfg.budget * d, 0.0f);
    for (int b = 0; b < n; ++b) {
      for (int t = 0; t < cfg.budget; ++t) {
        targets.mask[static_cast<std::size_t>(b) * cfg.budget + t] = store.mask[static_cast<std::size_t>(b) * store.budget + t];
        for (std::size_t l = 0; l < store.layers.size(); ++l) {
          std::copy_n(store.values[l].begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(b) * store.budget + t) * d), d,
                      targets.values[l].begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(b) * cfg.budget + t) * d));
        }
      }
    }
  }
  const auto layers = targets.layers;
  const int d = base.config().d_model;

  auto chunk_rows = [&](int start, int count) {
    std::vector<int> rows(static_cast<std::size_t>(count));
    std::iota(rows.begin(), rows.end(), start);
    return rows;
  };
  auto trace_pass = [&](const FloatModel& m, const StimulusBatch& sub, bool bypass) {
    PassOptions po;
    po.trace_layers = layers;
    po.last_layer = layers.back();
    po.bypass_adapter = bypass;
    return Pass<float>(m, sub, std::move(po));
  };

  BaseCache cache;
  cache.budget = cfg.budget;
  cache.d = d;
  cache.values.assign(layers.size(), std::vector<float>(static_cast<std::size_t>(n) * cfg.budget * d));
  for (int start = 0; start < n; start += cfg.eval_batch) {
    const auto rows = chunk_rows(start, std::min(cfg.eval_batch, n - start));
    const auto sub = rows_of(data, rows);
    const auto pass = trace_pass(base, sub, false);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (int b = 0; b < sub.batch; ++b) {
        const float* src = pass.trace().values[l].data() + (static_cast<std::size_t>(b) * sub.seq_len() + off) * d;
        std::copy(src, src + static_cast<std::size_t>(cfg.budget) * d,
                  cache.values[l].begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(start + b) * cfg.budget * d));
      }
    }
  }

  FloatModel model = inject_adapter(base, cfg.adapter_spec(), cfg.adapter_seed);
  const auto base_sum = base_checksum(model);

  auto evaluate = [&]() {
    Sums total;
    for (int start = 0; start < n; start += cfg.eval_batch) {
      const auto rows = chunk_rows(start, std::min(cfg.eval_batch, n - start));
      const auto sub = rows_of(data, rows);
      const auto pass = trace_pass(model, sub, false);
      const auto s = align_sums<float>(pass.trace(), cache.expand(sub, rows, layers), targets.rows(rows), off,
                                       cfg.alpha, cfg.budget, nullptr);
      total.sq += s.sq;
      total.coords += s.coords;
      total.disp += s.disp;
      total.cos += s.cos;
      total.cells += s.cells;
      total.cos_cells += s.cos_cells;
    }
    AlignEval e;
    e.loss = total.coords > 0 ? total.sq / total.coords : 0.0;
    e.displacement = total.cells > 0 ? total.disp / total.cells : 0.0;
    e.direction_cosine = total.cos_cells > 0 ? total.cos / total.cos_cells : 0.0;
    return e;
  };

  const auto init = evaluate();
  int step = 0;
  int checks = 0;
  double worst = 0;
  LoopOptions o = opt;
  if (!o.example_id) o.example_id = [&](std::size_t e) { return data.ids[e]; };
  auto curve = run_training(
      model, static_cast<std::size_t>(n), cfg.train, o,
      [&](std::span<const std::size_t> ex, Gradients<float>& g, std::uint64_t seed) {
        std::vector<int> rows(ex.begin(), ex.end());
        const auto sub = rows_of(data, rows);
        const auto base_trace = cache.expand(sub, rows, layers);
        if (cfg.consistency_every > 0 && step % cfg.consistency_every == 0) {
          const auto fresh = trace_pass(model, sub, true);
          for (std::size_t l = 0; l < layers.size(); ++l) {
            for (int b = 0; b < sub.batch; ++b) {
              for (int t = 0; t < cfg.budget; ++t) {
                const auto cell = static_cast<std::size_t>(b) * sub.seq_len() + off + t;
                for (int j = 0; j < d; ++j) {
                  const double diff = std::abs(static_cast<double>(fresh.trace().values[l][cell * d + j]) -
                                               base_trace.values[l][cell * d + j]);
                  worst = std::max(worst, diff);
                }
              }
            }
          }
          ++checks;
          if (worst > cfg.consistency_tolerance) {
            throw TrainingError("align: frozen base trace drifted by " + std::to_string(worst) + " at step " +
                                std::to_string(step));
          }
        }
        ++step;
        PassOptions po;
        po.trace_layers = layers;
        po.last_layer = layers.back();
        po.record = true;
        po.train = true;
        po.dropout_seed = seed;
        Pass<float> pass(model, sub, std::move(po));
        std::vector<std::vector<float>> dtrace;
        const double loss =
            align_loss<float>(pass.trace(), base_trace, targets.rows(rows), off, cfg.alpha, &dtrace);
        pass.backward({}, dtrace, g);
        return loss;
      });
  if (base_checksum(model) != base_sum) throw TrainingError("align: base parameters changed during training");
  const auto fin = evaluate();
  spdlog::info("{}: align loss {:.6g} -> {:.6g}, displacement {:.4g}, cosine {:.4f}", opt.stage, init.loss, fin.loss,
               fin.displacement, fin.direction_cosine);
  AlignResult r{std::move(model), std::move(curve), init.loss, fin.loss, fin.displacement, fin.direction_cosine,
                checks, worst};
  return r;
}

}  // namespace rahf
