#include "rahf/baselines.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <numeric>

#include "rahf/errors.hpp"

namespace rahf {

AdapterSpec DpoConfig::default_adapter() {
  AdapterSpec a;
  a.rank = 16;
  a.scale = 16.0;
  a.dropout = 0.05;
  return a;
}

void DpoConfig::validate(int n_layers) const {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("baseline.dpo.beta: must be > 0");
  if (reference != "preferred") throw ConfigError("baseline.dpo.reference: only 'preferred' is supported");
  try {
    adapter_spec(n_layers).validate(n_layers);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("baseline.dpo.") + e.what());
  }
  train.validate("baseline.dpo");
  if (eval_batch < 1) throw ConfigError("baseline.dpo.eval_batch: must be >= 1");
}

AdapterSpec DpoConfig::adapter_spec(int n_layers) const {
  AdapterSpec s = adapter;
  if (s.target_layers.empty()) {
    s.target_layers.resize(static_cast<std::size_t>(n_layers));
    std::iota(s.target_layers.begin(), s.target_layers.end(), 0);
  }
  return s;
}

json DpoConfig::to_json() const {
  return json{{"beta", beta},
              {"reference", reference},
              {"rank", adapter.rank},
              {"scale", adapter.scale},
              {"dropout", adapter.dropout},
              {"target_layers", adapter.target_layers},
              {"eval_batch", eval_batch},
              {"adapter_seed", adapter_seed},
              {"train", train.to_json()}};
}

DpoConfig DpoConfig::from_json(const json& j, const DpoConfig& defaults) {
  DpoConfig c = defaults;
  c.beta = j.value("beta", c.beta);
  c.reference = j.value("reference", c.reference);
  c.adapter.rank = j.value("rank", c.adapter.rank);
  c.adapter.scale = j.value("scale", c.adapter.scale);
  c.adapter.dropout = j.value("dropout", c.adapter.dropout);
  if (j.contains("target_layers")) c.adapter.target_layers = j["target_layers"].get<std::vector<int>>();
  c.eval_batch = j.value("eval_batch", c.eval_batch);
  c.adapter_seed = j.value("adapter_seed", c.adapter_seed);
  if (j.contains("train")) c.train = TrainConfig::from_json(j["train"], c.train);
  return c;
}

namespace {

double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }
double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

DpoTerms dpo_terms(double pc, double pr, double rc, double rr, double beta) {
  const double z = beta * ((pc - rc) - (pr - rr));
  DpoTerms t;
  t.loss = -log_sigmoid(z);
  t.d_chosen = -beta * sigmoid(-z);
  t.d_rejected = beta * sigmoid(-z);
  return t;
}

template <class T>
double dpo_loss(const Model<T>& policy, const StimulusBatch& chosen, const StimulusBatch& rejected,
                std::span<const double> ref_chosen, std::span<const double> ref_rejected, double beta,
                Gradients<T>* grads, bool train, std::uint64_t dropout_seed) {
  const int n = chosen.batch;
  if (n == 0 || rejected.batch != n || ref_chosen.size() != static_cast<std::size_t>(n) ||
      ref_rejected.size() != static_cast<std::size_t>(n)) {
    throw ShapeError("dpo_loss: chosen, rejected and reference rows disagree");
  }
  const auto both = concat(chosen, rejected);
  PassOptions po;
  po.logits = LogitMode::scored;
  po.scope = response_scope(both);
  po.record = grads != nullptr;
  po.train = train;
  po.dropout_seed = dropout_seed;
  Pass<T> pass(policy, both, std::move(po));
  const auto lp = pass.logprobs();
  std::vector<T> dlp(static_cast<std::size_t>(2 * n));
  double total = 0;
  for (int b = 0; b < n; ++b) {
    const auto t = dpo_terms(lp[b], lp[n + b], ref_chosen[b], ref_rejected[b], beta);
    if (!std::isfinite(t.loss)) throw TrainingError("dpo_loss: non-finite loss for pair " + chosen.ids[b]);
    total += t.loss;
    dlp[b] = static_cast<T>(t.d_chosen / n);
    dlp[n + b] = static_cast<T>(t.d_rejected / n);
  }
  if (grads) pass.backward(dlp, {}, *grads);
  return total / n;
}

template double dpo_loss<float>(const Model<float>&, const StimulusBatch&, const StimulusBatch&,
                                std::span<const double>, std::span<const double>, double, Gradients<float>*, bool,
                                std::uint64_t);
template double dpo_loss<double>(const Model<double>&, const StimulusBatch&, const StimulusBatch&,
                                 std::span<const double>, std::span<const double>, double, Gradients<double>*, bool,
                                 std::uint64_t);

DpoResult train_dpo(const FloatModel& reference, const std::vector<PreferencePair>& pairs, const Encoding& enc,
                    const DpoConfig& cfg, const LoopOptions& opt) {
  const int n_layers = reference.config().n_layers;
  cfg.validate(n_layers);
  if (reference.has_adapter()) throw ConfigError("baseline.dpo: the reference model already carries an adapter");
  auto pc = pad_single(enc.tokenizer, enc.tpl, chosen_items(pairs), enc.limits, Polarity::plain);
  auto pr = pad_single(enc.tokenizer, enc.tpl, rejected_items(pairs), enc.limits, Polarity::plain);
  if (!pc.dropped.empty()) {
    spdlog::warn("{}: {} pairs dropped, prompt longer than the limit (first: {})", opt.stage, pc.dropped.size(),
                 pc.dropped[0]);
  }
  const auto& chosen = pc.batch;
  const auto& rejected = pr.batch;
  if (chosen.batch == 0) throw DataError(opt.stage + ": no usable pairs");
  if (chosen.batch != rejected.batch) throw DataError(opt.stage + ": chosen and rejected rows disagree");
  const int n = chosen.batch;
  const int chunk = cfg.eval_batch;

  auto to_double = [](const std::vector<float>& v) { return std::vector<double>(v.begin(), v.end()); };
  const auto ref_c = to_double(batched_logprob(reference, chosen, response_scope(chosen), chunk));
  const auto ref_r = to_double(batched_logprob(reference, rejected, response_scope(rejected), chunk));
  const auto ref_sum = base_checksum(reference);

  FloatModel policy = inject_adapter(reference, cfg.adapter_spec(n_layers), cfg.adapter_seed);
  auto rows_and_refs = [&](std::vector<int> rows) {
    std::vector<double> rc, rr;
    for (int r : rows) {
      rc.push_back(ref_c[static_cast<std::size_t>(r)]);
      rr.push_back(ref_r[static_cast<std::size_t>(r)]);
    }
    return std::tuple{select_rows(chosen, rows), select_rows(rejected, rows), rc, rr};
  };
  auto mean_loss = [&]() {
    double total = 0;
    for (int s = 0; s < n; s += chunk) {
      std::vector<int> rows;
      for (int r = s; r < std::min(n, s + chunk); ++r) rows.push_back(r);
      const auto [c, r, rc, rr] = rows_and_refs(rows);
      total += dpo_loss<float>(policy, c, r, rc, rr, cfg.beta, nullptr) * c.batch;
    }
    return total / n;
  };
  const double initial = mean_loss();
  LoopOptions o = opt;
  if (!o.example_id) o.example_id = [&](std::size_t e) { return chosen.ids[e]; };
  auto curve = run_training(policy, static_cast<std::size_t>(n), cfg.train, o,
                            [&](std::span<const std::size_t> ex, Gradients<float>& g, std::uint64_t seed) {
                              const auto [c, r, rc, rr] = rows_and_refs(std::vector<int>(ex.begin(), ex.end()));
                              return dpo_loss<float>(policy, c, r, rc, rr, cfg.beta, &g, true, seed);
                            });
  if (base_checksum(reference) != ref_sum) throw TrainingError(opt.stage + ": reference model changed");
  const double final_loss = mean_loss();
  spdlog::info("{}: dpo loss {:.4f} -> {:.4f}", opt.stage, initial, final_loss);
  return DpoResult{std::move(policy), std::move(curve), initial, final_loss};
}

}  // namespace rahf
