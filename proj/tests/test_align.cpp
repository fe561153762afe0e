#include <cmath>
#include <random>

#include "doctest.h"
#include "rahf/align.hpp"
#include "rahf/errors.hpp"
#include "support.hpp"

using namespace rahf;
using namespace rahf::testing;

namespace {

// Random targets over the response columns of `b`.
DifferenceVectors random_targets(const StimulusBatch& b, const std::vector<int>& layers, int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.3);
  DifferenceVectors v;
  v.layers = layers;
  v.ids = b.ids;
  v.budget = b.response_width;
  v.d_model = d;
  for (int r = 0; r < b.batch; ++r) {
    for (int t = 0; t < v.budget; ++t) v.mask.push_back(b.response[b.index(r, b.prompt_width + t)]);
  }
  v.values.assign(layers.size(), std::vector<float>(v.mask.size() * static_cast<std::size_t>(d), 0.0f));
  for (auto& layer : v.values) {
    for (std::size_t c = 0; c < v.mask.size(); ++c) {
      if (!v.mask[c]) continue;
      for (int j = 0; j < d; ++j) layer[c * d + j] = static_cast<float>(n(rng));
    }
  }
  return v;
}

template <class T>
HiddenTrace<T> run_trace(const Model<T>& m, const StimulusBatch& b, const std::vector<int>& layers, bool bypass) {
  PassOptions o;
  o.trace_layers = layers;
  o.bypass_adapter = bypass;
  return Pass<T>(m, b, o).trace();
}

struct Fixture {
  std::vector<PreferencePair> pairs;
  Encoding enc;
  FloatModel model;
  DifferenceVectors store;
};

Fixture fixture(const LayerRange& range, int budget) {
  auto pairs = make_synthetic_task("verbosity", 10, 301);
  auto enc = small_encoding(pairs);
  auto mc = tiny_config(4, 16, 2, 302);
  mc.vocab_size = enc.tokenizer.vocab_size();
  mc.max_seq_len = 128;
  auto model = build_model<float>(mc);
  jitter(model, 0.02, 303);
  CollectionConfig c;
  c.range = range;
  c.budget = budget;
  auto store = difference_vectors(collect_activity(model, model, chosen_items(pairs), enc, c), c);
  return Fixture{std::move(pairs), std::move(enc), std::move(model), std::move(store)};
}

AlignConfig small_align(const LayerRange& range, int budget, double alpha) {
  AlignConfig c;
  c.alpha = alpha;
  c.range = range;
  c.budget = budget;
  c.adapter.rank = 4;
  c.adapter.dropout = 0.0;
  c.train.steps = 6;
  c.train.batch_size = 4;
  c.train.learning_rate = 3e-3;
  c.consistency_every = 2;
  return c;
}

double mean_square(const DifferenceVectors& v) {
  double s = 0, n = 0;
  for (const auto& layer : v.values) {
    for (std::size_t c = 0; c < v.mask.size(); ++c) {
      if (!v.mask[c]) continue;
      for (int j = 0; j < v.d_model; ++j) s += static_cast<double>(layer[c * v.d_model + j]) * layer[c * v.d_model + j];
      n += v.d_model;
    }
  }
  return s / n;
}

}  // namespace

TEST_CASE("alignment loss gradient matches finite differences") {
  auto base = build_model<double>(tiny_config(2, 16, 2, 311));
  jitter(base, 0.05, 312);
  const std::vector<int> layers = {0, 1};
  AdapterSpec spec;
  spec.rank = 4;
  spec.dropout = 0.0;
  spec.target_layers = layers;
  auto m = inject_adapter(base, spec, 313);
  // Move the adapter off its zero-initialised factor.
  {
    std::mt19937_64 rng(314);
    std::normal_distribution<double> n(0.0, 0.1);
    for (auto& p : m.adapter_params()) p += n(rng);
  }
  const auto b = make_batch(random_rows(3, 40, 5, 4, 315), 6, 4);
  const auto frozen = run_trace(base, b, layers, false);
  const auto v = random_targets(b, layers, 16, 316);
  for (double alpha : {0.0, 2.0}) {
    PassOptions o;
    o.trace_layers = layers;
    o.record = true;
    Pass<double> pass(m, b, o);
    std::vector<std::vector<double>> dtrace;
    align_loss(pass.trace(), frozen, v, b.prompt_width, alpha, &dtrace);
    auto g = m.make_gradients();
    pass.backward({}, dtrace, g);
    const double worst = worst_fd_error(
        m.adapter_params(), g.adapter,
        [&] { return align_loss<double>(run_trace(m, b, layers, false), frozen, v, b.prompt_width, alpha, nullptr); },
        32, 317);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("alignment loss closed form at initialisation") {
  auto m = build_model<double>(tiny_config(2, 16, 2, 321));
  const std::vector<int> layers = {0, 1};
  const auto b = make_batch(random_rows(4, 40, 5, 4, 322), 6, 4);
  const auto t = run_trace(m, b, layers, false);
  const auto v = random_targets(b, layers, 16, 323);
  const double l1 = align_loss<double>(t, t, v, b.prompt_width, 1.0, nullptr);
  CHECK(l1 == doctest::Approx(mean_square(v)).epsilon(1e-12));
  CHECK(align_loss<double>(t, t, v, b.prompt_width, 2.0, nullptr) == doctest::Approx(4 * l1).epsilon(1e-12));
  CHECK(align_loss<double>(t, t, v, b.prompt_width, 0.0, nullptr) == 0.0);
}

TEST_CASE("alignment training starts at alpha^2 mean v^2 and lowers the loss") {
  const LayerRange range{1, 3, 1};
  auto f = fixture(range, 8);
  const auto items = chosen_items(f.pairs);
  LoopOptions o;
  o.stage = "align";
  const auto cfg = small_align(range, 8, 3.0);
  const auto r = train_align(f.model, f.store, items, f.enc, cfg, o);
  CHECK(r.initial_loss == doctest::Approx(9.0 * mean_square(f.store)).epsilon(1e-6));
  CHECK(r.final_loss < r.initial_loss);
  CHECK(r.displacement > 0);
  CHECK(r.direction_cosine > 0);
  CHECK(r.consistency_checks == 3);
  CHECK(r.consistency_max_diff <= 1e-5);
}

TEST_CASE("alpha zero leaves the adapter at its initial state") {
  const LayerRange range{0, 2, 1};
  auto f = fixture(range, 8);
  LoopOptions o;
  o.stage = "align";
  auto cfg = small_align(range, 8, 0.0);
  const auto r = train_align(f.model, f.store, chosen_items(f.pairs), f.enc, cfg, o);
  const auto fresh = inject_adapter(f.model, cfg.adapter_spec(), cfg.adapter_seed);
  CHECK(adapter_checksum(r.model) == adapter_checksum(fresh));
  CHECK(r.initial_loss == 0.0);
  CHECK(r.displacement == 0.0);
}

TEST_CASE("alignment configuration is checked against the store") {
  const LayerRange range{1, 3, 1};
  auto f = fixture(range, 8);
  LoopOptions o;
  auto cfg = small_align(LayerRange{0, 2, 1}, 8, 1.0);
  CHECK_THROWS_AS(train_align(f.model, f.store, chosen_items(f.pairs), f.enc, cfg, o), ConfigError);
  cfg = small_align(range, 16, 1.0);
  CHECK_THROWS_AS(train_align(f.model, f.store, chosen_items(f.pairs), f.enc, cfg, o), ConfigError);
  cfg = small_align(range, 8, -1.0);
  CHECK_THROWS_AS(cfg.validate(4), ConfigError);
  cfg = small_align(range, 8, 1.0);
  CHECK_THROWS_AS(train_align(f.model, f.store, rejected_items(f.pairs), f.enc, cfg, o), DataError);
  const auto back = AlignConfig::from_json(cfg.to_json(), AlignConfig{});
  CHECK(back.to_json() == cfg.to_json());
}
