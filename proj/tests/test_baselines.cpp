#include <cmath>
#include <random>

#include "doctest.h"
#include "rahf/baselines.hpp"
#include "rahf/errors.hpp"
#include "rahf/eval.hpp"
#include "support.hpp"

using namespace rahf;
using namespace rahf::testing;

namespace {

// Chosen and rejected responses to the same prompts.
std::pair<StimulusBatch, StimulusBatch> preference_batches(std::uint64_t seed) {
  auto chosen = random_rows(3, 40, 5, 4, seed);
  auto rejected = chosen;
  std::mt19937_64 rng(seed + 1);
  for (auto& r : rejected) {
    for (auto& t : r.second) t = static_cast<int>(rng() % 40);
  }
  return {make_batch(chosen, 6, 4), make_batch(rejected, 6, 4)};
}

std::vector<double> logprobs(const Model<double>& m, const StimulusBatch& b) {
  const auto lp = sequence_logprob(m, b, response_scope(b));
  return {lp.begin(), lp.end()};
}

}  // namespace

TEST_CASE("preference loss closed form") {
  CHECK(dpo_terms(-3, -7, -3, -7, 0.1).loss == std::log(2.0));
  CHECK(dpo_terms(-1, -2, -5, -1, 0.1).loss < dpo_terms(-1.5, -2, -5, -1, 0.1).loss);
  CHECK(dpo_terms(0, -1e6, 0, 0, 0.1).loss == doctest::Approx(0.0));
  CHECK(std::isfinite(dpo_terms(-1e6, 0, 0, 0, 0.1).loss));
  const double h = 1e-6;
  const auto t = dpo_terms(-2, -3, -2.5, -2.7, 0.5);
  CHECK(t.d_chosen ==
        doctest::Approx((dpo_terms(-2 + h, -3, -2.5, -2.7, 0.5).loss - dpo_terms(-2 - h, -3, -2.5, -2.7, 0.5).loss) /
                        (2 * h)));
  CHECK(t.d_rejected ==
        doctest::Approx((dpo_terms(-2, -3 + h, -2.5, -2.7, 0.5).loss - dpo_terms(-2, -3 - h, -2.5, -2.7, 0.5).loss) /
                        (2 * h)));
}

TEST_CASE("preference loss equals log 2 when policy and reference agree") {
  auto m = build_model<double>(tiny_config(2, 16, 2, 401));
  jitter(m, 0.05, 402);
  const auto [c, r] = preference_batches(403);
  AdapterSpec spec;
  spec.rank = 4;
  spec.target_layers = {0, 1};
  const auto policy = inject_adapter(m, spec, 404);
  CHECK(dpo_loss<double>(policy, c, r, logprobs(m, c), logprobs(m, r), 0.1, nullptr) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("preference loss gradient matches finite differences") {
  auto ref = build_model<double>(tiny_config(2, 16, 2, 411));
  jitter(ref, 0.05, 412);
  const auto [c, r] = preference_batches(413);
  const auto rc = logprobs(ref, c);
  const auto rr = logprobs(ref, r);
  AdapterSpec spec;
  spec.rank = 4;
  spec.dropout = 0.0;
  spec.target_layers = {0, 1};
  auto policy = inject_adapter(ref, spec, 414);
  std::mt19937_64 rng(415);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& p : policy.adapter_params()) p += n(rng);
  for (double beta : {0.1, 2.0}) {
    auto g = policy.make_gradients();
    dpo_loss<double>(policy, c, r, rc, rr, beta, &g);
    const double worst = worst_fd_error(
        policy.adapter_params(), g.adapter, [&] { return dpo_loss<double>(policy, c, r, rc, rr, beta, nullptr); }, 32,
        416);
    CHECK(worst < 1e-4);
    for (double x : g.base) REQUIRE(x == 0.0);
  }
}

TEST_CASE("preference optimisation configuration") {
  DpoConfig c;
  CHECK(c.beta == 0.1);
  CHECK(c.adapter.rank == 16);
  CHECK(c.adapter.scale == 16.0);
  CHECK(c.adapter_spec(4).target_layers == std::vector<int>{0, 1, 2, 3});
  c.beta = 0;
  CHECK_THROWS_AS(c.validate(4), ConfigError);
  c.beta = -1;
  CHECK_THROWS_AS(c.validate(4), ConfigError);
  c.beta = 0.3;
  c.train.learning_rate = 7e-4;
  const auto back = DpoConfig::from_json(c.to_json(), DpoConfig{});
  CHECK(back.to_json() == c.to_json());
}

TEST_CASE("preference optimisation raises the held-out margin") {
  auto pairs = make_synthetic_task("verbosity", 120, 421);
  const std::vector<PreferencePair> train(pairs.begin(), pairs.begin() + 90);
  const std::vector<PreferencePair> held(pairs.begin() + 90, pairs.end());
  const auto enc = small_encoding(pairs);
  auto mc = tiny_config(2, 32, 2, 422);
  mc.vocab_size = enc.tokenizer.vocab_size();
  mc.max_seq_len = 128;
  auto ref = build_model<float>(mc);
  jitter(ref, 0.02, 423);
  DpoConfig cfg;
  cfg.adapter.rank = 4;
  cfg.train.learning_rate = 1e-2;
  cfg.train.epochs = 3;
  cfg.train.batch_size = 16;
  cfg.train.seed = 424;
  LoopOptions o;
  o.stage = "baseline:dpo";
  const auto before = base_checksum(ref);
  const auto r = train_dpo(ref, train, enc, cfg, o);
  CHECK(base_checksum(ref) == before);
  CHECK(r.initial_loss == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK(r.final_loss < r.initial_loss);
  CHECK(preference_margin(r.model, held, enc) > preference_margin(ref, held, enc));
  const auto again = train_dpo(ref, train, enc, cfg, o);
  CHECK(base_checksum(again.model) == base_checksum(r.model));
}
