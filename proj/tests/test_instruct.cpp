#include <cmath>
#include <limits>

#include "doctest.h"
#include "rahf/errors.hpp"
#include "rahf/instruct.hpp"
#include "support.hpp"

using namespace rahf;
using namespace rahf::testing;

namespace {

// Same responses under two different prompts.
std::pair<StimulusBatch, StimulusBatch> contrast_batches(std::uint64_t seed) {
  auto rows = random_rows(3, 40, 5, 4, seed);
  auto other = rows;
  for (auto& r : other) {
    r.first.push_back(7);
    r.first[0] = (r.first[0] + 1) % 40;
  }
  return {make_batch(rows, 6, 4), make_batch(other, 6, 4)};
}

}  // namespace

TEST_CASE("contrastive loss closed form") {
  const auto t = scit_terms(-10, -10);
  CHECK(t.loss == doctest::Approx(10 + std::log(2.0)).epsilon(1e-12));
  CHECK(t.loss == doctest::Approx(10.6931).epsilon(1e-5));
  CHECK(scit_terms(-10, -10, true).loss == doctest::Approx(std::log(2.0)));
  // Large margins stay finite.
  CHECK(std::isfinite(scit_terms(-1, -5000).loss));
  CHECK(std::isfinite(scit_terms(-5000, -1).loss));
}

TEST_CASE("contrastive loss is monotone and its partials match differences") {
  for (bool only : {false, true}) {
    for (double pp : {-9.0, -5.0, -1.0}) {
      for (double pn : {-12.0, -5.0, -0.5}) {
        const auto t = scit_terms(pp, pn, only);
        CHECK(scit_terms(pp + 0.5, pn, only).loss < t.loss);
        CHECK(scit_terms(pp, pn + 0.5, only).loss > t.loss);
        const double h = 1e-6;
        CHECK(t.d_pos == doctest::Approx((scit_terms(pp + h, pn, only).loss - scit_terms(pp - h, pn, only).loss) /
                                         (2 * h)).epsilon(1e-6));
        CHECK(t.d_neg == doctest::Approx((scit_terms(pp, pn + h, only).loss - scit_terms(pp, pn - h, only).loss) /
                                         (2 * h)).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("contrastive loss gradient matches finite differences") {
  auto m = build_model<double>(tiny_config(2, 16, 2, 71));
  jitter(m, 0.05, 72);
  const auto [paired, opposite] = contrast_batches(73);
  for (bool only : {false, true}) {
    auto g = m.make_gradients();
    scit_loss(m, paired, opposite, only, &g);
    const double worst = worst_fd_error(
        m.params(), g.base, [&] { return scit_loss<double>(m, paired, opposite, only, nullptr); }, 32, 74);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("supervised loss gradient matches finite differences") {
  auto m = build_model<double>(tiny_config(2, 16, 2, 81));
  jitter(m, 0.05, 82);
  const auto b = make_batch(random_rows(3, 40, 5, 4, 83), 6, 4);
  for (const auto& scope : {response_scope(b), full_scope(b)}) {
    auto g = m.make_gradients();
    sft_loss(m, b, scope, &g);
    CHECK(worst_fd_error(m.params(), g.base, [&] { return sft_loss<double>(m, b, scope, nullptr); }, 32, 84) < 1e-4);
  }
}

TEST_CASE("learning-rate schedules") {
  TrainConfig c;
  c.learning_rate = 1.0;
  c.warmup_fraction = 0.1;
  CHECK(scheduled_lr(c, 0, 100) == doctest::Approx(1.0 / 11));
  CHECK(scheduled_lr(c, 9, 100) == doctest::Approx(10.0 / 11));
  CHECK(scheduled_lr(c, 10, 100) == doctest::Approx(1.0));
  CHECK(scheduled_lr(c, 55, 100) == doctest::Approx(0.5));
  CHECK(scheduled_lr(c, 100, 100) == doctest::Approx(0.0).epsilon(1e-12));
  c.schedule = "constant";
  c.warmup_fraction = 0;
  CHECK(scheduled_lr(c, 77, 100) == 1.0);
  c.schedule = "linear";
  CHECK(scheduled_lr(c, 25, 100) == doctest::Approx(0.75));
  c.schedule = "step";
  CHECK_THROWS_AS(c.validate("x"), ConfigError);
}

TEST_CASE("AdamW first step and global-norm clipping") {
  TrainConfig c;
  c.weight_decay = 0.1;
  AdamW opt(c, 2);
  std::vector<float> p = {1.0f, -2.0f};
  std::vector<float> g = {0.5f, -3.0f};
  opt.step(p, g, 0.01);
  // After one step the bias-corrected update is lr * sign(g) (plus decay).
  CHECK(p[0] == doctest::Approx(1.0 - 0.01 * (1.0 + 0.1 * 1.0)).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(-2.0 + 0.01 * (1.0 + 0.1 * 2.0)).epsilon(1e-6));

  std::vector<float> big = {3.0f, 4.0f};
  CHECK(clip_global_norm(big, 1.0) == doctest::Approx(5.0));
  CHECK(big[0] == doctest::Approx(0.6));
  CHECK(big[1] == doctest::Approx(0.8));
  std::vector<float> small = {0.3f, 0.4f};
  clip_global_norm(small, 1.0);
  CHECK(small[0] == doctest::Approx(0.3));
}

TEST_CASE("training aborts on non-finite or diverging loss") {
  auto m = build_model<float>(tiny_config(1, 8, 2, 91));
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 2;
  LoopOptions o;
  o.stage = "t";
  o.example_id = [](std::size_t e) { return "ex" + std::to_string(e); };
  auto nan_step = [](std::span<const std::size_t>, Gradients<float>&, std::uint64_t) {
    return std::numeric_limits<double>::quiet_NaN();
  };
  CHECK_THROWS_AS(run_training(m, 4, c, o, nan_step), TrainingError);
  int calls = 0;
  auto blowup = [&](std::span<const std::size_t>, Gradients<float>&, std::uint64_t) {
    return ++calls == 1 ? 1.0 : 50.0;
  };
  CHECK_THROWS_AS(run_training(m, 4, c, o, blowup), TrainingError);
  calls = 0;
  auto fine = [&](std::span<const std::size_t> b, Gradients<float>&, std::uint64_t) {
    ++calls;
    return static_cast<double>(b.size());
  };
  const auto curve = run_training(m, 5, c, o, fine);
  CHECK(calls == 9);  // 3 batches per epoch, the last one partial
  CHECK(curve.epoch_means.size() == 3);
}

TEST_CASE("contrastive fine-tuning lowers the mean loss on its split") {
  const auto pairs = make_synthetic_task("verbosity", 200, 101);
  const auto enc = small_encoding(pairs);
  auto mc = tiny_config(2, 32, 2, 102);
  mc.vocab_size = enc.tokenizer.vocab_size();
  mc.max_seq_len = 128;
  const auto base = build_model<float>(mc);
  ScitConfig cfg;
  cfg.train.learning_rate = 3e-3;
  cfg.train.epochs = 2;
  cfg.train.batch_size = 16;
  cfg.train.seed = 103;
  LoopOptions o;
  o.stage = "scit";
  o.split = "instruct";
  const auto r = train_scit(base, pairs, enc, cfg, o);
  CHECK(r.final_loss < r.initial_loss);
  CHECK(r.curve.epoch_means.size() == 2);
  CHECK(r.curve.steps == 2 * 25);
  // The base model is left untouched.
  CHECK(base_checksum(base) != base_checksum(r.model));

  const auto again = train_scit(base, pairs, enc, cfg, o);
  CHECK(base_checksum(again.model) == base_checksum(r.model));
}

TEST_CASE("dual fine-tuning produces two different models") {
  const auto pairs = make_synthetic_task("format", 60, 111);
  const auto enc = small_encoding(pairs);
  auto mc = tiny_config(1, 16, 2, 112);
  mc.vocab_size = enc.tokenizer.vocab_size();
  mc.max_seq_len = 128;
  const auto base = build_model<float>(mc);
  TrainConfig c;
  c.learning_rate = 3e-3;
  c.epochs = 1;
  c.batch_size = 8;
  LoopOptions o;
  o.stage = "dual";
  const auto d = train_dual(base, pairs, enc, c, o);
  CHECK(d.preferred.final_loss < d.preferred.initial_loss);
  CHECK(d.dispreferred.final_loss < d.dispreferred.initial_loss);
  CHECK(base_checksum(d.preferred.model) != base_checksum(d.dispreferred.model));
  const auto p = train_preferred_sft(base, pairs, enc, c, o);
  CHECK(base_checksum(p.model) == base_checksum(d.preferred.model));
}
