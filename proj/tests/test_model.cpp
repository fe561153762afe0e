#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "rahf/errors.hpp"
#include "rahf/model.hpp"
#include "support.hpp"

using namespace rahf;
using namespace rahf::testing;

namespace {

// Hook-free forward pass for one sequence, written directly from the
// architecture description with plain loops and no shared helpers.
struct Reference {
  std::vector<std::vector<double>> hidden;  // per layer, [len * d]
  std::vector<double> logits;               // [len * V]
};

template <class T>
Reference reference_forward(const Model<T>& m, const std::vector<int>& toks) {
  const auto& c = m.config();
  const auto& L = m.layout();
  const auto p = m.params();
  const int n = static_cast<int>(toks.size());
  const int d = c.d_model;
  const int f = c.d_ff;
  const int H = c.n_heads;
  const int hd = d / H;
  const int V = c.vocab_size;
  auto P = [&](std::size_t off) { return static_cast<double>(p[off]); };
  std::vector<double> x(n * d);
  for (int t = 0; t < n; ++t) {
    for (int j = 0; j < d; ++j) {
      x[t * d + j] = P(L.tok_emb + toks[t] * d + j) + P(L.pos_emb + t * d + j);
    }
  }
  auto layernorm = [&](const std::vector<double>& in, std::size_t g, std::size_t b) {
    std::vector<double> out(in.size());
    for (int t = 0; t < n; ++t) {
      double mean = 0;
      for (int j = 0; j < d; ++j) mean += in[t * d + j];
      mean /= d;
      double var = 0;
      for (int j = 0; j < d; ++j) var += (in[t * d + j] - mean) * (in[t * d + j] - mean);
      var /= d;
      for (int j = 0; j < d; ++j) {
        out[t * d + j] = (in[t * d + j] - mean) / std::sqrt(var + 1e-5) * P(g + j) + P(b + j);
      }
    }
    return out;
  };
  Reference ref;
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& B = L.blocks[l];
    const auto h = layernorm(x, B.ln1_g, B.ln1_b);
    std::vector<double> qkv(n * 3 * d);
    for (int t = 0; t < n; ++t) {
      for (int o = 0; o < 3 * d; ++o) {
        double s = P(B.b_qkv + o);
        for (int i = 0; i < d; ++i) s += h[t * d + i] * P(B.w_qkv + i * 3 * d + o);
        qkv[t * 3 * d + o] = s;
      }
    }
    std::vector<double> att(n * d, 0.0);
    for (int hh = 0; hh < H; ++hh) {
      for (int t = 0; t < n; ++t) {
        std::vector<double> w(t + 1);
        double mx = -1e300;
        for (int u = 0; u <= t; ++u) {
          double s = 0;
          for (int i = 0; i < hd; ++i) s += qkv[t * 3 * d + hh * hd + i] * qkv[u * 3 * d + d + hh * hd + i];
          w[u] = s / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, w[u]);
        }
        double z = 0;
        for (auto& v : w) z += (v = std::exp(v - mx));
        for (int u = 0; u <= t; ++u) {
          for (int i = 0; i < hd; ++i) att[t * d + hh * hd + i] += w[u] / z * qkv[u * 3 * d + 2 * d + hh * hd + i];
        }
      }
    }
    for (int t = 0; t < n; ++t) {
      for (int o = 0; o < d; ++o) {
        double s = P(B.b_o + o);
        for (int i = 0; i < d; ++i) s += att[t * d + i] * P(B.w_o + i * d + o);
        x[t * d + o] += s;
      }
    }
    const auto h2 = layernorm(x, B.ln2_g, B.ln2_b);
    for (int t = 0; t < n; ++t) {
      std::vector<double> a(f);
      for (int o = 0; o < f; ++o) {
        double s = P(B.b_fc + o);
        for (int i = 0; i < d; ++i) s += h2[t * d + i] * P(B.w_fc + i * f + o);
        a[o] = 0.5 * s * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (s + 0.044715 * s * s * s)));
      }
      for (int o = 0; o < d; ++o) {
        double s = P(B.b_proj + o);
        for (int i = 0; i < f; ++i) s += a[i] * P(B.w_proj + i * d + o);
        x[t * d + o] += s;
      }
    }
    ref.hidden.push_back(x);
  }
  const auto hf = layernorm(x, L.lnf_g, L.lnf_b);
  ref.logits.assign(n * V, 0.0);
  for (int t = 0; t < n; ++t) {
    for (int v = 0; v < V; ++v) {
      double s = 0;
      for (int i = 0; i < d; ++i) s += hf[t * d + i] * P(L.head + i * V + v);
      ref.logits[t * V + v] = s;
    }
  }
  return ref;
}

double log_softmax_at(const double* z, int V, int target) {
  double mx = z[0];
  for (int j = 1; j < V; ++j) mx = std::max(mx, z[j]);
  double s = 0;
  for (int j = 0; j < V; ++j) s += std::exp(z[j] - mx);
  return z[target] - mx - std::log(s);
}

AdapterSpec spec_for(std::vector<int> layers, double dropout = 0.0, int rank = 2) {
  AdapterSpec s;
  s.rank = rank;
  s.scale = 4.0;
  s.dropout = dropout;
  s.target_layers = std::move(layers);
  return s;
}

}  // namespace

TEST_CASE("build_model is deterministic in the seed") {
  const auto c = tiny_config(2, 16, 2, 7);
  CHECK(base_checksum(build_model<float>(c)) == base_checksum(build_model<float>(c)));
  auto c2 = c;
  c2.seed = 8;
  CHECK(base_checksum(build_model<float>(c)) != base_checksum(build_model<float>(c2)));
}

TEST_CASE("invalid configs name the violated invariant") {
  auto c = tiny_config(2, 16, 3);
  CHECK_THROWS_WITH_AS(build_model<float>(c), doctest::Contains("divisible"), ConfigError);
  c = tiny_config(0, 16, 2);
  CHECK_THROWS_AS(build_model<float>(c), ConfigError);
}

TEST_CASE("an 8-layer model exposes 8 traceable layers") {
  ModelConfig c;
  c.vocab_size = 64;
  c.max_seq_len = 16;
  const auto m = build_model<float>(c);
  CHECK(m.layout().blocks.size() == 8);
  const auto b = make_batch({{{1, 2, 3}, {4, 5}}}, 4, 4);
  std::vector<int> all = {0, 1, 2, 3, 4, 5, 6, 7};
  const auto r = forward_with_trace(m, b, all);
  CHECK(r.trace.layers.size() == 8);
  CHECK(r.trace.positions == 8);
  CHECK_THROWS_AS(forward_with_trace(m, b, std::vector<int>{8}), ShapeError);
  CHECK_THROWS_AS(forward_with_trace(m, b, std::vector<int>{3, 2}), ShapeError);
}

TEST_CASE("trace and logits match an independent straight-line forward pass") {
  auto c = tiny_config(2, 8, 2, 3);
  auto m = build_model<double>(c);
  jitter(m, 0.05, 4);
  const std::vector<int> seq = {5, 17, 2};
  // The three tokens split as prompt {5} + response {17, 2}, padded on both sides.
  const auto b = make_batch({{{5}, {17, 2}}}, 3, 4);
  std::vector<int> layers = {0, 1};
  const auto r = forward_with_trace(m, b, layers);
  const auto ref = reference_forward(m, seq);
  const int d = c.d_model;
  const int V = c.vocab_size;
  for (int l = 0; l < 2; ++l) {
    for (int t = 0; t < 3; ++t) {
      const auto got = r.trace.at(static_cast<std::size_t>(l), 0, 2 + t);
      for (int j = 0; j < d; ++j) {
        CHECK(got[j] == doctest::Approx(ref.hidden[l][t * d + j]).epsilon(1e-12));
      }
    }
  }
  for (int t = 0; t < 3; ++t) {
    for (int v = 0; v < V; ++v) {
      CHECK(r.logits[(2 + t) * V + v] == doctest::Approx(ref.logits[t * V + v]).epsilon(1e-12));
    }
  }
  // Padding cells of the trace stay zero.
  for (int j = 0; j < d; ++j) {
    CHECK(r.trace.at(0, 0, 0)[j] == 0.0);
    CHECK(r.trace.at(1, 0, 6)[j] == 0.0);
  }
}

TEST_CASE("an empty layer list gives an empty trace and the same logits") {
  auto m = build_model<float>(tiny_config(2, 16, 2));
  const auto b = make_batch(random_rows(3, 40, 5, 5, 9), 6, 6);
  const auto r0 = forward_with_trace(m, b, std::vector<int>{});
  const auto r1 = forward_with_trace(m, b, std::vector<int>{0, 1});
  CHECK(r0.trace.layers.empty());
  CHECK(r0.trace.values.empty());
  CHECK(r0.logits == r1.logits);
}

TEST_CASE("sequence_logprob equals the token-by-token chain rule") {
  auto c = tiny_config(2, 16, 2, 5);
  auto m = build_model<double>(c);
  jitter(m, 0.05, 6);
  const std::vector<int> prompt = {1, 9, 4};
  const std::vector<int> response = {7, 7, 30, 2};
  const auto b = make_batch({{prompt, response}}, 5, 6);
  const double lp = sequence_logprob(m, b, response_scope(b))[0];
  double chain = 0;
  std::vector<int> prefix = prompt;
  for (int tok : response) {
    // One forward pass per token over the prefix alone.
    const auto pb = make_batch({{{prefix.begin(), prefix.end() - 1}, {prefix.back()}}}, 8, 1);
    const auto r = forward_with_trace(m, pb, std::vector<int>{});
    const int V = c.vocab_size;
    chain += log_softmax_at(r.logits.data() + static_cast<std::size_t>(8) * V, V, tok);
    prefix.push_back(tok);
  }
  CHECK(lp == doctest::Approx(chain).epsilon(1e-9));
  CHECK(std::abs(lp - chain) < 1e-6);
}

TEST_CASE("a uniform output distribution scores -log V per token") {
  auto c = tiny_config(2, 16, 2);
  auto m = build_model<double>(c);
  auto p = m.params();
  std::fill(p.begin() + static_cast<std::ptrdiff_t>(m.layout().head), p.end(), 0.0);
  const auto b = make_batch({{{3, 4}, {5}}}, 3, 2);
  CHECK(sequence_logprob(m, b, response_scope(b))[0] == doctest::Approx(-std::log(40.0)).epsilon(1e-12));
}

TEST_CASE("scoring zero positions is an error") {
  auto m = build_model<float>(tiny_config(2, 16, 2));
  const auto b = make_batch({{{3, 4}, {5}}}, 3, 2);
  std::vector<std::uint8_t> none(b.tokens.size(), 0);
  CHECK_THROWS_AS(sequence_logprob(m, b, none), DataError);
}

TEST_CASE("traces and logprobs do not depend on batch size or padding") {
  auto m = build_model<float>(tiny_config(2, 16, 2, 11));
  jitter(m, 0.02, 12);
  const auto rows = random_rows(8, 40, 10, 10, 13);
  const auto b8 = make_batch(rows, 10, 10);
  const std::vector<int> layers = {0, 1};
  const auto full = forward_with_trace(m, b8, layers);
  const auto lp8 = sequence_logprob(m, b8, response_scope(b8));
  const auto wide = widen(b8, 10, 10);
  const auto lpw = sequence_logprob(m, wide, response_scope(wide));
  const auto fw = forward_with_trace(m, wide, layers);
  for (int e = 0; e < 8; ++e) {
    const int row = e;
    const auto one = make_batch({rows[e]}, 10, 10);
    const auto r1 = forward_with_trace(m, one, layers);
    const auto lp1 = sequence_logprob(m, one, response_scope(one));
    CHECK(lp1[0] == lp8[e]);
    CHECK(lpw[e] == lp8[e]);
    for (int l = 0; l < 2; ++l) {
      for (int t = 0; t < 20; ++t) {
        const auto a = r1.trace.at(l, 0, t);
        const auto bb = full.trace.at(l, row, t);
        const auto w = fw.trace.at(l, row, t + 10);
        for (int j = 0; j < 16; ++j) {
          REQUIRE(a[j] == bb[j]);
          REQUIRE(w[j] == bb[j]);
        }
      }
    }
  }
}

TEST_CASE("causality: changing token t leaves logits before t unchanged") {
  auto m = build_model<double>(tiny_config(2, 16, 2, 21));
  jitter(m, 0.05, 22);
  std::vector<int> toks = {1, 2, 3, 4, 5, 6, 7};
  const auto b0 = make_batch({{{toks.begin(), toks.begin() + 3}, {toks.begin() + 3, toks.end()}}}, 3, 4);
  const auto r0 = forward_with_trace(m, b0, std::vector<int>{});
  const int V = 40;
  for (int t = 0; t < 7; ++t) {
    auto changed = toks;
    changed[t] = (changed[t] + 11) % V;
    const auto b1 = make_batch({{{changed.begin(), changed.begin() + 3}, {changed.begin() + 3, changed.end()}}}, 3, 4);
    const auto r1 = forward_with_trace(m, b1, std::vector<int>{});
    for (int s = 0; s < 7; ++s) {
      bool same = true;
      for (int v = 0; v < V; ++v) {
        same = same && r0.logits[s * V + v] == r1.logits[s * V + v];
      }
      CHECK(same == (s < t));
    }
  }
}

TEST_CASE("sequences longer than max_seq_len are rejected") {
  auto c = tiny_config(2, 16, 2);
  c.max_seq_len = 6;
  auto m = build_model<float>(c);
  const auto ok = make_batch({{{1, 2, 3}, {4, 5, 6}}}, 10, 10);
  CHECK_NOTHROW(sequence_logprob(m, ok, response_scope(ok)));
  const auto bad = make_batch({{{1, 2, 3}, {4, 5, 6, 7}}}, 10, 10);
  CHECK_THROWS_AS(sequence_logprob(m, bad, response_scope(bad)), ShapeError);
}

TEST_CASE("a zero-initialised adapter leaves logits and traces unchanged") {
  auto m = build_model<float>(tiny_config(4, 16, 2, 31));
  jitter(m, 0.02, 32);
  const auto b = make_batch(random_rows(5, 40, 6, 6, 33), 6, 6);
  const std::vector<int> layers = {0, 1, 2, 3};
  const auto base = forward_with_trace(m, b, layers);
  const auto adapted = inject_adapter(m, spec_for({1, 2}, 0.0, 8), 34);
  const auto r = forward_with_trace(adapted, b, layers);
  CHECK(r.logits == base.logits);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    CHECK(r.trace.values[i] == base.trace.values[i]);
  }
  CHECK(adapted.base_frozen());
  CHECK(base_checksum(adapted) == base_checksum(m));
}

TEST_CASE("adapter parameter count is rank * (d_in + d_out) * targets") {
  ModelConfig c;
  c.vocab_size = 64;
  const auto m = build_model<float>(c);
  AdapterSpec s;
  s.rank = 8;
  s.scale = 16;
  s.dropout = 0.05;
  s.target_layers = {2, 3, 4, 5};
  const auto a = inject_adapter(m, s, 1);
  // Two adapted projections (query, value) per layer, each d_model -> d_model.
  const std::size_t targets = 2 * s.target_layers.size();
  CHECK(a.trainable_parameter_count() == static_cast<std::size_t>(s.rank) * (128 + 128) * targets);
}

TEST_CASE("adapter target layers outside the model are rejected") {
  const auto m = build_model<float>(tiny_config(8, 16, 2));
  CHECK_THROWS_AS(inject_adapter(m, spec_for({10, 12, 14, 16, 18}), 1), ConfigError);
  CHECK_THROWS_AS(inject_adapter(m, spec_for({2, 2}), 1), ConfigError);
  auto s = spec_for({1});
  s.rank = 0;
  CHECK_THROWS_AS(inject_adapter(m, s, 1), ConfigError);
  s = spec_for({1}, 1.0);
  CHECK_THROWS_AS(inject_adapter(m, s, 1), ConfigError);
}

namespace {

// Loss = sum_b w_b * logprob_b + sum over traced cells of c * trace, with
// fixed random weights, so both gradient entry points are exercised.
struct Probe {
  std::vector<double> w;
  std::vector<std::vector<double>> c;
};

double probe_loss(const Model<double>& m, const StimulusBatch& b, const std::vector<int>& layers, const Probe& pr,
                  Gradients<double>* g) {
  PassOptions opt;
  opt.trace_layers = layers;
  opt.logits = LogitMode::scored;
  opt.scope = response_scope(b);
  opt.record = g != nullptr;
  Pass<double> pass(m, b, opt);
  double loss = 0;
  for (std::size_t i = 0; i < pr.w.size(); ++i) loss += pr.w[i] * pass.logprobs()[i];
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (std::size_t i = 0; i < pr.c[l].size(); ++i) loss += pr.c[l][i] * pass.trace().values[l][i];
  }
  if (g) {
    pass.backward(pr.w, pr.c, *g);
  }
  return loss;
}

Probe make_probe(const StimulusBatch& b, std::size_t n_layers, int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Probe p;
  for (int i = 0; i < b.batch; ++i) p.w.push_back(n(rng));
  for (std::size_t l = 0; l < n_layers; ++l) {
    std::vector<double> c(static_cast<std::size_t>(b.batch) * b.seq_len() * d);
    for (auto& v : c) v = 0.1 * n(rng);
    p.c.push_back(std::move(c));
  }
  return p;
}

}  // namespace

TEST_CASE("base gradients match central finite differences") {
  auto m = build_model<double>(tiny_config(2, 16, 2, 41));
  jitter(m, 0.05, 42);
  const auto b = make_batch(random_rows(3, 40, 4, 4, 43), 4, 4);
  const std::vector<int> layers = {0};
  const auto probe = make_probe(b, layers.size(), 16, 44);
  auto g = m.make_gradients();
  probe_loss(m, b, layers, probe, &g);
  std::mt19937_64 rng(45);
  const double h = 1e-4;
  int nonzero = 0;
  for (int i = 0; i < 32; ++i) {
    // Sample among coordinates the batch touches (unused embedding rows have
    // exactly zero gradient and would make the check vacuous).
    std::size_t at = 0;
    do {
      at = rng() % m.params().size();
    } while (g.base[at] == 0.0);
    const double keep = m.params()[at];
    m.params()[at] = keep + h;
    const double up = probe_loss(m, b, layers, probe, nullptr);
    m.params()[at] = keep - h;
    const double down = probe_loss(m, b, layers, probe, nullptr);
    m.params()[at] = keep;
    const double fd = (up - down) / (2 * h);
    CAPTURE(at);
    CHECK(rel_err(g.base[at], fd) < 1e-4);
    nonzero += g.base[at] != 0.0;
  }
  CHECK(nonzero == 32);
}

TEST_CASE("adapter gradients match central finite differences") {
  auto base = build_model<double>(tiny_config(4, 16, 2, 51));
  jitter(base, 0.05, 52);
  auto m = inject_adapter(base, spec_for({1, 2}, 0.0, 3), 53);
  // Move the down factors off zero so every adapter path carries gradient.
  std::mt19937_64 rng(54);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& v : m.adapter_params()) v += n(rng);
  const auto b = make_batch(random_rows(3, 40, 4, 4, 55), 4, 4);
  for (const std::vector<int>& layers : {std::vector<int>{}, std::vector<int>{1, 2}}) {
    const auto probe = make_probe(b, layers.size(), 16, 56);
    auto g = m.make_gradients();
    CHECK(g.base.empty());
    probe_loss(m, b, layers, probe, &g);
    const double h = 1e-4;
    for (int i = 0; i < 32; ++i) {
      const std::size_t at = rng() % m.adapter_params().size();
      const double keep = m.adapter_params()[at];
      m.adapter_params()[at] = keep + h;
      const double up = probe_loss(m, b, layers, probe, nullptr);
      m.adapter_params()[at] = keep - h;
      const double down = probe_loss(m, b, layers, probe, nullptr);
      m.adapter_params()[at] = keep;
      CAPTURE(at);
      CHECK(rel_err(g.adapter[at], (up - down) / (2 * h)) < 1e-4);
    }
  }
}

TEST_CASE("dropout masks are reproducible from the seed and rescale kept inputs") {
  auto base = build_model<double>(tiny_config(2, 16, 2, 61));
  auto m = inject_adapter(base, spec_for({0, 1}, 0.5, 2), 62);
  for (auto& v : m.adapter_params()) v += 0.05;
  const auto b = make_batch(random_rows(2, 40, 4, 4, 63), 4, 4);
  auto run = [&](bool train, std::uint64_t seed) {
    PassOptions o;
    o.logits = LogitMode::scored;
    o.scope = response_scope(b);
    o.train = train;
    o.dropout_seed = seed;
    Pass<double> p(m, b, o);
    return std::vector<double>(p.logprobs().begin(), p.logprobs().end());
  };
  CHECK(run(true, 1) == run(true, 1));
  CHECK(run(true, 1) != run(true, 2));
  CHECK(run(false, 1) == run(false, 2));
}

TEST_CASE("frozen-base backward stops below the lowest adapter and still matches") {
  auto base = build_model<double>(tiny_config(4, 16, 2, 71));
  jitter(base, 0.05, 72);
  auto m = inject_adapter(base, spec_for({2}, 0.0, 2), 73);
  for (auto& v : m.adapter_params()) v += 0.05;
  const auto b = make_batch(random_rows(2, 40, 4, 4, 74), 4, 4);
  // Trace-only loss with last_layer = 2: blocks 3 never run.
  const std::vector<int> layers = {2};
  const auto probe = make_probe(b, 1, 16, 75);
  auto loss = [&](Gradients<double>* g) {
    PassOptions o;
    o.trace_layers = layers;
    o.last_layer = 2;
    o.record = g != nullptr;
    Pass<double> p(m, b, o);
    double s = 0;
    for (std::size_t i = 0; i < probe.c[0].size(); ++i) s += probe.c[0][i] * p.trace().values[0][i];
    if (g) p.backward({}, probe.c, *g);
    return s;
  };
  auto g = m.make_gradients();
  loss(&g);
  for (std::size_t at = 0; at < m.adapter_params().size(); at += 7) {
    const double keep = m.adapter_params()[at];
    m.adapter_params()[at] = keep + 1e-4;
    const double up = loss(nullptr);
    m.adapter_params()[at] = keep - 1e-4;
    const double down = loss(nullptr);
    m.adapter_params()[at] = keep;
    CHECK(rel_err(g.adapter[at], (up - down) / 2e-4) < 1e-4);
  }
}

TEST_CASE("incremental decoder matches the full forward pass") {
  auto base = build_model<float>(tiny_config(2, 16, 2, 81));
  jitter(base, 0.02, 82);
  auto m = inject_adapter(base, spec_for({1}, 0.0, 2), 83);
  for (auto& v : m.adapter_params()) v += 0.05f;
  const std::vector<int> a = {3, 8, 1, 22, 9};
  const std::vector<int> c = {4, 4};
  Decoder<float> dec(m, 2);
  // Feed a's first three tokens and all of c together, then the rest of a.
  auto l1 = dec.feed(std::vector<int>{0, 1}, {{3, 8, 1}, {4, 4}});
  auto l2 = dec.feed(std::vector<int>{0}, {{22, 9}});
  CHECK(dec.length(0) == 5);
  CHECK(dec.length(1) == 2);
  const auto ra = forward_with_trace(m, make_batch({{{3, 8, 1, 22}, {9}}}, 4, 1), std::vector<int>{});
  const auto rc = forward_with_trace(m, make_batch({{{4}, {4}}}, 1, 1), std::vector<int>{});
  const int V = 40;
  for (int v = 0; v < V; ++v) {
    CHECK(l2[v] == doctest::Approx(ra.logits[4 * V + v]).epsilon(1e-4));
    CHECK(l1[V + v] == doctest::Approx(rc.logits[1 * V + v]).epsilon(1e-4));
  }
}

TEST_CASE("checkpoints round-trip with and without a base reference") {
  const auto dir = std::filesystem::temp_directory_path() / "rahf_ckpt_test";
  std::filesystem::remove_all(dir);
  auto base = build_model<float>(tiny_config(2, 16, 2, 91));
  save_checkpoint(dir / "base", base, {"base", {{"note", 1}}, std::nullopt});
  const auto loaded = load_checkpoint(dir / "base");
  CHECK(base_checksum(loaded) == base_checksum(base));
  CHECK(load_checkpoint_meta(dir / "base").at("stage") == "base");

  auto adapted = inject_adapter(base, spec_for({0, 1}, 0.05, 4), 92);
  for (auto& v : adapted.adapter_params()) v += 0.5f;
  save_checkpoint(dir / "aligned", adapted, {"align", json::object(), std::filesystem::path("base")});
  CHECK_FALSE(std::filesystem::exists(dir / "aligned.params"));
  const auto la = load_checkpoint(dir / "aligned");
  CHECK(adapter_checksum(la) == adapter_checksum(adapted));
  CHECK(base_checksum(la) == base_checksum(base));
  CHECK(la.adapter_spec().target_layers == std::vector<int>{0, 1});
  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), DataError);
  std::filesystem::remove_all(dir);
}
