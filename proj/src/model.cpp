#include "rahf/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include "rahf/errors.hpp"
#include "rahf/kernels.hpp"

namespace rahf {

namespace k = kernels;

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
  if (n_layers < 1) {
    throw ConfigError("model.n_layers: must be >= 1");
  }
  if (d_model < 1 || n_heads < 1) {
    throw ConfigError("model.d_model/n_heads: must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model.d_model: must be divisible by model.n_heads");
  }
  if (d_ff < 1) {
    throw ConfigError("model.d_ff: must be positive");
  }
  if (vocab_size < 2) {
    throw ConfigError("model.vocab_size: must be >= 2");
  }
  if (max_seq_len < 2) {
    throw ConfigError("model.max_seq_len: must be >= 2");
  }
}

json ModelConfig::to_json() const {
  return {{"n_layers", n_layers},
          {"d_model", d_model},
          {"n_heads", n_heads},
          {"d_ff", d_ff},
          {"vocab_size", vocab_size},
          {"max_seq_len", max_seq_len},
          {"positional", positional == PositionalScheme::learned ? "learned" : "sinusoidal"},
          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  const auto pos = j.value("positional", std::string("learned"));
  if (pos != "learned" && pos != "sinusoidal") {
    throw ConfigError("model.positional: unknown scheme '" + pos + "'");
  }
  c.positional = pos == "learned" ? PositionalScheme::learned : PositionalScheme::sinusoidal;
  c.seed = j.value("seed", std::uint64_t{0});
  return c;
}

void AdapterSpec::validate(int n_layers) const {
  if (rank < 1) {
    throw ConfigError("adapter.rank: must be >= 1");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw ConfigError("adapter.dropout: must be in [0, 1)");
  }
  if (!(scale > 0.0)) {
    throw ConfigError("adapter.scale: must be positive");
  }
  if (target_layers.empty()) {
    throw ConfigError("adapter.target_layers: must be nonempty");
  }
  for (std::size_t i = 0; i < target_layers.size(); ++i) {
    const int l = target_layers[i];
    if (l < 0 || l >= n_layers) {
      throw ConfigError("adapter.target_layers: layer " + std::to_string(l) + " outside [0, " +
                        std::to_string(n_layers) + ")");
    }
    if (i > 0 && l <= target_layers[i - 1]) {
      throw ConfigError("adapter.target_layers: must be strictly increasing");
    }
  }
}

json AdapterSpec::to_json() const {
  return {{"rank", rank},
          {"scale", scale},
          {"dropout", dropout},
          {"target_layers", target_layers},
          {"target", "q_v"}};
}

AdapterSpec AdapterSpec::from_json(const json& j) {
  AdapterSpec s;
  s.rank = j.at("rank").get<int>();
  s.scale = j.at("scale").get<double>();
  s.dropout = j.at("dropout").get<double>();
  s.target_layers = j.at("target_layers").get<std::vector<int>>();
  if (j.value("target", std::string("q_v")) != "q_v") {
    throw ConfigError("adapter.target: only 'q_v' is supported");
  }
  return s;
}

ParamLayout::ParamLayout(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto f = static_cast<std::size_t>(c.d_ff);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  std::size_t off = 0;
  auto take = [&off](std::size_t n) {
    const auto o = off;
    off += n;
    return o;
  };
  tok_emb = take(v * d);
  if (c.positional == PositionalScheme::learned) {
    pos_emb = take(static_cast<std::size_t>(c.max_seq_len) * d);
  }
  blocks.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& b : blocks) {
    b.ln1_g = take(d);
    b.ln1_b = take(d);
    b.w_qkv = take(d * 3 * d);
    b.b_qkv = take(3 * d);
    b.w_o = take(d * d);
    b.b_o = take(d);
    b.ln2_g = take(d);
    b.ln2_b = take(d);
    b.w_fc = take(d * f);
    b.b_fc = take(f);
    b.w_proj = take(f * d);
    b.b_proj = take(d);
  }
  lnf_g = take(d);
  lnf_b = take(d);
  head = take(d * v);
  total = off;
}

AdapterLayout::AdapterLayout(const ModelConfig& c, const AdapterSpec& spec) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto r = static_cast<std::size_t>(spec.rank);
  std::size_t off = 0;
  for (int layer : spec.target_layers) {
    Slot s{};
    s.layer = layer;
    s.q_down = off;
    off += d * r;
    s.q_up = off;
    off += r * d;
    s.v_down = off;
    off += d * r;
    s.v_up = off;
    off += r * d;
    slots.push_back(s);
  }
  total = off;
}

const AdapterLayout::Slot* AdapterLayout::find(int layer) const {
  for (const auto& s : slots) {
    if (s.layer == layer) {
      return &s;
    }
  }
  return nullptr;
}

template <class T>
std::size_t HiddenTrace<T>::slot(int layer) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] == layer) {
      return i;
    }
  }
  throw ShapeError("trace does not contain layer " + std::to_string(layer));
}

template <class T>
void Gradients<T>::zero() {
  std::fill(base.begin(), base.end(), T{0});
  std::fill(adapter.begin(), adapter.end(), T{0});
}

// ---------------------------------------------------------------------------
// Model

template <class T>
Model<T>::Model(const ModelConfig& config) : config_(config), layout_(config) {
  config_.validate();
  params_.assign(layout_.total, T{0});
  std::mt19937_64 rng(config_.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double std_base = 0.02;
  const double std_resid = 0.02 / std::sqrt(2.0 * config_.n_layers);
  auto fill_normal = [&](std::size_t off, std::size_t n, double stddev) {
    for (std::size_t i = 0; i < n; ++i) {
      params_[off + i] = static_cast<T>(normal(rng) * stddev);
    }
  };
  auto fill_const = [&](std::size_t off, std::size_t n, T value) {
    std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(off), n, value);
  };
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto f = static_cast<std::size_t>(config_.d_ff);
  const auto v = static_cast<std::size_t>(config_.vocab_size);
  fill_normal(layout_.tok_emb, v * d, std_base);
  if (layout_.pos_emb != ParamLayout::npos) {
    fill_normal(layout_.pos_emb, static_cast<std::size_t>(config_.max_seq_len) * d, std_base);
  }
  for (const auto& b : layout_.blocks) {
    fill_const(b.ln1_g, d, T{1});
    fill_normal(b.w_qkv, d * 3 * d, std_base);
    fill_normal(b.w_o, d * d, std_resid);
    fill_const(b.ln2_g, d, T{1});
    fill_normal(b.w_fc, d * f, std_base);
    fill_normal(b.w_proj, f * d, std_resid);
  }
  fill_const(layout_.lnf_g, d, T{1});
  fill_normal(layout_.head, d * v, std_base);
}

template <class T>
const AdapterSpec& Model<T>::adapter_spec() const {
  if (!adapter_) {
    throw ShapeError("model has no adapter");
  }
  return *adapter_;
}

template <class T>
std::size_t Model<T>::trainable_parameter_count() const {
  return (base_frozen_ ? 0 : params_.size()) + adapter_params_.size();
}

template <class T>
Gradients<T> Model<T>::make_gradients() const {
  Gradients<T> g;
  if (!base_frozen_) {
    g.base.assign(params_.size(), T{0});
  }
  g.adapter.assign(adapter_params_.size(), T{0});
  return g;
}

template <class T>
void Model<T>::attach_adapter(const AdapterSpec& spec, std::vector<T> values) {
  spec.validate(config_.n_layers);
  AdapterLayout layout(config_, spec);
  if (values.size() != layout.total) {
    throw ShapeError("adapter parameter count mismatch");
  }
  adapter_ = spec;
  adapter_layout_ = std::move(layout);
  adapter_params_ = std::move(values);
}

template <class T>
void Model<T>::detach_adapter() {
  adapter_.reset();
  adapter_layout_ = AdapterLayout{};
  adapter_params_.clear();
}

template <class T>
template <class U>
Model<U> Model<T>::cast() const {
  Model<U> out;
  out.config_ = config_;
  out.layout_ = layout_;
  out.params_.assign(params_.begin(), params_.end());
  out.adapter_ = adapter_;
  out.adapter_layout_ = adapter_layout_;
  out.adapter_params_.assign(adapter_params_.begin(), adapter_params_.end());
  out.base_frozen_ = base_frozen_;
  return out;
}

template <class T>
Model<T> inject_adapter(const Model<T>& model, const AdapterSpec& spec, std::uint64_t seed) {
  spec.validate(model.config().n_layers);
  Model<T> out = model;
  AdapterLayout layout(model.config(), spec);
  std::vector<T> values(layout.total, T{0});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  const double bound = 1.0 / std::sqrt(static_cast<double>(spec.rank));
  const auto n = static_cast<std::size_t>(spec.rank) * model.config().d_model;
  for (const auto& s : layout.slots) {
    for (std::size_t i = 0; i < n; ++i) {
      values[s.q_up + i] = static_cast<T>(uni(rng) * bound);
    }
    for (std::size_t i = 0; i < n; ++i) {
      values[s.v_up + i] = static_cast<T>(uni(rng) * bound);
    }
  }
  out.attach_adapter(spec, std::move(values));
  out.set_base_frozen(true);
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

template <class T>
void add_positional(const Model<T>& model, std::span<const int> positions, std::vector<T>& x) {
  const auto& c = model.config();
  const int d = c.d_model;
  const auto& L = model.layout();
  for (std::size_t r = 0; r < positions.size(); ++r) {
    const int p = positions[r];
    T* xr = x.data() + r * d;
    if (c.positional == PositionalScheme::learned) {
      const T* pe = model.params().data() + L.pos_emb + static_cast<std::size_t>(p) * d;
      for (int j = 0; j < d; ++j) {
        xr[j] += pe[j];
      }
    } else {
      for (int j = 0; j < d; j += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(j) / d);
        xr[j] += static_cast<T>(std::sin(p * freq));
        if (j + 1 < d) {
          xr[j + 1] += static_cast<T>(std::cos(p * freq));
        }
      }
    }
  }
}

template <class T>
void embed(const Model<T>& model, std::span<const int> tokens, std::span<const int> positions, std::vector<T>& x) {
  const int d = model.config().d_model;
  x.assign(tokens.size() * d, T{0});
  const T* emb = model.params().data() + model.layout().tok_emb;
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    std::copy_n(emb + static_cast<std::size_t>(tokens[r]) * d, d, x.data() + r * d);
  }
  add_positional(model, positions, x);
}

template <class T>
MatrixView<const T> weight(const Model<T>& model, std::size_t off, int rows, int cols) {
  return {model.params().data() + off, rows, cols, cols};
}

template <class T>
MatrixView<T> grad_view(std::vector<T>& g, std::size_t off, int rows, int cols) {
  return {g.data() + off, rows, cols, cols};
}

template <class T>
std::span<const T> vec(const Model<T>& model, std::size_t off, int n) {
  return {model.params().data() + off, static_cast<std::size_t>(n)};
}

template <class T>
std::span<T> gvec(std::vector<T>& g, std::size_t off, int n) {
  return {g.data() + off, static_cast<std::size_t>(n)};
}

template <class T>
void axpy_columns(MatrixView<const T> src, T alpha, MatrixView<T> dst) {
  for (int i = 0; i < src.rows; ++i) {
    const T* s = src.row(i);
    T* o = dst.row(i);
#pragma omp simd
    for (int j = 0; j < src.cols; ++j) {
      o[j] += alpha * s[j];
    }
  }
}

}  // namespace

template <class T>
struct Pass<T>::State {
  struct Block {
    std::vector<T> ln1, mean1, rstd1, qkv, probs, att, x_mid, ln2, mean2, rstd2, fc_pre, fc_act;
    // Adapter inputs after dropout, the keep-scale masks and the rank-r projections.
    std::vector<T> q_in, v_in, q_keep, v_keep, q_u, v_u;
    bool adapted = false;
  };

  const Model<T>* model = nullptr;
  PassOptions opt;
  int batch = 0;
  int seq_len = 0;
  int last_layer = 0;
  int rows = 0;
  std::vector<int> seg;     // packed row offsets per example, size batch + 1
  std::vector<int> first;   // first real column per example
  std::vector<int> tokens;
  std::vector<int> positions;
  std::vector<std::vector<T>> xs;  // residual stream at block boundaries (record only)
  std::vector<T> x;                // current residual stream
  std::vector<Block> blocks;
  std::vector<T> lnf, meanf, rstdf;
  std::vector<int> logit_rows;     // packed row feeding each logit row
  std::vector<int> logit_target;   // scored token (-1 for LogitMode::all)
  std::vector<int> logit_example;
  std::vector<T> logit_values;     // softmax probs (scored) or raw logits (all)
  std::vector<T> logprob;
  HiddenTrace<T> trace;

  bool adapter_at(int layer) const {
    return model->has_adapter() && !opt.bypass_adapter && model->adapter_layout().find(layer) != nullptr;
  }

  void pack(const StimulusBatch& b) {
    batch = b.batch;
    seq_len = b.seq_len();
    seg.assign(static_cast<std::size_t>(batch) + 1, 0);
    first.resize(static_cast<std::size_t>(batch));
    for (int e = 0; e < batch; ++e) {
      const int f = b.first_real(e);
      const int end = b.end_real(e);
      if (end <= f) {
        throw DataError("example " + b.ids[e] + " has no tokens");
      }
      if (end - f > model->config().max_seq_len) {
        throw ShapeError("example " + b.ids[e] + " has " + std::to_string(end - f) +
                         " tokens, exceeding max_seq_len " + std::to_string(model->config().max_seq_len));
      }
      first[e] = f;
      for (int t = f; t < end; ++t) {
        const int tok = b.tokens[b.index(e, t)];
        if (tok < 0 || tok >= model->config().vocab_size) {
          throw ShapeError("token id out of vocabulary in example " + b.ids[e]);
        }
        tokens.push_back(tok);
        positions.push_back(t - f);
      }
      seg[e + 1] = static_cast<int>(tokens.size());
    }
    rows = static_cast<int>(tokens.size());
  }

  void dropout_mask(std::mt19937_64& rng, double p, std::vector<T>& keep) const {
    const int d = model->config().d_model;
    keep.resize(static_cast<std::size_t>(rows) * d);
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    const auto threshold = static_cast<std::uint64_t>(p * 18446744073709551616.0);
    for (auto& v : keep) {
      v = rng() < threshold ? T{0} : scale;
    }
  }

  void block_forward(int l, Block& bc, std::mt19937_64& rng) {
    const auto& c = model->config();
    const auto& P = model->layout().blocks[static_cast<std::size_t>(l)];
    const int d = c.d_model;
    const int f = c.d_ff;
    const int M = rows;
    auto X = as_matrix(x, M, d);
    bc.ln1.resize(static_cast<std::size_t>(M) * d);
    bc.mean1.resize(M);
    bc.rstd1.resize(M);
    k::layernorm_forward<T>(X, vec(*model, P.ln1_g, d), vec(*model, P.ln1_b, d), as_matrix(bc.ln1, M, d), bc.mean1,
                            bc.rstd1);
    bc.qkv.resize(static_cast<std::size_t>(M) * 3 * d);
    auto QKV = as_matrix(bc.qkv, M, 3 * d);
    k::matmul<T>(as_matrix<T>(std::as_const(bc.ln1), M, d), weight(*model, P.w_qkv, d, 3 * d), QKV);
    k::add_row_bias<T>(QKV, vec(*model, P.b_qkv, 3 * d));

    bc.adapted = adapter_at(l);
    if (bc.adapted) {
      const auto& spec = model->adapter_spec();
      const auto* slot = model->adapter_layout().find(l);
      const int r = spec.rank;
      const T s = static_cast<T>(spec.scaling());
      const bool drop = opt.train && spec.dropout > 0.0;
      const T* ap = model->adapter_params().data();
      std::vector<T> delta(static_cast<std::size_t>(M) * d);
      auto run = [&](std::vector<T>& in, std::vector<T>& keep, std::vector<T>& u, std::size_t down, std::size_t up,
                     int col) {
        in = bc.ln1;
        if (drop) {
          dropout_mask(rng, spec.dropout, keep);
          for (std::size_t i = 0; i < in.size(); ++i) {
            in[i] *= keep[i];
          }
        } else {
          keep.clear();
        }
        u.resize(static_cast<std::size_t>(M) * r);
        k::matmul<T>(as_matrix<T>(std::as_const(in), M, d), MatrixView<const T>{ap + down, d, r, r},
                     as_matrix(u, M, r));
        k::matmul<T>(as_matrix<T>(std::as_const(u), M, r), MatrixView<const T>{ap + up, r, d, d},
                     as_matrix(delta, M, d));
        axpy_columns<T>(as_matrix<T>(std::as_const(delta), M, d), s, QKV.columns(col, d));
      };
      run(bc.q_in, bc.q_keep, bc.q_u, slot->q_down, slot->q_up, 0);
      run(bc.v_in, bc.v_keep, bc.v_u, slot->v_down, slot->v_up, 2 * d);
    }

    std::vector<T> tmp(static_cast<std::size_t>(M) * d);
    const auto offsets = attention_prob_offsets(seg, c.n_heads);
    bc.probs.resize(offsets.back());
    bc.att.resize(static_cast<std::size_t>(M) * d);
    MatrixView<const T> QKVc = QKV;
    k::causal_attention_forward<T>(QKVc.columns(0, d), QKVc.columns(d, d), QKVc.columns(2 * d, d),
                                   as_matrix(bc.att, M, d), bc.probs, seg, c.n_heads);
    k::matmul<T>(as_matrix<T>(std::as_const(bc.att), M, d), weight(*model, P.w_o, d, d), as_matrix(tmp, M, d));
    k::add_row_bias<T>(as_matrix(tmp, M, d), vec(*model, P.b_o, d));
    bc.x_mid = x;
    for (std::size_t i = 0; i < tmp.size(); ++i) {
      bc.x_mid[i] += tmp[i];
    }

    bc.ln2.resize(static_cast<std::size_t>(M) * d);
    bc.mean2.resize(M);
    bc.rstd2.resize(M);
    k::layernorm_forward<T>(as_matrix<T>(std::as_const(bc.x_mid), M, d), vec(*model, P.ln2_g, d),
                            vec(*model, P.ln2_b, d), as_matrix(bc.ln2, M, d), bc.mean2, bc.rstd2);
    bc.fc_pre.resize(static_cast<std::size_t>(M) * f);
    k::matmul<T>(as_matrix<T>(std::as_const(bc.ln2), M, d), weight(*model, P.w_fc, d, f), as_matrix(bc.fc_pre, M, f));
    k::add_row_bias<T>(as_matrix(bc.fc_pre, M, f), vec(*model, P.b_fc, f));
    bc.fc_act.resize(bc.fc_pre.size());
    k::gelu_forward<T>(bc.fc_pre, bc.fc_act);
    k::matmul<T>(as_matrix<T>(std::as_const(bc.fc_act), M, f), weight(*model, P.w_proj, f, d), as_matrix(tmp, M, d));
    k::add_row_bias<T>(as_matrix(tmp, M, d), vec(*model, P.b_proj, d));
    for (std::size_t i = 0; i < tmp.size(); ++i) {
      x[i] = bc.x_mid[i] + tmp[i];
    }
  }

  void scatter_trace(std::size_t slot) {
    const int d = model->config().d_model;
    auto& dst = trace.values[slot];
    for (int e = 0; e < batch; ++e) {
      for (int r = seg[e]; r < seg[e + 1]; ++r) {
        const int t = first[e] + (r - seg[e]);
        std::copy_n(x.data() + static_cast<std::size_t>(r) * d, d,
                    dst.data() + (static_cast<std::size_t>(e) * seq_len + t) * d);
      }
    }
  }

  void run(const StimulusBatch& b) {
    b.validate();
    const auto& c = model->config();
    last_layer = opt.last_layer < 0 ? c.n_layers - 1 : opt.last_layer;
    if (last_layer >= c.n_layers) {
      throw ShapeError("last_layer " + std::to_string(last_layer) + " out of range");
    }
    if (opt.logits != LogitMode::none && last_layer != c.n_layers - 1) {
      throw ShapeError("logits require running every block");
    }
    for (std::size_t i = 0; i < opt.trace_layers.size(); ++i) {
      const int l = opt.trace_layers[i];
      if (l < 0 || l >= c.n_layers) {
        throw ShapeError("trace layer " + std::to_string(l) + " outside [0, " + std::to_string(c.n_layers) + ")");
      }
      if (l > last_layer) {
        throw ShapeError("trace layer " + std::to_string(l) + " beyond last_layer");
      }
      if (i > 0 && l <= opt.trace_layers[i - 1]) {
        throw ShapeError("trace layers must be strictly increasing");
      }
    }
    pack(b);
    const int d = c.d_model;

    trace.layers = opt.trace_layers;
    trace.batch = batch;
    trace.positions = seq_len;
    trace.d_model = d;
    trace.mask = b.attention;
    trace.values.assign(opt.trace_layers.size(),
                        std::vector<T>(static_cast<std::size_t>(batch) * seq_len * d, T{0}));

    embed(*model, tokens, positions, x);
    if (opt.record) {
      xs.push_back(x);
    }
    blocks.resize(opt.record ? static_cast<std::size_t>(last_layer) + 1 : 1);
    std::mt19937_64 rng(opt.dropout_seed);
    std::size_t next_trace = 0;
    for (int l = 0; l <= last_layer; ++l) {
      block_forward(l, blocks[opt.record ? static_cast<std::size_t>(l) : 0], rng);
      if (next_trace < opt.trace_layers.size() && opt.trace_layers[next_trace] == l) {
        scatter_trace(next_trace++);
      }
      if (opt.record) {
        xs.push_back(x);
      }
    }

    logprob.assign(static_cast<std::size_t>(batch), T{0});
    if (opt.logits == LogitMode::none) {
      return;
    }
    const auto& L = model->layout();
    const int M = rows;
    const int V = c.vocab_size;
    lnf.resize(static_cast<std::size_t>(M) * d);
    meanf.resize(M);
    rstdf.resize(M);
    k::layernorm_forward<T>(as_matrix<T>(std::as_const(x), M, d), vec(*model, L.lnf_g, d), vec(*model, L.lnf_b, d),
                            as_matrix(lnf, M, d), meanf, rstdf);
    if (opt.logits == LogitMode::scored) {
      if (opt.scope.size() != b.attention.size()) {
        throw ShapeError("scope mask does not match batch shape");
      }
      std::vector<int> counts(static_cast<std::size_t>(batch), 0);
      for (int e = 0; e < batch; ++e) {
        for (int t = 0; t < seq_len; ++t) {
          if (!opt.scope[b.index(e, t)]) {
            continue;
          }
          if (!b.attention[b.index(e, t)] || t - 1 < first[e]) {
            throw ShapeError("scope selects a position without a real predecessor in example " + b.ids[e]);
          }
          logit_rows.push_back(seg[e] + (t - 1 - first[e]));
          logit_target.push_back(b.tokens[b.index(e, t)]);
          logit_example.push_back(e);
          ++counts[e];
        }
        if (counts[e] == 0) {
          throw DataError("scope selects zero positions in example " + b.ids[e]);
        }
      }
    } else {
      for (int r = 0; r < M; ++r) {
        logit_rows.push_back(r);
        logit_target.push_back(-1);
      }
      for (int e = 0; e < batch; ++e) {
        for (int r = seg[e]; r < seg[e + 1]; ++r) {
          logit_example.push_back(e);
        }
      }
    }
    const int R = static_cast<int>(logit_rows.size());
    std::vector<T> rows_in(static_cast<std::size_t>(R) * d);
    for (int i = 0; i < R; ++i) {
      std::copy_n(lnf.data() + static_cast<std::size_t>(logit_rows[i]) * d, d, rows_in.data() + static_cast<std::size_t>(i) * d);
    }
    logit_values.resize(static_cast<std::size_t>(R) * V);
    k::matmul<T>(as_matrix<T>(std::as_const(rows_in), R, d), weight(*model, L.head, d, V),
                 as_matrix(logit_values, R, V));
    if (opt.logits == LogitMode::all) {
      return;
    }
#pragma omp parallel for schedule(static)
    for (int i = 0; i < R; ++i) {
      T* z = logit_values.data() + static_cast<std::size_t>(i) * V;
      T mx = *std::max_element(z, z + V);
      T sum = 0;
      for (int j = 0; j < V; ++j) {
        z[j] = std::exp(z[j] - mx);
        sum += z[j];
      }
      const T inv = T{1} / sum;
      for (int j = 0; j < V; ++j) {
        z[j] *= inv;
      }
    }
    for (int i = 0; i < R; ++i) {
      const T p = logit_values[static_cast<std::size_t>(i) * V + logit_target[i]];
      logprob[logit_example[i]] += std::log(std::max(p, std::numeric_limits<T>::min()));
    }
  }

  // dx holds dL/d(block output) on entry, dL/d(block input) on exit.
  void block_backward(int l, std::vector<T>& dx, Gradients<T>& g, bool need_input_grad) const {
    const auto& c = model->config();
    const auto& P = model->layout().blocks[static_cast<std::size_t>(l)];
    const auto& bc = blocks[static_cast<std::size_t>(l)];
    const int d = c.d_model;
    const int f = c.d_ff;
    const int M = rows;
    const bool base = !model->base_frozen();
    auto cm = [](const std::vector<T>& v, int r, int cc) { return as_matrix<T>(v, r, cc); };

    // MLP
    if (base) {
      k::matmul_at<T>(cm(bc.fc_act, M, f), cm(dx, M, d), grad_view(g.base, P.w_proj, f, d), true);
      k::sum_rows_acc<T>(cm(dx, M, d), gvec(g.base, P.b_proj, d));
    }
    std::vector<T> dfc(static_cast<std::size_t>(M) * f);
    k::matmul_bt<T>(cm(dx, M, d), weight(*model, P.w_proj, f, d), as_matrix(dfc, M, f));
    k::gelu_backward<T>(bc.fc_pre, dfc, dfc);
    if (base) {
      k::matmul_at<T>(cm(bc.ln2, M, d), cm(dfc, M, f), grad_view(g.base, P.w_fc, d, f), true);
      k::sum_rows_acc<T>(cm(dfc, M, f), gvec(g.base, P.b_fc, f));
    }
    std::vector<T> dln(static_cast<std::size_t>(M) * d);
    k::matmul_bt<T>(cm(dfc, M, f), weight(*model, P.w_fc, d, f), as_matrix(dln, M, d));
    std::vector<T> dmid = dx;
    k::layernorm_backward<T>(cm(dln, M, d), cm(bc.x_mid, M, d), vec(*model, P.ln2_g, d), bc.mean2, bc.rstd2,
                             as_matrix(dmid, M, d), base ? gvec(g.base, P.ln2_g, d) : std::span<T>{},
                             base ? gvec(g.base, P.ln2_b, d) : std::span<T>{});

    // Attention
    if (base) {
      k::matmul_at<T>(cm(bc.att, M, d), cm(dmid, M, d), grad_view(g.base, P.w_o, d, d), true);
      k::sum_rows_acc<T>(cm(dmid, M, d), gvec(g.base, P.b_o, d));
    }
    std::vector<T> datt(static_cast<std::size_t>(M) * d);
    k::matmul_bt<T>(cm(dmid, M, d), weight(*model, P.w_o, d, d), as_matrix(datt, M, d));
    std::vector<T> dqkv(static_cast<std::size_t>(M) * 3 * d);
    auto DQKV = as_matrix(dqkv, M, 3 * d);
    auto QKV = cm(bc.qkv, M, 3 * d);
    k::causal_attention_backward<T>(QKV.columns(0, d), QKV.columns(d, d), QKV.columns(2 * d, d), bc.probs,
                                    cm(datt, M, d), DQKV.columns(0, d), DQKV.columns(d, d), DQKV.columns(2 * d, d),
                                    seg, c.n_heads);
    if (base) {
      k::matmul_at<T>(cm(bc.ln1, M, d), MatrixView<const T>(DQKV), grad_view(g.base, P.w_qkv, d, 3 * d), true);
      k::sum_rows_acc<T>(MatrixView<const T>(DQKV), gvec(g.base, P.b_qkv, 3 * d));
    }
    if (base || need_input_grad) {
      k::matmul_bt<T>(MatrixView<const T>(DQKV), weight(*model, P.w_qkv, d, 3 * d), as_matrix(dln, M, d));
    }

    if (bc.adapted) {
      const auto& spec = model->adapter_spec();
      const auto* slot = model->adapter_layout().find(l);
      const int r = spec.rank;
      const T s = static_cast<T>(spec.scaling());
      const T* ap = model->adapter_params().data();
      std::vector<T> sdy(static_cast<std::size_t>(M) * d);
      std::vector<T> du(static_cast<std::size_t>(M) * r);
      std::vector<T> din(static_cast<std::size_t>(M) * d);
      auto back = [&](const std::vector<T>& in, const std::vector<T>& keep, const std::vector<T>& u, std::size_t down,
                      std::size_t up, int col) {
        MatrixView<const T> dy = MatrixView<const T>(DQKV).columns(col, d);
        for (int i = 0; i < M; ++i) {
          for (int j = 0; j < d; ++j) {
            sdy[static_cast<std::size_t>(i) * d + j] = s * dy(i, j);
          }
        }
        k::matmul_at<T>(cm(u, M, r), cm(sdy, M, d), grad_view(g.adapter, up, r, d), true);
        k::matmul_bt<T>(cm(sdy, M, d), MatrixView<const T>{ap + up, r, d, d}, as_matrix(du, M, r));
        k::matmul_at<T>(cm(in, M, d), cm(du, M, r), grad_view(g.adapter, down, d, r), true);
        if (need_input_grad || base) {
          k::matmul_bt<T>(cm(du, M, r), MatrixView<const T>{ap + down, d, r, r}, as_matrix(din, M, d));
          for (std::size_t i = 0; i < din.size(); ++i) {
            dln[i] += keep.empty() ? din[i] : din[i] * keep[i];
          }
        }
      };
      back(bc.q_in, bc.q_keep, bc.q_u, slot->q_down, slot->q_up, 0);
      back(bc.v_in, bc.v_keep, bc.v_u, slot->v_down, slot->v_up, 2 * d);
    }

    dx = std::move(dmid);
    if (base || need_input_grad) {
      k::layernorm_backward<T>(cm(dln, M, d), cm(xs[static_cast<std::size_t>(l)], M, d), vec(*model, P.ln1_g, d),
                               bc.mean1, bc.rstd1, as_matrix(dx, M, d),
                               base ? gvec(g.base, P.ln1_g, d) : std::span<T>{},
                               base ? gvec(g.base, P.ln1_b, d) : std::span<T>{});
    }
  }

  void backward(std::span<const T> dlogprob, const std::vector<std::vector<T>>& dtrace, Gradients<T>& g) const {
    if (!opt.record) {
      throw Error("backward requires a recorded pass");
    }
    const auto& c = model->config();
    const auto& L = model->layout();
    const int d = c.d_model;
    const int M = rows;
    const bool base = !model->base_frozen();
    if (base && g.base.size() != model->params().size()) {
      throw ShapeError("gradient buffer does not match model");
    }
    if (g.adapter.size() != model->adapter_params().size()) {
      throw ShapeError("adapter gradient buffer does not match model");
    }
    int lowest = 0;
    if (!base) {
      lowest = c.n_layers;
      if (model->has_adapter() && !opt.bypass_adapter) {
        for (const auto& s : model->adapter_layout().slots) {
          lowest = std::min(lowest, s.layer);
        }
      }
      if (lowest > last_layer) {
        return;
      }
    }

    std::vector<T> dx(static_cast<std::size_t>(M) * d, T{0});
    if (!dlogprob.empty()) {
      if (opt.logits != LogitMode::scored) {
        throw Error("logprob gradients need LogitMode::scored");
      }
      if (dlogprob.size() != static_cast<std::size_t>(batch)) {
        throw ShapeError("dlogprob size mismatch");
      }
      const int V = c.vocab_size;
      const int R = static_cast<int>(logit_rows.size());
      std::vector<T> dlog(static_cast<std::size_t>(R) * V);
#pragma omp parallel for schedule(static)
      for (int i = 0; i < R; ++i) {
        const T gi = dlogprob[logit_example[i]];
        const T* p = logit_values.data() + static_cast<std::size_t>(i) * V;
        T* o = dlog.data() + static_cast<std::size_t>(i) * V;
        for (int j = 0; j < V; ++j) {
          o[j] = -gi * p[j];
        }
        o[logit_target[i]] += gi;
      }
      std::vector<T> rows_in(static_cast<std::size_t>(R) * d);
      for (int i = 0; i < R; ++i) {
        std::copy_n(lnf.data() + static_cast<std::size_t>(logit_rows[i]) * d, d,
                    rows_in.data() + static_cast<std::size_t>(i) * d);
      }
      if (base) {
        k::matmul_at<T>(as_matrix<T>(std::as_const(rows_in), R, d), as_matrix<T>(std::as_const(dlog), R, V),
                        grad_view(g.base, L.head, d, V), true);
      }
      std::vector<T> drows(static_cast<std::size_t>(R) * d);
      k::matmul_bt<T>(as_matrix<T>(std::as_const(dlog), R, V), weight(*model, L.head, d, V), as_matrix(drows, R, d));
      std::vector<T> dlnf(static_cast<std::size_t>(M) * d, T{0});
      for (int i = 0; i < R; ++i) {
        T* o = dlnf.data() + static_cast<std::size_t>(logit_rows[i]) * d;
        const T* s = drows.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) {
          o[j] += s[j];
        }
      }
      k::layernorm_backward<T>(as_matrix<T>(std::as_const(dlnf), M, d), as_matrix<T>(xs.back(), M, d),
                               vec(*model, L.lnf_g, d), meanf, rstdf, as_matrix(dx, M, d),
                               base ? gvec(g.base, L.lnf_g, d) : std::span<T>{},
                               base ? gvec(g.base, L.lnf_b, d) : std::span<T>{});
    }

    if (!dtrace.empty() && dtrace.size() != trace.layers.size()) {
      throw ShapeError("dtrace must have one entry per traced layer");
    }
    for (int l = last_layer; l >= lowest; --l) {
      for (std::size_t i = 0; i < dtrace.size(); ++i) {
        if (trace.layers[i] != l || dtrace[i].empty()) {
          continue;
        }
        const auto& src = dtrace[i];
        if (src.size() != static_cast<std::size_t>(batch) * seq_len * d) {
          throw ShapeError("dtrace layer size mismatch");
        }
        for (int e = 0; e < batch; ++e) {
          for (int r = seg[e]; r < seg[e + 1]; ++r) {
            const int t = first[e] + (r - seg[e]);
            const T* s = src.data() + (static_cast<std::size_t>(e) * seq_len + t) * d;
            T* o = dx.data() + static_cast<std::size_t>(r) * d;
            for (int j = 0; j < d; ++j) {
              o[j] += s[j];
            }
          }
        }
      }
      block_backward(l, dx, g, l > lowest);
    }

    if (base) {
      for (int r = 0; r < M; ++r) {
        const T* s = dx.data() + static_cast<std::size_t>(r) * d;
        T* te = g.base.data() + L.tok_emb + static_cast<std::size_t>(tokens[r]) * d;
        for (int j = 0; j < d; ++j) {
          te[j] += s[j];
        }
        if (L.pos_emb != ParamLayout::npos) {
          T* pe = g.base.data() + L.pos_emb + static_cast<std::size_t>(positions[r]) * d;
          for (int j = 0; j < d; ++j) {
            pe[j] += s[j];
          }
        }
      }
    }
  }
};

template <class T>
Pass<T>::Pass(const Model<T>& model, const StimulusBatch& batch, PassOptions options)
    : state_(std::make_unique<State>()) {
  state_->model = &model;
  state_->opt = std::move(options);
  state_->run(batch);
}

template <class T>
Pass<T>::~Pass() = default;
template <class T>
Pass<T>::Pass(Pass&&) noexcept = default;
template <class T>
Pass<T>& Pass<T>::operator=(Pass&&) noexcept = default;

template <class T>
std::span<const T> Pass<T>::logprobs() const {
  return state_->logprob;
}

template <class T>
const HiddenTrace<T>& Pass<T>::trace() const {
  return state_->trace;
}

template <class T>
std::vector<T> Pass<T>::logits() const {
  const auto& s = *state_;
  if (s.opt.logits != LogitMode::all) {
    throw Error("logits() needs LogitMode::all");
  }
  const int V = s.model->config().vocab_size;
  std::vector<T> out(static_cast<std::size_t>(s.batch) * s.seq_len * V, T{0});
  for (int e = 0; e < s.batch; ++e) {
    for (int r = s.seg[e]; r < s.seg[e + 1]; ++r) {
      const int t = s.first[e] + (r - s.seg[e]);
      std::copy_n(s.logit_values.data() + static_cast<std::size_t>(r) * V, V,
                  out.data() + (static_cast<std::size_t>(e) * s.seq_len + t) * V);
    }
  }
  return out;
}

template <class T>
void Pass<T>::backward(std::span<const T> dlogprob, const std::vector<std::vector<T>>& dtrace,
                       Gradients<T>& grads) const {
  state_->backward(dlogprob, dtrace, grads);
}

template <class T>
ForwardResult<T> forward_with_trace(const Model<T>& model, const StimulusBatch& batch, std::span<const int> layers) {
  PassOptions opt;
  opt.trace_layers.assign(layers.begin(), layers.end());
  opt.logits = LogitMode::all;
  Pass<T> pass(model, batch, std::move(opt));
  return {pass.logits(), pass.trace()};
}

template <class T>
std::vector<T> sequence_logprob(const Model<T>& model, const StimulusBatch& batch, std::span<const std::uint8_t> scope) {
  PassOptions opt;
  opt.logits = LogitMode::scored;
  opt.scope.assign(scope.begin(), scope.end());
  Pass<T> pass(model, batch, std::move(opt));
  const auto lp = pass.logprobs();
  return {lp.begin(), lp.end()};
}

// ---------------------------------------------------------------------------
// Incremental decoder

template <class T>
struct Decoder<T>::State {
  const Model<T>* model = nullptr;
  // Per sequence, per layer: keys and values of every position so far, [len, d].
  std::vector<std::vector<std::vector<T>>> keys, values;
  std::vector<int> lengths;
};

template <class T>
Decoder<T>::Decoder(const Model<T>& model, int n_sequences) : state_(std::make_unique<State>()) {
  state_->model = &model;
  const auto L = static_cast<std::size_t>(model.config().n_layers);
  state_->keys.assign(static_cast<std::size_t>(n_sequences), std::vector<std::vector<T>>(L));
  state_->values.assign(static_cast<std::size_t>(n_sequences), std::vector<std::vector<T>>(L));
  state_->lengths.assign(static_cast<std::size_t>(n_sequences), 0);
}

template <class T>
Decoder<T>::~Decoder() = default;

template <class T>
int Decoder<T>::length(int seq) const {
  return state_->lengths.at(static_cast<std::size_t>(seq));
}

template <class T>
std::vector<T> Decoder<T>::feed(std::span<const int> seqs, const std::vector<std::vector<int>>& new_tokens) {
  auto& st = *state_;
  const Model<T>& model = *st.model;
  const auto& c = model.config();
  const auto& P = model.layout();
  const int d = c.d_model;
  const int f = c.d_ff;
  const int H = c.n_heads;
  const int hd = d / H;
  if (seqs.size() != new_tokens.size()) {
    throw ShapeError("decoder feed: sequence/token list size mismatch");
  }
  std::vector<int> tokens;
  std::vector<int> positions;
  std::vector<int> row_seq;
  std::vector<int> last_row;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const int s = seqs[i];
    if (new_tokens[i].empty()) {
      throw ShapeError("decoder feed: empty token list");
    }
    for (std::size_t j = 0; j < new_tokens[i].size(); ++j) {
      const int pos = st.lengths[static_cast<std::size_t>(s)] + static_cast<int>(j);
      if (pos >= c.max_seq_len) {
        throw ShapeError("decoder: sequence exceeds max_seq_len");
      }
      tokens.push_back(new_tokens[i][j]);
      positions.push_back(pos);
      row_seq.push_back(s);
    }
    last_row.push_back(static_cast<int>(tokens.size()) - 1);
  }
  const int M = static_cast<int>(tokens.size());
  std::vector<T> x;
  embed(model, tokens, positions, x);
  std::vector<T> ln(static_cast<std::size_t>(M) * d), mean(M), rstd(M), qkv(static_cast<std::size_t>(M) * 3 * d);
  std::vector<T> att(static_cast<std::size_t>(M) * d), tmp(static_cast<std::size_t>(M) * d);
  std::vector<T> fc(static_cast<std::size_t>(M) * f), fca(static_cast<std::size_t>(M) * f);
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));

  for (int l = 0; l < c.n_layers; ++l) {
    const auto& B = P.blocks[static_cast<std::size_t>(l)];
    k::layernorm_forward<T>(as_matrix<T>(std::as_const(x), M, d), vec(model, B.ln1_g, d), vec(model, B.ln1_b, d),
                            as_matrix(ln, M, d), mean, rstd);
    auto QKV = as_matrix(qkv, M, 3 * d);
    k::matmul<T>(as_matrix<T>(std::as_const(ln), M, d), weight(model, B.w_qkv, d, 3 * d), QKV);
    k::add_row_bias<T>(QKV, vec(model, B.b_qkv, 3 * d));
    if (model.has_adapter()) {
      if (const auto* slot = model.adapter_layout().find(l)) {
        const int r = model.adapter_spec().rank;
        const T s = static_cast<T>(model.adapter_spec().scaling());
        const T* ap = model.adapter_params().data();
        std::vector<T> u(static_cast<std::size_t>(M) * r);
        for (auto [down, up, col] : {std::tuple{slot->q_down, slot->q_up, 0}, std::tuple{slot->v_down, slot->v_up, 2 * d}}) {
          k::matmul<T>(as_matrix<T>(std::as_const(ln), M, d), MatrixView<const T>{ap + down, d, r, r},
                       as_matrix(u, M, r));
          k::matmul<T>(as_matrix<T>(std::as_const(u), M, r), MatrixView<const T>{ap + up, r, d, d},
                       as_matrix(tmp, M, d));
          axpy_columns<T>(as_matrix<T>(std::as_const(tmp), M, d), s, QKV.columns(col, d));
        }
      }
    }
    // Append keys/values in row order, then attend.
    for (int row = 0; row < M; ++row) {
      const auto s = static_cast<std::size_t>(row_seq[row]);
      auto& kc = st.keys[s][static_cast<std::size_t>(l)];
      auto& vc = st.values[s][static_cast<std::size_t>(l)];
      kc.insert(kc.end(), QKV.row(row) + d, QKV.row(row) + 2 * d);
      vc.insert(vc.end(), QKV.row(row) + 2 * d, QKV.row(row) + 3 * d);
    }
#pragma omp parallel for collapse(2) schedule(dynamic)
    for (int row = 0; row < M; ++row) {
      for (int h = 0; h < H; ++h) {
        const auto s = static_cast<std::size_t>(row_seq[row]);
        const auto& kc = st.keys[s][static_cast<std::size_t>(l)];
        const auto& vc = st.values[s][static_cast<std::size_t>(l)];
        const int upto = positions[row];
        const T* q = QKV.row(row) + h * hd;
        std::vector<T> w(static_cast<std::size_t>(upto) + 1);
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j <= upto; ++j) {
          const T* kj = kc.data() + static_cast<std::size_t>(j) * d + h * hd;
          T dot = 0;
          for (int t = 0; t < hd; ++t) {
            dot += q[t] * kj[t];
          }
          w[j] = dot * scale;
          mx = std::max(mx, w[j]);
        }
        T z = 0;
        for (int j = 0; j <= upto; ++j) {
          w[j] = std::exp(w[j] - mx);
          z += w[j];
        }
        T* o = att.data() + static_cast<std::size_t>(row) * d + h * hd;
        std::fill(o, o + hd, T{0});
        for (int j = 0; j <= upto; ++j) {
          const T wj = w[j] / z;
          const T* vj = vc.data() + static_cast<std::size_t>(j) * d + h * hd;
          for (int t = 0; t < hd; ++t) {
            o[t] += wj * vj[t];
          }
        }
      }
    }
    k::matmul<T>(as_matrix<T>(std::as_const(att), M, d), weight(model, B.w_o, d, d), as_matrix(tmp, M, d));
    k::add_row_bias<T>(as_matrix(tmp, M, d), vec(model, B.b_o, d));
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] += tmp[i];
    }
    k::layernorm_forward<T>(as_matrix<T>(std::as_const(x), M, d), vec(model, B.ln2_g, d), vec(model, B.ln2_b, d),
                            as_matrix(ln, M, d), mean, rstd);
    k::matmul<T>(as_matrix<T>(std::as_const(ln), M, d), weight(model, B.w_fc, d, f), as_matrix(fc, M, f));
    k::add_row_bias<T>(as_matrix(fc, M, f), vec(model, B.b_fc, f));
    k::gelu_forward<T>(fc, fca);
    k::matmul<T>(as_matrix<T>(std::as_const(fca), M, f), weight(model, B.w_proj, f, d), as_matrix(tmp, M, d));
    k::add_row_bias<T>(as_matrix(tmp, M, d), vec(model, B.b_proj, d));
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] += tmp[i];
    }
  }
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    st.lengths[static_cast<std::size_t>(seqs[i])] += static_cast<int>(new_tokens[i].size());
  }

  const int R = static_cast<int>(last_row.size());
  std::vector<T> last(static_cast<std::size_t>(R) * d);
  for (int i = 0; i < R; ++i) {
    std::copy_n(x.data() + static_cast<std::size_t>(last_row[i]) * d, d, last.data() + static_cast<std::size_t>(i) * d);
  }
  std::vector<T> lnl(last.size()), ml(R), rl(R);
  k::layernorm_forward<T>(as_matrix<T>(std::as_const(last), R, d), vec(model, P.lnf_g, d), vec(model, P.lnf_b, d),
                          as_matrix(lnl, R, d), ml, rl);
  std::vector<T> logits(static_cast<std::size_t>(R) * c.vocab_size);
  k::matmul<T>(as_matrix<T>(std::as_const(lnl), R, d), weight(model, P.head, d, c.vocab_size),
               as_matrix(logits, R, c.vocab_size));
  return logits;
}

// ---------------------------------------------------------------------------
// Checksums and checkpoints

template <class T>
std::string base_checksum(const Model<T>& model) {
  return sha256_of(model.params());
}

template <class T>
std::string adapter_checksum(const Model<T>& model) {
  return sha256_of(model.adapter_params());
}

namespace {

constexpr char kTensorMagic[8] = {'R', 'A', 'H', 'F', 'T', 'N', 'S', '1'};

void write_tensor_file(const std::filesystem::path& path, std::span<const float> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError("cannot write " + path.string());
  }
  const std::uint64_t n = values.size();
  out.write(kTensorMagic, sizeof(kTensorMagic));
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(n * sizeof(float)));
}

std::vector<float> read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open " + path.string());
  }
  char magic[8];
  std::uint64_t n = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!in || std::memcmp(magic, kTensorMagic, sizeof(magic)) != 0) {
    throw DataError(path.string() + ": not a parameter archive");
  }
  std::vector<float> values(n);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!in) {
    throw DataError(path.string() + ": truncated parameter archive");
  }
  return values;
}

std::filesystem::path with_suffix(const std::filesystem::path& prefix, const char* suffix) {
  return prefix.string() + suffix;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& prefix, const FloatModel& model, const CheckpointMeta& meta) {
  if (prefix.has_parent_path()) {
    std::filesystem::create_directories(prefix.parent_path());
  }
  json j;
  j["format"] = 1;
  j["stage"] = meta.stage;
  j["model_config"] = model.config().to_json();
  j["git_describe"] = std::string(build_git_describe());
  j["base_checksum"] = base_checksum(model);
  j["extra"] = meta.extra;
  if (meta.base_reference) {
    j["base_reference"] = meta.base_reference->generic_string();
  } else {
    write_tensor_file(with_suffix(prefix, ".params"), model.params());
  }
  if (model.has_adapter()) {
    j["adapter_spec"] = model.adapter_spec().to_json();
    j["adapter_checksum"] = adapter_checksum(model);
    write_tensor_file(with_suffix(prefix, ".adapter"), model.adapter_params());
  }
  write_json_file(with_suffix(prefix, ".json"), j);
}

json load_checkpoint_meta(const std::filesystem::path& prefix) {
  const auto path = with_suffix(prefix, ".json");
  if (!std::filesystem::exists(path)) {
    throw DataError("checkpoint not found: " + prefix.string());
  }
  return read_json_file(path);
}

FloatModel load_checkpoint(const std::filesystem::path& prefix) {
  const json j = load_checkpoint_meta(prefix);
  FloatModel model(ModelConfig::from_json(j.at("model_config")));
  std::vector<float> params;
  if (j.contains("base_reference")) {
    const auto ref = prefix.parent_path() / j.at("base_reference").get<std::string>();
    params = read_tensor_file(with_suffix(ref, ".params"));
  } else {
    params = read_tensor_file(with_suffix(prefix, ".params"));
  }
  if (params.size() != model.params().size()) {
    throw DataError(prefix.string() + ": parameter count does not match its config");
  }
  std::copy(params.begin(), params.end(), model.params().begin());
  if (base_checksum(model) != j.at("base_checksum").get<std::string>()) {
    throw DataError(prefix.string() + ": base parameter checksum mismatch");
  }
  if (j.contains("adapter_spec")) {
    model.attach_adapter(AdapterSpec::from_json(j.at("adapter_spec")),
                         read_tensor_file(with_suffix(prefix, ".adapter")));
    model.set_base_frozen(true);
    if (adapter_checksum(model) != j.at("adapter_checksum").get<std::string>()) {
      throw DataError(prefix.string() + ": adapter checksum mismatch");
    }
  }
  return model;
}

// ---------------------------------------------------------------------------

template struct HiddenTrace<float>;
template struct HiddenTrace<double>;
template struct Gradients<float>;
template struct Gradients<double>;
template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template class Pass<float>;
template class Pass<double>;
template class Decoder<float>;
template class Decoder<double>;
template ForwardResult<float> forward_with_trace(const Model<float>&, const StimulusBatch&, std::span<const int>);
template ForwardResult<double> forward_with_trace(const Model<double>&, const StimulusBatch&, std::span<const int>);
template std::vector<float> sequence_logprob(const Model<float>&, const StimulusBatch&, std::span<const std::uint8_t>);
template std::vector<double> sequence_logprob(const Model<double>&, const StimulusBatch&,
                                              std::span<const std::uint8_t>);
template Model<float> inject_adapter(const Model<float>&, const AdapterSpec&, std::uint64_t);
template Model<double> inject_adapter(const Model<double>&, const AdapterSpec&, std::uint64_t);
template std::string base_checksum(const Model<float>&);
template std::string base_checksum(const Model<double>&);
template std::string adapter_checksum(const Model<float>&);
template std::string adapter_checksum(const Model<double>&);

}  // namespace rahf
