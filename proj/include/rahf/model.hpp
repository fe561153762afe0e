#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rahf/batch.hpp"
#include "rahf/util.hpp"

namespace rahf {

enum class PositionalScheme { learned, sinusoidal };

/// Shape and seed of the decoder-only transformer (pre-LayerNorm, GELU MLP,
/// untied output head). Positions are counted from the first real token of
/// each row, so left padding is invisible to the model.
struct ModelConfig {
  int n_layers = 8;
  int d_model = 128;
  int n_heads = 4;
  int d_ff = 512;
  int vocab_size = 512;
  int max_seq_len = 128;
  PositionalScheme positional = PositionalScheme::learned;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the violated invariant.
  void validate() const;
  json to_json() const;
  static ModelConfig from_json(const json& j);
};

enum class AdapterTarget { query_value };

/// Low-rank adapter on the query and value projections of `target_layers`:
/// W x + (scale / rank) * up(down(dropout(x))). The down factor starts at zero.
struct AdapterSpec {
  int rank = 8;
  double scale = 16.0;
  double dropout = 0.05;
  std::vector<int> target_layers;
  AdapterTarget target = AdapterTarget::query_value;

  void validate(int n_layers) const;
  double scaling() const { return scale / rank; }
  json to_json() const;
  static AdapterSpec from_json(const json& j);
};

/// Offsets of every tensor inside the flat parameter vector.
struct ParamLayout {
  struct Block {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
  };
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  std::size_t tok_emb = 0;
  std::size_t pos_emb = npos;
  std::vector<Block> blocks;
  std::size_t lnf_g = 0;
  std::size_t lnf_b = 0;
  std::size_t head = 0;
  std::size_t total = 0;

  explicit ParamLayout(const ModelConfig& c);
  ParamLayout() = default;
};

struct AdapterLayout {
  struct Slot {
    int layer;
    std::size_t q_down, q_up, v_down, v_up;  // down: [d, r], up: [r, d]
  };
  std::vector<Slot> slots;
  std::size_t total = 0;

  AdapterLayout(const ModelConfig& c, const AdapterSpec& spec);
  AdapterLayout() = default;
  const Slot* find(int layer) const;
};

/// Post-block hidden states for a set of layers, in the padded layout of the
/// batch that produced them. Padding cells are zero; `mask` is authoritative.
template <class T>
struct HiddenTrace {
  std::vector<int> layers;
  int batch = 0;
  int positions = 0;
  int d_model = 0;
  std::vector<std::vector<T>> values;  // per entry of `layers`: [batch, positions, d_model]
  std::vector<std::uint8_t> mask;      // [batch, positions]

  /// Index into `layers`; throws ShapeError when absent.
  std::size_t slot(int layer) const;
  std::span<const T> at(std::size_t slot, int b, int t) const {
    const auto off = (static_cast<std::size_t>(b) * positions + t) * d_model;
    return {values[slot].data() + off, static_cast<std::size_t>(d_model)};
  }
};

template <class T>
struct Gradients {
  std::vector<T> base;
  std::vector<T> adapter;
  void zero();
};

template <class T>
class Model {
 public:
  /// Deterministic initialisation from config.seed.
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }

  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }

  bool has_adapter() const { return adapter_.has_value(); }
  const AdapterSpec& adapter_spec() const;
  const AdapterLayout& adapter_layout() const { return adapter_layout_; }
  std::span<T> adapter_params() { return adapter_params_; }
  std::span<const T> adapter_params() const { return adapter_params_; }

  /// With the base frozen, backward passes only produce adapter gradients.
  bool base_frozen() const { return base_frozen_; }
  void set_base_frozen(bool frozen) { base_frozen_ = frozen; }
  std::size_t trainable_parameter_count() const;

  Gradients<T> make_gradients() const;

  void attach_adapter(const AdapterSpec& spec, std::vector<T> values);
  void detach_adapter();

  template <class U>
  Model<U> cast() const;

  std::span<const T> tensor(std::size_t offset, std::size_t n) const { return {params_.data() + offset, n}; }

 private:
  template <class>
  friend class Model;
  Model() = default;

  ModelConfig config_;
  ParamLayout layout_;
  std::vector<T> params_;
  std::optional<AdapterSpec> adapter_;
  AdapterLayout adapter_layout_;
  std::vector<T> adapter_params_;
  bool base_frozen_ = false;
};

using FloatModel = Model<float>;

enum class LogitMode { none, scored, all };

struct PassOptions {
  std::vector<int> trace_layers;
  LogitMode logits = LogitMode::none;
  /// [batch, seq_len] positions whose token is scored; required for LogitMode::scored.
  std::vector<std::uint8_t> scope;
  /// Run blocks [0, last_layer]; -1 runs all of them. Logits need all blocks.
  int last_layer = -1;
  /// Keep activations for backward().
  bool record = false;
  /// Training mode enables adapter dropout, seeded by dropout_seed.
  bool train = false;
  std::uint64_t dropout_seed = 0;
  /// Run the frozen base body, ignoring any attached adapter.
  bool bypass_adapter = false;
};

/// One forward pass over a padded batch, computed on the packed real tokens
/// only. Holds the activations needed for an optional backward pass.
template <class T>
class Pass {
 public:
  Pass(const Model<T>& model, const StimulusBatch& batch, PassOptions options);
  ~Pass();
  Pass(Pass&&) noexcept;
  Pass& operator=(Pass&&) noexcept;

  /// Per-example sum of log p(token_t | tokens_<t) over the scope.
  std::span<const T> logprobs() const;
  const HiddenTrace<T>& trace() const;
  /// [batch, seq_len, vocab]; only with LogitMode::all. Zero rows at padding.
  std::vector<T> logits() const;

  /// Accumulates into `grads` the gradient of a loss L given
  /// dlogprob[b] = dL/dlogprob_b (may be empty) and per traced layer
  /// dtrace[i] = dL/dtrace.values[i] in the padded layout (inner vectors may
  /// be empty). Requires record = true.
  void backward(std::span<const T> dlogprob, const std::vector<std::vector<T>>& dtrace, Gradients<T>& grads) const;

 private:
  struct State;
  std::unique_ptr<State> state_;
};

template <class T>
struct ForwardResult {
  std::vector<T> logits;  // [batch, seq_len, vocab]
  HiddenTrace<T> trace;
};

template <class T>
Model<T> build_model(const ModelConfig& config) {
  return Model<T>(config);
}

template <class T>
ForwardResult<T> forward_with_trace(const Model<T>& model, const StimulusBatch& batch, std::span<const int> layers);

/// Throws DataError when some example has no scored position.
template <class T>
std::vector<T> sequence_logprob(const Model<T>& model, const StimulusBatch& batch, std::span<const std::uint8_t> scope);

/// Copy of `model` with a freshly initialised adapter; the base is frozen.
template <class T>
Model<T> inject_adapter(const Model<T>& model, const AdapterSpec& spec, std::uint64_t seed);

/// Incremental decoding with a key/value cache, for generation.
template <class T>
class Decoder {
 public:
  Decoder(const Model<T>& model, int n_sequences);
  ~Decoder();

  /// Appends tokens to the listed sequences and returns the next-token logits
  /// after the last appended token of each, as [seqs.size(), vocab].
  std::vector<T> feed(std::span<const int> seqs, const std::vector<std::vector<int>>& tokens);
  int length(int seq) const;

 private:
  struct State;
  std::unique_ptr<State> state_;
};

/// sha256 of the base parameters (and of the adapter, if any).
template <class T>
std::string base_checksum(const Model<T>& model);
template <class T>
std::string adapter_checksum(const Model<T>& model);

struct CheckpointMeta {
  std::string stage;            // "base", "instruct", "baseline:dpo", ...
  json extra = json::object();  // stage configs
  /// When set, base parameters are not written; the checkpoint refers to
  /// this (relative) checkpoint prefix and records its checksum.
  std::optional<std::filesystem::path> base_reference;
};

/// Writes <prefix>.params (unless base_reference), <prefix>.adapter (if any)
/// and the sidecar <prefix>.json.
void save_checkpoint(const std::filesystem::path& prefix, const FloatModel& model, const CheckpointMeta& meta);
FloatModel load_checkpoint(const std::filesystem::path& prefix);
json load_checkpoint_meta(const std::filesystem::path& prefix);

}  // namespace rahf
