#include "rahf/collect.hpp"

#include <spdlog/spdlog.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include "rahf/errors.hpp"
#include "rahf/util.hpp"

namespace rahf {

std::vector<int> LayerRange::layers() const {
  std::vector<int> out;
  if (step <= 0) return out;
  for (int l = start; l < stop; l += step) out.push_back(l);
  return out;
}

void LayerRange::validate(int n_layers, const std::string& key) const {
  if (step < 1) throw ConfigError(key + ": step must be >= 1");
  if (start < 0 || stop > n_layers) {
    throw ConfigError(key + ": range " + label() + " outside model depth " + std::to_string(n_layers));
  }
  if (layers().empty()) throw ConfigError(key + ": range " + label() + " is empty");
}

json LayerRange::to_json() const { return json::array({start, stop, step}); }

LayerRange LayerRange::from_json(const json& j) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("layer range must be [start, stop, step]");
  return LayerRange{j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

std::string LayerRange::label() const {
  return std::to_string(start) + ":" + std::to_string(stop) + ":" + std::to_string(step);
}

std::string to_string(SourceMode m) { return m == SourceMode::scit ? "scit" : "dual"; }

SourceMode source_mode_from_string(const std::string& s) {
  if (s == "scit") return SourceMode::scit;
  if (s == "dual") return SourceMode::dual;
  throw ConfigError("collect.mode: expected scit or dual, got '" + s + "'");
}

void CollectionConfig::validate(int n_layers, int max_response_len) const {
  range.validate(n_layers, "collect.layers");
  if (budget < 1) throw ConfigError("collect.budget: must be >= 1");
  if (budget > max_response_len) {
    throw ConfigError("collect.budget: " + std::to_string(budget) + " exceeds max_response_len " +
                      std::to_string(max_response_len));
  }
  if (batch_size < 1) throw ConfigError("collect.batch_size: must be >= 1");
  if (split.empty()) throw ConfigError("collect.split: must be nonempty");
}

json CollectionConfig::to_json() const {
  return json{{"layers", range.to_json()},
              {"mode", to_string(mode)},
              {"budget", budget},
              {"split", split},
              {"batch_size", batch_size}};
}

CollectionConfig CollectionConfig::from_json(const json& j, const CollectionConfig& defaults) {
  CollectionConfig c = defaults;
  if (j.contains("layers")) c.range = LayerRange::from_json(j["layers"]);
  if (j.contains("mode")) c.mode = source_mode_from_string(j["mode"].get<std::string>());
  c.budget = j.value("budget", c.budget);
  c.split = j.value("split", c.split);
  c.batch_size = j.value("batch_size", c.batch_size);
  return c;
}

namespace {

HiddenTrace<float> empty_response_trace(const std::vector<int>& layers, int n, int width, int d) {
  HiddenTrace<float> t;
  t.layers = layers;
  t.batch = n;
  t.positions = width;
  t.d_model = d;
  t.values.assign(layers.size(), std::vector<float>(static_cast<std::size_t>(n) * width * d, 0.0f));
  t.mask.assign(static_cast<std::size_t>(n) * width, 0);
  return t;
}

// Copies the response columns of `chunk` (rows start..start+n of the full
// batch) into `dst`.
void store_response(const StimulusBatch& chunk, const HiddenTrace<float>& tr, int start, HiddenTrace<float>& dst) {
  const int d = dst.d_model;
  const int w = dst.positions;
  for (std::size_t s = 0; s < tr.layers.size(); ++s) {
    for (int b = 0; b < chunk.batch; ++b) {
      for (int t = 0; t < w; ++t) {
        const auto src = tr.at(s, b, chunk.prompt_width + t);
        std::copy(src.begin(), src.end(),
                  dst.values[s].begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(start + b) * w + t) * d));
      }
    }
  }
  for (int b = 0; b < chunk.batch; ++b) {
    for (int t = 0; t < w; ++t) {
      dst.mask[static_cast<std::size_t>(start + b) * w + t] = chunk.response[chunk.index(b, chunk.prompt_width + t)];
    }
  }
}

void run_side(const FloatModel& model, const StimulusBatch& batch, const std::vector<int>& layers, int chunk,
              HiddenTrace<float>& dst) {
  for (int start = 0; start < batch.batch; start += chunk) {
    const int n = std::min(chunk, batch.batch - start);
    std::vector<int> rows(static_cast<std::size_t>(n));
    std::iota(rows.begin(), rows.end(), start);
    const auto sub = select_rows(batch, rows);
    PassOptions po;
    po.trace_layers = layers;
    po.last_layer = layers.back();
    Pass<float> pass(model, sub, std::move(po));
    store_response(sub, pass.trace(), start, dst);
  }
}

}  // namespace

ActivityPatterns collect_activity(const FloatModel& model_pos, const FloatModel& model_neg,
                                  const std::vector<StimulusText>& items, const Encoding& enc,
                                  const CollectionConfig& cfg) {
  const int n_layers = model_pos.config().n_layers;
  if (model_neg.config().n_layers != n_layers || model_neg.config().d_model != model_pos.config().d_model) {
    throw ShapeError("collect: the two source models have different shapes");
  }
  cfg.validate(n_layers, enc.limits.max_response_len);
  const auto aligned = pad_and_align(enc.tokenizer, enc.tpl, items, enc.limits);
  if (!aligned.dropped.empty()) {
    spdlog::warn("collect: {} items dropped, prompt longer than the limit (first: {})", aligned.dropped.size(),
                 aligned.dropped[0]);
  }
  const auto& pos = aligned.positive;
  const auto& neg = aligned.negative;
  if (pos.batch != neg.batch || pos.response_width != neg.response_width || pos.response != neg.response ||
      pos.ids != neg.ids) {
    throw ShapeError("collect: positive and negative stimuli are not response-aligned");
  }
  if (pos.batch == 0) throw DataError("collect: no usable items");
  const auto layers = cfg.range.layers();
  const int d = model_pos.config().d_model;
  ActivityPatterns a;
  a.ids = pos.ids;
  a.positive = empty_response_trace(layers, pos.batch, pos.response_width, d);
  a.negative = empty_response_trace(layers, pos.batch, pos.response_width, d);
  run_side(model_pos, pos, layers, cfg.batch_size, a.positive);
  run_side(model_neg, neg, layers, cfg.batch_size, a.negative);
  return a;
}

std::size_t DifferenceVectors::slot(int layer) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] == layer) return i;
  }
  throw ShapeError("difference vectors have no layer " + std::to_string(layer));
}

DifferenceVectors DifferenceVectors::rows(std::span<const int> sel) const {
  DifferenceVectors out;
  out.layers = layers;
  out.budget = budget;
  out.d_model = d_model;
  out.config = config;
  const auto cell = static_cast<std::size_t>(budget) * d_model;
  out.values.assign(layers.size(), {});
  for (int r : sel) {
    if (r < 0 || r >= size()) throw ShapeError("difference vectors: row out of range");
    out.ids.push_back(ids[r]);
    out.mask.insert(out.mask.end(), mask.begin() + static_cast<std::ptrdiff_t>(r) * budget,
                    mask.begin() + static_cast<std::ptrdiff_t>(r + 1) * budget);
    for (std::size_t s = 0; s < layers.size(); ++s) {
      out.values[s].insert(out.values[s].end(), values[s].begin() + static_cast<std::ptrdiff_t>(r * cell),
                           values[s].begin() + static_cast<std::ptrdiff_t>((r + 1) * cell));
    }
  }
  return out;
}

DifferenceVectors difference_vectors(const HiddenTrace<float>& plus, const HiddenTrace<float>& minus,
                                     const std::vector<std::string>& ids, const CollectionConfig& cfg) {
  if (plus.layers != minus.layers || plus.batch != minus.batch || plus.positions != minus.positions ||
      plus.d_model != minus.d_model) {
    throw ShapeError("difference_vectors: traces have different shapes");
  }
  if (static_cast<int>(ids.size()) != plus.batch) {
    throw ShapeError("difference_vectors: id list does not match the traces");
  }
  if (cfg.budget < 1 || cfg.budget > plus.positions) {
    throw ConfigError("collect.budget: " + std::to_string(cfg.budget) + " outside [1, " +
                      std::to_string(plus.positions) + "]");
  }
  if (plus.layers != cfg.range.layers()) {
    throw ShapeError("difference_vectors: traces do not cover layer range " + cfg.range.label());
  }
  DifferenceVectors v;
  v.layers = plus.layers;
  v.ids = ids;
  v.budget = cfg.budget;
  v.d_model = plus.d_model;
  v.config = cfg;
  const int n = plus.batch;
  const int w = plus.positions;
  const int d = plus.d_model;
  v.mask.assign(static_cast<std::size_t>(n) * cfg.budget, 0);
  for (int b = 0; b < n; ++b) {
    for (int t = 0; t < cfg.budget; ++t) {
      const auto src = static_cast<std::size_t>(b) * w + t;
      v.mask[static_cast<std::size_t>(b) * cfg.budget + t] = plus.mask[src] && minus.mask[src];
    }
  }
  v.values.assign(v.layers.size(), std::vector<float>(static_cast<std::size_t>(n) * cfg.budget * d, 0.0f));
  for (std::size_t s = 0; s < v.layers.size(); ++s) {
    for (int b = 0; b < n; ++b) {
      for (int t = 0; t < cfg.budget; ++t) {
        if (!v.mask[static_cast<std::size_t>(b) * cfg.budget + t]) continue;
        const auto p = plus.at(s, b, t);
        const auto m = minus.at(s, b, t);
        float* out = v.values[s].data() + (static_cast<std::size_t>(b) * cfg.budget + t) * d;
        for (int j = 0; j < d; ++j) out[j] = p[j] - m[j];
      }
    }
  }
  return v;
}

namespace {

constexpr char kVecMagic[8] = {'R', 'A', 'H', 'F', 'V', 'E', 'C', '1'};

std::string layer_file(int layer) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "layer_%03d.f32", layer);
  return buf;
}

void write_blob(const std::filesystem::path& p, const void* data, std::size_t bytes, std::uint64_t count) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + p.string());
  out.write(kVecMagic, sizeof kVecMagic);
  out.write(reinterpret_cast<const char*>(&count), sizeof count);
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw Error("short write to " + p.string());
}

template <class T>
std::vector<T> read_blob(const std::filesystem::path& p, std::uint64_t expect) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  char magic[8];
  std::uint64_t count = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&count), sizeof count);
  if (!in || std::memcmp(magic, kVecMagic, sizeof magic) != 0) throw DataError(p.string() + ": not a vector file");
  if (count != expect) throw DataError(p.string() + ": expected " + std::to_string(expect) + " values");
  std::vector<T> v(count);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(T)));
  if (!in) throw DataError(p.string() + ": truncated");
  return v;
}

}  // namespace

void save_vector_store(const std::filesystem::path& dir, const DifferenceVectors& v) {
  std::filesystem::create_directories(dir);
  json files = json::object();
  for (std::size_t s = 0; s < v.layers.size(); ++s) {
    const auto name = layer_file(v.layers[s]);
    write_blob(dir / name, v.values[s].data(), v.values[s].size() * sizeof(float), v.values[s].size());
    files[std::to_string(v.layers[s])] = {{"file", name}, {"sha256", sha256_file(dir / name)}};
  }
  write_blob(dir / "mask.u8", v.mask.data(), v.mask.size(), v.mask.size());
  json m{{"format", "rahf-vectors-1"},
         {"layers", v.layers},
         {"budget", v.budget},
         {"d_model", v.d_model},
         {"examples", v.size()},
         {"source_mode", to_string(v.config.mode)},
         {"split", v.config.split},
         {"collection", v.config.to_json()},
         {"dtype", "float32"},
         {"shape", {v.size(), v.budget, v.d_model}},
         {"ids", v.ids},
         {"files", files},
         {"mask", {{"file", "mask.u8"}, {"sha256", sha256_file(dir / "mask.u8")}}}};
  write_json_file(dir / "manifest.json", m);
}

DifferenceVectors load_vector_store(const std::filesystem::path& dir) {
  const auto m = read_json_file(dir / "manifest.json");
  DifferenceVectors v;
  v.layers = m.at("layers").get<std::vector<int>>();
  v.budget = m.at("budget").get<int>();
  v.d_model = m.at("d_model").get<int>();
  v.ids = m.at("ids").get<std::vector<std::string>>();
  v.config = CollectionConfig::from_json(m.at("collection"), CollectionConfig{});
  const auto n = static_cast<std::uint64_t>(v.ids.size());
  const auto per_layer = n * static_cast<std::uint64_t>(v.budget) * static_cast<std::uint64_t>(v.d_model);
  for (int l : v.layers) {
    const auto& entry = m.at("files").at(std::to_string(l));
    const auto path = dir / entry.at("file").get<std::string>();
    if (sha256_file(path) != entry.at("sha256").get<std::string>()) {
      throw DataError(path.string() + ": checksum mismatch");
    }
    v.values.push_back(read_blob<float>(path, per_layer));
  }
  v.mask = read_blob<std::uint8_t>(dir / "mask.u8", n * static_cast<std::uint64_t>(v.budget));
  if (v.layers != v.config.range.layers()) {
    throw DataError(dir.string() + ": stored layers do not match the recorded range");
  }
  return v;
}

std::string vector_store_checksum(const std::filesystem::path& dir) {
  const auto m = read_json_file(dir / "manifest.json");
  std::string acc = sha256_file(dir / "manifest.json");
  for (const auto& [layer, entry] : m.at("files").items()) {
    acc += sha256_file(dir / entry.at("file").get<std::string>());
  }
  acc += sha256_file(dir / "mask.u8");
  return sha256_hex(acc);
}

// ---------------------------------------------------------------------------
// Projection

std::vector<float> last_token_states(const FloatModel& model, const std::vector<StimulusText>& items,
                                     const Encoding& enc, Polarity polarity, int layer, int batch_size,
                                     std::vector<std::string>* ids) {
  const auto padded = pad_single(enc.tokenizer, enc.tpl, items, enc.limits, polarity);
  const auto& b = padded.batch;
  const int d = model.config().d_model;
  std::vector<float> out(static_cast<std::size_t>(b.batch) * d);
  for (int start = 0; start < b.batch; start += batch_size) {
    const int n = std::min(batch_size, b.batch - start);
    std::vector<int> rows(static_cast<std::size_t>(n));
    std::iota(rows.begin(), rows.end(), start);
    const auto sub = select_rows(b, rows);
    PassOptions po;
    po.trace_layers = {layer};
    po.last_layer = layer;
    Pass<float> pass(model, sub, std::move(po));
    for (int r = 0; r < n; ++r) {
      const auto h = pass.trace().at(0, r, sub.end_real(r) - 1);
      std::copy(h.begin(), h.end(), out.begin() + static_cast<std::ptrdiff_t>(start + r) * d);
    }
  }
  if (ids) *ids = b.ids;
  return out;
}

Projector projector_from_string(const std::string& s) {
  if (s == "pca") return Projector::pca;
  if (s == "tsne" || s == "sne" || s == "t-sne") return Projector::tsne;
  throw ConfigError("viz.projector: expected pca or tsne, got '" + s + "'");
}

std::vector<double> pca_2d(const std::vector<double>& x, int n, int d) {
  if (n < 1 || static_cast<std::size_t>(n) * d != x.size()) throw ShapeError("pca_2d: bad shape");
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> X(x.data(), n, d);
  const Eigen::RowVectorXd mean = X.colwise().mean();
  const Eigen::MatrixXd C = X.rowwise() - mean;
  const Eigen::MatrixXd cov = C.transpose() * C;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  // Eigenvalues ascend; take the two largest.
  Eigen::MatrixXd axes(d, 2);
  for (int k = 0; k < 2; ++k) {
    Eigen::VectorXd a = Eigen::VectorXd::Zero(d);
    if (d > k) a = es.eigenvectors().col(d - 1 - k);
    Eigen::Index at = 0;
    a.cwiseAbs().maxCoeff(&at);
    if (a[at] < 0) a = -a;
    axes.col(k) = a;
  }
  const Eigen::MatrixXd Y = C * axes;
  std::vector<double> out(static_cast<std::size_t>(n) * 2);
  for (int i = 0; i < n; ++i) {
    out[2 * i] = Y(i, 0);
    out[2 * i + 1] = Y(i, 1);
  }
  return out;
}

std::vector<double> tsne_2d(const std::vector<double>& x, int n, int d, std::uint64_t seed, double perplexity,
                            int iterations) {
  if (n < 2 || static_cast<std::size_t>(n) * d != x.size()) throw ShapeError("tsne_2d: bad shape");
  perplexity = std::min(perplexity, (n - 1) / 3.0);
  const auto N = static_cast<std::size_t>(n);
  std::vector<double> d2(N * N, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      double s = 0;
      for (int k = 0; k < d; ++k) {
        const double t = x[static_cast<std::size_t>(i) * d + k] - x[static_cast<std::size_t>(j) * d + k];
        s += t * t;
      }
      d2[i * N + j] = d2[j * N + i] = s;
    }
  }
  // Conditional affinities with a per-point bandwidth found by bisection.
  std::vector<double> P(N * N, 0.0);
  const double target = std::log(perplexity);
  for (int i = 0; i < n; ++i) {
    double lo = 0, hi = std::numeric_limits<double>::infinity(), beta = 1.0;
    double* row = P.data() + i * N;
    for (int it = 0; it < 100; ++it) {
      double sum = 0;
      double dot = 0;
      double dmin = std::numeric_limits<double>::infinity();
      for (int j = 0; j < n; ++j) {
        if (j != i) dmin = std::min(dmin, d2[i * N + j]);
      }
      for (int j = 0; j < n; ++j) {
        row[j] = j == i ? 0.0 : std::exp(-beta * (d2[i * N + j] - dmin));
        sum += row[j];
        dot += row[j] * (d2[i * N + j] - dmin);
      }
      const double entropy = std::log(sum) + beta * dot / sum;
      for (int j = 0; j < n; ++j) row[j] /= sum;
      if (std::abs(entropy - target) < 1e-5) break;
      if (entropy > target) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2 : (beta + hi) / 2;
      } else {
        hi = beta;
        beta = (beta + lo) / 2;
      }
    }
  }
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double s = std::max((P[i * N + j] + P[j * N + i]) / (2.0 * n), 1e-12);
      P[i * N + j] = P[j * N + i] = s;
    }
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> init(0.0, 1e-4);
  std::vector<double> Y(N * 2), vel(N * 2, 0.0), gains(N * 2, 1.0), grad(N * 2), Q(N * N);
  for (auto& y : Y) y = init(rng);
  const double eta = std::max(n / (4.0 * 12.0), 50.0);
  for (int it = 0; it < iterations; ++it) {
    const double exaggeration = it < 250 ? 12.0 : 1.0;
    const double momentum = it < 250 ? 0.5 : 0.8;
    double qsum = 0;
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) {
        const double dx = Y[2 * i] - Y[2 * j];
        const double dy = Y[2 * i + 1] - Y[2 * j + 1];
        const double q = 1.0 / (1.0 + dx * dx + dy * dy);
        Q[i * N + j] = Q[j * N + i] = q;
        qsum += 2 * q;
      }
    }
    std::fill(grad.begin(), grad.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (i == j) continue;
        const double q = Q[i * N + j];
        const double m = 4.0 * (exaggeration * P[i * N + j] - q / qsum) * q;
        grad[2 * i] += m * (Y[2 * i] - Y[2 * j]);
        grad[2 * i + 1] += m * (Y[2 * i + 1] - Y[2 * j + 1]);
      }
    }
    for (std::size_t k = 0; k < Y.size(); ++k) {
      gains[k] = (grad[k] > 0) != (vel[k] > 0) ? gains[k] + 0.2 : std::max(gains[k] * 0.8, 0.01);
      vel[k] = momentum * vel[k] - eta * gains[k] * grad[k];
      Y[k] += vel[k];
    }
    double mx = 0, my = 0;
    for (int i = 0; i < n; ++i) {
      mx += Y[2 * i];
      my += Y[2 * i + 1];
    }
    for (int i = 0; i < n; ++i) {
      Y[2 * i] -= mx / n;
      Y[2 * i + 1] -= my / n;
    }
  }
  return Y;
}

std::vector<ProjectionPoint> export_representation_projection(const std::vector<ProjectionCondition>& conditions,
                                                              Projector projector, std::uint64_t seed,
                                                              const std::filesystem::path& csv) {
  if (conditions.size() < 3) {
    spdlog::warn("projection: only {} conditions supplied", conditions.size());
  }
  if (conditions.empty()) throw DataError("projection: no conditions");
  int d = -1;
  std::vector<double> x;
  std::vector<ProjectionPoint> points;
  for (const auto& c : conditions) {
    if (c.ids.empty()) throw DataError("projection: condition " + c.name + " has no points");
    const int cd = static_cast<int>(c.states.size() / c.ids.size());
    if (static_cast<std::size_t>(cd) * c.ids.size() != c.states.size() || (d >= 0 && cd != d)) {
      throw ShapeError("projection: condition " + c.name + " has inconsistent state width");
    }
    d = cd;
    x.insert(x.end(), c.states.begin(), c.states.end());
    for (const auto& id : c.ids) points.push_back({id, c.name, 0, 0});
  }
  const int n = static_cast<int>(points.size());
  const auto y = projector == Projector::pca ? pca_2d(x, n, d) : tsne_2d(x, n, d, seed);
  for (int i = 0; i < n; ++i) {
    points[i].x = y[2 * i];
    points[i].y = y[2 * i + 1];
  }
  if (!csv.empty()) {
    if (csv.has_parent_path()) std::filesystem::create_directories(csv.parent_path());
    std::ofstream out(csv, std::ios::trunc);
    if (!out) throw Error("cannot write " + csv.string());
    out << "id,condition,x,y\n";
    out.precision(9);
    for (const auto& p : points) out << p.id << ',' << p.condition << ',' << p.x << ',' << p.y << '\n';
  }
  return points;
}

std::pair<double, double> centroid(const std::vector<ProjectionPoint>& points, const std::string& condition) {
  double sx = 0, sy = 0;
  int n = 0;
  for (const auto& p : points) {
    if (p.condition != condition) continue;
    sx += p.x;
    sy += p.y;
    ++n;
  }
  if (n == 0) throw DataError("projection: no points for condition " + condition);
  return {sx / n, sy / n};
}

}  // namespace rahf
