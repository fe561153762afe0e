#include "rahf/kernels.hpp"

#include <omp.h>

#include <Eigen/Core>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <type_traits>

namespace rahf {

std::vector<std::size_t> attention_prob_offsets(std::span<const int> segments, int n_heads) {
  std::vector<std::size_t> offsets(segments.empty() ? 1 : segments.size());
  offsets[0] = 0;
  for (std::size_t s = 0; s + 1 < segments.size(); ++s) {
    const auto len = static_cast<std::size_t>(segments[s + 1] - segments[s]);
    offsets[s + 1] = offsets[s] + static_cast<std::size_t>(n_heads) * len * len;
  }
  return offsets;
}

namespace kernels {

int thread_count() { return omp_get_max_threads(); }

void set_thread_count(int n) { omp_set_num_threads(std::max(1, n)); }

namespace {

// Register block: 4 rows of C by 256 bytes of columns, which keeps the
// accumulators in 16 vector registers on AVX-512.
constexpr int kRowBlock = 4;
template <class T>
constexpr int kColBlock = 256 / static_cast<int>(sizeof(T));

template <class T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <class T>
constexpr T kGeluA = static_cast<T>(0.044715);
template <class T>
constexpr T kLayerNormEps = static_cast<T>(1e-5);

template <class T>
std::vector<T>& scratch() {
  thread_local std::vector<T> buffer;
  return buffer;
}

template <class T>
void transpose_into(MatrixView<const T> a, std::vector<T>& out) {
  out.resize(static_cast<std::size_t>(a.rows) * a.cols);
  const int rows = a.rows;
  const int cols = a.cols;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < cols; ++c) {
    T* dst = out.data() + static_cast<std::size_t>(c) * rows;
    for (int r = 0; r < rows; ++r) {
      dst[r] = a(r, c);
    }
  }
}

// One register block of C. Full and partial blocks run the same per-element
// accumulation (k ascending), so a row's result never depends on which block
// it landed in or on the batch it was packed with.
template <class T>
inline void matmul_block(MatrixView<const T> a, MatrixView<const T> b, MatrixView<T> c, int i0, int j0,
                         bool accumulate) {
  constexpr int JB = kColBlock<T>;
  const int rows = std::min(kRowBlock, c.rows - i0);
  const int cols = std::min(JB, c.cols - j0);
  const int K = a.cols;
  alignas(64) T acc[kRowBlock][JB];
  if (rows == kRowBlock && cols == JB) {
    for (int r = 0; r < kRowBlock; ++r) {
      const T* src = c.row(i0 + r) + j0;
#pragma omp simd
      for (int j = 0; j < JB; ++j) {
        acc[r][j] = accumulate ? src[j] : T{0};
      }
    }
    const T* a0 = a.row(i0);
    const T* a1 = a.row(i0 + 1);
    const T* a2 = a.row(i0 + 2);
    const T* a3 = a.row(i0 + 3);
    for (int k = 0; k < K; ++k) {
      const T* bk = b.row(k) + j0;
      const T x0 = a0[k];
      const T x1 = a1[k];
      const T x2 = a2[k];
      const T x3 = a3[k];
#pragma omp simd
      for (int j = 0; j < JB; ++j) {
        acc[0][j] += x0 * bk[j];
        acc[1][j] += x1 * bk[j];
        acc[2][j] += x2 * bk[j];
        acc[3][j] += x3 * bk[j];
      }
    }
    for (int r = 0; r < kRowBlock; ++r) {
      T* dst = c.row(i0 + r) + j0;
#pragma omp simd
      for (int j = 0; j < JB; ++j) {
        dst[j] = acc[r][j];
      }
    }
    return;
  }
  for (int r = 0; r < rows; ++r) {
    const T* src = c.row(i0 + r) + j0;
    for (int j = 0; j < cols; ++j) {
      acc[r][j] = accumulate ? src[j] : T{0};
    }
  }
  for (int k = 0; k < K; ++k) {
    const T* bk = b.row(k) + j0;
    for (int r = 0; r < rows; ++r) {
      const T x = a(i0 + r, k);
      for (int j = 0; j < cols; ++j) {
        acc[r][j] += x * bk[j];
      }
    }
  }
  for (int r = 0; r < rows; ++r) {
    T* dst = c.row(i0 + r) + j0;
    for (int j = 0; j < cols; ++j) {
      dst[j] = acc[r][j];
    }
  }
}

}  // namespace

template <class T>
void matmul(MatrixView<const T> a, MatrixView<const T> b, MatrixView<T> c, bool accumulate) {
  assert(a.cols == b.rows && a.rows == c.rows && b.cols == c.cols);
  constexpr int JB = kColBlock<T>;
  const int row_blocks = (c.rows + kRowBlock - 1) / kRowBlock;
  const int col_blocks = (c.cols + JB - 1) / JB;
  if (a.cols == 0) {
    if (!accumulate) {
      for (int i = 0; i < c.rows; ++i) {
        std::fill(c.row(i), c.row(i) + c.cols, T{0});
      }
    }
    return;
  }
#pragma omp parallel for collapse(2) schedule(static)
  for (int ib = 0; ib < row_blocks; ++ib) {
    for (int jb = 0; jb < col_blocks; ++jb) {
      matmul_block(a, b, c, ib * kRowBlock, jb * JB, accumulate);
    }
  }
}

template <class T>
void matmul_bt(MatrixView<const T> a, MatrixView<const T> b, MatrixView<T> c, bool accumulate) {
  assert(a.cols == b.cols && a.rows == c.rows && b.rows == c.cols);
  auto& bt = scratch<T>();
  transpose_into(b, bt);
  matmul(a, MatrixView<const T>{bt.data(), b.cols, b.rows, b.rows}, c, accumulate);
}

namespace {

// Block of C = A^T B reading A [K, M] in place: the inner loop walks the
// shared row dimension in ascending order, like matmul_block does.
template <class T>
inline void matmul_at_block(MatrixView<const T> a, MatrixView<const T> b, MatrixView<T> c, int i0, int j0,
                            bool accumulate) {
  constexpr int JB = kColBlock<T>;
  const int rows = std::min(kRowBlock, c.rows - i0);
  const int cols = std::min(JB, c.cols - j0);
  const int K = a.rows;
  alignas(64) T acc[kRowBlock][JB];
  for (int r = 0; r < kRowBlock; ++r) {
    for (int j = 0; j < JB; ++j) {
      acc[r][j] = (accumulate && r < rows && j < cols) ? c(i0 + r, j0 + j) : T{0};
    }
  }
  if (rows == kRowBlock && cols == JB) {
    for (int k = 0; k < K; ++k) {
      const T* ak = a.row(k) + i0;
      const T* bk = b.row(k) + j0;
      const T x0 = ak[0];
      const T x1 = ak[1];
      const T x2 = ak[2];
      const T x3 = ak[3];
#pragma omp simd
      for (int j = 0; j < JB; ++j) {
        acc[0][j] += x0 * bk[j];
        acc[1][j] += x1 * bk[j];
        acc[2][j] += x2 * bk[j];
        acc[3][j] += x3 * bk[j];
      }
    }
  } else {
    for (int k = 0; k < K; ++k) {
      const T* ak = a.row(k) + i0;
      const T* bk = b.row(k) + j0;
      for (int r = 0; r < rows; ++r) {
        const T x = ak[r];
        for (int j = 0; j < cols; ++j) {
          acc[r][j] += x * bk[j];
        }
      }
    }
  }
  for (int r = 0; r < rows; ++r) {
    for (int j = 0; j < cols; ++j) {
      c(i0 + r, j0 + j) = acc[r][j];
    }
  }
}

}  // namespace

template <class T>
void matmul_at(MatrixView<const T> a, MatrixView<const T> b, MatrixView<T> c, bool accumulate) {
  assert(a.rows == b.rows && a.cols == c.rows && b.cols == c.cols);
  constexpr int JB = kColBlock<T>;
  const int row_blocks = (c.rows + kRowBlock - 1) / kRowBlock;
  const int col_blocks = (c.cols + JB - 1) / JB;
  // Chunks of the shared dimension keep the B panel in cache; partial sums
  // go through C, so each element still accumulates in ascending order.
  constexpr int KC = 256;
  for (int k0 = 0; k0 < a.rows || k0 == 0; k0 += KC) {
    const int kn = std::min(KC, a.rows - k0);
    const auto ak = a.rows_range(k0, kn);
    const auto bk = b.rows_range(k0, kn);
    const bool acc = accumulate || k0 > 0;
#pragma omp parallel for collapse(2) schedule(static)
    for (int ib = 0; ib < row_blocks; ++ib) {
      for (int jb = 0; jb < col_blocks; ++jb) {
        matmul_at_block(ak, bk, c, ib * kRowBlock, jb * JB, acc);
      }
    }
  }
}

template <class T>
void add_row_bias(MatrixView<T> c, std::span<const T> bias) {
  assert(static_cast<int>(bias.size()) == c.cols);
  const T* bp = bias.data();
#pragma omp parallel for schedule(static)
  for (int i = 0; i < c.rows; ++i) {
    T* row = c.row(i);
#pragma omp simd
    for (int j = 0; j < c.cols; ++j) {
      row[j] += bp[j];
    }
  }
}

template <class T>
void sum_rows_acc(MatrixView<const T> a, std::span<T> out) {
  assert(static_cast<int>(out.size()) == a.cols);
  T* op = out.data();
#pragma omp parallel for schedule(static)
  for (int j = 0; j < a.cols; ++j) {
    T s = 0;
    for (int i = 0; i < a.rows; ++i) {
      s += a(i, j);
    }
    op[j] += s;
  }
}

template <class T>
void layernorm_forward(MatrixView<const T> x, std::span<const T> gamma, std::span<const T> beta, MatrixView<T> y,
                       std::span<T> mean, std::span<T> rstd) {
  const int n = x.cols;
#pragma omp parallel for schedule(static)
  for (int i = 0; i < x.rows; ++i) {
    const T* xr = x.row(i);
    T m = 0;
    for (int j = 0; j < n; ++j) {
      m += xr[j];
    }
    m /= static_cast<T>(n);
    T var = 0;
    for (int j = 0; j < n; ++j) {
      const T d = xr[j] - m;
      var += d * d;
    }
    var /= static_cast<T>(n);
    const T rs = T{1} / std::sqrt(var + kLayerNormEps<T>);
    T* yr = y.row(i);
#pragma omp simd
    for (int j = 0; j < n; ++j) {
      yr[j] = (xr[j] - m) * rs * gamma[j] + beta[j];
    }
    mean[i] = m;
    rstd[i] = rs;
  }
}

template <class T>
void layernorm_backward(MatrixView<const T> dy, MatrixView<const T> x, std::span<const T> gamma,
                        std::span<const T> mean, std::span<const T> rstd, MatrixView<T> dx, std::span<T> dgamma,
                        std::span<T> dbeta) {
  const int n = x.cols;
  const int m = x.rows;
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    const T* dyr = dy.row(i);
    const T* xr = x.row(i);
    const T mu = mean[i];
    const T rs = rstd[i];
    T sum_g = 0;
    T sum_gx = 0;
    for (int j = 0; j < n; ++j) {
      const T g = dyr[j] * gamma[j];
      sum_g += g;
      sum_gx += g * (xr[j] - mu) * rs;
    }
    sum_g /= static_cast<T>(n);
    sum_gx /= static_cast<T>(n);
    T* dxr = dx.row(i);
    for (int j = 0; j < n; ++j) {
      const T xhat = (xr[j] - mu) * rs;
      dxr[j] += rs * (dyr[j] * gamma[j] - sum_g - xhat * sum_gx);
    }
  }
  if (!dgamma.empty()) {
#pragma omp parallel for schedule(static)
    for (int j = 0; j < n; ++j) {
      T sg = 0;
      T sb = 0;
      for (int i = 0; i < m; ++i) {
        const T xhat = (x(i, j) - mean[i]) * rstd[i];
        sg += dy(i, j) * xhat;
        sb += dy(i, j);
      }
      dgamma[j] += sg;
      if (!dbeta.empty()) {
        dbeta[j] += sb;
      }
    }
  }
}

namespace {

constexpr std::ptrdiff_t kGeluChunk = 512;
constexpr std::ptrdiff_t kPad = 16;

std::ptrdiff_t padded(std::ptrdiff_t n) { return (n + kPad - 1) / kPad * kPad; }

// Element-wise tanh/exp. Float uses Eigen's vectorised approximations on an
// aligned buffer padded to whole packets, so every element takes the packet
// path whatever its offset (results must not depend on batch packing).
template <class T>
void tanh_chunk(T* u, std::ptrdiff_t n) {
  if constexpr (std::is_same_v<T, float>) {
    std::fill(u + n, u + padded(n), 0.0f);
    Eigen::Map<Eigen::ArrayXf, Eigen::AlignedMax> a(u, padded(n));
    a = a.tanh();
  } else {
    for (std::ptrdiff_t i = 0; i < n; ++i) u[i] = std::tanh(u[i]);
  }
}

// p[i] = exp(p[i] - shift); returns the sum, accumulated in index order.
template <class T>
T exp_shifted(T* p, std::ptrdiff_t n, T shift) {
  T z = 0;
  if constexpr (std::is_same_v<T, float>) {
    thread_local std::vector<float, Eigen::aligned_allocator<float>> buf;
    buf.resize(static_cast<std::size_t>(padded(n)));
    for (std::ptrdiff_t i = 0; i < n; ++i) buf[i] = p[i] - shift;
    std::fill(buf.begin() + n, buf.end(), 0.0f);
    Eigen::Map<Eigen::ArrayXf, Eigen::AlignedMax> a(buf.data(), padded(n));
    a = a.exp();
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      p[i] = buf[i];
      z += p[i];
    }
  } else {
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      p[i] = std::exp(p[i] - shift);
      z += p[i];
    }
  }
  return z;
}

}  // namespace

template <class T>
void gelu_forward(std::span<const T> x, std::span<T> y) {
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  const std::ptrdiff_t chunks = (n + kGeluChunk - 1) / kGeluChunk;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < chunks; ++c) {
    const std::ptrdiff_t lo = c * kGeluChunk;
    const std::ptrdiff_t len = std::min(kGeluChunk, n - lo);
    alignas(64) T t[kGeluChunk];
    for (std::ptrdiff_t i = 0; i < len; ++i) {
      const T v = x[lo + i];
      t[i] = kGeluC<T> * (v + kGeluA<T> * v * v * v);
    }
    tanh_chunk(t, len);
    for (std::ptrdiff_t i = 0; i < len; ++i) {
      y[lo + i] = T{0.5} * x[lo + i] * (T{1} + t[i]);
    }
  }
}

template <class T>
void gelu_backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx) {
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  const std::ptrdiff_t chunks = (n + kGeluChunk - 1) / kGeluChunk;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < chunks; ++c) {
    const std::ptrdiff_t lo = c * kGeluChunk;
    const std::ptrdiff_t len = std::min(kGeluChunk, n - lo);
    alignas(64) T t[kGeluChunk];
    for (std::ptrdiff_t i = 0; i < len; ++i) {
      const T v = x[lo + i];
      t[i] = kGeluC<T> * (v + kGeluA<T> * v * v * v);
    }
    tanh_chunk(t, len);
    for (std::ptrdiff_t i = 0; i < len; ++i) {
      const T v = x[lo + i];
      const T du = kGeluC<T> * (T{1} + T{3} * kGeluA<T> * v * v);
      const T grad = T{0.5} * (T{1} + t[i]) + T{0.5} * v * (T{1} - t[i] * t[i]) * du;
      dx[lo + i] = grad * dy[lo + i];
    }
  }
}

template <class T>
void causal_attention_forward(MatrixView<const T> q, MatrixView<const T> k, MatrixView<const T> v, MatrixView<T> out,
                              std::span<T> probs, std::span<const int> segments, int n_heads) {
  const int d = q.cols;
  const int hd = d / n_heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));
  const auto offsets = attention_prob_offsets(segments, n_heads);
  const int n_seg = static_cast<int>(segments.size()) - 1;
#pragma omp parallel for collapse(2) schedule(dynamic)
  for (int s = 0; s < n_seg; ++s) {
    for (int h = 0; h < n_heads; ++h) {
      const int base = segments[s];
      const int len = segments[s + 1] - base;
      T* p = probs.data() + offsets[s] + static_cast<std::size_t>(h) * len * len;
      const int c0 = h * hd;
      // Keys of this head transposed to [hd, len] so scores vectorise over j.
      auto& kt = scratch<T>();
      kt.resize(static_cast<std::size_t>(hd) * len);
      for (int j = 0; j < len; ++j) {
        const T* kj = k.row(base + j) + c0;
        for (int t = 0; t < hd; ++t) {
          kt[static_cast<std::size_t>(t) * len + j] = kj[t];
        }
      }
      for (int i = 0; i < len; ++i) {
        const T* qi = q.row(base + i) + c0;
        T* pi = p + static_cast<std::size_t>(i) * len;
        std::fill(pi, pi + i + 1, T{0});
        for (int t = 0; t < hd; ++t) {
          const T qt = qi[t];
          const T* kr = kt.data() + static_cast<std::size_t>(t) * len;
#pragma omp simd
          for (int j = 0; j <= i; ++j) {
            pi[j] += qt * kr[j];
          }
        }
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j <= i; ++j) {
          pi[j] *= scale;
          mx = std::max(mx, pi[j]);
        }
        const T z = exp_shifted(pi, i + 1, mx);
        const T inv = T{1} / z;
        for (int j = 0; j <= i; ++j) {
          pi[j] *= inv;
        }
        for (int j = i + 1; j < len; ++j) {
          pi[j] = 0;
        }
        T* oi = out.row(base + i) + c0;
        for (int t = 0; t < hd; ++t) {
          oi[t] = 0;
        }
        for (int j = 0; j <= i; ++j) {
          const T w = pi[j];
          const T* vj = v.row(base + j) + c0;
#pragma omp simd
          for (int t = 0; t < hd; ++t) {
            oi[t] += w * vj[t];
          }
        }
      }
    }
  }
}

template <class T>
void causal_attention_backward(MatrixView<const T> q, MatrixView<const T> k, MatrixView<const T> v,
                               std::span<const T> probs, MatrixView<const T> dout, MatrixView<T> dq, MatrixView<T> dk,
                               MatrixView<T> dv, std::span<const int> segments, int n_heads) {
  const int d = q.cols;
  const int hd = d / n_heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));
  const auto offsets = attention_prob_offsets(segments, n_heads);
  const int n_seg = static_cast<int>(segments.size()) - 1;
#pragma omp parallel for collapse(2) schedule(dynamic)
  for (int s = 0; s < n_seg; ++s) {
    for (int h = 0; h < n_heads; ++h) {
      const int base = segments[s];
      const int len = segments[s + 1] - base;
      const T* p = probs.data() + offsets[s] + static_cast<std::size_t>(h) * len * len;
      const int c0 = h * hd;
      for (int i = 0; i < len; ++i) {
        std::fill(dq.row(base + i) + c0, dq.row(base + i) + c0 + hd, T{0});
        std::fill(dk.row(base + i) + c0, dk.row(base + i) + c0 + hd, T{0});
        std::fill(dv.row(base + i) + c0, dv.row(base + i) + c0 + hd, T{0});
      }
      std::vector<T> dp(static_cast<std::size_t>(len));
      auto& vt = scratch<T>();
      vt.resize(static_cast<std::size_t>(hd) * len);
      for (int j = 0; j < len; ++j) {
        const T* vj = v.row(base + j) + c0;
        for (int t = 0; t < hd; ++t) {
          vt[static_cast<std::size_t>(t) * len + j] = vj[t];
        }
      }
      for (int i = 0; i < len; ++i) {
        const T* pi = p + static_cast<std::size_t>(i) * len;
        const T* doi = dout.row(base + i) + c0;
        std::fill(dp.begin(), dp.begin() + i + 1, T{0});
        for (int t = 0; t < hd; ++t) {
          const T g = doi[t];
          const T* vr = vt.data() + static_cast<std::size_t>(t) * len;
#pragma omp simd
          for (int j = 0; j <= i; ++j) {
            dp[j] += g * vr[j];
          }
        }
        T dot_sum = 0;
        for (int j = 0; j <= i; ++j) {
          dot_sum += pi[j] * dp[j];
          T* dvj = dv.row(base + j) + c0;
#pragma omp simd
          for (int t = 0; t < hd; ++t) {
            dvj[t] += pi[j] * doi[t];
          }
        }
        const T* qi = q.row(base + i) + c0;
        T* dqi = dq.row(base + i) + c0;
        for (int j = 0; j <= i; ++j) {
          const T ds = pi[j] * (dp[j] - dot_sum) * scale;
          const T* kj = k.row(base + j) + c0;
          T* dkj = dk.row(base + j) + c0;
#pragma omp simd
          for (int t = 0; t < hd; ++t) {
            dqi[t] += ds * kj[t];
            dkj[t] += ds * qi[t];
          }
        }
      }
    }
  }
}

#include "kernel_instances.inc"

RAHF_INSTANTIATE(float)
RAHF_INSTANTIATE(double)

}  // namespace kernels
}  // namespace rahf
