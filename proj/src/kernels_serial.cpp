// Straight-line reference kernels. No blocking, no threads; used by the unit
// tests as the oracle for rahf::kernels and by the benchmark as the baseline.
#include <algorithm>
#include <cmath>
#include <limits>

#include "rahf/kernels.hpp"

namespace rahf::kernels::serial {

template <class T>
void matmul(MatrixView<const T> a, MatrixView<const T> b, MatrixView<T> c, bool accumulate) {
  for (int i = 0; i < c.rows; ++i) {
    for (int j = 0; j < c.cols; ++j) {
      T s = accumulate ? c(i, j) : T{0};
      for (int k = 0; k < a.cols; ++k) {
        s += a(i, k) * b(k, j);
      }
      c(i, j) = s;
    }
  }
}

template <class T>
void matmul_bt(MatrixView<const T> a, MatrixView<const T> b, MatrixView<T> c, bool accumulate) {
  for (int i = 0; i < c.rows; ++i) {
    for (int j = 0; j < c.cols; ++j) {
      T s = accumulate ? c(i, j) : T{0};
      for (int k = 0; k < a.cols; ++k) {
        s += a(i, k) * b(j, k);
      }
      c(i, j) = s;
    }
  }
}

template <class T>
void matmul_at(MatrixView<const T> a, MatrixView<const T> b, MatrixView<T> c, bool accumulate) {
  for (int i = 0; i < c.rows; ++i) {
    for (int j = 0; j < c.cols; ++j) {
      T s = accumulate ? c(i, j) : T{0};
      for (int k = 0; k < a.rows; ++k) {
        s += a(k, i) * b(k, j);
      }
      c(i, j) = s;
    }
  }
}

template <class T>
void add_row_bias(MatrixView<T> c, std::span<const T> bias) {
  for (int i = 0; i < c.rows; ++i) {
    for (int j = 0; j < c.cols; ++j) {
      c(i, j) += bias[j];
    }
  }
}

template <class T>
void sum_rows_acc(MatrixView<const T> a, std::span<T> out) {
  for (int i = 0; i < a.rows; ++i) {
    for (int j = 0; j < a.cols; ++j) {
      out[j] += a(i, j);
    }
  }
}

template <class T>
void layernorm_forward(MatrixView<const T> x, std::span<const T> gamma, std::span<const T> beta, MatrixView<T> y,
                       std::span<T> mean, std::span<T> rstd) {
  const int n = x.cols;
  for (int i = 0; i < x.rows; ++i) {
    T m = 0;
    for (int j = 0; j < n; ++j) {
      m += x(i, j);
    }
    m /= static_cast<T>(n);
    T var = 0;
    for (int j = 0; j < n; ++j) {
      var += (x(i, j) - m) * (x(i, j) - m);
    }
    var /= static_cast<T>(n);
    const T rs = T{1} / std::sqrt(var + static_cast<T>(1e-5));
    for (int j = 0; j < n; ++j) {
      y(i, j) = (x(i, j) - m) * rs * gamma[j] + beta[j];
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
  for (int i = 0; i < x.rows; ++i) {
    T mean_g = 0;
    T mean_gx = 0;
    for (int j = 0; j < n; ++j) {
      const T xhat = (x(i, j) - mean[i]) * rstd[i];
      mean_g += dy(i, j) * gamma[j];
      mean_gx += dy(i, j) * gamma[j] * xhat;
      if (!dgamma.empty()) {
        dgamma[j] += dy(i, j) * xhat;
      }
      if (!dbeta.empty()) {
        dbeta[j] += dy(i, j);
      }
    }
    mean_g /= static_cast<T>(n);
    mean_gx /= static_cast<T>(n);
    for (int j = 0; j < n; ++j) {
      const T xhat = (x(i, j) - mean[i]) * rstd[i];
      dx(i, j) += rstd[i] * (dy(i, j) * gamma[j] - mean_g - xhat * mean_gx);
    }
  }
}

template <class T>
void gelu_forward(std::span<const T> x, std::span<T> y) {
  const T c = std::sqrt(T{2} / static_cast<T>(M_PI));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    y[i] = T{0.5} * v * (T{1} + std::tanh(c * (v + T{0.044715} * v * v * v)));
  }
}

template <class T>
void gelu_backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx) {
  const T c = std::sqrt(T{2} / static_cast<T>(M_PI));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    const T t = std::tanh(c * (v + T{0.044715} * v * v * v));
    const T dt = (T{1} - t * t) * c * (T{1} + T{3} * T{0.044715} * v * v);
    dx[i] = (T{0.5} * (T{1} + t) + T{0.5} * v * dt) * dy[i];
  }
}

template <class T>
void causal_attention_forward(MatrixView<const T> q, MatrixView<const T> k, MatrixView<const T> v, MatrixView<T> out,
                              std::span<T> probs, std::span<const int> segments, int n_heads) {
  const int hd = q.cols / n_heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));
  const auto offsets = attention_prob_offsets(segments, n_heads);
  for (std::size_t s = 0; s + 1 < segments.size(); ++s) {
    const int base = segments[s];
    const int len = segments[s + 1] - base;
    for (int h = 0; h < n_heads; ++h) {
      T* p = probs.data() + offsets[s] + static_cast<std::size_t>(h) * len * len;
      for (int i = 0; i < len; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < len; ++j) {
          T score = -std::numeric_limits<T>::infinity();
          if (j <= i) {
            score = 0;
            for (int t = 0; t < hd; ++t) {
              score += q(base + i, h * hd + t) * k(base + j, h * hd + t);
            }
            score *= scale;
          }
          p[i * len + j] = score;
          mx = std::max(mx, score);
        }
        T z = 0;
        for (int j = 0; j < len; ++j) {
          p[i * len + j] = j <= i ? std::exp(p[i * len + j] - mx) : T{0};
          z += p[i * len + j];
        }
        for (int j = 0; j < len; ++j) {
          p[i * len + j] /= z;
        }
        for (int t = 0; t < hd; ++t) {
          T acc = 0;
          for (int j = 0; j < len; ++j) {
            acc += p[i * len + j] * v(base + j, h * hd + t);
          }
          out(base + i, h * hd + t) = acc;
        }
      }
    }
  }
}

template <class T>
void causal_attention_backward(MatrixView<const T> q, MatrixView<const T> k, MatrixView<const T> v,
                               std::span<const T> probs, MatrixView<const T> dout, MatrixView<T> dq, MatrixView<T> dk,
                               MatrixView<T> dv, std::span<const int> segments, int n_heads) {
  const int hd = q.cols / n_heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));
  const auto offsets = attention_prob_offsets(segments, n_heads);
  for (int i = 0; i < dq.rows; ++i) {
    for (int j = 0; j < dq.cols; ++j) {
      dq(i, j) = 0;
      dk(i, j) = 0;
      dv(i, j) = 0;
    }
  }
  for (std::size_t s = 0; s + 1 < segments.size(); ++s) {
    const int base = segments[s];
    const int len = segments[s + 1] - base;
    for (int h = 0; h < n_heads; ++h) {
      const T* p = probs.data() + offsets[s] + static_cast<std::size_t>(h) * len * len;
      for (int i = 0; i < len; ++i) {
        std::vector<T> dp(static_cast<std::size_t>(len), T{0});
        for (int j = 0; j < len; ++j) {
          for (int t = 0; t < hd; ++t) {
            dp[j] += dout(base + i, h * hd + t) * v(base + j, h * hd + t);
            dv(base + j, h * hd + t) += p[i * len + j] * dout(base + i, h * hd + t);
          }
        }
        T weighted = 0;
        for (int j = 0; j < len; ++j) {
          weighted += p[i * len + j] * dp[j];
        }
        for (int j = 0; j < len; ++j) {
          const T ds = p[i * len + j] * (dp[j] - weighted) * scale;
          for (int t = 0; t < hd; ++t) {
            dq(base + i, h * hd + t) += ds * k(base + j, h * hd + t);
            dk(base + j, h * hd + t) += ds * q(base + i, h * hd + t);
          }
        }
      }
    }
  }
}

#include "kernel_instances.inc"

RAHF_INSTANTIATE(float)
RAHF_INSTANTIATE(double)

}  // namespace rahf::kernels::serial
