#pragma once

#include <cstddef>
#include <span>
#include <type_traits>
#include <vector>

namespace rahf {

/// Non-owning row-major matrix view with an explicit row stride, so column
/// slices of a wider buffer (e.g. the q/k/v thirds of a fused projection) can
/// be passed to kernels without copying.
template <class T>
struct MatrixView {
  T* data = nullptr;
  int rows = 0;
  int cols = 0;
  std::ptrdiff_t stride = 0;

  T* row(int r) const { return data + static_cast<std::ptrdiff_t>(r) * stride; }
  T& operator()(int r, int c) const { return row(r)[c]; }

  MatrixView<T> columns(int first, int count) const { return {data + first, rows, count, stride}; }
  MatrixView<T> rows_range(int first, int count) const { return {row(first), count, cols, stride}; }

  operator MatrixView<const T>() const
    requires(!std::is_const_v<T>)
  {
    return {data, rows, cols, stride};
  }
};

template <class T>
MatrixView<T> as_matrix(std::span<T> s, int rows, int cols) {
  return {s.data(), rows, cols, cols};
}

template <class T>
MatrixView<const T> as_matrix(std::span<const T> s, int rows, int cols) {
  return {s.data(), rows, cols, cols};
}

template <class T>
MatrixView<T> as_matrix(std::vector<T>& s, int rows, int cols) {
  return {s.data(), rows, cols, cols};
}

template <class T>
MatrixView<const T> as_matrix(const std::vector<T>& s, int rows, int cols) {
  return {s.data(), rows, cols, cols};
}

/// Offsets into the attention-probability scratch buffer: one [len x len]
/// block per (segment, head). `segments` holds packed row offsets (size n+1).
std::vector<std::size_t> attention_prob_offsets(std::span<const int> segments, int n_heads);

// Every kernel below exists twice: an OpenMP version in rahf::kernels and a
// plain-loop reference in rahf::kernels::serial. In the parallel versions each
// output element is owned by one thread and accumulated in a fixed order, so
// results are bitwise independent of the thread count.
#define RAHF_KERNEL_DECLS                                                                               \
  /* c = a[m,k] * b[k,n] (+ c if accumulate) */                                                         \
  template <class T>                                                                                    \
  void matmul(MatrixView<const T> a, MatrixView<const T> b, MatrixView<T> c, bool accumulate = false);  \
  /* c = a[m,n] * b[k,n]^T */                                                                           \
  template <class T>                                                                                    \
  void matmul_bt(MatrixView<const T> a, MatrixView<const T> b, MatrixView<T> c, bool accumulate = false); \
  /* c = a[m,k]^T * b[m,n] */                                                                           \
  template <class T>                                                                                    \
  void matmul_at(MatrixView<const T> a, MatrixView<const T> b, MatrixView<T> c, bool accumulate = false); \
  template <class T>                                                                                    \
  void add_row_bias(MatrixView<T> c, std::span<const T> bias);                                          \
  /* out[j] += sum_i a[i,j] */                                                                          \
  template <class T>                                                                                    \
  void sum_rows_acc(MatrixView<const T> a, std::span<T> out);                                           \
  template <class T>                                                                                    \
  void layernorm_forward(MatrixView<const T> x, std::span<const T> gamma, std::span<const T> beta,       \
                         MatrixView<T> y, std::span<T> mean, std::span<T> rstd);                        \
  /* dx += d/dx; dgamma/dbeta accumulated when non-empty */                                             \
  template <class T>                                                                                    \
  void layernorm_backward(MatrixView<const T> dy, MatrixView<const T> x, std::span<const T> gamma,       \
                          std::span<const T> mean, std::span<const T> rstd, MatrixView<T> dx,           \
                          std::span<T> dgamma, std::span<T> dbeta);                                     \
  template <class T>                                                                                    \
  void gelu_forward(std::span<const T> x, std::span<T> y);                                              \
  /* dx = gelu'(x) * dy */                                                                              \
  template <class T>                                                                                    \
  void gelu_backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx);                     \
  /* causal softmax attention within each packed segment; probs sized by attention_prob_offsets */      \
  template <class T>                                                                                    \
  void causal_attention_forward(MatrixView<const T> q, MatrixView<const T> k, MatrixView<const T> v,    \
                                MatrixView<T> out, std::span<T> probs, std::span<const int> segments,   \
                                int n_heads);                                                           \
  /* dq, dk, dv are overwritten */                                                                      \
  template <class T>                                                                                    \
  void causal_attention_backward(MatrixView<const T> q, MatrixView<const T> k, MatrixView<const T> v,   \
                                 std::span<const T> probs, MatrixView<const T> dout, MatrixView<T> dq,  \
                                 MatrixView<T> dk, MatrixView<T> dv, std::span<const int> segments,     \
                                 int n_heads);

namespace kernels {
RAHF_KERNEL_DECLS

/// Threads used by the parallel kernels (OpenMP max threads).
int thread_count();
void set_thread_count(int n);
}  // namespace kernels

namespace kernels::serial {
RAHF_KERNEL_DECLS
}  // namespace kernels::serial

#undef RAHF_KERNEL_DECLS

}  // namespace rahf
