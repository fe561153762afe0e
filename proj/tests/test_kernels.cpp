#include <random>
#include <tuple>
#include <vector>

#include "doctest.h"
#include "rahf/kernels.hpp"

using namespace rahf;

namespace {

template <class T>
std::vector<T> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(u(rng));
  return v;
}

template <class T>
void check_close(const std::vector<T>& a, const std::vector<T>& b, double tol) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double den = std::max(1.0, std::abs(static_cast<double>(b[i])));
    REQUIRE(std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])) / den <= tol);
  }
}

template <class T>
void matmul_family(int m, int k, int n, double tol) {
  const auto a = random_vec<T>(static_cast<std::size_t>(m) * k, 1);
  const auto b = random_vec<T>(static_cast<std::size_t>(k) * n, 2);
  const auto bt = random_vec<T>(static_cast<std::size_t>(n) * k, 3);
  const auto at = random_vec<T>(static_cast<std::size_t>(k) * m, 4);
  for (bool acc : {false, true}) {
    auto c1 = random_vec<T>(static_cast<std::size_t>(m) * n, 5);
    auto c2 = c1;
    kernels::matmul<T>(as_matrix(a, m, k), as_matrix(b, k, n), as_matrix(c1, m, n), acc);
    kernels::serial::matmul<T>(as_matrix(a, m, k), as_matrix(b, k, n), as_matrix(c2, m, n), acc);
    check_close(c1, c2, tol);

    c1 = random_vec<T>(static_cast<std::size_t>(m) * n, 6);
    c2 = c1;
    kernels::matmul_bt<T>(as_matrix(a, m, k), as_matrix(bt, n, k), as_matrix(c1, m, n), acc);
    kernels::serial::matmul_bt<T>(as_matrix(a, m, k), as_matrix(bt, n, k), as_matrix(c2, m, n), acc);
    check_close(c1, c2, tol);

    c1 = random_vec<T>(static_cast<std::size_t>(m) * n, 7);
    c2 = c1;
    kernels::matmul_at<T>(as_matrix(at, k, m), as_matrix(b, k, n), as_matrix(c1, m, n), acc);
    kernels::serial::matmul_at<T>(as_matrix(at, k, m), as_matrix(b, k, n), as_matrix(c2, m, n), acc);
    check_close(c1, c2, tol);
  }
}

}  // namespace

TEST_CASE("matmul variants agree with the serial reference") {
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, std::tuple{4, 8, 64}, std::tuple{7, 13, 70}, std::tuple{33, 128, 384},
                         std::tuple{5, 3, 130}}) {
    CAPTURE(m);
    CAPTURE(k);
    CAPTURE(n);
    matmul_family<float>(m, k, n, 1e-5);
    matmul_family<double>(m, k, n, 1e-12);
  }
}

TEST_CASE("matmul row results do not depend on the rows packed around them") {
  const int k = 24;
  const int n = 70;
  const auto a = random_vec<float>(9 * k, 11);
  const auto b = random_vec<float>(static_cast<std::size_t>(k) * n, 12);
  std::vector<float> full(9 * n);
  kernels::matmul<float>(as_matrix(a, 9, k), as_matrix(b, k, n), as_matrix(full, 9, n));
  for (int r = 0; r < 9; ++r) {
    std::vector<float> one(n);
    kernels::matmul<float>(MatrixView<const float>{a.data() + r * k, 1, k, k}, as_matrix(b, k, n),
                           as_matrix(one, 1, n));
    for (int j = 0; j < n; ++j) {
      REQUIRE(one[j] == full[r * n + j]);
    }
  }
}

TEST_CASE("strided column views") {
  const int m = 6;
  const int k = 5;
  const auto a = random_vec<double>(m * 3 * k, 21);
  const auto b = random_vec<double>(k * 4, 22);
  MatrixView<const double> wide{a.data(), m, 3 * k, 3 * k};
  std::vector<double> c1(m * 4);
  std::vector<double> c2(m * 4);
  kernels::matmul<double>(wide.columns(k, k), as_matrix(b, k, 4), as_matrix(c1, m, 4));
  kernels::serial::matmul<double>(wide.columns(k, k), as_matrix(b, k, 4), as_matrix(c2, m, 4));
  check_close(c1, c2, 1e-13);
}

TEST_CASE("row-wise kernels agree with the serial reference") {
  const int m = 11;
  const int n = 37;
  const auto x = random_vec<double>(m * n, 31);
  const auto g = random_vec<double>(n, 32);
  const auto be = random_vec<double>(n, 33);
  const auto dy = random_vec<double>(m * n, 34);

  std::vector<double> y1(m * n), y2(m * n), mu1(m), mu2(m), rs1(m), rs2(m);
  kernels::layernorm_forward<double>(as_matrix(x, m, n), g, be, as_matrix(y1, m, n), mu1, rs1);
  kernels::serial::layernorm_forward<double>(as_matrix(x, m, n), g, be, as_matrix(y2, m, n), mu2, rs2);
  check_close(y1, y2, 1e-13);

  std::vector<double> dx1(m * n, 0.5), dx2(m * n, 0.5), dg1(n, 0), dg2(n, 0), db1(n, 0), db2(n, 0);
  kernels::layernorm_backward<double>(as_matrix(dy, m, n), as_matrix(x, m, n), g, mu1, rs1, as_matrix(dx1, m, n), dg1,
                                      db1);
  kernels::serial::layernorm_backward<double>(as_matrix(dy, m, n), as_matrix(x, m, n), g, mu2, rs2,
                                              as_matrix(dx2, m, n), dg2, db2);
  check_close(dx1, dx2, 1e-12);
  check_close(dg1, dg2, 1e-12);
  check_close(db1, db2, 1e-12);

  std::vector<double> h1(m * n), h2(m * n);
  kernels::gelu_forward<double>(x, h1);
  kernels::serial::gelu_forward<double>(x, h2);
  check_close(h1, h2, 1e-14);
  kernels::gelu_backward<double>(x, dy, h1);
  kernels::serial::gelu_backward<double>(x, dy, h2);
  check_close(h1, h2, 1e-14);

  auto c1 = x;
  auto c2 = x;
  kernels::add_row_bias<double>(as_matrix(c1, m, n), g);
  kernels::serial::add_row_bias<double>(as_matrix(c2, m, n), g);
  check_close(c1, c2, 0);
  std::vector<double> s1(n, 1.0), s2(n, 1.0);
  kernels::sum_rows_acc<double>(as_matrix(x, m, n), s1);
  kernels::serial::sum_rows_acc<double>(as_matrix(x, m, n), s2);
  check_close(s1, s2, 1e-13);
}

TEST_CASE("float gelu agrees with the serial reference") {
  const auto x = random_vec<float>(3000, 45);
  std::vector<float> big(x);
  for (auto& v : big) v *= 12.0f;
  for (const std::vector<float>* in : {&x, static_cast<const std::vector<float>*>(&big)}) {
    std::vector<float> dy(in->size(), 0.75f), y1(in->size()), y2(in->size());
    kernels::gelu_forward<float>(*in, y1);
    kernels::serial::gelu_forward<float>(*in, y2);
    check_close(y1, y2, 1e-5);
    kernels::gelu_backward<float>(*in, dy, y1);
    kernels::serial::gelu_backward<float>(*in, dy, y2);
    check_close(y1, y2, 1e-5);
  }
}

TEST_CASE("gelu backward matches a central difference") {
  const auto x = random_vec<double>(50, 41);
  std::vector<double> ones(50, 1.0), dx(50), yp(50), ym(50);
  kernels::gelu_backward<double>(x, ones, dx);
  const double h = 1e-6;
  auto xp = x;
  auto xm = x;
  for (auto& v : xp) v += h;
  for (auto& v : xm) v -= h;
  kernels::gelu_forward<double>(xp, yp);
  kernels::gelu_forward<double>(xm, ym);
  for (int i = 0; i < 50; ++i) {
    CHECK(dx[i] == doctest::Approx((yp[i] - ym[i]) / (2 * h)).epsilon(1e-7));
  }
}

TEST_CASE("segmented causal attention agrees with the serial reference") {
  const std::vector<int> seg = {0, 3, 10, 11, 30};
  const int rows = seg.back();
  const int d = 16;
  const int heads = 4;
  const auto q = random_vec<double>(rows * d, 51);
  const auto k = random_vec<double>(rows * d, 52);
  const auto v = random_vec<double>(rows * d, 53);
  const auto dout = random_vec<double>(rows * d, 54);
  const auto offsets = attention_prob_offsets(seg, heads);
  std::vector<double> o1(rows * d), o2(rows * d), p1(offsets.back()), p2(offsets.back());
  kernels::causal_attention_forward<double>(as_matrix(q, rows, d), as_matrix(k, rows, d), as_matrix(v, rows, d),
                                            as_matrix(o1, rows, d), p1, seg, heads);
  kernels::serial::causal_attention_forward<double>(as_matrix(q, rows, d), as_matrix(k, rows, d),
                                                    as_matrix(v, rows, d), as_matrix(o2, rows, d), p2, seg, heads);
  check_close(o1, o2, 1e-13);
  check_close(p1, p2, 1e-13);

  std::vector<double> dq1(rows * d), dk1(rows * d), dv1(rows * d), dq2(rows * d), dk2(rows * d), dv2(rows * d);
  kernels::causal_attention_backward<double>(as_matrix(q, rows, d), as_matrix(k, rows, d), as_matrix(v, rows, d), p1,
                                             as_matrix(dout, rows, d), as_matrix(dq1, rows, d),
                                             as_matrix(dk1, rows, d), as_matrix(dv1, rows, d), seg, heads);
  kernels::serial::causal_attention_backward<double>(
      as_matrix(q, rows, d), as_matrix(k, rows, d), as_matrix(v, rows, d), p2, as_matrix(dout, rows, d),
      as_matrix(dq2, rows, d), as_matrix(dk2, rows, d), as_matrix(dv2, rows, d), seg, heads);
  check_close(dq1, dq2, 1e-12);
  check_close(dk1, dk2, 1e-12);
  check_close(dv1, dv2, 1e-12);
}

TEST_CASE("attention output of a segment ignores other segments") {
  const int d = 8;
  const auto q = random_vec<double>(7 * d, 61);
  const auto k = random_vec<double>(7 * d, 62);
  auto v = random_vec<double>(7 * d, 63);
  const std::vector<int> seg = {0, 4, 7};
  const auto offsets = attention_prob_offsets(seg, 2);
  std::vector<double> o1(7 * d), o2(7 * d), p(offsets.back());
  kernels::causal_attention_forward<double>(as_matrix(q, 7, d), as_matrix(k, 7, d), as_matrix(v, 7, d),
                                            as_matrix(o1, 7, d), p, seg, 2);
  for (int j = 0; j < d; ++j) {
    v[5 * d + j] += 3.0;  // second segment, second row
  }
  kernels::causal_attention_forward<double>(as_matrix(q, 7, d), as_matrix(k, 7, d), as_matrix(v, 7, d),
                                            as_matrix(o2, 7, d), p, seg, 2);
  for (int i = 0; i < 4 * d; ++i) {
    CHECK(o1[i] == o2[i]);
  }
  for (int j = 0; j < d; ++j) {
    CHECK(o1[4 * d + j] == o2[4 * d + j]);  // row before the perturbed one
  }
}
