#pragma once

// Dense numeric kernels behind the autodiff ops.
//
// Every kernel exists twice: a plain serial loop nest (the reference) and an
// OpenMP version that splits the outer output dimension across threads. Both
// visit the reduction index in the same order for every output element, so
// their results are bitwise identical; the tests rely on that.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>

namespace dtsil::kernels {

enum class Backend { kSerial, kParallel };

void set_backend(Backend backend);
Backend backend();

// e^y - 1 for -40 <= y <= 0. Cody-Waite reduction
// y = k ln2 + r, then a degree-13 Taylor polynomial on |r| <= ln2/2.
inline double expm1_nonpositive(double y) {
  constexpr double kInvLn2 = 1.4426950408889634;
  constexpr double kLn2Hi = 6.93147180369123816490e-01;
  constexpr double kLn2Lo = 1.90821492927058770002e-10;
  constexpr double kRound = 6755399441055744.0;  // 1.5 * 2^52
  const double shifted = y * kInvLn2 + kRound;
  const double k = shifted - kRound;
  const double r = (y - k * kLn2Hi) - k * kLn2Lo;
  double p = 1.0 / 6227020800.0;
  p = p * r + 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r;
  // The low mantissa bits of `shifted` hold k in two's complement.
  std::uint64_t bits;
  std::memcpy(&bits, &shifted, sizeof bits);
  bits = (bits + 1023) << 52;
  double scale;
  std::memcpy(&scale, &bits, sizeof scale);
  return scale * p + (scale - 1.0);
}

// tanh within a few ulp of libm, inlined.
inline double tanh(double x) {
  // tanh(20) rounds to 1.
  const double u = expm1_nonpositive(-2.0 * std::min(std::fabs(x), 20.0));
  return std::copysign(-u / (2.0 + u), x);
}

// Row-major shapes throughout. When `accumulate` is false the output is
// overwritten, otherwise the product is added to it.

// c[m,n] = a[m,k] * b[k,n]
void matmul(std::span<const double> a, std::span<const double> b,
            std::span<double> c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate = false);

// c[k,n] = a[m,k]^T * b[m,n]
void matmul_tn(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate = false);

// c[m,k] = a[m,n] * b[k,n]^T
void matmul_nt(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t n,
               std::size_t k, bool accumulate = false);

// Additive attention scores:
//   scores[t,i] = sum_a v[a] * tanh(q[t,a] + keys[i,a])
// `act` receives the tanh activations (t-major, then i, then a) when non-empty;
// the backward pass reads them back.
void additive_scores(std::span<const double> q, std::span<const double> keys,
                     std::span<const double> v, std::span<double> scores,
                     std::span<double> act, std::size_t t_rows,
                     std::size_t l_rows, std::size_t dim);

// Accumulates gradients of additive_scores given d(loss)/d(scores). Any of the
// gradient spans may be empty to skip that input.
void additive_scores_backward(std::span<const double> d_scores,
                              std::span<const double> act,
                              std::span<const double> v,
                              std::span<double> d_q, std::span<double> d_keys,
                              std::span<double> d_v, std::size_t t_rows,
                              std::size_t l_rows, std::size_t dim);

namespace serial {
void matmul(std::span<const double> a, std::span<const double> b,
            std::span<double> c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate);
void matmul_tn(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate);
void matmul_nt(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t n,
               std::size_t k, bool accumulate);
void additive_scores(std::span<const double> q, std::span<const double> keys,
                     std::span<const double> v, std::span<double> scores,
                     std::span<double> act, std::size_t t_rows,
                     std::size_t l_rows, std::size_t dim);
void additive_scores_backward(std::span<const double> d_scores,
                              std::span<const double> act,
                              std::span<const double> v,
                              std::span<double> d_q, std::span<double> d_keys,
                              std::span<double> d_v, std::size_t t_rows,
                              std::size_t l_rows, std::size_t dim);
}  // namespace serial

namespace parallel {
void matmul(std::span<const double> a, std::span<const double> b,
            std::span<double> c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate);
void matmul_tn(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate);
void matmul_nt(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t n,
               std::size_t k, bool accumulate);
void additive_scores(std::span<const double> q, std::span<const double> keys,
                     std::span<const double> v, std::span<double> scores,
                     std::span<double> act, std::size_t t_rows,
                     std::size_t l_rows, std::size_t dim);
void additive_scores_backward(std::span<const double> d_scores,
                              std::span<const double> act,
                              std::span<const double> v,
                              std::span<double> d_q, std::span<double> d_keys,
                              std::span<double> d_v, std::size_t t_rows,
                              std::size_t l_rows, std::size_t dim);
}  // namespace parallel

}  // namespace dtsil::kernels
