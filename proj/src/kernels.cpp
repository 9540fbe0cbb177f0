#include "dtsil/kernels.hpp"

#include <atomic>
#include <cmath>

namespace dtsil::kernels {
namespace {

std::atomic<Backend> g_backend{Backend::kParallel};

// Minimum multiply-add count for opening a parallel region.
constexpr std::size_t kParallelWork = 1 << 15;

}  // namespace

void set_backend(Backend b) { g_backend.store(b); }
Backend backend() { return g_backend.load(); }

namespace serial {

void matmul(std::span<const double> a, std::span<const double> b,
            std::span<double> c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    if (!accumulate) {
      for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
    }
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* bp = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void matmul_tn(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate) {
  for (std::size_t p = 0; p < k; ++p) {
    double* cp = c.data() + p * n;
    if (!accumulate) {
      for (std::size_t j = 0; j < n; ++j) cp[j] = 0.0;
    }
    for (std::size_t i = 0; i < m; ++i) {
      const double aip = a[i * k + p];
      const double* bi = b.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

void matmul_nt(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t n,
               std::size_t k, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b.data() + p * n;
      double s = accumulate ? c[i * k + p] : 0.0;
      for (std::size_t j = 0; j < n; ++j) s += ai[j] * bp[j];
      c[i * k + p] = s;
    }
  }
}

void additive_scores(std::span<const double> q, std::span<const double> keys,
                     std::span<const double> v, std::span<double> scores,
                     std::span<double> act, std::size_t t_rows,
                     std::size_t l_rows, std::size_t dim) {
  const bool keep = !act.empty();
  for (std::size_t t = 0; t < t_rows; ++t) {
    const double* qt = q.data() + t * dim;
    for (std::size_t i = 0; i < l_rows; ++i) {
      const double* ki = keys.data() + i * dim;
      double* out = keep ? act.data() + (t * l_rows + i) * dim : nullptr;
      double s = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        const double x = kernels::tanh(qt[d] + ki[d]);
        if (keep) out[d] = x;
        s += v[d] * x;
      }
      scores[t * l_rows + i] = s;
    }
  }
}

void additive_scores_backward(std::span<const double> d_scores,
                              std::span<const double> act,
                              std::span<const double> v,
                              std::span<double> d_q, std::span<double> d_keys,
                              std::span<double> d_v, std::size_t t_rows,
                              std::size_t l_rows, std::size_t dim) {
  if (!d_q.empty()) {
    for (std::size_t t = 0; t < t_rows; ++t) {
      double* dq = d_q.data() + t * dim;
      for (std::size_t i = 0; i < l_rows; ++i) {
        const double g = d_scores[t * l_rows + i];
        const double* x = act.data() + (t * l_rows + i) * dim;
        for (std::size_t d = 0; d < dim; ++d)
          dq[d] += g * v[d] * (1.0 - x[d] * x[d]);
      }
    }
  }
  if (!d_keys.empty()) {
    for (std::size_t i = 0; i < l_rows; ++i) {
      double* dk = d_keys.data() + i * dim;
      for (std::size_t t = 0; t < t_rows; ++t) {
        const double g = d_scores[t * l_rows + i];
        const double* x = act.data() + (t * l_rows + i) * dim;
        for (std::size_t d = 0; d < dim; ++d)
          dk[d] += g * v[d] * (1.0 - x[d] * x[d]);
      }
    }
  }
  if (!d_v.empty()) {
    for (std::size_t t = 0; t < t_rows; ++t) {
      for (std::size_t i = 0; i < l_rows; ++i) {
        const double g = d_scores[t * l_rows + i];
        const double* x = act.data() + (t * l_rows + i) * dim;
        for (std::size_t d = 0; d < dim; ++d) d_v[d] += g * x[d];
      }
    }
  }
}

}  // namespace serial

namespace parallel {

void matmul(std::span<const double> a, std::span<const double> b,
            std::span<double> c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate) {
  const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork)
  for (long ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* ci = c.data() + i * n;
    if (!accumulate) {
      for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
    }
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* bp = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void matmul_tn(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate) {
  const long cols = static_cast<long>(k);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork)
  for (long pp = 0; pp < cols; ++pp) {
    const auto p = static_cast<std::size_t>(pp);
    double* cp = c.data() + p * n;
    if (!accumulate) {
      for (std::size_t j = 0; j < n; ++j) cp[j] = 0.0;
    }
    for (std::size_t i = 0; i < m; ++i) {
      const double aip = a[i * k + p];
      const double* bi = b.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

void matmul_nt(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t n,
               std::size_t k, bool accumulate) {
  const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork)
  for (long ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const double* ai = a.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b.data() + p * n;
      double s = accumulate ? c[i * k + p] : 0.0;
      for (std::size_t j = 0; j < n; ++j) s += ai[j] * bp[j];
      c[i * k + p] = s;
    }
  }
}

void additive_scores(std::span<const double> q, std::span<const double> keys,
                     std::span<const double> v, std::span<double> scores,
                     std::span<double> act, std::size_t t_rows,
                     std::size_t l_rows, std::size_t dim) {
  const bool keep = !act.empty();
  const long rows = static_cast<long>(t_rows);
#pragma omp parallel for schedule(static) if (t_rows * l_rows * dim >= kParallelWork)
  for (long tt = 0; tt < rows; ++tt) {
    const auto t = static_cast<std::size_t>(tt);
    const double* qt = q.data() + t * dim;
    for (std::size_t i = 0; i < l_rows; ++i) {
      const double* ki = keys.data() + i * dim;
      double* out = keep ? act.data() + (t * l_rows + i) * dim : nullptr;
      double s = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        const double x = kernels::tanh(qt[d] + ki[d]);
        if (keep) out[d] = x;
        s += v[d] * x;
      }
      scores[t * l_rows + i] = s;
    }
  }
}

void additive_scores_backward(std::span<const double> d_scores,
                              std::span<const double> act,
                              std::span<const double> v,
                              std::span<double> d_q, std::span<double> d_keys,
                              std::span<double> d_v, std::size_t t_rows,
                              std::size_t l_rows, std::size_t dim) {
  const bool big = t_rows * l_rows * dim >= kParallelWork;
  if (!d_q.empty()) {
    const long rows = static_cast<long>(t_rows);
#pragma omp parallel for schedule(static) if (big)
    for (long tt = 0; tt < rows; ++tt) {
      const auto t = static_cast<std::size_t>(tt);
      double* dq = d_q.data() + t * dim;
      for (std::size_t i = 0; i < l_rows; ++i) {
        const double g = d_scores[t * l_rows + i];
        const double* x = act.data() + (t * l_rows + i) * dim;
        for (std::size_t d = 0; d < dim; ++d)
          dq[d] += g * v[d] * (1.0 - x[d] * x[d]);
      }
    }
  }
  if (!d_keys.empty()) {
    const long rows = static_cast<long>(l_rows);
#pragma omp parallel for schedule(static) if (big)
    for (long ii = 0; ii < rows; ++ii) {
      const auto i = static_cast<std::size_t>(ii);
      double* dk = d_keys.data() + i * dim;
      for (std::size_t t = 0; t < t_rows; ++t) {
        const double g = d_scores[t * l_rows + i];
        const double* x = act.data() + (t * l_rows + i) * dim;
        for (std::size_t d = 0; d < dim; ++d)
          dk[d] += g * v[d] * (1.0 - x[d] * x[d]);
      }
    }
  }
  // d_v reduces over both t and i and is accumulated serially.
  if (!d_v.empty()) {
    for (std::size_t t = 0; t < t_rows; ++t) {
      for (std::size_t i = 0; i < l_rows; ++i) {
        const double g = d_scores[t * l_rows + i];
        const double* x = act.data() + (t * l_rows + i) * dim;
        for (std::size_t d = 0; d < dim; ++d) d_v[d] += g * x[d];
      }
    }
  }
}

}  // namespace parallel

void matmul(std::span<const double> a, std::span<const double> b,
            std::span<double> c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate) {
  if (backend() == Backend::kSerial)
    serial::matmul(a, b, c, m, k, n, accumulate);
  else
    parallel::matmul(a, b, c, m, k, n, accumulate);
}

void matmul_tn(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate) {
  if (backend() == Backend::kSerial)
    serial::matmul_tn(a, b, c, m, k, n, accumulate);
  else
    parallel::matmul_tn(a, b, c, m, k, n, accumulate);
}

void matmul_nt(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t n,
               std::size_t k, bool accumulate) {
  if (backend() == Backend::kSerial)
    serial::matmul_nt(a, b, c, m, n, k, accumulate);
  else
    parallel::matmul_nt(a, b, c, m, n, k, accumulate);
}

void additive_scores(std::span<const double> q, std::span<const double> keys,
                     std::span<const double> v, std::span<double> scores,
                     std::span<double> act, std::size_t t_rows,
                     std::size_t l_rows, std::size_t dim) {
  if (backend() == Backend::kSerial)
    serial::additive_scores(q, keys, v, scores, act, t_rows, l_rows, dim);
  else
    parallel::additive_scores(q, keys, v, scores, act, t_rows, l_rows, dim);
}

void additive_scores_backward(std::span<const double> d_scores,
                              std::span<const double> act,
                              std::span<const double> v,
                              std::span<double> d_q, std::span<double> d_keys,
                              std::span<double> d_v, std::size_t t_rows,
                              std::size_t l_rows, std::size_t dim) {
  if (backend() == Backend::kSerial)
    serial::additive_scores_backward(d_scores, act, v, d_q, d_keys, d_v,
                                     t_rows, l_rows, dim);
  else
    parallel::additive_scores_backward(d_scores, act, v, d_q, d_keys, d_v,
                                       t_rows, l_rows, dim);
}

}  // namespace dtsil::kernels
