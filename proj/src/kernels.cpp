#include "stiffnode/kernels.hpp"

#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace stiffnode::kernels {

namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelWork = 1u << 16;

bool go_parallel(std::size_t work) {
#ifdef _OPENMP
  return work >= kParallelWork && !omp_in_parallel() && omp_get_max_threads() > 1;
#else
  (void)work;
  return false;
#endif
}

inline void row_nn(std::size_t i, std::size_t n, std::size_t k, const double* a,
                   const double* b, double* c, bool accumulate) {
  double* ci = c + i * n;
  if (!accumulate) {
    for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
  }
  const double* ai = a + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const double av = ai[p];
    const double* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
  }
}

inline void row_nt(std::size_t i, std::size_t n, std::size_t k, const double* a,
                   const double* b, double* c, bool accumulate) {
  const double* ai = a + i * k;
  double* ci = c + i * n;
  for (std::size_t j = 0; j < n; ++j) {
    const double* bj = b + j * k;
    double s = 0.0;
    for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
    ci[j] = accumulate ? ci[j] + s : s;
  }
}

inline void row_tn(std::size_t i, std::size_t m, std::size_t n, std::size_t k,
                   const double* a, const double* b, double* c, bool accumulate) {
  double* ci = c + i * n;
  if (!accumulate) {
    for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
  }
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a[p * m + i];
    const double* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
  }
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int threads) {
#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#else
  (void)threads;
#endif
}

void matmul_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
  if (go_parallel(m * n * k)) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < rows; ++i) row_nn(i, n, k, a, b, c, accumulate);
  } else {
    for (std::size_t i = 0; i < m; ++i) row_nn(i, n, k, a, b, c, accumulate);
  }
}

void matmul_nt(std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
  if (go_parallel(m * n * k)) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < rows; ++i) row_nt(i, n, k, a, b, c, accumulate);
  } else {
    for (std::size_t i = 0; i < m; ++i) row_nt(i, n, k, a, b, c, accumulate);
  }
}

void matmul_tn(std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
  if (go_parallel(m * n * k)) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < rows; ++i) row_tn(i, m, n, k, a, b, c, accumulate);
  } else {
    for (std::size_t i = 0; i < m; ++i) row_tn(i, m, n, k, a, b, c, accumulate);
  }
}

void tanh_forward(std::size_t count, const double* x, double* y) {
  const auto n = static_cast<std::ptrdiff_t>(count);
  if (go_parallel(count * 16)) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
  } else {
    for (std::ptrdiff_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
  }
}

void tanh_backward(std::size_t count, const double* y, const double* gy, double* gx) {
  for (std::size_t i = 0; i < count; ++i) gx[i] += gy[i] * (1.0 - y[i] * y[i]);
}

void add_column_broadcast(std::size_t rows, std::size_t cols, const double* x,
                          const double* bias, double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double bv = bias[r];
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = x[r * cols + c] + bv;
  }
}

namespace reference {

void matmul_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

void matmul_nt(std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

void matmul_tn(std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[p * n + j];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

void tanh_forward(std::size_t count, const double* x, double* y) {
  for (std::size_t i = 0; i < count; ++i) y[i] = std::tanh(x[i]);
}

}  // namespace reference

}  // namespace stiffnode::kernels
