#pragma once

#include <cstddef>

// Dense inner-loop kernels. The default entry points are OpenMP-parallel over
// output rows; every output element is accumulated in the same order as the
// serial reference, so results do not depend on the thread count.
//
// All matrices are row-major. `accumulate` adds into C instead of overwriting.

namespace stiffnode::kernels {

/// C(m x n) = A(m x k) * B(k x n)
void matmul_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate);
/// C(m x n) = A(m x k) * B(n x k)^T
void matmul_nt(std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate);
/// C(m x n) = A(k x m)^T * B(k x n)
void matmul_tn(std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate);

void tanh_forward(std::size_t count, const double* x, double* y);
/// gx += gy * (1 - y^2)
void tanh_backward(std::size_t count, const double* y, const double* gy, double* gx);

/// y[i] = x[i] + bias[row(i)] for an (rows x cols) block.
void add_column_broadcast(std::size_t rows, std::size_t cols, const double* x,
                          const double* bias, double* y);

/// Number of OpenMP threads the parallel kernels may use (1 without OpenMP).
int max_threads();
void set_threads(int threads);

namespace reference {

// Serial versions kept as the correctness baseline for the parallel kernels.
void matmul_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate);
void matmul_nt(std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate);
void matmul_tn(std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate);
void tanh_forward(std::size_t count, const double* x, double* y);

}  // namespace reference

}  // namespace stiffnode::kernels
