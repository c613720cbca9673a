#pragma once

#include <cstdint>

// Dense kernels shared by the tape and the inference-mode LSTM. The OpenMP
// versions in kern:: parallelize over output rows only; every output element
// is written by exactly one thread and accumulated in a fixed k-order, so
// results are bit-identical to the kern::serial:: twins at any thread count.

namespace optlens::kern {

// c[m x n] = a[m x k] * b[k x n], row-major
void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

// c[m x n] = a^T * b with a stored [k x m]
void matmul_at(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

// c[m x n] = a * b^T with b stored [n x k]
void matmul_bt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

namespace serial {
void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void matmul_at(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void matmul_bt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
}  // namespace serial

}  // namespace optlens::kern
