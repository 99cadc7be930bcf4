#pragma once

#include <cstdint>

namespace plr::kern {

using i64 = std::int64_t;

// OpenMP-parallel float kernels. Every output element is produced by exactly
// one thread with a fixed inner summation order, so results are bitwise
// identical for any thread count.

// C = A[m,k] * B[k,n]          (accumulate: C += ...)
void gemm_nn(const float* a, const float* b, float* c, i64 m, i64 k, i64 n,
             bool accumulate);
// C = A[m,k] * B[n,k]^T
void gemm_nt(const float* a, const float* b, float* c, i64 m, i64 k, i64 n,
             bool accumulate);
// C = A[k,m]^T * B[k,n]
void gemm_tn(const float* a, const float* b, float* c, i64 m, i64 k, i64 n,
             bool accumulate);

// grouped (batched) variants; a: [g,m,k], c: [g,m,n]
void bmm_nn(const float* a, const float* b, float* c, i64 g, i64 m, i64 k,
            i64 n, bool accumulate);
void bmm_nt(const float* a, const float* b, float* c, i64 g, i64 m, i64 k,
            i64 n, bool accumulate);

// rows of [rows, cols]; numerically stabilized by max subtraction
void softmax_rows(const float* x, float* y, i64 rows, i64 cols);
// dx += softmax backward given y = softmax(x) and dy
void softmax_rows_backward(const float* y, const float* dy, float* dx,
                           i64 rows, i64 cols);

void gelu_forward(const float* x, float* y, i64 n);
void gelu_backward(const float* x, const float* dy, float* dx, i64 n);

// non-affine layer norm over the last dimension
void layer_norm_rows(const float* x, float* y, i64 rows, i64 cols, float eps);
void layer_norm_rows_backward(const float* x, const float* dy, float* dx,
                              i64 rows, i64 cols, float eps);

int max_threads();

}  // namespace plr::kern
