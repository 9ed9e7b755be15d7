#pragma once

#include <cstddef>

// Dense kernels behind the Performer. Every public kernel parallelizes over
// independent output rows only, so results are bitwise identical to the
// serial reference in kernels::ref regardless of thread count.

namespace picogen::kernels {

void set_parallel(bool enabled);
bool parallel_enabled();
int thread_count();

// C(m x n) = A(m x k) * B(k x n), row major. C is overwritten.
void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n);
// C(m x n) = A(m x k) * B(n x k)^T
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n);
// C(m x n) = A(k x m)^T * B(k x n)
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n);

// Row-wise softmax over the first `cols` entries of each row.
void softmax_rows(double* x, int rows, int cols);
// In-place causal softmax of an n x n score matrix: row i spans columns 0..i.
void causal_softmax(double* scores, int n);

namespace ref {
void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n);
void softmax_rows(double* x, int rows, int cols);
void causal_softmax(double* scores, int n);
}  // namespace ref

}  // namespace picogen::kernels
