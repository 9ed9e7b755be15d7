#include "picogen/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace picogen::kernels {

namespace {

bool g_parallel = true;

// Below this many multiply-adds the fork/join overhead wins.
constexpr long kParallelCutoff = 1 << 15;

bool use_parallel(long work) {
#ifdef _OPENMP
    return g_parallel && work >= kParallelCutoff;
#else
    (void)work;
    return false;
#endif
}

// Row bodies shared by the serial and parallel paths; a fixed in-row
// accumulation order keeps the two bitwise identical.

inline void mm_nn_row(const double* a, const double* b, double* c, int i, int k, int n) {
    double* ci = c + size_t(i) * n;
    std::memset(ci, 0, sizeof(double) * n);
    const double* ai = a + size_t(i) * k;
    for (int p = 0; p < k; ++p) {
        double av = ai[p];
        const double* bp = b + size_t(p) * n;
        for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
}

inline void mm_nt_row(const double* a, const double* b, double* c, int i, int k, int n) {
    double* ci = c + size_t(i) * n;
    const double* ai = a + size_t(i) * k;
    for (int j = 0; j < n; ++j) {
        const double* bj = b + size_t(j) * k;
        double acc = 0.0;
        for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
        ci[j] = acc;
    }
}

inline void mm_tn_row(const double* a, const double* b, double* c, int i, int m, int k, int n) {
    double* ci = c + size_t(i) * n;
    std::memset(ci, 0, sizeof(double) * n);
    for (int p = 0; p < k; ++p) {
        double av = a[size_t(p) * m + i];
        const double* bp = b + size_t(p) * n;
        for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
}

inline void softmax_row(double* row, int cols) {
    double mx = row[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    double inv = 1.0 / sum;
    for (int j = 0; j < cols; ++j) row[j] *= inv;
}

}  // namespace

void set_parallel(bool enabled) { g_parallel = enabled; }

bool parallel_enabled() {
#ifdef _OPENMP
    return g_parallel;
#else
    return false;
#endif
}

int thread_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n) {
    if (use_parallel(long(m) * k * n)) {
#pragma omp parallel for schedule(static)
        for (int i = 0; i < m; ++i) mm_nn_row(a, b, c, i, k, n);
    } else {
        ref::matmul_nn(a, b, c, m, k, n);
    }
}

void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n) {
    if (use_parallel(long(m) * k * n)) {
#pragma omp parallel for schedule(static)
        for (int i = 0; i < m; ++i) mm_nt_row(a, b, c, i, k, n);
    } else {
        ref::matmul_nt(a, b, c, m, k, n);
    }
}

void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n) {
    if (use_parallel(long(m) * k * n)) {
#pragma omp parallel for schedule(static)
        for (int i = 0; i < m; ++i) mm_tn_row(a, b, c, i, m, k, n);
    } else {
        ref::matmul_tn(a, b, c, m, k, n);
    }
}

void softmax_rows(double* x, int rows, int cols) {
    if (use_parallel(long(rows) * cols * 8)) {
#pragma omp parallel for schedule(static)
        for (int i = 0; i < rows; ++i) softmax_row(x + size_t(i) * cols, cols);
    } else {
        ref::softmax_rows(x, rows, cols);
    }
}

void causal_softmax(double* scores, int n) {
    if (use_parallel(long(n) * n * 4)) {
#pragma omp parallel for schedule(static)
        for (int i = 0; i < n; ++i) {
            double* row = scores + size_t(i) * n;
            softmax_row(row, i + 1);
            std::fill(row + i + 1, row + n, 0.0);  // masked tail must read as 0
        }
    } else {
        ref::causal_softmax(scores, n);
    }
}

namespace ref {

void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) mm_nn_row(a, b, c, i, k, n);
}

void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) mm_nt_row(a, b, c, i, k, n);
}

void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) mm_tn_row(a, b, c, i, m, k, n);
}

void softmax_rows(double* x, int rows, int cols) {
    for (int i = 0; i < rows; ++i) softmax_row(x + size_t(i) * cols, cols);
}

void causal_softmax(double* scores, int n) {
    for (int i = 0; i < n; ++i) {
        double* row = scores + size_t(i) * n;
        softmax_row(row, i + 1);
        std::fill(row + i + 1, row + n, 0.0);
    }
}

}  // namespace ref

}  // namespace picogen::kernels
