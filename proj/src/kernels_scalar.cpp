#include "callosum/kernels.hpp"

#include <cstring>

// Scalar reference kernels. These are the semantics the SIMD variants are
// tested against; keep them simple and obviously correct.

namespace callosum::kernels::scalar {

namespace {

template <typename T>
void gemm_nn_impl(const T* a, const T* b, T* c, int m, int n, int k, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<size_t>(i) * n;
        if (!accumulate) {
            for (int j = 0; j < n; ++j) crow[j] = T(0);
        }
        const T* arow = a + static_cast<size_t>(i) * k;
        for (int l = 0; l < k; ++l) {
            T av = arow[l];
            const T* brow = b + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void gemm_nt_impl(const T* a, const T* b, T* c, int m, int n, int k, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<size_t>(i) * k;
        T* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* brow = b + static_cast<size_t>(j) * k;
            T acc = T(0);
            for (int l = 0; l < k; ++l) acc += arow[l] * brow[l];
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

template <typename T>
void gemm_tn_impl(const T* a, const T* b, T* c, int m, int n, int k, bool accumulate) {
    if (!accumulate) {
        std::memset(c, 0, sizeof(T) * static_cast<size_t>(m) * n);
    }
    for (int l = 0; l < k; ++l) {
        const T* arow = a + static_cast<size_t>(l) * m;
        const T* brow = b + static_cast<size_t>(l) * n;
        for (int i = 0; i < m; ++i) {
            T av = arow[i];
            T* crow = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
T sum_impl(const T* x, size_t n) {
    // Chunked summation with a fixed chunk size: partial sums per 4096
    // elements, then one pass over the partials in order.
    constexpr size_t chunk = 4096;
    T total = T(0);
    for (size_t base = 0; base < n; base += chunk) {
        size_t end = base + chunk < n ? base + chunk : n;
        T part = T(0);
        for (size_t i = base; i < end; ++i) part += x[i];
        total += part;
    }
    return total;
}

} // namespace

void gemm_nn(const float* a, const float* b, float* c, int m, int n, int k, bool acc) { gemm_nn_impl(a, b, c, m, n, k, acc); }
void gemm_nn(const double* a, const double* b, double* c, int m, int n, int k, bool acc) { gemm_nn_impl(a, b, c, m, n, k, acc); }
void gemm_nt(const float* a, const float* b, float* c, int m, int n, int k, bool acc) { gemm_nt_impl(a, b, c, m, n, k, acc); }
void gemm_nt(const double* a, const double* b, double* c, int m, int n, int k, bool acc) { gemm_nt_impl(a, b, c, m, n, k, acc); }
void gemm_tn(const float* a, const float* b, float* c, int m, int n, int k, bool acc) { gemm_tn_impl(a, b, c, m, n, k, acc); }
void gemm_tn(const double* a, const double* b, double* c, int m, int n, int k, bool acc) { gemm_tn_impl(a, b, c, m, n, k, acc); }

void axpy(float alpha, const float* x, float* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}
void axpy(double alpha, const double* x, double* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

float dot(const float* a, const float* b, size_t n) {
    float acc = 0.f;
    for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}
double dot(const double* a, const double* b, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

float sum(const float* x, size_t n) { return sum_impl(x, n); }
double sum(const double* x, size_t n) { return sum_impl(x, n); }

void scale(float alpha, float* x, size_t n) {
    for (size_t i = 0; i < n; ++i) x[i] *= alpha;
}
void scale(double alpha, double* x, size_t n) {
    for (size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void add(const float* a, const float* b, float* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}
void add(const double* a, const double* b, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void mul(const float* a, const float* b, float* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}
void mul(const double* a, const double* b, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

} // namespace callosum::kernels::scalar
