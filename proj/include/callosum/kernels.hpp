#pragma once

#include <cstddef>
#include <functional>
#include <string>

// Data-parallel arithmetic kernels behind the tensor math. Every kernel has
// a scalar reference implementation and, on x86-64, an AVX2+FMA variant.
// The active variant is chosen at runtime from CPU features and can be
// overridden with set_backend() or the CALLOSUM_KERNELS environment variable
// ("scalar" or "avx2"). Scalar and SIMD variants are equivalence-tested.
//
// All matrices are dense row-major. GEMM accumulation for each output
// element runs over k in ascending order with a single accumulator chain,
// so results are bit-reproducible across runs for a fixed backend.

namespace callosum::kernels {

enum class Backend { scalar, avx2 };

Backend active_backend();
bool backend_supported(Backend b);
void set_backend(Backend b); // throws std::invalid_argument if unsupported
const char* backend_name(Backend b);

// C(m,n) = A(m,k) * B(k,n)            [+= if accumulate]
void gemm_nn(const float* a, const float* b, float* c, int m, int n, int k, bool accumulate);
void gemm_nn(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate);

// C(m,n) = A(m,k) * B(n,k)^T          [+= if accumulate]
void gemm_nt(const float* a, const float* b, float* c, int m, int n, int k, bool accumulate);
void gemm_nt(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate);

// C(m,n) = A(k,m)^T * B(k,n)          [+= if accumulate]
void gemm_tn(const float* a, const float* b, float* c, int m, int n, int k, bool accumulate);
void gemm_tn(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate);

// y[i] += alpha * x[i]
void axpy(float alpha, const float* x, float* y, size_t n);
void axpy(double alpha, const double* x, double* y, size_t n);

float dot(const float* a, const float* b, size_t n);
double dot(const double* a, const double* b, size_t n);

// Fixed-order chunked summation (deterministic for a fixed backend).
float sum(const float* x, size_t n);
double sum(const double* x, size_t n);

void scale(float alpha, float* x, size_t n);
void scale(double alpha, double* x, size_t n);

void add(const float* a, const float* b, float* out, size_t n);
void add(const double* a, const double* b, double* out, size_t n);

void mul(const float* a, const float* b, float* out, size_t n);
void mul(const double* a, const double* b, double* out, size_t n);

// Fork-join helper for coarse-grained loops (per patch / per metric cell).
// Runs [begin, end) split into contiguous chunks across `workers` threads;
// workers <= 1 runs inline. Results must not depend on chunk assignment.
void parallel_for(size_t begin, size_t end, int workers,
                  const std::function<void(size_t, size_t)>& body);

// Process-wide default worker count for parallel_for call sites that take
// no explicit count (the CLI sets this from --workers).
int default_workers();
void set_default_workers(int w);

} // namespace callosum::kernels
