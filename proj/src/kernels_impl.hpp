#pragma once

#include <cstddef>

// Internal declarations shared by the kernel variants and the dispatcher.

namespace callosum::kernels::scalar {
void gemm_nn(const float*, const float*, float*, int, int, int, bool);
void gemm_nn(const double*, const double*, double*, int, int, int, bool);
void gemm_nt(const float*, const float*, float*, int, int, int, bool);
void gemm_nt(const double*, const double*, double*, int, int, int, bool);
void gemm_tn(const float*, const float*, float*, int, int, int, bool);
void gemm_tn(const double*, const double*, double*, int, int, int, bool);
void axpy(float, const float*, float*, size_t);
void axpy(double, const double*, double*, size_t);
float dot(const float*, const float*, size_t);
double dot(const double*, const double*, size_t);
float sum(const float*, size_t);
double sum(const double*, size_t);
void scale(float, float*, size_t);
void scale(double, double*, size_t);
void add(const float*, const float*, float*, size_t);
void add(const double*, const double*, double*, size_t);
void mul(const float*, const float*, float*, size_t);
void mul(const double*, const double*, double*, size_t);
} // namespace callosum::kernels::scalar

#ifdef CALLOSUM_HAVE_AVX2
namespace callosum::kernels::avx2 {
void gemm_nn(const float*, const float*, float*, int, int, int, bool);
void gemm_nn(const double*, const double*, double*, int, int, int, bool);
void gemm_nt(const float*, const float*, float*, int, int, int, bool);
void gemm_nt(const double*, const double*, double*, int, int, int, bool);
void gemm_tn(const float*, const float*, float*, int, int, int, bool);
void gemm_tn(const double*, const double*, double*, int, int, int, bool);
void axpy(float, const float*, float*, size_t);
void axpy(double, const double*, double*, size_t);
float dot(const float*, const float*, size_t);
double dot(const double*, const double*, size_t);
float sum(const float*, size_t);
double sum(const double*, size_t);
void scale(float, float*, size_t);
void scale(double, double*, size_t);
void add(const float*, const float*, float*, size_t);
void add(const double*, const double*, double*, size_t);
void mul(const float*, const float*, float*, size_t);
void mul(const double*, const double*, double*, size_t);
} // namespace callosum::kernels::avx2
#endif
