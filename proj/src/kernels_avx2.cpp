#include "kernels_impl.hpp"

#ifdef CALLOSUM_HAVE_AVX2

#include <cmath>
#include <immintrin.h>

// AVX2 + FMA kernel variants. Each output element keeps a single
// accumulator chain over k (ascending), matching the scalar reference up to
// FMA rounding; the equivalence tests pin the tolerance.

namespace callosum::kernels::avx2 {

namespace {

inline float hsum256(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 sh = _mm_movehdup_ps(lo);
    __m128 s = _mm_add_ps(lo, sh);
    sh = _mm_movehl_ps(sh, s);
    s = _mm_add_ss(s, sh);
    return _mm_cvtss_f32(s);
}

inline double hsum256d(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

// 4x16 float microkernel: 4 rows of A against a 16-wide column panel of B.
void gemm_nn_f32(const float* a, const float* b, float* c, int m, int n, int k, bool accumulate) {
    const int n16 = n - n % 16;
    const int m4 = m - m % 4;
    for (int i = 0; i < m4; i += 4) {
        const float* a0 = a + static_cast<size_t>(i) * k;
        const float* a1 = a0 + k;
        const float* a2 = a1 + k;
        const float* a3 = a2 + k;
        float* c0 = c + static_cast<size_t>(i) * n;
        float* c1 = c0 + n;
        float* c2 = c1 + n;
        float* c3 = c2 + n;
        for (int j = 0; j < n16; j += 16) {
            __m256 acc00, acc01, acc10, acc11, acc20, acc21, acc30, acc31;
            if (accumulate) {
                acc00 = _mm256_loadu_ps(c0 + j);
                acc01 = _mm256_loadu_ps(c0 + j + 8);
                acc10 = _mm256_loadu_ps(c1 + j);
                acc11 = _mm256_loadu_ps(c1 + j + 8);
                acc20 = _mm256_loadu_ps(c2 + j);
                acc21 = _mm256_loadu_ps(c2 + j + 8);
                acc30 = _mm256_loadu_ps(c3 + j);
                acc31 = _mm256_loadu_ps(c3 + j + 8);
            } else {
                acc00 = acc01 = acc10 = acc11 = _mm256_setzero_ps();
                acc20 = acc21 = acc30 = acc31 = _mm256_setzero_ps();
            }
            const float* bp = b + j;
            for (int l = 0; l < k; ++l, bp += n) {
                __m256 b0 = _mm256_loadu_ps(bp);
                __m256 b1 = _mm256_loadu_ps(bp + 8);
                __m256 av = _mm256_set1_ps(a0[l]);
                acc00 = _mm256_fmadd_ps(av, b0, acc00);
                acc01 = _mm256_fmadd_ps(av, b1, acc01);
                av = _mm256_set1_ps(a1[l]);
                acc10 = _mm256_fmadd_ps(av, b0, acc10);
                acc11 = _mm256_fmadd_ps(av, b1, acc11);
                av = _mm256_set1_ps(a2[l]);
                acc20 = _mm256_fmadd_ps(av, b0, acc20);
                acc21 = _mm256_fmadd_ps(av, b1, acc21);
                av = _mm256_set1_ps(a3[l]);
                acc30 = _mm256_fmadd_ps(av, b0, acc30);
                acc31 = _mm256_fmadd_ps(av, b1, acc31);
            }
            _mm256_storeu_ps(c0 + j, acc00);
            _mm256_storeu_ps(c0 + j + 8, acc01);
            _mm256_storeu_ps(c1 + j, acc10);
            _mm256_storeu_ps(c1 + j + 8, acc11);
            _mm256_storeu_ps(c2 + j, acc20);
            _mm256_storeu_ps(c2 + j + 8, acc21);
            _mm256_storeu_ps(c3 + j, acc30);
            _mm256_storeu_ps(c3 + j + 8, acc31);
        }
        // column tail for these 4 rows
        for (int r = 0; r < 4; ++r) {
            const float* ar = a + static_cast<size_t>(i + r) * k;
            float* cr = c + static_cast<size_t>(i + r) * n;
            for (int j = n16; j < n; ++j) {
                float acc = accumulate ? cr[j] : 0.f;
                for (int l = 0; l < k; ++l) acc = std::fmaf(ar[l], b[static_cast<size_t>(l) * n + j], acc);
                cr[j] = acc;
            }
        }
    }
    // row tail: 1x16 kernel
    for (int i = m4; i < m; ++i) {
        const float* ar = a + static_cast<size_t>(i) * k;
        float* cr = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n16; j += 16) {
            __m256 acc0, acc1;
            if (accumulate) {
                acc0 = _mm256_loadu_ps(cr + j);
                acc1 = _mm256_loadu_ps(cr + j + 8);
            } else {
                acc0 = acc1 = _mm256_setzero_ps();
            }
            const float* bp = b + j;
            for (int l = 0; l < k; ++l, bp += n) {
                __m256 av = _mm256_set1_ps(ar[l]);
                acc0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(bp), acc0);
                acc1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(bp + 8), acc1);
            }
            _mm256_storeu_ps(cr + j, acc0);
            _mm256_storeu_ps(cr + j + 8, acc1);
        }
        for (int j = n16; j < n; ++j) {
            float acc = accumulate ? cr[j] : 0.f;
            for (int l = 0; l < k; ++l) acc = std::fmaf(ar[l], b[static_cast<size_t>(l) * n + j], acc);
            cr[j] = acc;
        }
    }
}

// 4x8 double microkernel, same structure.
void gemm_nn_f64(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate) {
    const int n8 = n - n % 8;
    const int m4 = m - m % 4;
    for (int i = 0; i < m4; i += 4) {
        const double* a0 = a + static_cast<size_t>(i) * k;
        const double* a1 = a0 + k;
        const double* a2 = a1 + k;
        const double* a3 = a2 + k;
        double* c0 = c + static_cast<size_t>(i) * n;
        double* c1 = c0 + n;
        double* c2 = c1 + n;
        double* c3 = c2 + n;
        for (int j = 0; j < n8; j += 8) {
            __m256d acc00, acc01, acc10, acc11, acc20, acc21, acc30, acc31;
            if (accumulate) {
                acc00 = _mm256_loadu_pd(c0 + j);
                acc01 = _mm256_loadu_pd(c0 + j + 4);
                acc10 = _mm256_loadu_pd(c1 + j);
                acc11 = _mm256_loadu_pd(c1 + j + 4);
                acc20 = _mm256_loadu_pd(c2 + j);
                acc21 = _mm256_loadu_pd(c2 + j + 4);
                acc30 = _mm256_loadu_pd(c3 + j);
                acc31 = _mm256_loadu_pd(c3 + j + 4);
            } else {
                acc00 = acc01 = acc10 = acc11 = _mm256_setzero_pd();
                acc20 = acc21 = acc30 = acc31 = _mm256_setzero_pd();
            }
            const double* bp = b + j;
            for (int l = 0; l < k; ++l, bp += n) {
                __m256d b0 = _mm256_loadu_pd(bp);
                __m256d b1 = _mm256_loadu_pd(bp + 4);
                __m256d av = _mm256_set1_pd(a0[l]);
                acc00 = _mm256_fmadd_pd(av, b0, acc00);
                acc01 = _mm256_fmadd_pd(av, b1, acc01);
                av = _mm256_set1_pd(a1[l]);
                acc10 = _mm256_fmadd_pd(av, b0, acc10);
                acc11 = _mm256_fmadd_pd(av, b1, acc11);
                av = _mm256_set1_pd(a2[l]);
                acc20 = _mm256_fmadd_pd(av, b0, acc20);
                acc21 = _mm256_fmadd_pd(av, b1, acc21);
                av = _mm256_set1_pd(a3[l]);
                acc30 = _mm256_fmadd_pd(av, b0, acc30);
                acc31 = _mm256_fmadd_pd(av, b1, acc31);
            }
            _mm256_storeu_pd(c0 + j, acc00);
            _mm256_storeu_pd(c0 + j + 4, acc01);
            _mm256_storeu_pd(c1 + j, acc10);
            _mm256_storeu_pd(c1 + j + 4, acc11);
            _mm256_storeu_pd(c2 + j, acc20);
            _mm256_storeu_pd(c2 + j + 4, acc21);
            _mm256_storeu_pd(c3 + j, acc30);
            _mm256_storeu_pd(c3 + j + 4, acc31);
        }
        for (int r = 0; r < 4; ++r) {
            const double* ar = a + static_cast<size_t>(i + r) * k;
            double* cr = c + static_cast<size_t>(i + r) * n;
            for (int j = n8; j < n; ++j) {
                double acc = accumulate ? cr[j] : 0.0;
                for (int l = 0; l < k; ++l) acc = std::fma(ar[l], b[static_cast<size_t>(l) * n + j], acc);
                cr[j] = acc;
            }
        }
    }
    for (int i = m4; i < m; ++i) {
        const double* ar = a + static_cast<size_t>(i) * k;
        double* cr = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n8; j += 8) {
            __m256d acc0, acc1;
            if (accumulate) {
                acc0 = _mm256_loadu_pd(cr + j);
                acc1 = _mm256_loadu_pd(cr + j + 4);
            } else {
                acc0 = acc1 = _mm256_setzero_pd();
            }
            const double* bp = b + j;
            for (int l = 0; l < k; ++l, bp += n) {
                __m256d av = _mm256_set1_pd(ar[l]);
                acc0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp), acc0);
                acc1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp + 4), acc1);
            }
            _mm256_storeu_pd(cr + j, acc0);
            _mm256_storeu_pd(cr + j + 4, acc1);
        }
        for (int j = n8; j < n; ++j) {
            double acc = accumulate ? cr[j] : 0.0;
            for (int l = 0; l < k; ++l) acc = std::fma(ar[l], b[static_cast<size_t>(l) * n + j], acc);
            cr[j] = acc;
        }
    }
}

} // namespace

void gemm_nn(const float* a, const float* b, float* c, int m, int n, int k, bool acc) { gemm_nn_f32(a, b, c, m, n, k, acc); }
void gemm_nn(const double* a, const double* b, double* c, int m, int n, int k, bool acc) { gemm_nn_f64(a, b, c, m, n, k, acc); }

void gemm_nt(const float* a, const float* b, float* c, int m, int n, int k, bool accumulate) {
    const int k8 = k - k % 8;
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<size_t>(i) * k;
        float* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const float* brow = b + static_cast<size_t>(j) * k;
            __m256 vacc = _mm256_setzero_ps();
            for (int l = 0; l < k8; l += 8) {
                vacc = _mm256_fmadd_ps(_mm256_loadu_ps(arow + l), _mm256_loadu_ps(brow + l), vacc);
            }
            float acc = hsum256(vacc);
            for (int l = k8; l < k; ++l) acc = std::fmaf(arow[l], brow[l], acc);
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

void gemm_nt(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate) {
    const int k4 = k - k % 4;
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<size_t>(j) * k;
            __m256d vacc = _mm256_setzero_pd();
            for (int l = 0; l < k4; l += 4) {
                vacc = _mm256_fmadd_pd(_mm256_loadu_pd(arow + l), _mm256_loadu_pd(brow + l), vacc);
            }
            double acc = hsum256d(vacc);
            for (int l = k4; l < k; ++l) acc = std::fma(arow[l], brow[l], acc);
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

namespace {

// tn is a sequence of rank-1 updates; vectorize the row update.
template <typename T>
void gemm_tn_generic(const T* a, const T* b, T* c, int m, int n, int k, bool accumulate);

template <>
void gemm_tn_generic<float>(const float* a, const float* b, float* c, int m, int n, int k, bool accumulate) {
    if (!accumulate) {
        for (size_t i = 0, e = static_cast<size_t>(m) * n; i < e; ++i) c[i] = 0.f;
    }
    const int n8 = n - n % 8;
    for (int l = 0; l < k; ++l) {
        const float* arow = a + static_cast<size_t>(l) * m;
        const float* brow = b + static_cast<size_t>(l) * n;
        for (int i = 0; i < m; ++i) {
            float av = arow[i];
            float* crow = c + static_cast<size_t>(i) * n;
            __m256 vav = _mm256_set1_ps(av);
            int j = 0;
            for (; j < n8; j += 8) {
                _mm256_storeu_ps(crow + j, _mm256_fmadd_ps(vav, _mm256_loadu_ps(brow + j), _mm256_loadu_ps(crow + j)));
            }
            for (; j < n; ++j) crow[j] = std::fmaf(av, brow[j], crow[j]);
        }
    }
}

template <>
void gemm_tn_generic<double>(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate) {
    if (!accumulate) {
        for (size_t i = 0, e = static_cast<size_t>(m) * n; i < e; ++i) c[i] = 0.0;
    }
    const int n4 = n - n % 4;
    for (int l = 0; l < k; ++l) {
        const double* arow = a + static_cast<size_t>(l) * m;
        const double* brow = b + static_cast<size_t>(l) * n;
        for (int i = 0; i < m; ++i) {
            double av = arow[i];
            double* crow = c + static_cast<size_t>(i) * n;
            __m256d vav = _mm256_set1_pd(av);
            int j = 0;
            for (; j < n4; j += 4) {
                _mm256_storeu_pd(crow + j, _mm256_fmadd_pd(vav, _mm256_loadu_pd(brow + j), _mm256_loadu_pd(crow + j)));
            }
            for (; j < n; ++j) crow[j] = std::fma(av, brow[j], crow[j]);
        }
    }
}

} // namespace

void gemm_tn(const float* a, const float* b, float* c, int m, int n, int k, bool acc) { gemm_tn_generic<float>(a, b, c, m, n, k, acc); }
void gemm_tn(const double* a, const double* b, double* c, int m, int n, int k, bool acc) { gemm_tn_generic<double>(a, b, c, m, n, k, acc); }

void axpy(float alpha, const float* x, float* y, size_t n) {
    __m256 va = _mm256_set1_ps(alpha);
    size_t n8 = n - n % 8;
    size_t i = 0;
    for (; i < n8; i += 8) {
        _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    }
    for (; i < n; ++i) y[i] = std::fmaf(alpha, x[i], y[i]);
}

void axpy(double alpha, const double* x, double* y, size_t n) {
    __m256d va = _mm256_set1_pd(alpha);
    size_t n4 = n - n % 4;
    size_t i = 0;
    for (; i < n4; i += 4) {
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    }
    for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

float dot(const float* a, const float* b, size_t n) {
    __m256 vacc = _mm256_setzero_ps();
    size_t n8 = n - n % 8;
    size_t i = 0;
    for (; i < n8; i += 8) {
        vacc = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), vacc);
    }
    float acc = hsum256(vacc);
    for (; i < n; ++i) acc = std::fmaf(a[i], b[i], acc);
    return acc;
}

double dot(const double* a, const double* b, size_t n) {
    __m256d vacc = _mm256_setzero_pd();
    size_t n4 = n - n % 4;
    size_t i = 0;
    for (; i < n4; i += 4) {
        vacc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), vacc);
    }
    double acc = hsum256d(vacc);
    for (; i < n; ++i) acc = std::fma(a[i], b[i], acc);
    return acc;
}

float sum(const float* x, size_t n) {
    __m256 vacc = _mm256_setzero_ps();
    size_t n8 = n - n % 8;
    size_t i = 0;
    for (; i < n8; i += 8) vacc = _mm256_add_ps(vacc, _mm256_loadu_ps(x + i));
    float acc = hsum256(vacc);
    for (; i < n; ++i) acc += x[i];
    return acc;
}

double sum(const double* x, size_t n) {
    __m256d vacc = _mm256_setzero_pd();
    size_t n4 = n - n % 4;
    size_t i = 0;
    for (; i < n4; i += 4) vacc = _mm256_add_pd(vacc, _mm256_loadu_pd(x + i));
    double acc = hsum256d(vacc);
    for (; i < n; ++i) acc += x[i];
    return acc;
}

void scale(float alpha, float* x, size_t n) {
    __m256 va = _mm256_set1_ps(alpha);
    size_t n8 = n - n % 8;
    size_t i = 0;
    for (; i < n8; i += 8) _mm256_storeu_ps(x + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
    for (; i < n; ++i) x[i] *= alpha;
}

void scale(double alpha, double* x, size_t n) {
    __m256d va = _mm256_set1_pd(alpha);
    size_t n4 = n - n % 4;
    size_t i = 0;
    for (; i < n4; i += 4) _mm256_storeu_pd(x + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
    for (; i < n; ++i) x[i] *= alpha;
}

void add(const float* a, const float* b, float* out, size_t n) {
    size_t n8 = n - n % 8;
    size_t i = 0;
    for (; i < n8; i += 8) _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void add(const double* a, const double* b, double* out, size_t n) {
    size_t n4 = n - n % 4;
    size_t i = 0;
    for (; i < n4; i += 4) _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul(const float* a, const float* b, float* out, size_t n) {
    size_t n8 = n - n % 8;
    size_t i = 0;
    for (; i < n8; i += 8) _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void mul(const double* a, const double* b, double* out, size_t n) {
    size_t n4 = n - n % 4;
    size_t i = 0;
    for (; i < n4; i += 4) _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

} // namespace callosum::kernels::avx2

#endif // CALLOSUM_HAVE_AVX2
