#include "callosum/kernels.hpp"
#include "kernels_impl.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace callosum::kernels {

namespace {

bool cpu_has_avx2() {
#ifdef CALLOSUM_HAVE_AVX2
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Backend resolve_initial() {
    if (const char* env = std::getenv("CALLOSUM_KERNELS")) {
        std::string v(env);
        if (v == "scalar") return Backend::scalar;
        if (v == "avx2" && cpu_has_avx2()) return Backend::avx2;
    }
    return cpu_has_avx2() ? Backend::avx2 : Backend::scalar;
}

std::atomic<Backend>& backend_slot() {
    static std::atomic<Backend> slot{resolve_initial()};
    return slot;
}

std::atomic<int>& workers_slot() {
    static std::atomic<int> slot{1};
    return slot;
}

} // namespace

Backend active_backend() { return backend_slot().load(std::memory_order_relaxed); }

bool backend_supported(Backend b) {
    return b == Backend::scalar || (b == Backend::avx2 && cpu_has_avx2());
}

void set_backend(Backend b) {
    if (!backend_supported(b)) {
        throw std::invalid_argument(std::string("kernel backend not supported on this CPU: ") + backend_name(b));
    }
    backend_slot().store(b, std::memory_order_relaxed);
}

const char* backend_name(Backend b) {
    switch (b) {
        case Backend::scalar: return "scalar";
        case Backend::avx2: return "avx2";
    }
    return "?";
}

#ifdef CALLOSUM_HAVE_AVX2
#define CALLOSUM_DISPATCH(fn, ...)                          \
    do {                                                    \
        if (active_backend() == Backend::avx2) {            \
            return avx2::fn(__VA_ARGS__);                   \
        }                                                   \
        return scalar::fn(__VA_ARGS__);                     \
    } while (0)
#else
#define CALLOSUM_DISPATCH(fn, ...) return scalar::fn(__VA_ARGS__)
#endif

void gemm_nn(const float* a, const float* b, float* c, int m, int n, int k, bool acc) { CALLOSUM_DISPATCH(gemm_nn, a, b, c, m, n, k, acc); }
void gemm_nn(const double* a, const double* b, double* c, int m, int n, int k, bool acc) { CALLOSUM_DISPATCH(gemm_nn, a, b, c, m, n, k, acc); }
void gemm_nt(const float* a, const float* b, float* c, int m, int n, int k, bool acc) { CALLOSUM_DISPATCH(gemm_nt, a, b, c, m, n, k, acc); }
void gemm_nt(const double* a, const double* b, double* c, int m, int n, int k, bool acc) { CALLOSUM_DISPATCH(gemm_nt, a, b, c, m, n, k, acc); }
void gemm_tn(const float* a, const float* b, float* c, int m, int n, int k, bool acc) { CALLOSUM_DISPATCH(gemm_tn, a, b, c, m, n, k, acc); }
void gemm_tn(const double* a, const double* b, double* c, int m, int n, int k, bool acc) { CALLOSUM_DISPATCH(gemm_tn, a, b, c, m, n, k, acc); }
void axpy(float alpha, const float* x, float* y, size_t n) { CALLOSUM_DISPATCH(axpy, alpha, x, y, n); }
void axpy(double alpha, const double* x, double* y, size_t n) { CALLOSUM_DISPATCH(axpy, alpha, x, y, n); }
float dot(const float* a, const float* b, size_t n) { CALLOSUM_DISPATCH(dot, a, b, n); }
double dot(const double* a, const double* b, size_t n) { CALLOSUM_DISPATCH(dot, a, b, n); }
float sum(const float* x, size_t n) { CALLOSUM_DISPATCH(sum, x, n); }
double sum(const double* x, size_t n) { CALLOSUM_DISPATCH(sum, x, n); }
void scale(float alpha, float* x, size_t n) { CALLOSUM_DISPATCH(scale, alpha, x, n); }
void scale(double alpha, double* x, size_t n) { CALLOSUM_DISPATCH(scale, alpha, x, n); }
void add(const float* a, const float* b, float* out, size_t n) { CALLOSUM_DISPATCH(add, a, b, out, n); }
void add(const double* a, const double* b, double* out, size_t n) { CALLOSUM_DISPATCH(add, a, b, out, n); }
void mul(const float* a, const float* b, float* out, size_t n) { CALLOSUM_DISPATCH(mul, a, b, out, n); }
void mul(const double* a, const double* b, double* out, size_t n) { CALLOSUM_DISPATCH(mul, a, b, out, n); }

#undef CALLOSUM_DISPATCH

void parallel_for(size_t begin, size_t end, int workers,
                  const std::function<void(size_t, size_t)>& body) {
    if (end <= begin) return;
    size_t total = end - begin;
    if (workers <= 1 || total == 1) {
        body(begin, end);
        return;
    }
    size_t w = std::min<size_t>(static_cast<size_t>(workers), total);
    size_t chunk = (total + w - 1) / w;
    std::vector<std::thread> threads;
    threads.reserve(w);
    for (size_t t = 0; t < w; ++t) {
        size_t lo = begin + t * chunk;
        size_t hi = std::min(end, lo + chunk);
        if (lo >= hi) break;
        threads.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    for (auto& th : threads) th.join();
}

int default_workers() { return workers_slot().load(std::memory_order_relaxed); }

void set_default_workers(int w) { workers_slot().store(w < 1 ? 1 : w, std::memory_order_relaxed); }

} // namespace callosum::kernels
