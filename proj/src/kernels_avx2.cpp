// AVX2+FMA kernel variants. This translation unit is the only one compiled
// with -mavx2 -mfma; it must not be entered unless CPUID reports both.

#include "mimodet/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <algorithm>

namespace mimodet::kernels::detail {

// ---------------------------------------------------------------- float ----

void gemm_nn_avx2(int m, int n, int k, const float* a, const float* b,
                  float* c, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    float* ci = c + std::size_t(i) * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0f);
    const float* ai = a + std::size_t(i) * k;
    for (int p = 0; p < k; ++p) {
      const float aip = ai[p];
      if (aip == 0.0f) continue;
      const __m256 va = _mm256_set1_ps(aip);
      const float* bp = b + std::size_t(p) * n;
      int j = 0;
      for (; j + 8 <= n; j += 8) {
        __m256 vc = _mm256_loadu_ps(ci + j);
        vc = _mm256_fmadd_ps(va, _mm256_loadu_ps(bp + j), vc);
        _mm256_storeu_ps(ci + j, vc);
      }
      for (; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

static inline float hsum256(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

void gemm_nt_avx2(int m, int n, int k, const float* a, const float* b,
                  float* c, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const float* ai = a + std::size_t(i) * k;
    float* ci = c + std::size_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* bj = b + std::size_t(j) * k;
      __m256 vacc = _mm256_setzero_ps();
      int p = 0;
      for (; p + 8 <= k; p += 8)
        vacc = _mm256_fmadd_ps(_mm256_loadu_ps(ai + p), _mm256_loadu_ps(bj + p), vacc);
      float acc = hsum256(vacc);
      for (; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = accumulate ? ci[j] + acc : acc;
    }
  }
}

void gemm_tn_avx2(int m, int n, int k, const float* a, const float* b,
                  float* c, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    float* ci = c + std::size_t(i) * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0f);
    for (int p = 0; p < k; ++p) {
      const float api = a[std::size_t(p) * m + i];
      if (api == 0.0f) continue;
      const __m256 va = _mm256_set1_ps(api);
      const float* bp = b + std::size_t(p) * n;
      int j = 0;
      for (; j + 8 <= n; j += 8) {
        __m256 vc = _mm256_loadu_ps(ci + j);
        vc = _mm256_fmadd_ps(va, _mm256_loadu_ps(bp + j), vc);
        _mm256_storeu_ps(ci + j, vc);
      }
      for (; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

void relu_fwd_avx2(const float* x, float* y, std::size_t n) {
  const __m256 vz = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_max_ps(_mm256_loadu_ps(x + i), vz));
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_bwd_avx2(const float* x, const float* dy, float* dx, std::size_t n) {
  const __m256 vz = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), vz, _CMP_GT_OQ);
    __m256 add = _mm256_and_ps(mask, _mm256_loadu_ps(dy + i));
    _mm256_storeu_ps(dx + i, _mm256_add_ps(_mm256_loadu_ps(dx + i), add));
  }
  for (; i < n; ++i)
    if (x[i] > 0.0f) dx[i] += dy[i];
}

void axpy_avx2(float a, const float* x, float* y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 vy = _mm256_loadu_ps(y + i);
    vy = _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), vy);
    _mm256_storeu_ps(y + i, vy);
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void sgd_momentum_avx2(float* w, float* v, const float* g, float lr, float mu,
                       std::size_t n) {
  const __m256 vmu = _mm256_set1_ps(mu);
  const __m256 vlr = _mm256_set1_ps(-lr);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 vv = _mm256_fmadd_ps(vmu, _mm256_loadu_ps(v + i), _mm256_loadu_ps(g + i));
    _mm256_storeu_ps(v + i, vv);
    __m256 vw = _mm256_fmadd_ps(vlr, vv, _mm256_loadu_ps(w + i));
    _mm256_storeu_ps(w + i, vw);
  }
  for (; i < n; ++i) {
    v[i] = mu * v[i] + g[i];
    w[i] -= lr * v[i];
  }
}

// --------------------------------------------------------------- double ----

void gemm_nn_avx2(int m, int n, int k, const double* a, const double* b,
                  double* c, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    double* ci = c + std::size_t(i) * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0);
    const double* ai = a + std::size_t(i) * k;
    for (int p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      const __m256d va = _mm256_set1_pd(aip);
      const double* bp = b + std::size_t(p) * n;
      int j = 0;
      for (; j + 4 <= n; j += 4) {
        __m256d vc = _mm256_loadu_pd(ci + j);
        vc = _mm256_fmadd_pd(va, _mm256_loadu_pd(bp + j), vc);
        _mm256_storeu_pd(ci + j, vc);
      }
      for (; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

static inline double hsum256d(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
}

void gemm_nt_avx2(int m, int n, int k, const double* a, const double* b,
                  double* c, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + std::size_t(i) * k;
    double* ci = c + std::size_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + std::size_t(j) * k;
      __m256d vacc = _mm256_setzero_pd();
      int p = 0;
      for (; p + 4 <= k; p += 4)
        vacc = _mm256_fmadd_pd(_mm256_loadu_pd(ai + p), _mm256_loadu_pd(bj + p), vacc);
      double acc = hsum256d(vacc);
      for (; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = accumulate ? ci[j] + acc : acc;
    }
  }
}

void gemm_tn_avx2(int m, int n, int k, const double* a, const double* b,
                  double* c, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    double* ci = c + std::size_t(i) * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0);
    for (int p = 0; p < k; ++p) {
      const double api = a[std::size_t(p) * m + i];
      if (api == 0.0) continue;
      const __m256d va = _mm256_set1_pd(api);
      const double* bp = b + std::size_t(p) * n;
      int j = 0;
      for (; j + 4 <= n; j += 4) {
        __m256d vc = _mm256_loadu_pd(ci + j);
        vc = _mm256_fmadd_pd(va, _mm256_loadu_pd(bp + j), vc);
        _mm256_storeu_pd(ci + j, vc);
      }
      for (; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

void relu_fwd_avx2(const double* x, double* y, std::size_t n) {
  const __m256d vz = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_max_pd(_mm256_loadu_pd(x + i), vz));
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_bwd_avx2(const double* x, const double* dy, double* dx, std::size_t n) {
  const __m256d vz = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(x + i), vz, _CMP_GT_OQ);
    __m256d add = _mm256_and_pd(mask, _mm256_loadu_pd(dy + i));
    _mm256_storeu_pd(dx + i, _mm256_add_pd(_mm256_loadu_pd(dx + i), add));
  }
  for (; i < n; ++i)
    if (x[i] > 0.0) dx[i] += dy[i];
}

void axpy_avx2(double a, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vy = _mm256_loadu_pd(y + i);
    vy = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vy);
    _mm256_storeu_pd(y + i, vy);
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void sgd_momentum_avx2(double* w, double* v, const double* g, double lr,
                       double mu, std::size_t n) {
  const __m256d vmu = _mm256_set1_pd(mu);
  const __m256d vlr = _mm256_set1_pd(-lr);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vv = _mm256_fmadd_pd(vmu, _mm256_loadu_pd(v + i), _mm256_loadu_pd(g + i));
    _mm256_storeu_pd(v + i, vv);
    __m256d vw = _mm256_fmadd_pd(vlr, vv, _mm256_loadu_pd(w + i));
    _mm256_storeu_pd(w + i, vw);
  }
  for (; i < n; ++i) {
    v[i] = mu * v[i] + g[i];
    w[i] -= lr * v[i];
  }
}

}  // namespace mimodet::kernels::detail

#endif  // x86-64
