#include "mimodet/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>
#include <stdexcept>

namespace mimodet::kernels {

namespace detail {

template <class T>
void gemm_nn_scalar(int, int, int, const T*, const T*, T*, bool);
template <class T>
void gemm_nt_scalar(int, int, int, const T*, const T*, T*, bool);
template <class T>
void gemm_tn_scalar(int, int, int, const T*, const T*, T*, bool);
template <class T>
void relu_fwd_scalar(const T*, T*, std::size_t);
template <class T>
void relu_bwd_scalar(const T*, const T*, T*, std::size_t);
template <class T>
void axpy_scalar(T, const T*, T*, std::size_t);
template <class T>
void sgd_momentum_scalar(T*, T*, const T*, T, T, std::size_t);

#if defined(__x86_64__) || defined(_M_X64)
#define MIMODET_HAVE_AVX2_KERNELS 1
void gemm_nn_avx2(int, int, int, const float*, const float*, float*, bool);
void gemm_nn_avx2(int, int, int, const double*, const double*, double*, bool);
void gemm_nt_avx2(int, int, int, const float*, const float*, float*, bool);
void gemm_nt_avx2(int, int, int, const double*, const double*, double*, bool);
void gemm_tn_avx2(int, int, int, const float*, const float*, float*, bool);
void gemm_tn_avx2(int, int, int, const double*, const double*, double*, bool);
void relu_fwd_avx2(const float*, float*, std::size_t);
void relu_fwd_avx2(const double*, double*, std::size_t);
void relu_bwd_avx2(const float*, const float*, float*, std::size_t);
void relu_bwd_avx2(const double*, const double*, double*, std::size_t);
void axpy_avx2(float, const float*, float*, std::size_t);
void axpy_avx2(double, const double*, double*, std::size_t);
void sgd_momentum_avx2(float*, float*, const float*, float, float, std::size_t);
void sgd_momentum_avx2(double*, double*, const double*, double, double, std::size_t);
#endif

bool cpu_has_avx2() {
#if defined(MIMODET_HAVE_AVX2_KERNELS) && defined(__GNUC__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Backend detect_backend() {
  if (const char* env = std::getenv("MIMODET_KERNELS")) {
    if (std::strcmp(env, "scalar") == 0) return Backend::scalar;
    if (std::strcmp(env, "avx2") == 0) {
      if (!cpu_has_avx2())
        throw std::runtime_error("MIMODET_KERNELS=avx2 but CPU lacks AVX2/FMA");
      return Backend::avx2;
    }
    if (std::strcmp(env, "auto") != 0)
      throw std::runtime_error(std::string("unknown MIMODET_KERNELS value: ") + env);
  }
  return cpu_has_avx2() ? Backend::avx2 : Backend::scalar;
}

std::atomic<Backend> g_backend{detect_backend()};

}  // namespace detail

Backend active_backend() { return detail::g_backend.load(); }

void set_backend(Backend b) {
  if (b == Backend::avx2 && !detail::cpu_has_avx2())
    throw std::runtime_error("set_backend(avx2): CPU lacks AVX2/FMA");
  detail::g_backend.store(b);
}

const char* backend_name(Backend b) {
  return b == Backend::avx2 ? "avx2" : "scalar";
}

#if defined(MIMODET_HAVE_AVX2_KERNELS)
#define MIMODET_DISPATCH(fn, ...)                        \
  if (detail::g_backend.load() == Backend::avx2) {       \
    detail::fn##_avx2(__VA_ARGS__);                      \
  } else {                                               \
    detail::fn##_scalar(__VA_ARGS__);                    \
  }
#else
#define MIMODET_DISPATCH(fn, ...) detail::fn##_scalar(__VA_ARGS__);
#endif

template <class T>
void gemm_nn(int m, int n, int k, const T* a, const T* b, T* c, bool acc) {
  MIMODET_DISPATCH(gemm_nn, m, n, k, a, b, c, acc)
}
template <class T>
void gemm_nt(int m, int n, int k, const T* a, const T* b, T* c, bool acc) {
  MIMODET_DISPATCH(gemm_nt, m, n, k, a, b, c, acc)
}
template <class T>
void gemm_tn(int m, int n, int k, const T* a, const T* b, T* c, bool acc) {
  MIMODET_DISPATCH(gemm_tn, m, n, k, a, b, c, acc)
}
template <class T>
void relu_fwd(const T* x, T* y, std::size_t n) {
  MIMODET_DISPATCH(relu_fwd, x, y, n)
}
template <class T>
void relu_bwd(const T* x, const T* dy, T* dx, std::size_t n) {
  MIMODET_DISPATCH(relu_bwd, x, dy, dx, n)
}
template <class T>
void axpy(T a, const T* x, T* y, std::size_t n) {
  MIMODET_DISPATCH(axpy, a, x, y, n)
}
template <class T>
void sgd_momentum(T* w, T* v, const T* g, T lr, T mu, std::size_t n) {
  MIMODET_DISPATCH(sgd_momentum, w, v, g, lr, mu, n)
}

// im2col/col2im are index shuffles, not arithmetic; one implementation.
template <class T>
void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride,
            int pad, int oh, int ow, T* cols) {
  const std::size_t plane = std::size_t(oh) * ow;
  for (int ci = 0; ci < c; ++ci) {
    const T* xc = x + std::size_t(ci) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* row = cols + (std::size_t(ci) * kh * kw + std::size_t(ky) * kw + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* dst = row + std::size_t(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = xc + std::size_t(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, int c, int h, int w, int kh, int kw, int stride,
            int pad, int oh, int ow, T* dx) {
  const std::size_t plane = std::size_t(oh) * ow;
  for (int ci = 0; ci < c; ++ci) {
    T* xc = dx + std::size_t(ci) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* row = cols + (std::size_t(ci) * kh * kw + std::size_t(ky) * kw + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + std::size_t(oy) * ow;
          T* dst = xc + std::size_t(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template void gemm_nn<float>(int, int, int, const float*, const float*, float*, bool);
template void gemm_nn<double>(int, int, int, const double*, const double*, double*, bool);
template void gemm_nt<float>(int, int, int, const float*, const float*, float*, bool);
template void gemm_nt<double>(int, int, int, const double*, const double*, double*, bool);
template void gemm_tn<float>(int, int, int, const float*, const float*, float*, bool);
template void gemm_tn<double>(int, int, int, const double*, const double*, double*, bool);
template void relu_fwd<float>(const float*, float*, std::size_t);
template void relu_fwd<double>(const double*, double*, std::size_t);
template void relu_bwd<float>(const float*, const float*, float*, std::size_t);
template void relu_bwd<double>(const double*, const double*, double*, std::size_t);
template void axpy<float>(float, const float*, float*, std::size_t);
template void axpy<double>(double, const double*, double*, std::size_t);
template void sgd_momentum<float>(float*, float*, const float*, float, float, std::size_t);
template void sgd_momentum<double>(double*, double*, const double*, double, double, std::size_t);
template void im2col<float>(const float*, int, int, int, int, int, int, int, int, int, float*);
template void im2col<double>(const double*, int, int, int, int, int, int, int, int, int, double*);
template void col2im<float>(const float*, int, int, int, int, int, int, int, int, int, float*);
template void col2im<double>(const double*, int, int, int, int, int, int, int, int, int, double*);

}  // namespace mimodet::kernels
