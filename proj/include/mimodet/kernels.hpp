#pragma once

#include <cstddef>
#include <string>

// Dense inner loops used by the autodiff engine. Every kernel exists as a
// scalar reference implementation and (on x86-64) an AVX2+FMA variant; the
// active variant is chosen once at startup from CPUID and can be overridden
// with the MIMODET_KERNELS env var ("scalar", "avx2", "auto") or set_backend().
//
// All matrices are dense row-major with no padding. Accumulation order along
// the k dimension is sequential in both variants, so results differ only by
// FMA contraction rounding; the equivalence tests pin that gap.

namespace mimodet::kernels {

enum class Backend { scalar, avx2 };

Backend active_backend();
void set_backend(Backend b);
const char* backend_name(Backend b);

// C[m x n] (+)= A[m x k] * B[k x n]
template <class T>
void gemm_nn(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate);

// C[m x n] (+)= A[m x k] * B[n x k]^T
template <class T>
void gemm_nt(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate);

// C[m x n] (+)= A[k x m]^T * B[k x n]
template <class T>
void gemm_tn(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate);

// y[i] = max(x[i], 0)
template <class T>
void relu_fwd(const T* x, T* y, std::size_t n);

// dx[i] += dy[i] * (x[i] > 0)
template <class T>
void relu_bwd(const T* x, const T* dy, T* dx, std::size_t n);

// y[i] += a * x[i]
template <class T>
void axpy(T a, const T* x, T* y, std::size_t n);

// v = mu*v + g; w -= lr*v
template <class T>
void sgd_momentum(T* w, T* v, const T* g, T lr, T mu, std::size_t n);

// NCHW single-image im2col: cols[(ci*kh*kw + ky*kw + kx), (oy*ow + ox)],
// out-of-bounds taps read as zero.
template <class T>
void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride,
            int pad, int oh, int ow, T* cols);

// Transpose of im2col: scatter-adds cols back into the image gradient.
template <class T>
void col2im(const T* cols, int c, int h, int w, int kh, int kw, int stride,
            int pad, int oh, int ow, T* dx);

}  // namespace mimodet::kernels
