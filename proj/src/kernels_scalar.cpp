#include "mimodet/kernels.hpp"

#include <algorithm>
#include <cstring>

namespace mimodet::kernels::detail {

template <class T>
void gemm_nn_scalar(int m, int n, int k, const T* a, const T* b, T* c,
                    bool accumulate) {
  for (int i = 0; i < m; ++i) {
    T* ci = c + std::size_t(i) * n;
    if (!accumulate) std::fill(ci, ci + n, T(0));
    const T* ai = a + std::size_t(i) * k;
    for (int p = 0; p < k; ++p) {
      const T aip = ai[p];
      if (aip == T(0)) continue;
      const T* bp = b + std::size_t(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

template <class T>
void gemm_nt_scalar(int m, int n, int k, const T* a, const T* b, T* c,
                    bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const T* ai = a + std::size_t(i) * k;
    T* ci = c + std::size_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* bj = b + std::size_t(j) * k;
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = accumulate ? ci[j] + acc : acc;
    }
  }
}

template <class T>
void gemm_tn_scalar(int m, int n, int k, const T* a, const T* b, T* c,
                    bool accumulate) {
  for (int i = 0; i < m; ++i) {
    T* ci = c + std::size_t(i) * n;
    if (!accumulate) std::fill(ci, ci + n, T(0));
    for (int p = 0; p < k; ++p) {
      const T api = a[std::size_t(p) * m + i];
      if (api == T(0)) continue;
      const T* bp = b + std::size_t(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

template <class T>
void relu_fwd_scalar(const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <class T>
void relu_bwd_scalar(const T* x, const T* dy, T* dx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (x[i] > T(0)) dx[i] += dy[i];
}

template <class T>
void axpy_scalar(T a, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <class T>
void sgd_momentum_scalar(T* w, T* v, const T* g, T lr, T mu, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = mu * v[i] + g[i];
    w[i] -= lr * v[i];
  }
}

template void gemm_nn_scalar<float>(int, int, int, const float*, const float*, float*, bool);
template void gemm_nn_scalar<double>(int, int, int, const double*, const double*, double*, bool);
template void gemm_nt_scalar<float>(int, int, int, const float*, const float*, float*, bool);
template void gemm_nt_scalar<double>(int, int, int, const double*, const double*, double*, bool);
template void gemm_tn_scalar<float>(int, int, int, const float*, const float*, float*, bool);
template void gemm_tn_scalar<double>(int, int, int, const double*, const double*, double*, bool);
template void relu_fwd_scalar<float>(const float*, float*, std::size_t);
template void relu_fwd_scalar<double>(const double*, double*, std::size_t);
template void relu_bwd_scalar<float>(const float*, const float*, float*, std::size_t);
template void relu_bwd_scalar<double>(const double*, const double*, double*, std::size_t);
template void axpy_scalar<float>(float, const float*, float*, std::size_t);
template void axpy_scalar<double>(double, const double*, double*, std::size_t);
template void sgd_momentum_scalar<float>(float*, float*, const float*, float, float, std::size_t);
template void sgd_momentum_scalar<double>(double*, double*, const double*, double, double, std::size_t);

}  // namespace mimodet::kernels::detail
