#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "mimodet/geometry.hpp"
#include "mimodet/kernels.hpp"

// Reverse-mode array engine with exactly the operations the detector needs.
// Arrays are handles onto graph nodes; ops append nodes whose ids grow
// monotonically, so running backprop closures in descending id order is a
// valid topological order. float is the training type, double exists for
// gradient-check tests.

namespace mimodet::ad {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  if (s.empty()) return "scalar";
  std::ostringstream os;
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("non-positive shape extent in " + shape_str(s));
    n *= std::size_t(d);
  }
  return n;
}

inline std::atomic<std::uint64_t>& node_id_counter() {
  static std::atomic<std::uint64_t> c{0};
  return c;
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> val;
  std::vector<T> grad;  // allocated on first use, same numel as val
  bool requires_grad = false;
  bool backward_done = false;
  std::uint64_t id = node_id_counter()++;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backprop;

  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), T(0));
  }
};

template <class T>
class Array {
 public:
  Array() = default;

  static Array zeros(Shape shape) {
    Array a;
    a.n_ = std::make_shared<Node<T>>();
    a.n_->val.assign(shape_numel(shape), T(0));
    a.n_->shape = std::move(shape);
    return a;
  }

  static Array full(Shape shape, T v) {
    Array a = zeros(std::move(shape));
    std::fill(a.n_->val.begin(), a.n_->val.end(), v);
    return a;
  }

  static Array from_vector(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("from_vector: " + shape_str(shape) + " needs " +
                                  std::to_string(shape_numel(shape)) + " values, got " +
                                  std::to_string(data.size()));
    Array a;
    a.n_ = std::make_shared<Node<T>>();
    a.n_->shape = std::move(shape);
    a.n_->val = std::move(data);
    return a;
  }

  // A leaf that accumulates gradient (a trainable parameter).
  static Array param(Shape shape, std::vector<T> data) {
    Array a = from_vector(std::move(shape), std::move(data));
    a.n_->requires_grad = true;
    return a;
  }

  bool valid() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::size_t size() const { return n_->val.size(); }
  int dim(int i) const { return n_->shape[std::size_t(i)]; }
  int ndim() const { return int(n_->shape.size()); }
  bool requires_grad() const { return n_->requires_grad; }

  std::vector<T>& val() { return n_->val; }
  const std::vector<T>& val() const { return n_->val; }
  std::vector<T>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  bool has_grad() const { return !n_->grad.empty(); }
  void zero_grad() { std::fill(n_->grad.begin(), n_->grad.end(), T(0)); }

  T item() const {
    if (size() != 1) throw std::logic_error("item() on non-scalar array " + shape_str(shape()));
    return n_->val[0];
  }

  std::shared_ptr<Node<T>> node() const { return n_; }

 private:
  std::shared_ptr<Node<T>> n_;

  template <class U>
  friend Array<U> make_op(Shape shape, std::vector<std::shared_ptr<Node<U>>> parents,
                          std::function<void(Node<U>&)> backprop);
};

template <class T>
Array<T> make_op(Shape shape, std::vector<std::shared_ptr<Node<T>>> parents,
                 std::function<void(Node<T>&)> backprop) {
  Array<T> a;
  a.n_ = std::make_shared<Node<T>>();
  a.n_->val.assign(shape_numel(shape), T(0));
  a.n_->shape = std::move(shape);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  if (needs) {
    a.n_->requires_grad = true;
    a.n_->parents = std::move(parents);
    a.n_->backprop = std::move(backprop);
  }
  return a;
}

// ------------------------------------------------------------------ ops ----

template <class T>
Array<T> conv2d(const Array<T>& x, const Array<T>& w, const Array<T>& b,
                int stride, int pad) {
  if (x.ndim() != 4 || w.ndim() != 4 || b.ndim() != 1)
    throw std::invalid_argument("conv2d: expected NCHW input, OIHW weights, O bias; got " +
                                shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
                                shape_str(b.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int o = w.dim(0), ci = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (c != ci)
    throw std::invalid_argument("conv2d: input channels " + std::to_string(c) +
                                " != weight I extent " + std::to_string(ci) + " [input " +
                                shape_str(x.shape()) + ", weights " + shape_str(w.shape()) + "]");
  if (b.dim(0) != o)
    throw std::invalid_argument("conv2d: bias extent " + std::to_string(b.dim(0)) +
                                " != output channels " + std::to_string(o));
  if (stride <= 0 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0)
    throw std::invalid_argument("conv2d: kernel " + shape_str(w.shape()) +
                                " does not fit input " + shape_str(x.shape()));

  const int kdim = c * kh * kw;
  const std::size_t plane = std::size_t(oh) * ow;
  auto cols = std::make_shared<std::vector<T>>(std::size_t(n) * kdim * plane);

  auto out = make_op<T>(
      {n, o, oh, ow}, {x.node(), w.node(), b.node()},
      [cols, xn = x.node(), wn = w.node(), bn = b.node(), n, c, h, wd, o, kh, kw,
       stride, pad, oh, ow, kdim, plane](Node<T>& self) {
        bn->ensure_grad();
        wn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        std::vector<T> dcols(xn->requires_grad ? std::size_t(kdim) * plane : 0);
        for (int i = 0; i < n; ++i) {
          const T* dy = self.grad.data() + std::size_t(i) * o * plane;
          const T* col = cols->data() + std::size_t(i) * kdim * plane;
          for (int oc = 0; oc < o; ++oc) {
            T acc = 0;
            const T* row = dy + std::size_t(oc) * plane;
            for (std::size_t p = 0; p < plane; ++p) acc += row[p];
            bn->grad[std::size_t(oc)] += acc;
          }
          kernels::gemm_nt(o, kdim, int(plane), dy, col, wn->grad.data(), true);
          if (xn->requires_grad) {
            kernels::gemm_tn(kdim, int(plane), o, wn->val.data(), dy, dcols.data(), false);
            kernels::col2im(dcols.data(), c, h, wd, kh, kw, stride, pad, oh, ow,
                            xn->grad.data() + std::size_t(i) * c * h * wd);
          }
        }
      });

  for (int i = 0; i < n; ++i) {
    T* col = cols->data() + std::size_t(i) * kdim * plane;
    kernels::im2col(x.val().data() + std::size_t(i) * c * h * wd, c, h, wd, kh, kw,
                    stride, pad, oh, ow, col);
    T* y = out.val().data() + std::size_t(i) * o * plane;
    kernels::gemm_nn(o, int(plane), kdim, w.val().data(), col, y, false);
    for (int oc = 0; oc < o; ++oc) {
      const T bias = b.val()[std::size_t(oc)];
      T* row = y + std::size_t(oc) * plane;
      for (std::size_t p = 0; p < plane; ++p) row[p] += bias;
    }
  }
  return out;
}

template <class T>
Array<T> relu(const Array<T>& x) {
  auto out = make_op<T>(x.shape(), {x.node()}, [xn = x.node()](Node<T>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    kernels::relu_bwd(xn->val.data(), self.grad.data(), xn->grad.data(), xn->val.size());
  });
  kernels::relu_fwd(x.val().data(), out.val().data(), x.size());
  return out;
}

template <class T>
Array<T> linear(const Array<T>& x, const Array<T>& w, const Array<T>& b) {
  if (x.ndim() != 2 || w.ndim() != 2 || b.ndim() != 1)
    throw std::invalid_argument("linear: expected NxF, FxG, G; got " + shape_str(x.shape()) +
                                ", " + shape_str(w.shape()) + ", " + shape_str(b.shape()));
  const int n = x.dim(0), f = x.dim(1), g = w.dim(1);
  if (w.dim(0) != f || b.dim(0) != g)
    throw std::invalid_argument("linear: shape mismatch [x " + shape_str(x.shape()) + ", w " +
                                shape_str(w.shape()) + ", b " + shape_str(b.shape()) + "]");

  auto out = make_op<T>({n, g}, {x.node(), w.node(), b.node()},
                        [xn = x.node(), wn = w.node(), bn = b.node(), n, f, g](Node<T>& self) {
                          bn->ensure_grad();
                          wn->ensure_grad();
                          for (int i = 0; i < n; ++i)
                            kernels::axpy(T(1), self.grad.data() + std::size_t(i) * g,
                                          bn->grad.data(), std::size_t(g));
                          kernels::gemm_tn(f, g, n, xn->val.data(), self.grad.data(),
                                           wn->grad.data(), true);
                          if (xn->requires_grad) {
                            xn->ensure_grad();
                            kernels::gemm_nt(n, f, g, self.grad.data(), wn->val.data(),
                                             xn->grad.data(), true);
                          }
                        });
  kernels::gemm_nn(n, g, f, x.val().data(), w.val().data(), out.val().data(), false);
  for (int i = 0; i < n; ++i)
    kernels::axpy(T(1), b.val().data(), out.val().data() + std::size_t(i) * g, std::size_t(g));
  return out;
}

// Mean over rows of -log softmax(logits)[target]; max-subtracted for
// stability. Softmax probabilities are cached for the backward pass.
template <class T>
Array<T> softmax_cross_entropy(const Array<T>& logits, const std::vector<int>& targets) {
  if (logits.ndim() != 2)
    throw std::invalid_argument("softmax_cross_entropy: logits must be NxK, got " +
                                shape_str(logits.shape()));
  const int n = logits.dim(0), k = logits.dim(1);
  if (int(targets.size()) != n)
    throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(n) + " rows");
  for (int t : targets)
    if (t < 0 || t >= k)
      throw std::invalid_argument("softmax_cross_entropy: target " + std::to_string(t) +
                                  " outside [0," + std::to_string(k) + ")");

  auto probs = std::make_shared<std::vector<T>>(std::size_t(n) * k);
  auto out = make_op<T>({1}, {logits.node()},
                        [ln = logits.node(), probs, targets, n, k](Node<T>& self) {
                          if (!ln->requires_grad) return;
                          ln->ensure_grad();
                          const T g = self.grad[0] / T(n);
                          for (int i = 0; i < n; ++i) {
                            const T* p = probs->data() + std::size_t(i) * k;
                            T* d = ln->grad.data() + std::size_t(i) * k;
                            for (int j = 0; j < k; ++j) d[j] += g * p[j];
                            d[targets[std::size_t(i)]] -= g;
                          }
                        });

  T loss = 0;
  for (int i = 0; i < n; ++i) {
    const T* row = logits.val().data() + std::size_t(i) * k;
    T* p = probs->data() + std::size_t(i) * k;
    T mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T denom = 0;
    for (int j = 0; j < k; ++j) {
      p[j] = std::exp(row[j] - mx);
      denom += p[j];
    }
    for (int j = 0; j < k; ++j) p[j] /= denom;
    loss -= row[targets[std::size_t(i)]] - mx - std::log(denom);
  }
  out.val()[0] = loss / T(n);
  return out;
}

// Softmax probabilities without a loss attached; forward-only convenience
// for inference paths (no gradient).
template <class T>
std::vector<T> softmax_rows(const Array<T>& logits) {
  if (logits.ndim() != 2)
    throw std::invalid_argument("softmax_rows: logits must be NxK");
  const int n = logits.dim(0), k = logits.dim(1);
  std::vector<T> p(std::size_t(n) * k);
  for (int i = 0; i < n; ++i) {
    const T* row = logits.val().data() + std::size_t(i) * k;
    T* pi = p.data() + std::size_t(i) * k;
    T mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T denom = 0;
    for (int j = 0; j < k; ++j) {
      pi[j] = std::exp(row[j] - mx);
      denom += pi[j];
    }
    for (int j = 0; j < k; ++j) pi[j] /= denom;
  }
  return p;
}

// Sum over elements of 0.5*d^2 for |d|<1 else |d|-0.5, d = pred - target.
template <class T>
Array<T> smooth_l1(const Array<T>& pred, const Array<T>& target) {
  if (pred.shape() != target.shape())
    throw std::invalid_argument("smooth_l1: shape mismatch " + shape_str(pred.shape()) +
                                " vs " + shape_str(target.shape()));
  auto out = make_op<T>({1}, {pred.node(), target.node()},
                        [pn = pred.node(), tn = target.node()](Node<T>& self) {
                          const T g = self.grad[0];
                          if (pn->requires_grad) pn->ensure_grad();
                          if (tn->requires_grad) tn->ensure_grad();
                          for (std::size_t i = 0; i < pn->val.size(); ++i) {
                            const T d = pn->val[i] - tn->val[i];
                            const T df = std::abs(d) < T(1) ? d : (d > T(0) ? T(1) : T(-1));
                            if (pn->requires_grad) pn->grad[i] += g * df;
                            if (tn->requires_grad) tn->grad[i] -= g * df;
                          }
                        });
  T loss = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T d = pred.val()[i] - target.val()[i];
    const T a = std::abs(d);
    loss += a < T(1) ? T(0.5) * d * d : a - T(0.5);
  }
  out.val()[0] = loss;
  return out;
}

// View-free reshape: copies values, routes gradient straight through.
template <class T>
Array<T> reshape(const Array<T>& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(shape));
  auto out = make_op<T>(std::move(shape), {x.node()}, [xn = x.node()](Node<T>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    kernels::axpy(T(1), self.grad.data(), xn->grad.data(), xn->grad.size());
  });
  std::copy(x.val().begin(), x.val().end(), out.val().begin());
  return out;
}

namespace detail {

// Per-axis bilinear taps for a uniform out-size grid inside [lo, lo+extent);
// pixel i has its center at i + 0.5, edge taps clamp.
struct BilinearAxis {
  std::vector<int> i0, i1;
  std::vector<double> frac;
};

inline BilinearAxis bilinear_axis(double lo, double extent, int out, int limit) {
  BilinearAxis ax;
  ax.i0.resize(std::size_t(out));
  ax.i1.resize(std::size_t(out));
  ax.frac.resize(std::size_t(out));
  const double step = extent / out;
  for (int g = 0; g < out; ++g) {
    const double u = lo + (g + 0.5) * step - 0.5;
    const double fl = std::floor(u);
    ax.i0[std::size_t(g)] = std::clamp(int(fl), 0, limit - 1);
    ax.i1[std::size_t(g)] = std::clamp(int(fl) + 1, 0, limit - 1);
    ax.frac[std::size_t(g)] = u - fl;
  }
  return ax;
}

}  // namespace detail

struct RoiCrop {
  int slot = 0;   // batch index into the feature map
  geom::Box box;  // feature-map coordinates
};

inline geom::Box checked_crop_box(const geom::Box& box, int w, int h) {
  const geom::Box clipped = geom::clip_box(box, w, h);
  if (clipped.area() <= 1e-6)
    throw std::invalid_argument("crop_resize: degenerate box " + geom::to_string(box) +
                                " after clipping to " + std::to_string(w) + "x" +
                                std::to_string(h));
  return clipped;
}

// Bilinear crop-resize of many boxes from an NCHW feature map; output row r
// is the flattened C x oh x ow crop of item r. Gradients scatter back to the
// four taps of each sample point.
template <class T>
Array<T> crop_resize_multi(const Array<T>& feat, const std::vector<RoiCrop>& items,
                           int oh, int ow) {
  if (feat.ndim() != 4)
    throw std::invalid_argument("crop_resize_multi: features must be NCHW, got " +
                                shape_str(feat.shape()));
  if (items.empty()) throw std::invalid_argument("crop_resize_multi: no boxes");
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("crop_resize_multi: bad out size");
  const int n = feat.dim(0), c = feat.dim(1), h = feat.dim(2), w = feat.dim(3);
  const std::size_t plane = std::size_t(h) * w;

  struct Prepared {
    int slot;
    detail::BilinearAxis ay, ax;
  };
  auto prep = std::make_shared<std::vector<Prepared>>();
  prep->reserve(items.size());
  for (const auto& it : items) {
    if (it.slot < 0 || it.slot >= n)
      throw std::invalid_argument("crop_resize_multi: slot " + std::to_string(it.slot) +
                                  " outside batch of " + std::to_string(n));
    const geom::Box b = checked_crop_box(it.box, w, h);
    prep->push_back({it.slot, detail::bilinear_axis(b.y1, b.height(), oh, h),
                     detail::bilinear_axis(b.x1, b.width(), ow, w)});
  }

  const int rows = int(items.size());
  const int row_len = c * oh * ow;
  auto out = make_op<T>(
      {rows, row_len}, {feat.node()},
      [fn = feat.node(), prep, c, w, oh, ow, plane, row_len](Node<T>& self) {
        if (!fn->requires_grad) return;
        fn->ensure_grad();
        for (std::size_t r = 0; r < prep->size(); ++r) {
          const auto& pr = (*prep)[r];
          const T* dy = self.grad.data() + r * std::size_t(row_len);
          T* dslot = fn->grad.data() + std::size_t(pr.slot) * c * plane;
          for (int ch = 0; ch < c; ++ch) {
            T* df = dslot + std::size_t(ch) * plane;
            for (int gy = 0; gy < oh; ++gy) {
              const int y0 = pr.ay.i0[std::size_t(gy)], y1 = pr.ay.i1[std::size_t(gy)];
              const T ty = T(pr.ay.frac[std::size_t(gy)]);
              for (int gx = 0; gx < ow; ++gx) {
                const int x0 = pr.ax.i0[std::size_t(gx)], x1 = pr.ax.i1[std::size_t(gx)];
                const T tx = T(pr.ax.frac[std::size_t(gx)]);
                const T g = dy[(std::size_t(ch) * oh + gy) * ow + gx];
                df[std::size_t(y0) * w + x0] += g * (T(1) - ty) * (T(1) - tx);
                df[std::size_t(y0) * w + x1] += g * (T(1) - ty) * tx;
                df[std::size_t(y1) * w + x0] += g * ty * (T(1) - tx);
                df[std::size_t(y1) * w + x1] += g * ty * tx;
              }
            }
          }
        }
      });

  for (std::size_t r = 0; r < prep->size(); ++r) {
    const auto& pr = (*prep)[r];
    T* y = out.val().data() + r * std::size_t(row_len);
    const T* fslot = feat.val().data() + std::size_t(pr.slot) * c * plane;
    for (int ch = 0; ch < c; ++ch) {
      const T* f = fslot + std::size_t(ch) * plane;
      for (int gy = 0; gy < oh; ++gy) {
        const int y0 = pr.ay.i0[std::size_t(gy)], y1 = pr.ay.i1[std::size_t(gy)];
        const T ty = T(pr.ay.frac[std::size_t(gy)]);
        for (int gx = 0; gx < ow; ++gx) {
          const int x0 = pr.ax.i0[std::size_t(gx)], x1 = pr.ax.i1[std::size_t(gx)];
          const T tx = T(pr.ax.frac[std::size_t(gx)]);
          const T v00 = f[std::size_t(y0) * w + x0], v01 = f[std::size_t(y0) * w + x1];
          const T v10 = f[std::size_t(y1) * w + x0], v11 = f[std::size_t(y1) * w + x1];
          y[(std::size_t(ch) * oh + gy) * ow + gx] =
              (T(1) - ty) * ((T(1) - tx) * v00 + tx * v01) +
              ty * ((T(1) - tx) * v10 + tx * v11);
        }
      }
    }
  }
  return out;
}

// Spec-shaped single-box variant: CxHxW features in, CxHxW crop out.
template <class T>
Array<T> crop_resize(const Array<T>& feat, const geom::Box& box, int oh, int ow) {
  if (feat.ndim() != 3)
    throw std::invalid_argument("crop_resize: features must be CxHxW, got " +
                                shape_str(feat.shape()));
  const int c = feat.dim(0), h = feat.dim(1), w = feat.dim(2);
  Array<T> as4 = reshape(feat, {1, c, h, w});
  Array<T> flat = crop_resize_multi(as4, {{0, box}}, oh, ow);
  return reshape(flat, {c, oh, ow});
}

// y[i] = x.flat[idx[i]]; backward scatter-adds. idx entries may repeat.
template <class T>
Array<T> gather(const Array<T>& x, std::vector<std::size_t> idx, Shape out_shape) {
  if (shape_numel(out_shape) != idx.size())
    throw std::invalid_argument("gather: out shape " + shape_str(out_shape) + " needs " +
                                std::to_string(shape_numel(out_shape)) + " indices, got " +
                                std::to_string(idx.size()));
  for (std::size_t i : idx)
    if (i >= x.size())
      throw std::out_of_range("gather: index " + std::to_string(i) + " >= " +
                              std::to_string(x.size()));
  auto shared_idx = std::make_shared<std::vector<std::size_t>>(std::move(idx));
  auto out = make_op<T>(std::move(out_shape), {x.node()},
                        [xn = x.node(), shared_idx](Node<T>& self) {
                          if (!xn->requires_grad) return;
                          xn->ensure_grad();
                          for (std::size_t i = 0; i < shared_idx->size(); ++i)
                            xn->grad[(*shared_idx)[i]] += self.grad[i];
                        });
  for (std::size_t i = 0; i < shared_idx->size(); ++i)
    out.val()[i] = x.val()[(*shared_idx)[i]];
  return out;
}

template <class T>
Array<T> add(const Array<T>& a, const Array<T>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  auto out = make_op<T>(a.shape(), {a.node(), b.node()},
                        [an = a.node(), bn = b.node()](Node<T>& self) {
                          for (auto* n : {an.get(), bn.get()}) {
                            if (!n->requires_grad) continue;
                            n->ensure_grad();
                            kernels::axpy(T(1), self.grad.data(), n->grad.data(), n->grad.size());
                          }
                        });
  for (std::size_t i = 0; i < a.size(); ++i) out.val()[i] = a.val()[i] + b.val()[i];
  return out;
}

// Sum of any number of same-shaped terms (used to fold per-channel losses).
template <class T>
Array<T> add_n(const std::vector<Array<T>>& terms) {
  if (terms.empty()) throw std::invalid_argument("add_n: no terms");
  std::vector<std::shared_ptr<Node<T>>> parents;
  for (const auto& t : terms) {
    if (t.shape() != terms[0].shape())
      throw std::invalid_argument("add_n: mixed shapes " + shape_str(terms[0].shape()) +
                                  " vs " + shape_str(t.shape()));
    parents.push_back(t.node());
  }
  auto out = make_op<T>(terms[0].shape(), std::move(parents), [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      kernels::axpy(T(1), self.grad.data(), p->grad.data(), p->grad.size());
    }
  });
  for (const auto& t : terms)
    for (std::size_t i = 0; i < t.size(); ++i) out.val()[i] += t.val()[i];
  return out;
}

template <class T>
Array<T> mul(const Array<T>& a, const Array<T>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  auto out = make_op<T>(a.shape(), {a.node(), b.node()},
                        [an = a.node(), bn = b.node()](Node<T>& self) {
                          if (an->requires_grad) {
                            an->ensure_grad();
                            for (std::size_t i = 0; i < an->val.size(); ++i)
                              an->grad[i] += self.grad[i] * bn->val[i];
                          }
                          if (bn->requires_grad) {
                            bn->ensure_grad();
                            for (std::size_t i = 0; i < bn->val.size(); ++i)
                              bn->grad[i] += self.grad[i] * an->val[i];
                          }
                        });
  for (std::size_t i = 0; i < a.size(); ++i) out.val()[i] = a.val()[i] * b.val()[i];
  return out;
}

template <class T>
Array<T> scale(const Array<T>& a, T s) {
  auto out = make_op<T>(a.shape(), {a.node()}, [an = a.node(), s](Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    kernels::axpy(s, self.grad.data(), an->grad.data(), an->grad.size());
  });
  for (std::size_t i = 0; i < a.size(); ++i) out.val()[i] = s * a.val()[i];
  return out;
}

template <class T>
Array<T> sum(const Array<T>& x) {
  auto out = make_op<T>({1}, {x.node()}, [xn = x.node()](Node<T>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T g = self.grad[0];
    for (auto& d : xn->grad) d += g;
  });
  T acc = 0;
  for (T v : x.val()) acc += v;
  out.val()[0] = acc;
  return out;
}

// ------------------------------------------------------------- backward ----

// Populates gradients of every tracked node reachable from the scalar loss.
// A second backward on the same loss node is rejected; the graph is released
// as it is consumed.
template <class T>
void backward(Array<T>& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                shape_str(loss.shape()));
  auto root = loss.node();
  if (root->backward_done)
    throw std::logic_error("backward: tape already consumed (double backward)");
  root->backward_done = true;
  if (!root->requires_grad) return;

  std::vector<std::shared_ptr<Node<T>>> order;
  std::unordered_set<const Node<T>*> seen;
  std::vector<std::shared_ptr<Node<T>>> stack{root};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents)
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
  }
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a->id > b->id; });

  root->ensure_grad();
  root->grad[0] = T(1);
  for (auto& n : order) {
    if (!n->backprop) continue;
    n->ensure_grad();
    n->backprop(*n);
    n->backprop = nullptr;
    n->parents.clear();
  }
}

// ------------------------------------------------------------ optimizer ----

template <class T>
struct OptimizerState {
  T learning_rate = T(0.01);
  T momentum = T(0.9);
  std::int64_t step_count = 0;
  std::vector<std::vector<T>> velocity;  // one buffer per parameter

  void bind(const std::vector<Array<T>>& params) {
    velocity.clear();
    for (const auto& p : params) velocity.emplace_back(p.size(), T(0));
  }
};

// v <- mu*v + g; w <- w - lr*v; grads zeroed afterwards.
template <class T>
void sgd_step(std::vector<Array<T>>& params, OptimizerState<T>& st) {
  if (st.learning_rate <= T(0)) throw std::invalid_argument("sgd_step: learning rate <= 0");
  if (st.momentum < T(0) || st.momentum >= T(1))
    throw std::invalid_argument("sgd_step: momentum outside [0,1)");
  if (st.velocity.size() != params.size())
    throw std::invalid_argument("sgd_step: optimizer bound to " +
                                std::to_string(st.velocity.size()) + " params, got " +
                                std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (st.velocity[i].size() != p.size())
      throw std::invalid_argument("sgd_step: velocity shape mismatch at param " +
                                  std::to_string(i));
    kernels::sgd_momentum(p.val().data(), st.velocity[i].data(), p.grad().data(),
                          st.learning_rate, st.momentum, p.size());
    p.zero_grad();
  }
  ++st.step_count;
}

// ----------------------------------------------------------- grad check ----

// Max over elements of |analytic - central difference| relative error,
// |a - n| / max(|a|, |n|, 1e-8). f must be deterministic.
template <class T>
double grad_check(const std::function<Array<T>(Array<T>&)>& f, Array<T>& x, double eps) {
  if (!x.requires_grad()) throw std::invalid_argument("grad_check: x must track gradient");
  x.grad();
  x.zero_grad();
  Array<T> y = f(x);
  if (y.size() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
  if (!std::isfinite(double(y.item())))
    throw std::runtime_error("grad_check: non-finite f(x)");
  backward(y);
  std::vector<T> analytic = x.grad();

  double max_err = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = x.val()[i];
    x.val()[i] = orig + T(eps);
    const double fp = double(f(x).item());
    x.val()[i] = orig - T(eps);
    const double fm = double(f(x).item());
    x.val()[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("grad_check: non-finite f(x) under perturbation");
    const double numeric = (fp - fm) / (2 * eps);
    const double a = double(analytic[i]);
    const double err = std::abs(a - numeric) /
                       std::max({std::abs(a), std::abs(numeric), 1e-8});
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace mimodet::ad
