#pragma once

// Independent single-channel Faster R-CNN loss, written with direct loops on
// plain double buffers. It shares nothing with the production path except
// the weight values (looked up by name) and the sampling plans, and exists
// purely as an oracle for the M = 1 reduction check.

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mimodet/checkpoint.hpp"
#include "mimodet/data.hpp"
#include "mimodet/geometry.hpp"
#include "mimodet/model.hpp"

namespace refdet {

using mimodet::geom::Box;

struct Tensor3 {
  int c = 0, h = 0, w = 0;
  std::vector<double> v;
  double at(int ci, int y, int x) const { return v[(std::size_t(ci) * h + y) * w + x]; }
  double& at(int ci, int y, int x) { return v[(std::size_t(ci) * h + y) * w + x]; }
};

struct Weights {
  std::map<std::string, mimodet::ckpt::Entry> by_name;

  const mimodet::ckpt::Entry& get(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("refdet: missing weight " + name);
    return it->second;
  }

  static Weights from_entries(const std::vector<mimodet::ckpt::Entry>& entries) {
    Weights w;
    for (const auto& e : entries) w.by_name[e.name] = e;
    return w;
  }
};

inline Tensor3 conv(const Tensor3& x, const mimodet::ckpt::Entry& wt,
                    const mimodet::ckpt::Entry& bias, int stride, int pad) {
  const int o = wt.shape[0], ci = wt.shape[1], kh = wt.shape[2], kw = wt.shape[3];
  if (ci != x.c) throw std::runtime_error("refdet conv: channel mismatch");
  Tensor3 y;
  y.c = o;
  y.h = (x.h + 2 * pad - kh) / stride + 1;
  y.w = (x.w + 2 * pad - kw) / stride + 1;
  y.v.assign(std::size_t(o) * y.h * y.w, 0.0);
  for (int oc = 0; oc < o; ++oc)
    for (int oy = 0; oy < y.h; ++oy)
      for (int ox = 0; ox < y.w; ++ox) {
        double acc = bias.values[std::size_t(oc)];
        for (int cc = 0; cc < ci; ++cc)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              const int iy = oy * stride - pad + ky;
              const int ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
              acc += x.at(cc, iy, ix) *
                     wt.values[((std::size_t(oc) * ci + cc) * kh + ky) * kw + kx];
            }
        y.at(oc, oy, ox) = acc;
      }
  return y;
}

inline void relu_inplace(Tensor3& t) {
  for (auto& v : t.v) v = v > 0 ? v : 0;
}

inline std::vector<double> fc(const std::vector<double>& x, const mimodet::ckpt::Entry& wt,
                              const mimodet::ckpt::Entry& bias, bool relu_after) {
  const int in = wt.shape[0], out = wt.shape[1];
  if (int(x.size()) != in) throw std::runtime_error("refdet fc: width mismatch");
  std::vector<double> y(static_cast<std::size_t>(out));
  for (int j = 0; j < out; ++j) {
    double acc = bias.values[std::size_t(j)];
    for (int i = 0; i < in; ++i) acc += x[std::size_t(i)] * wt.values[std::size_t(i) * out + j];
    y[std::size_t(j)] = relu_after && acc < 0 ? 0 : acc;
  }
  return y;
}

// Same sampling convention as the production crop: grid centers inside the
// box, pixel centers at i + 0.5, clamped edge taps.
inline std::vector<double> bilinear_crop(const Tensor3& f, const Box& box, int oh, int ow) {
  std::vector<double> out(std::size_t(f.c) * oh * ow);
  auto tap = [&](int ci, int y, int x) {
    y = std::clamp(y, 0, f.h - 1);
    x = std::clamp(x, 0, f.w - 1);
    return f.at(ci, y, x);
  };
  for (int ci = 0; ci < f.c; ++ci)
    for (int gy = 0; gy < oh; ++gy)
      for (int gx = 0; gx < ow; ++gx) {
        const double u = box.x1 + (gx + 0.5) * (box.width() / ow) - 0.5;
        const double v = box.y1 + (gy + 0.5) * (box.height() / oh) - 0.5;
        const int x0 = int(std::floor(u)), y0 = int(std::floor(v));
        const double fx = u - x0, fy = v - y0;
        out[(std::size_t(ci) * oh + gy) * ow + gx] =
            (1 - fy) * ((1 - fx) * tap(ci, y0, x0) + fx * tap(ci, y0, x0 + 1)) +
            fy * ((1 - fx) * tap(ci, y0 + 1, x0) + fx * tap(ci, y0 + 1, x0 + 1));
      }
  return out;
}

inline double cross_entropy_mean(const std::vector<std::vector<double>>& logits,
                                 const std::vector<int>& targets) {
  double loss = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    double mx = logits[i][0];
    for (double v : logits[i]) mx = std::max(mx, v);
    double denom = 0;
    for (double v : logits[i]) denom += std::exp(v - mx);
    loss -= logits[i][std::size_t(targets[i])] - mx - std::log(denom);
  }
  return loss / double(logits.size());
}

inline double smooth_l1_sum(const std::vector<double>& pred, const std::vector<double>& tgt) {
  double loss = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - tgt[i];
    const double a = std::abs(d);
    loss += a < 1 ? 0.5 * d * d : a - 0.5;
  }
  return loss;
}

// Full single-channel loss for one image given frozen plans. M must be 1 in
// the config used to build the plans and weights.
inline double total_loss(const Weights& w, const mimodet::det::MimoConfig& cfg,
                         const mimodet::data::Image& image,
                         const mimodet::det::RpnPlan& rpn_plan,
                         const mimodet::det::RoiPlan& roi_plan) {
  if (cfg.m != 1) throw std::runtime_error("refdet: single-channel oracle needs M=1");

  Tensor3 x;
  x.c = 3;
  x.h = image.height;
  x.w = image.width;
  x.v.resize(std::size_t(3) * x.h * x.w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < x.h; ++y)
      for (int xx = 0; xx < x.w; ++xx) x.at(c, y, xx) = double(image.at(xx, y, c));

  x = conv(x, w.get("backbone.0.w"), w.get("backbone.0.b"), 2, 1);
  relu_inplace(x);
  x = conv(x, w.get("backbone.1.w"), w.get("backbone.1.b"), 2, 1);
  relu_inplace(x);
  x = conv(x, w.get("backbone.2.w"), w.get("backbone.2.b"), 2, 1);
  relu_inplace(x);
  x = conv(x, w.get("backbone.3.w"), w.get("backbone.3.b"), 1, 1);
  relu_inplace(x);

  Tensor3 rpn = conv(x, w.get("rpn.conv.w"), w.get("rpn.conv.b"), 1, 1);
  relu_inplace(rpn);
  Tensor3 obj = conv(rpn, w.get("rpn.obj.w"), w.get("rpn.obj.b"), 1, 0);
  Tensor3 del = conv(rpn, w.get("rpn.delta.w"), w.get("rpn.delta.b"), 1, 0);

  const int a_per = cfg.anchors_per_cell();
  const int fw = obj.w;
  auto obj_logit = [&](int anchor, int which) {
    const int cell = anchor / a_per, k = anchor % a_per;
    return obj.at(2 * k + which, cell / fw, cell % fw);
  };
  auto delta_val = [&](int anchor, int coord) {
    const int cell = anchor / a_per, k = anchor % a_per;
    return del.at(4 * k + coord, cell / fw, cell % fw);
  };

  double loss = 0;
  {
    std::vector<std::vector<double>> logits;
    for (int a : rpn_plan.anchors) logits.push_back({obj_logit(a, 0), obj_logit(a, 1)});
    if (!logits.empty()) loss += cross_entropy_mean(logits, rpn_plan.cls_targets);
    if (!rpn_plan.positives.empty()) {
      std::vector<double> pred, tgt;
      for (std::size_t i = 0; i < rpn_plan.positives.size(); ++i) {
        for (int coord = 0; coord < 4; ++coord)
          pred.push_back(delta_val(rpn_plan.positives[i], coord));
        const auto& d = rpn_plan.reg_targets[i];
        tgt.insert(tgt.end(), {d.tx, d.ty, d.tw, d.th});
      }
      loss += cfg.lambda / double(rpn_plan.positives.size()) * smooth_l1_sum(pred, tgt);
    }
  }

  if (!roi_plan.rois.empty()) {
    std::vector<std::vector<double>> logits;
    std::vector<std::vector<double>> reg_rows;
    for (const auto& roi : roi_plan.rois) {
      const double s = cfg.anchor_stride;
      Box fb{roi.x1 / s, roi.y1 / s, roi.x2 / s, roi.y2 / s};
      auto crop = bilinear_crop(x, fb, cfg.roi_size, cfg.roi_size);
      auto h1 = fc(crop, w.get("roi.fc1.w"), w.get("roi.fc1.b"), true);
      auto h2 = fc(h1, w.get("roi.fc2.w"), w.get("roi.fc2.b"), true);
      logits.push_back(fc(h2, w.get("roi.cls.w"), w.get("roi.cls.b"), false));
      reg_rows.push_back(fc(h2, w.get("roi.reg.w"), w.get("roi.reg.b"), false));
    }
    loss += cross_entropy_mean(logits, roi_plan.cls_targets);
    if (!roi_plan.fg.empty()) {
      std::vector<double> pred, tgt;
      for (std::size_t i = 0; i < roi_plan.fg.size(); ++i) {
        const auto& row = reg_rows[std::size_t(roi_plan.fg[i])];
        pred.insert(pred.end(), row.begin(), row.end());
        const auto& d = roi_plan.reg_targets[i];
        tgt.insert(tgt.end(), {d.tx, d.ty, d.tw, d.th});
      }
      loss += cfg.lambda / double(roi_plan.fg.size()) * smooth_l1_sum(pred, tgt);
    }
  }
  return loss;
}

}  // namespace refdet
