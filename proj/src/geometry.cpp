#include "mimodet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mimodet::geom {

std::string to_string(const Box& b) {
  std::ostringstream os;
  os << "(" << b.x1 << "," << b.y1 << "," << b.x2 << "," << b.y2 << ")";
  return os.str();
}

double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

BoxDelta encode_delta(const Box& box, const Box& anchor) {
  if (anchor.width() <= 0 || anchor.height() <= 0)
    throw std::invalid_argument("encode_delta: degenerate anchor " + to_string(anchor));
  if (box.width() <= 0 || box.height() <= 0)
    throw std::invalid_argument("encode_delta: degenerate target box " + to_string(box));
  BoxDelta d;
  d.tx = (box.cx() - anchor.cx()) / anchor.width();
  d.ty = (box.cy() - anchor.cy()) / anchor.height();
  d.tw = std::log(box.width() / anchor.width());
  d.th = std::log(box.height() / anchor.height());
  return d;
}

Box decode_delta(const Box& anchor, const BoxDelta& d) {
  const double cx = anchor.cx() + d.tx * anchor.width();
  const double cy = anchor.cy() + d.ty * anchor.height();
  const double w = anchor.width() * std::exp(d.tw);
  const double h = anchor.height() * std::exp(d.th);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

Box clip_box(const Box& b, double w, double h) {
  auto clamp = [](double v, double hi) { return std::min(std::max(v, 0.0), hi); };
  return {clamp(b.x1, w), clamp(b.y1, h), clamp(b.x2, w), clamp(b.y2, h)};
}

AnchorGrid generate_anchors(int feat_h, int feat_w, int stride,
                            const std::vector<double>& scales,
                            const std::vector<double>& ratios) {
  if (feat_h <= 0 || feat_w <= 0 || stride <= 0)
    throw std::invalid_argument("generate_anchors: non-positive extents");
  if (scales.empty() || ratios.empty())
    throw std::invalid_argument("generate_anchors: empty scales or ratios");
  AnchorGrid g;
  g.stride = stride;
  g.scales = scales;
  g.ratios = ratios;
  g.feat_h = feat_h;
  g.feat_w = feat_w;
  g.anchors.reserve(std::size_t(feat_h) * feat_w * scales.size() * ratios.size());
  for (int i = 0; i < feat_h; ++i) {
    const double cy = (i + 0.5) * stride;
    for (int j = 0; j < feat_w; ++j) {
      const double cx = (j + 0.5) * stride;
      for (double s : scales) {
        for (double r : ratios) {
          const double w = s * std::sqrt(r);
          const double h = s / std::sqrt(r);
          g.anchors.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
        }
      }
    }
  }
  return g;
}

MatchResult match_anchors(const AnchorGrid& grid, const std::vector<Box>& gt,
                          double pos_thr, double neg_thr) {
  if (pos_thr < neg_thr)
    throw std::invalid_argument("match_anchors: pos_thr < neg_thr");
  const int na = grid.count();
  const int ng = int(gt.size());
  MatchResult r;
  r.labels.assign(na, AnchorLabel::negative);
  r.gt_index.assign(na, -1);
  r.max_iou.assign(na, 0.0);
  if (ng == 0) return r;

  std::vector<double> table(std::size_t(na) * ng);
  for (int a = 0; a < na; ++a)
    for (int g = 0; g < ng; ++g)
      table[std::size_t(a) * ng + g] = iou(grid.anchors[a], gt[g]);

  for (int a = 0; a < na; ++a) {
    double best = -1.0;
    int best_g = -1;
    for (int g = 0; g < ng; ++g) {
      const double v = table[std::size_t(a) * ng + g];
      if (v > best) {
        best = v;
        best_g = g;
      }
    }
    r.max_iou[a] = best;
    if (best >= pos_thr) {
      r.labels[a] = AnchorLabel::positive;
      r.gt_index[a] = best_g;
    } else if (best < neg_thr) {
      r.labels[a] = AnchorLabel::negative;
    } else {
      r.labels[a] = AnchorLabel::ignore;
    }
  }

  // Argmax rule: every gt claims its best anchor (lowest index on ties).
  for (int g = 0; g < ng; ++g) {
    double best = -1.0;
    int best_a = -1;
    for (int a = 0; a < na; ++a) {
      const double v = table[std::size_t(a) * ng + g];
      if (v > best) {
        best = v;
        best_a = a;
      }
    }
    if (best_a >= 0) {
      r.labels[best_a] = AnchorLabel::positive;
      r.gt_index[best_a] = g;
    }
  }
  return r;
}

}  // namespace mimodet::geom
