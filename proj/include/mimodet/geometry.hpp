#pragma once

#include <string>
#include <vector>

// Boxes, IoU, anchors, delta coding and anchor matching. Corner convention
// (x1,y1,x2,y2) throughout; center form exists only inside encode/decode.
// Coordinates are double so that encode/decode round-trips are exact to
// well below the 1e-5 contract.

namespace mimodet::geom {

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
};

std::string to_string(const Box& b);

// tx,ty: center shift normalized by anchor size; tw,th: log size ratios.
struct BoxDelta {
  double tx = 0, ty = 0, tw = 0, th = 0;
};

double iou(const Box& a, const Box& b);

// Throws if the target box or the anchor is degenerate.
BoxDelta encode_delta(const Box& box, const Box& anchor);
Box decode_delta(const Box& anchor, const BoxDelta& d);

Box clip_box(const Box& b, double w, double h);

struct AnchorGrid {
  std::vector<Box> anchors;  // row-major over (y, x, scale, ratio)
  int stride = 0;
  std::vector<double> scales;
  std::vector<double> ratios;
  int feat_h = 0, feat_w = 0;

  int count() const { return int(anchors.size()); }
  int per_cell() const { return int(scales.size() * ratios.size()); }
};

// Anchor for cell (i,j) is centered at ((j+0.5)*stride, (i+0.5)*stride) with
// width scale*sqrt(ratio) and height scale/sqrt(ratio). Boxes may stick out
// of the image; callers clip when needed.
AnchorGrid generate_anchors(int feat_h, int feat_w, int stride,
                            const std::vector<double>& scales,
                            const std::vector<double>& ratios);

enum class AnchorLabel { negative = 0, positive = 1, ignore = 2 };

struct MatchResult {
  std::vector<AnchorLabel> labels;  // one per anchor
  std::vector<int> gt_index;        // valid where positive, else -1
  std::vector<double> max_iou;      // best IoU per anchor
};

// Threshold rule plus the per-gt argmax rule, so every ground-truth box owns
// at least one positive anchor. Ties on the argmax go to the lowest anchor
// index; when several gts force the same anchor, the highest gt index wins.
MatchResult match_anchors(const AnchorGrid& grid, const std::vector<Box>& gt,
                          double pos_thr, double neg_thr);

}  // namespace mimodet::geom
