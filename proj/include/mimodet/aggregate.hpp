#pragma once

#include <string>
#include <vector>

#include "mimodet/geometry.hpp"

// Combining M detection sets into one: greedy per-class NMS and Weighted
// Boxes Fusion. Both use one total ordering (confidence desc, then x1, y1,
// x2, y2, source) so results are permutation-invariant over input order.

namespace mimodet::agg {

struct Detection {
  geom::Box box;
  int category = 0;
  double confidence = 0.0;
  int source = 0;  // channel / model index; -1 marks a fused box
};

enum class FusionMethod { nms, wbf };

struct FusionConfig {
  FusionMethod method = FusionMethod::wbf;
  double iou_threshold = 0.55;  // 0.5 is the usual nms default
  double score_floor = 0.0;
  // The original WBF rescales confidence by cluster size over model count;
  // the default here is the plain average.
  bool rescale_by_cluster_size = false;
  int model_count = 0;  // used only when rescaling
};

// Greedy per-class suppression; kept detections are returned unmodified,
// ordered by the total order above.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold);

// Confidence-desc clustering per class: a detection joins the first existing
// cluster whose current fused box overlaps more than the threshold, else
// seeds a new one. Fused coordinates are the confidence-weighted mean of the
// members, fused confidence the plain mean.
std::vector<Detection> wbf(const std::vector<std::vector<Detection>>& det_sets,
                           double iou_threshold, bool rescale_by_cluster_size = false,
                           int model_count = 0);

std::vector<Detection> aggregate(const std::vector<std::vector<Detection>>& det_sets,
                                 const FusionConfig& cfg);

FusionMethod fusion_method_from_name(const std::string& name);
const char* fusion_method_name(FusionMethod m);

}  // namespace mimodet::agg
