#include "mimodet/aggregate.hpp"

#include <algorithm>
#include <stdexcept>

namespace mimodet::agg {

namespace {

// Total order: confidence desc, then lower x1, y1, x2, y2, then source.
bool det_before(const Detection& a, const Detection& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
  if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
  if (a.box.x2 != b.box.x2) return a.box.x2 < b.box.x2;
  if (a.box.y2 != b.box.y2) return a.box.y2 < b.box.y2;
  return a.source < b.source;
}

}  // namespace

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  std::vector<Detection> sorted = dets;
  std::sort(sorted.begin(), sorted.end(), det_before);
  std::vector<Detection> kept;
  std::vector<bool> dead(sorted.size(), false);
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (dead[i]) continue;
    kept.push_back(sorted[i]);
    for (std::size_t j = i + 1; j < sorted.size(); ++j) {
      if (dead[j] || sorted[j].category != sorted[i].category) continue;
      if (geom::iou(sorted[i].box, sorted[j].box) > iou_threshold) dead[j] = true;
    }
  }
  return kept;
}

std::vector<Detection> wbf(const std::vector<std::vector<Detection>>& det_sets,
                           double iou_threshold, bool rescale_by_cluster_size,
                           int model_count) {
  std::vector<Detection> pool;
  for (const auto& set : det_sets) pool.insert(pool.end(), set.begin(), set.end());
  std::sort(pool.begin(), pool.end(), det_before);

  struct Cluster {
    int category;
    geom::Box fused;
    double conf_sum = 0;     // sum of member confidences
    double wx1 = 0, wy1 = 0, wx2 = 0, wy2 = 0;  // confidence-weighted coord sums
    int count = 0;
  };
  std::vector<Cluster> clusters;
  for (const auto& d : pool) {
    Cluster* home = nullptr;
    for (auto& c : clusters) {
      if (c.category != d.category) continue;
      if (geom::iou(c.fused, d.box) > iou_threshold) {
        home = &c;
        break;
      }
    }
    if (!home) {
      clusters.push_back({d.category, d.box, 0, 0, 0, 0, 0, 0});
      home = &clusters.back();
    }
    home->conf_sum += d.confidence;
    home->wx1 += d.confidence * d.box.x1;
    home->wy1 += d.confidence * d.box.y1;
    home->wx2 += d.confidence * d.box.x2;
    home->wy2 += d.confidence * d.box.y2;
    home->count += 1;
    if (home->conf_sum > 0)
      home->fused = {home->wx1 / home->conf_sum, home->wy1 / home->conf_sum,
                     home->wx2 / home->conf_sum, home->wy2 / home->conf_sum};
  }

  std::vector<Detection> out;
  out.reserve(clusters.size());
  for (const auto& c : clusters) {
    Detection d;
    d.box = c.fused;
    d.category = c.category;
    d.confidence = c.count > 0 ? c.conf_sum / c.count : 0.0;
    if (rescale_by_cluster_size && model_count > 0)
      d.confidence *= std::min(1.0, double(c.count) / model_count);
    d.source = -1;
    out.push_back(d);
  }
  std::sort(out.begin(), out.end(), det_before);
  return out;
}

std::vector<Detection> aggregate(const std::vector<std::vector<Detection>>& det_sets,
                                 const FusionConfig& cfg) {
  if (cfg.iou_threshold <= 0 || cfg.iou_threshold >= 1)
    throw std::invalid_argument("aggregate: iou threshold outside (0,1)");
  std::vector<Detection> fused;
  switch (cfg.method) {
    case FusionMethod::nms: {
      std::vector<Detection> pool;
      for (const auto& s : det_sets) pool.insert(pool.end(), s.begin(), s.end());
      fused = nms(pool, cfg.iou_threshold);
      break;
    }
    case FusionMethod::wbf:
      fused = wbf(det_sets, cfg.iou_threshold, cfg.rescale_by_cluster_size,
                  cfg.model_count ? cfg.model_count : int(det_sets.size()));
      break;
  }
  if (cfg.score_floor > 0) {
    std::erase_if(fused, [&](const Detection& d) { return d.confidence < cfg.score_floor; });
  }
  return fused;
}

FusionMethod fusion_method_from_name(const std::string& name) {
  if (name == "nms") return FusionMethod::nms;
  if (name == "wbf") return FusionMethod::wbf;
  throw std::invalid_argument("unknown fusion method: " + name);
}

const char* fusion_method_name(FusionMethod m) {
  return m == FusionMethod::nms ? "nms" : "wbf";
}

}  // namespace mimodet::agg
