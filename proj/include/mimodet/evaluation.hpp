#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mimodet/aggregate.hpp"
#include "mimodet/data.hpp"

// mAP (101-point interpolation, COCO-style threshold averaging), detection
// ECE, and the clean/corrupted report structure. Matching is greedy in
// confidence order with the aggregation module's total tie-break, so every
// number here is deterministic and permutation-invariant.

namespace mimodet::eval {

// Detections and ground truth for one image; evaluation inputs are parallel
// per-image vectors.
using DetSet = std::vector<agg::Detection>;
using GtSet = std::vector<data::Annotation>;

struct CalibrationConfig {
  int bins = 10;
  double match_iou = 0.5;
  double score_floor = 0.05;
};

struct EceResult {
  double value = 0;
  bool empty = false;  // no predictions above the floor; value defined 0
};

struct Counts {
  long tp = 0, fp = 0, fn = 0;
};

struct CorruptedRow {
  double map = 0;
  double ece = 0;
};

struct EvalReport {
  std::string name;
  double map = 0;    // mean over classes present and IoU 0.50:0.05:0.95
  double map50 = 0;  // IoU 0.5 only
  std::map<int, double> per_class_ap;          // class id -> AP averaged over thresholds
  std::map<std::string, double> per_threshold_ap;  // "0.50" etc -> AP averaged over classes
  double ece = 0;
  bool ece_empty = false;
  Counts counts;  // at IoU 0.5, score floor from CalibrationConfig
  std::map<std::string, CorruptedRow> corrupted;  // corruption kind -> row
  bool has_corrupted = false;
  double c_map = 0, c_ece = 0;  // unweighted means over corruption kinds
  double params = 0;
  double ms_per_image = 0;
};

inline const std::vector<double>& coco_thresholds() {
  static const std::vector<double> t{0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95};
  return t;
}

// AP of one class at one IoU threshold; 0 when the class has ground truth
// but no true positives, 0 when it has no ground truth (mean_ap skips such
// classes instead).
double average_precision(const std::vector<DetSet>& dets, const std::vector<GtSet>& gts,
                         int category, double iou_thr);

struct MeanApBreakdown {
  double map = 0;
  double map50 = 0;
  std::map<int, double> per_class;
  std::map<std::string, double> per_threshold;
};

MeanApBreakdown mean_ap(const std::vector<DetSet>& dets, const std::vector<GtSet>& gts,
                        const std::vector<double>& thresholds = coco_thresholds());

// (confidence, correct) pairs for calibration: detections above the score
// floor in confidence order; correct = greedy same-class match at the
// configured IoU.
std::vector<std::pair<double, int>> match_for_calibration(const std::vector<DetSet>& dets,
                                                          const std::vector<GtSet>& gts,
                                                          const CalibrationConfig& cfg);

EceResult ece(const std::vector<std::pair<double, int>>& matched, const CalibrationConfig& cfg);

Counts count_matches(const std::vector<DetSet>& dets, const std::vector<GtSet>& gts,
                     const CalibrationConfig& cfg);

// Clean metrics plus one corrupted block per corruption kind at the given
// severity. predict_fn maps an image to the final (already fused) detection
// list; corruption seeds derive from eval_seed and the image index.
EvalReport robustness_report(
    const std::function<DetSet(const data::Image&)>& predict_fn,
    const std::vector<data::Sample>& clean_set,
    const std::vector<data::CorruptionKind>& kinds, int severity,
    const CalibrationConfig& calib, std::uint64_t eval_seed);

// Clean-only convenience used by the validation loop.
EvalReport evaluate(const std::vector<DetSet>& dets, const std::vector<GtSet>& gts,
                    const CalibrationConfig& calib);

void write_report_json(const EvalReport& report, const std::string& path);
EvalReport read_report_json(const std::string& path);

// Table-2-shaped row: model,map,ece,c_map,c_ece
std::string report_csv_header();
std::string report_csv_row(const EvalReport& report);

// Detections JSON shared with the fusion CLI:
// [{"image_id","bbox":[x1,y1,x2,y2],"category_id","score"}]
void write_detections_json(const std::vector<DetSet>& dets, const std::string& path);
std::vector<DetSet> read_detections_json(const std::string& path, int image_count);

}  // namespace mimodet::eval
