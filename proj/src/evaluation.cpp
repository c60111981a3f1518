#include "mimodet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <set>
#include <stdexcept>

#include "mimodet/rng.hpp"

using json = nlohmann::ordered_json;

namespace mimodet::eval {

namespace {

struct FlatDet {
  int image = 0;
  agg::Detection det;
};

// Confidence desc, then image id, then the aggregation tie-break.
bool flat_before(const FlatDet& a, const FlatDet& b) {
  if (a.det.confidence != b.det.confidence) return a.det.confidence > b.det.confidence;
  if (a.image != b.image) return a.image < b.image;
  if (a.det.box.x1 != b.det.box.x1) return a.det.box.x1 < b.det.box.x1;
  if (a.det.box.y1 != b.det.box.y1) return a.det.box.y1 < b.det.box.y1;
  if (a.det.box.x2 != b.det.box.x2) return a.det.box.x2 < b.det.box.x2;
  if (a.det.box.y2 != b.det.box.y2) return a.det.box.y2 < b.det.box.y2;
  return a.det.source < b.det.source;
}

std::vector<FlatDet> flatten_class(const std::vector<DetSet>& dets, int category) {
  std::vector<FlatDet> flat;
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (const auto& d : dets[i])
      if (d.category == category) flat.push_back({int(i), d});
  std::sort(flat.begin(), flat.end(), flat_before);
  return flat;
}

}  // namespace

double average_precision(const std::vector<DetSet>& dets, const std::vector<GtSet>& gts,
                         int category, double iou_thr) {
  if (dets.size() != gts.size())
    throw std::invalid_argument("average_precision: image count mismatch");
  long npos = 0;
  for (const auto& g : gts)
    for (const auto& a : g)
      if (a.category == category) ++npos;
  if (npos == 0) return 0.0;

  auto flat = flatten_class(dets, category);
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);

  std::vector<int> is_tp(flat.size(), 0);
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const auto& f = flat[i];
    double best = 0;
    int best_g = -1;
    const auto& g = gts[std::size_t(f.image)];
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (g[j].category != category || used[std::size_t(f.image)][j]) continue;
      const double v = geom::iou(f.det.box, g[j].box);
      if (v >= iou_thr && v > best) {
        best = v;
        best_g = int(j);
      }
    }
    if (best_g >= 0) {
      is_tp[i] = 1;
      used[std::size_t(f.image)][std::size_t(best_g)] = true;
    }
  }

  // precision/recall points after each detection, then 101-point interpolation
  std::vector<double> prec(flat.size()), rec(flat.size());
  long tp = 0, fp = 0;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    if (is_tp[i]) ++tp; else ++fp;
    prec[i] = double(tp) / double(tp + fp);
    rec[i] = double(tp) / double(npos);
  }
  std::vector<double> cummax(flat.size());
  for (std::size_t i = flat.size(); i-- > 0;)
    cummax[i] = std::max(prec[i], i + 1 < flat.size() ? cummax[i + 1] : 0.0);

  double sum = 0;
  std::size_t j = 0;
  for (int r = 0; r <= 100; ++r) {
    const double want = double(r) / 100.0;
    while (j < flat.size() && rec[j] < want) ++j;
    sum += j < flat.size() ? cummax[j] : 0.0;
  }
  return sum / 101.0;
}

MeanApBreakdown mean_ap(const std::vector<DetSet>& dets, const std::vector<GtSet>& gts,
                        const std::vector<double>& thresholds) {
  std::set<int> classes;
  for (const auto& g : gts)
    for (const auto& a : g) classes.insert(a.category);

  MeanApBreakdown out;
  if (classes.empty() || thresholds.empty()) return out;

  std::map<std::string, double> thr_sum;
  for (int c : classes) {
    double class_sum = 0;
    for (double t : thresholds) {
      const double ap = average_precision(dets, gts, c, t);
      class_sum += ap;
      char key[8];
      std::snprintf(key, sizeof(key), "%.2f", t);
      thr_sum[key] += ap;
      if (t == 0.5) out.map50 += ap;
    }
    out.per_class[c] = class_sum / double(thresholds.size());
  }
  double total = 0;
  for (const auto& [c, ap] : out.per_class) total += ap;
  out.map = total / double(classes.size());
  out.map50 /= double(classes.size());
  for (const auto& [k, v] : thr_sum) out.per_threshold[k] = v / double(classes.size());
  return out;
}

std::vector<std::pair<double, int>> match_for_calibration(const std::vector<DetSet>& dets,
                                                          const std::vector<GtSet>& gts,
                                                          const CalibrationConfig& cfg) {
  if (dets.size() != gts.size())
    throw std::invalid_argument("match_for_calibration: image count mismatch");
  std::vector<FlatDet> flat;
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (const auto& d : dets[i])
      if (d.confidence >= cfg.score_floor) flat.push_back({int(i), d});
  std::sort(flat.begin(), flat.end(), flat_before);

  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);

  std::vector<std::pair<double, int>> out;
  out.reserve(flat.size());
  for (const auto& f : flat) {
    double best = 0;
    int best_g = -1;
    const auto& g = gts[std::size_t(f.image)];
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (g[j].category != f.det.category || used[std::size_t(f.image)][j]) continue;
      const double v = geom::iou(f.det.box, g[j].box);
      if (v >= cfg.match_iou && v > best) {
        best = v;
        best_g = int(j);
      }
    }
    if (best_g >= 0) used[std::size_t(f.image)][std::size_t(best_g)] = true;
    out.emplace_back(f.det.confidence, best_g >= 0 ? 1 : 0);
  }
  return out;
}

EceResult ece(const std::vector<std::pair<double, int>>& matched,
              const CalibrationConfig& cfg) {
  if (cfg.bins < 1) throw std::invalid_argument("ece: bins must be >= 1");
  for (const auto& [conf, correct] : matched) {
    (void)correct;
    if (conf < 0.0 || conf > 1.0)
      throw std::invalid_argument("ece: confidence " + std::to_string(conf) +
                                  " outside [0,1]");
  }
  EceResult r;
  if (matched.empty()) {
    r.empty = true;
    return r;
  }
  const int b = cfg.bins;
  std::vector<double> conf_sum(std::size_t(b), 0), acc_sum(std::size_t(b), 0);
  std::vector<long> count(std::size_t(b), 0);
  for (const auto& [conf, correct] : matched) {
    const int idx = std::min(b - 1, int(conf * b));
    conf_sum[std::size_t(idx)] += conf;
    acc_sum[std::size_t(idx)] += correct;
    count[std::size_t(idx)] += 1;
  }
  const double n = double(matched.size());
  double total = 0;
  for (int i = 0; i < b; ++i) {
    if (count[std::size_t(i)] == 0) continue;
    const double acc = acc_sum[std::size_t(i)] / double(count[std::size_t(i)]);
    const double avg_conf = conf_sum[std::size_t(i)] / double(count[std::size_t(i)]);
    total += double(count[std::size_t(i)]) / n * std::abs(acc - avg_conf);
  }
  r.value = total;
  return r;
}

Counts count_matches(const std::vector<DetSet>& dets, const std::vector<GtSet>& gts,
                     const CalibrationConfig& cfg) {
  auto matched = match_for_calibration(dets, gts, cfg);
  Counts c;
  for (const auto& [conf, correct] : matched) {
    (void)conf;
    if (correct) ++c.tp; else ++c.fp;
  }
  long total_gt = 0;
  for (const auto& g : gts) total_gt += long(g.size());
  c.fn = total_gt - c.tp;
  return c;
}

EvalReport evaluate(const std::vector<DetSet>& dets, const std::vector<GtSet>& gts,
                    const CalibrationConfig& calib) {
  EvalReport r;
  auto ap = mean_ap(dets, gts);
  r.map = ap.map;
  r.map50 = ap.map50;
  r.per_class_ap = ap.per_class;
  r.per_threshold_ap = ap.per_threshold;
  auto e = ece(match_for_calibration(dets, gts, calib), calib);
  r.ece = e.value;
  r.ece_empty = e.empty;
  r.counts = count_matches(dets, gts, calib);
  return r;
}

EvalReport robustness_report(const std::function<DetSet(const data::Image&)>& predict_fn,
                             const std::vector<data::Sample>& clean_set,
                             const std::vector<data::CorruptionKind>& kinds, int severity,
                             const CalibrationConfig& calib, std::uint64_t eval_seed) {
  std::vector<GtSet> gts;
  gts.reserve(clean_set.size());
  for (const auto& s : clean_set) gts.push_back(s.annotations);

  std::vector<DetSet> clean_dets;
  clean_dets.reserve(clean_set.size());
  for (const auto& s : clean_set) clean_dets.push_back(predict_fn(s.image));
  EvalReport r = evaluate(clean_dets, gts, calib);

  if (!kinds.empty()) {
    r.has_corrupted = true;
    double map_sum = 0, ece_sum = 0;
    for (auto kind : kinds) {
      std::vector<DetSet> dets;
      dets.reserve(clean_set.size());
      for (std::size_t i = 0; i < clean_set.size(); ++i) {
        data::CorruptionSpec spec{kind, severity,
                                  mix_seed(eval_seed, (std::uint64_t(kind) << 32) | i)};
        dets.push_back(predict_fn(data::corrupt(clean_set[i].image, spec)));
      }
      auto ap = mean_ap(dets, gts);
      auto e = ece(match_for_calibration(dets, gts, calib), calib);
      r.corrupted[data::corruption_name(kind)] = {ap.map, e.value};
      map_sum += ap.map;
      ece_sum += e.value;
    }
    r.c_map = map_sum / double(kinds.size());
    r.c_ece = ece_sum / double(kinds.size());
  }
  return r;
}

void write_report_json(const EvalReport& report, const std::string& path) {
  json j;
  j["name"] = report.name;
  j["map"] = report.map;
  j["map50"] = report.map50;
  j["per_class_ap"] = json::object();
  for (const auto& [c, v] : report.per_class_ap) j["per_class_ap"][std::to_string(c)] = v;
  j["per_threshold_ap"] = json::object();
  for (const auto& [k, v] : report.per_threshold_ap) j["per_threshold_ap"][k] = v;
  j["ece"] = report.ece;
  j["ece_empty"] = report.ece_empty;
  j["counts"] = {{"tp", report.counts.tp}, {"fp", report.counts.fp}, {"fn", report.counts.fn}};
  j["has_corrupted"] = report.has_corrupted;
  j["corrupted"] = json::object();
  for (const auto& [k, row] : report.corrupted)
    j["corrupted"][k] = {{"map", row.map}, {"ece", row.ece}};
  j["c_map"] = report.c_map;
  j["c_ece"] = report.c_ece;
  j["params"] = report.params;
  j["ms_per_image"] = report.ms_per_image;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("write_report_json: cannot open " + path);
  os << j.dump(2) << "\n";
}

EvalReport read_report_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_report_json: missing report file " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("read_report_json: " + path + ": " + e.what());
  }
  EvalReport r;
  r.name = j.value("name", "");
  r.map = j.at("map").get<double>();
  r.map50 = j.at("map50").get<double>();
  for (const auto& [k, v] : j.at("per_class_ap").items())
    r.per_class_ap[std::stoi(k)] = v.get<double>();
  for (const auto& [k, v] : j.at("per_threshold_ap").items())
    r.per_threshold_ap[k] = v.get<double>();
  r.ece = j.at("ece").get<double>();
  r.ece_empty = j.at("ece_empty").get<bool>();
  r.counts.tp = j.at("counts").at("tp").get<long>();
  r.counts.fp = j.at("counts").at("fp").get<long>();
  r.counts.fn = j.at("counts").at("fn").get<long>();
  r.has_corrupted = j.at("has_corrupted").get<bool>();
  for (const auto& [k, v] : j.at("corrupted").items())
    r.corrupted[k] = {v.at("map").get<double>(), v.at("ece").get<double>()};
  r.c_map = j.at("c_map").get<double>();
  r.c_ece = j.at("c_ece").get<double>();
  r.params = j.value("params", 0.0);
  r.ms_per_image = j.value("ms_per_image", 0.0);
  return r;
}

std::string report_csv_header() { return "model,map,ece,c_map,c_ece"; }

std::string report_csv_row(const EvalReport& report) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f", report.name.c_str(), report.map,
                report.ece, report.c_map, report.c_ece);
  return buf;
}

void write_detections_json(const std::vector<DetSet>& dets, const std::string& path) {
  json arr = json::array();
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (const auto& d : dets[i])
      arr.push_back({{"image_id", int(i)},
                     {"bbox", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}},
                     {"category_id", d.category},
                     {"score", d.confidence}});
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("write_detections_json: cannot open " + path);
  os << arr.dump(2) << "\n";
}

std::vector<DetSet> read_detections_json(const std::string& path, int image_count) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_detections_json: missing file " + path);
  json arr;
  try {
    is >> arr;
  } catch (const json::exception& e) {
    throw std::runtime_error("read_detections_json: " + path + ": " + e.what());
  }
  if (!arr.is_array())
    throw std::runtime_error("read_detections_json: " + path + ": expected an array");
  int max_id = image_count - 1;
  if (image_count < 0)
    for (const auto& d : arr) max_id = std::max(max_id, d.at("image_id").get<int>());
  std::vector<DetSet> out(std::size_t(max_id + 1));
  for (const auto& d : arr) {
    const int id = d.at("image_id").get<int>();
    if (id < 0 || id > max_id)
      throw std::runtime_error("read_detections_json: " + path + ": image_id " +
                               std::to_string(id) + " out of range");
    const auto& bb = d.at("bbox");
    agg::Detection det;
    det.box = {bb.at(0).get<double>(), bb.at(1).get<double>(), bb.at(2).get<double>(),
               bb.at(3).get<double>()};
    det.category = d.at("category_id").get<int>();
    det.confidence = d.at("score").get<double>();
    out[std::size_t(id)].push_back(det);
  }
  return out;
}

}  // namespace mimodet::eval
