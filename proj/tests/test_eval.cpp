#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "mimodet/evaluation.hpp"
#include "mimodet/rng.hpp"

using namespace mimodet;
using agg::Detection;
using eval::DetSet;
using eval::GtSet;

namespace {

// Deliberately naive re-implementation of classed AP used as the oracle:
// O(n^2) selection sort, O(101*n) interpolation scan, no shared helpers.
double oracle_ap(const std::vector<DetSet>& dets, const std::vector<GtSet>& gts, int cls,
                 double thr) {
  struct Row {
    int image;
    Detection det;
  };
  std::vector<Row> rows;
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (const auto& d : dets[i])
      if (d.category == cls) rows.push_back({int(i), d});
  // selection sort by the documented total order
  auto earlier = [](const Row& a, const Row& b) {
    if (a.det.confidence != b.det.confidence) return a.det.confidence > b.det.confidence;
    if (a.image != b.image) return a.image < b.image;
    if (a.det.box.x1 != b.det.box.x1) return a.det.box.x1 < b.det.box.x1;
    if (a.det.box.y1 != b.det.box.y1) return a.det.box.y1 < b.det.box.y1;
    if (a.det.box.x2 != b.det.box.x2) return a.det.box.x2 < b.det.box.x2;
    if (a.det.box.y2 != b.det.box.y2) return a.det.box.y2 < b.det.box.y2;
    return a.det.source < b.det.source;
  };
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::size_t best = i;
    for (std::size_t j = i + 1; j < rows.size(); ++j)
      if (earlier(rows[j], rows[best])) best = j;
    std::swap(rows[i], rows[best]);
  }

  long npos = 0;
  for (const auto& g : gts)
    for (const auto& a : g)
      if (a.category == cls) ++npos;
  if (npos == 0) return 0.0;

  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
  std::vector<double> prec, rec;
  long tp = 0, fp = 0;
  for (const auto& r : rows) {
    double best_iou = 0;
    int best_g = -1;
    for (std::size_t j = 0; j < gts[std::size_t(r.image)].size(); ++j) {
      const auto& g = gts[std::size_t(r.image)][j];
      if (g.category != cls || used[std::size_t(r.image)][j]) continue;
      const double v = geom::iou(r.det.box, g.box);
      if (v >= thr && v > best_iou) {
        best_iou = v;
        best_g = int(j);
      }
    }
    if (best_g >= 0) {
      used[std::size_t(r.image)][std::size_t(best_g)] = true;
      ++tp;
    } else {
      ++fp;
    }
    prec.push_back(double(tp) / double(tp + fp));
    rec.push_back(double(tp) / double(npos));
  }

  double sum = 0;
  for (int ri = 0; ri <= 100; ++ri) {
    const double want = double(ri) / 100.0;
    double mx = 0;
    for (std::size_t j = 0; j < prec.size(); ++j)
      if (rec[j] >= want) mx = std::max(mx, prec[j]);
    sum += mx;
  }
  return sum / 101.0;
}

double oracle_mean_ap(const std::vector<DetSet>& dets, const std::vector<GtSet>& gts) {
  std::vector<int> classes;
  for (const auto& g : gts)
    for (const auto& a : g)
      if (std::find(classes.begin(), classes.end(), a.category) == classes.end())
        classes.push_back(a.category);
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) return 0.0;
  double total = 0;
  for (int c : classes) {
    double s = 0;
    for (double t : eval::coco_thresholds()) s += oracle_ap(dets, gts, c, t);
    total += s / double(eval::coco_thresholds().size());
  }
  return total / double(classes.size());
}

struct RandomInstance {
  std::vector<DetSet> dets;
  std::vector<GtSet> gts;
};

RandomInstance random_instance(Rng& rng, int max_images = 10, int max_boxes = 30) {
  RandomInstance inst;
  const int images = int(rng.uniform_int(1, max_images));
  inst.dets.resize(std::size_t(images));
  inst.gts.resize(std::size_t(images));
  int boxes = 0;
  for (int i = 0; i < images && boxes < max_boxes; ++i) {
    const int ng = int(rng.uniform_int(0, 3));
    for (int g = 0; g < ng && boxes < max_boxes; ++g, ++boxes) {
      const double x1 = rng.uniform(0, 48), y1 = rng.uniform(0, 48);
      inst.gts[std::size_t(i)].push_back(
          {{x1, y1, x1 + rng.uniform(4, 16), y1 + rng.uniform(4, 16)},
           int(rng.uniform_int(0, 2))});
    }
    const int nd = int(rng.uniform_int(0, 4));
    for (int d = 0; d < nd; ++d) {
      Detection det;
      if (!inst.gts[std::size_t(i)].empty() && rng.uniform01() < 0.6) {
        // near-miss or hit around a gt box
        const auto& g = inst.gts[std::size_t(i)][std::size_t(
            rng.uniform_int(0, std::int64_t(inst.gts[std::size_t(i)].size()) - 1))];
        const double jx = rng.uniform(-4, 4), jy = rng.uniform(-4, 4);
        det.box = {g.box.x1 + jx, g.box.y1 + jy, g.box.x2 + jx, g.box.y2 + jy};
        det.category = rng.uniform01() < 0.8 ? g.category : int(rng.uniform_int(0, 2));
      } else {
        const double x1 = rng.uniform(0, 48), y1 = rng.uniform(0, 48);
        det.box = {x1, y1, x1 + rng.uniform(4, 16), y1 + rng.uniform(4, 16)};
        det.category = int(rng.uniform_int(0, 2));
      }
      det.confidence = rng.uniform(0.05, 1.0);
      inst.dets[std::size_t(i)].push_back(det);
    }
  }
  return inst;
}

}  // namespace

TEST_CASE("average_precision: perfect, absent, and the half-precision case") {
  GtSet gt = {{{10, 10, 20, 20}, 0}, {{30, 30, 40, 40}, 0}};
  DetSet perfect = {{{10, 10, 20, 20}, 0, 1.0, 0}, {{30, 30, 40, 40}, 0, 1.0, 0}};
  CHECK(eval::average_precision({perfect}, {gt}, 0, 0.5) == doctest::Approx(1.0));

  CHECK(eval::average_precision({{}}, {gt}, 0, 0.5) == doctest::Approx(0.0));

  // 1 gt; FP at conf .9, TP at conf .8 -> AP 0.5
  GtSet one = {{{10, 10, 20, 20}, 0}};
  DetSet two = {{{40, 40, 50, 50}, 0, 0.9, 0}, {{10, 10, 20, 20}, 0, 0.8, 0}};
  CHECK(eval::average_precision({two}, {one}, 0, 0.5) == doctest::Approx(0.5));
}

TEST_CASE("mean_ap: perfect detector and threshold ordering") {
  GtSet gt = {{{8, 8, 24, 24}, 0}, {{40, 10, 56, 26}, 1}};
  DetSet perfect;
  for (const auto& g : gt) perfect.push_back({g.box, g.category, 1.0, 0});
  auto br = eval::mean_ap({perfect}, {gt});
  CHECK(br.map == doctest::Approx(1.0));
  CHECK(br.map50 == doctest::Approx(1.0));

  // shifted detector: gone at 0.95, possibly alive at 0.5
  DetSet shifted;
  for (const auto& g : gt)
    shifted.push_back({{g.box.x1 + 3, g.box.y1 + 3, g.box.x2 + 3, g.box.y2 + 3},
                       g.category, 1.0, 0});
  auto sb = eval::mean_ap({shifted}, {gt});
  CHECK(sb.per_threshold.at("0.95") <= sb.per_threshold.at("0.50"));

  // class absent from gt is skipped, not averaged in
  DetSet with_junk = perfect;
  with_junk.push_back({{0, 0, 5, 5}, 2, 0.99, 0});
  auto jb = eval::mean_ap({with_junk}, {gt});
  CHECK(jb.per_class.count(2) == 0);
}

TEST_CASE("mean_ap equals the brute-force oracle exactly on 200 random instances") {
  Rng rng(404);
  for (int inst = 0; inst < 200; ++inst) {
    auto ri = random_instance(rng);
    auto got = eval::mean_ap(ri.dets, ri.gts);
    const double want = oracle_mean_ap(ri.dets, ri.gts);
    CHECK(got.map == want);  // bit-exact: same math, independent code
  }
}

TEST_CASE("AP is antitone in the IoU threshold") {
  Rng rng(11);
  for (int inst = 0; inst < 30; ++inst) {
    auto ri = random_instance(rng);
    double prev = 2.0;
    for (double t : eval::coco_thresholds()) {
      double sum = 0;
      for (int c = 0; c < 3; ++c) sum += eval::average_precision(ri.dets, ri.gts, c, t);
      CHECK(sum <= prev + 1e-12);
      prev = sum;
    }
  }
}

TEST_CASE("removing a false positive never decreases AP") {
  GtSet gt = {{{10, 10, 20, 20}, 0}};
  DetSet dets = {{{40, 40, 50, 50}, 0, 0.9, 0},   // FP
                 {{10, 10, 20, 20}, 0, 0.8, 0},   // TP
                 {{0, 0, 6, 6}, 0, 0.3, 0}};      // FP
  const double base = eval::average_precision({dets}, {gt}, 0, 0.5);
  for (std::size_t drop : {std::size_t(0), std::size_t(2)}) {
    DetSet fewer;
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (i != drop) fewer.push_back(dets[i]);
    CHECK(eval::average_precision({fewer}, {gt}, 0, 0.5) >= base - 1e-12);
  }
}

TEST_CASE("match_for_calibration: perfect, background, duplicate cases") {
  eval::CalibrationConfig cfg;
  GtSet gt = {{{10, 10, 20, 20}, 1}};
  DetSet perfect = {{{10, 10, 20, 20}, 1, 0.9, 0}};
  auto m1 = eval::match_for_calibration({perfect}, {gt}, cfg);
  REQUIRE(m1.size() == 1);
  CHECK(m1[0].second == 1);

  DetSet wrong = {{{40, 40, 50, 50}, 1, 0.9, 0}, {{10, 10, 20, 20}, 0, 0.8, 0}};
  auto m2 = eval::match_for_calibration({wrong}, {gt}, cfg);
  REQUIRE(m2.size() == 2);
  CHECK(m2[0].second == 0);
  CHECK(m2[1].second == 0);  // class mismatch

  DetSet dup = {{{10, 10, 20, 20}, 1, 0.9, 0}, {{11, 11, 21, 21}, 1, 0.7, 0}};
  auto m3 = eval::match_for_calibration({dup}, {gt}, cfg);
  REQUIRE(m3.size() == 2);
  CHECK(m3[0].second + m3[1].second == 1);  // exactly one marked correct
  CHECK(m3[0].second == 1);                 // the higher-confidence one

  // score floor drops low-confidence detections entirely
  DetSet low = {{{10, 10, 20, 20}, 1, 0.01, 0}};
  CHECK(eval::match_for_calibration({low}, {gt}, cfg).empty());
}

TEST_CASE("ece: closed-form examples and edge cases") {
  eval::CalibrationConfig cfg;

  // one bin: 4 preds at conf .8, 3 correct -> |0.75 - 0.8| = 0.05
  std::vector<std::pair<double, int>> one_bin(4, {0.8, 1});
  one_bin[3].second = 0;
  CHECK(eval::ece(one_bin, cfg).value == doctest::Approx(std::abs(0.75 - 0.8)).epsilon(1e-12));

  // two bins: (2 @ .9, acc 1.0) and (2 @ .6, acc .5) -> 0.5*0.1 + 0.5*0.1
  std::vector<std::pair<double, int>> two_bins = {{0.9, 1}, {0.9, 1}, {0.6, 1}, {0.6, 0}};
  CHECK(eval::ece(two_bins, cfg).value == doctest::Approx(0.1).epsilon(1e-12));

  // dyadic confidences equal to empirical accuracy in every bin -> exactly 0
  std::vector<std::pair<double, int>> calibrated;
  for (int i = 0; i < 4; ++i) calibrated.push_back({0.75, i < 3 ? 1 : 0});
  for (int i = 0; i < 4; ++i) calibrated.push_back({0.25, i < 1 ? 1 : 0});
  for (int i = 0; i < 2; ++i) calibrated.push_back({0.5, i < 1 ? 1 : 0});
  CHECK(eval::ece(calibrated, cfg).value < 1e-12);

  // permutation invariance
  Rng rng(3);
  std::vector<std::pair<double, int>> list;
  for (int i = 0; i < 50; ++i)
    list.push_back({rng.uniform(0, 1), rng.uniform01() < 0.5 ? 1 : 0});
  const double base = eval::ece(list, cfg).value;
  for (int t = 0; t < 5; ++t) {
    for (std::size_t i = list.size(); i > 1; --i)
      std::swap(list[i - 1], list[std::size_t(rng.uniform_int(0, std::int64_t(i) - 1))]);
    CHECK(eval::ece(list, cfg).value == doctest::Approx(base).epsilon(1e-12));
  }
  CHECK(base >= 0.0);
  CHECK(base <= 1.0);

  auto empty = eval::ece({}, cfg);
  CHECK(empty.value == 0.0);
  CHECK(empty.empty);

  CHECK_THROWS_AS(eval::ece({{1.2, 1}}, cfg), std::invalid_argument);
  CHECK_THROWS_AS(eval::ece({{-0.1, 0}}, cfg), std::invalid_argument);
}

TEST_CASE("robustness_report: corruption-blind detector reproduces clean numbers") {
  data::SceneConfig sc;
  sc.seed = 5;
  sc.width = sc.height = 32;
  sc.min_size = 10;
  sc.max_size = 16;
  auto set = data::generate_dataset(sc, 6);

  // Control detector: emits each image's ground truth, ignoring pixels.
  std::size_t cursor = 0;
  std::vector<eval::GtSet> gts;
  for (const auto& s : set) gts.push_back(s.annotations);
  auto predict_fn = [&](const data::Image&) {
    const auto& g = gts[cursor % gts.size()];
    ++cursor;
    eval::DetSet out;
    for (const auto& a : g) out.push_back({a.box, a.category, 1.0, 0});
    return out;
  };
  // The callback is called clean-first image by image, then per corruption
  // kind in the same order, so the modulo replays the same answers.
  auto report = eval::robustness_report(predict_fn, set, {data::CorruptionKind::gaussian_noise},
                                        3, {}, 1);
  CHECK(report.map == doctest::Approx(1.0));
  CHECK(report.has_corrupted);
  CHECK(report.c_map == doctest::Approx(report.map));
  CHECK(report.c_ece == doctest::Approx(report.ece).epsilon(1e-12));
  CHECK(report.counts.fp == 0);
  CHECK(report.counts.fn == 0);
}

TEST_CASE("report JSON round-trips") {
  namespace fs = std::filesystem;
  eval::EvalReport r;
  r.name = "baseline-s0";
  r.map = 0.61725;
  r.map50 = 0.871;
  r.per_class_ap = {{0, 0.7}, {1, 0.6}, {2, 0.55}};
  r.per_threshold_ap = {{"0.50", 0.87}, {"0.95", 0.12}};
  r.ece = 0.041;
  r.counts = {120, 30, 14};
  r.has_corrupted = true;
  r.corrupted["blur"] = {0.31, 0.09};
  r.corrupted["snow-dots"] = {0.42, 0.07};
  r.c_map = 0.365;
  r.c_ece = 0.08;
  r.params = 377086;
  r.ms_per_image = 4.2;

  const auto path = (fs::temp_directory_path() / "mimodet_report.json").string();
  eval::write_report_json(r, path);
  auto back = eval::read_report_json(path);
  CHECK(back.name == r.name);
  CHECK(back.map == r.map);
  CHECK(back.per_class_ap == r.per_class_ap);
  CHECK(back.per_threshold_ap == r.per_threshold_ap);
  CHECK(back.counts.tp == r.counts.tp);
  CHECK(back.corrupted.at("blur").map == r.corrupted.at("blur").map);
  CHECK(back.c_map == r.c_map);
  CHECK(back.ms_per_image == r.ms_per_image);

  // second write is byte-identical
  const auto path2 = (fs::temp_directory_path() / "mimodet_report2.json").string();
  eval::write_report_json(back, path2);
  std::ifstream f1(path), f2(path2);
  std::string s1((std::istreambuf_iterator<char>(f1)), {});
  std::string s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);
  fs::remove(path);
  fs::remove(path2);

  CHECK(eval::report_csv_header() == "model,map,ece,c_map,c_ece");
  CHECK(eval::report_csv_row(r).substr(0, 20) == "baseline-s0,0.617250");
}

TEST_CASE("detections JSON round-trips") {
  namespace fs = std::filesystem;
  Rng rng(9);
  std::vector<eval::DetSet> dets(3);
  for (int i = 0; i < 3; ++i)
    for (int d = 0; d < i + 1; ++d) {
      const double x1 = rng.uniform(0, 40);
      dets[std::size_t(i)].push_back(
          {{x1, x1 * 0.5, x1 + 8, x1 * 0.5 + 6}, d % 3, rng.uniform(0.1, 1.0), 0});
    }
  const auto path = (fs::temp_directory_path() / "mimodet_dets.json").string();
  eval::write_detections_json(dets, path);
  auto back = eval::read_detections_json(path, 3);
  REQUIRE(back.size() == dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    REQUIRE(back[i].size() == dets[i].size());
    for (std::size_t j = 0; j < dets[i].size(); ++j) {
      CHECK(back[i][j].box.x1 == dets[i][j].box.x1);
      CHECK(back[i][j].confidence == dets[i][j].confidence);
      CHECK(back[i][j].category == dets[i][j].category);
    }
  }
  fs::remove(path);
}
