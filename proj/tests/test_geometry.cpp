#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mimodet/geometry.hpp"
#include "mimodet/rng.hpp"

using namespace mimodet;
using geom::Box;

namespace {

Box random_box(Rng& rng, double lo = 0, double hi = 64, double min_side = 0.5) {
  const double x1 = rng.uniform(lo, hi - min_side);
  const double y1 = rng.uniform(lo, hi - min_side);
  const double x2 = x1 + rng.uniform(min_side, hi - x1);
  const double y2 = y1 + rng.uniform(min_side, hi - y1);
  return {x1, y1, x2, y2};
}

}  // namespace

TEST_CASE("iou: identity, disjoint, and the 1/3 case") {
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    Box b = random_box(rng);
    CHECK(geom::iou(b, b) == doctest::Approx(1.0));
  }
  CHECK(geom::iou({0, 0, 1, 1}, {5, 5, 6, 6}) == 0.0);
  CHECK(geom::iou({0, 0, 2, 2}, {1, 0, 3, 2}) == doctest::Approx(1.0 / 3.0));
  // degenerate boxes yield 0
  CHECK(geom::iou({1, 1, 1, 1}, {0, 0, 2, 2}) == 0.0);
}

TEST_CASE("iou properties: symmetry, bounds, translation and scale invariance") {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    Box a = random_box(rng), b = random_box(rng);
    const double v = geom::iou(a, b);
    CHECK(v == geom::iou(b, a));
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    const double dx = rng.uniform(-10, 10), dy = rng.uniform(-10, 10);
    Box at{a.x1 + dx, a.y1 + dy, a.x2 + dx, a.y2 + dy};
    Box bt{b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy};
    CHECK(geom::iou(at, bt) == doctest::Approx(v).epsilon(1e-9));
    const double s = rng.uniform(0.5, 3.0);
    Box as{a.x1 * s, a.y1 * s, a.x2 * s, a.y2 * s};
    Box bs{b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s};
    CHECK(geom::iou(as, bs) == doctest::Approx(v).epsilon(1e-9));
  }
}

TEST_CASE("encode/decode: identity and the analytic case") {
  Box anchor{0, 0, 10, 10};
  auto d0 = geom::encode_delta(anchor, anchor);
  CHECK(d0.tx == doctest::Approx(0.0));
  CHECK(d0.ty == doctest::Approx(0.0));
  CHECK(d0.tw == doctest::Approx(0.0));
  CHECK(d0.th == doctest::Approx(0.0));

  // anchor center (5,5) size 10x10; box center (7,5) size 20x10
  Box box{-3, 0, 17, 10};
  auto d = geom::encode_delta(box, anchor);
  CHECK(d.tx == doctest::Approx(0.2));
  CHECK(d.ty == doctest::Approx(0.0));
  CHECK(d.tw == doctest::Approx(std::log(2.0)));
  CHECK(d.th == doctest::Approx(0.0));

  CHECK_THROWS_AS(geom::encode_delta({1, 1, 1, 2}, anchor), std::invalid_argument);
}

TEST_CASE("encode/decode round-trips 1000 random pairs under 1e-5") {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    Box b = random_box(rng);
    Box a = random_box(rng);
    Box back = geom::decode_delta(a, geom::encode_delta(b, a));
    CHECK(std::abs(back.x1 - b.x1) < 1e-5);
    CHECK(std::abs(back.y1 - b.y1) < 1e-5);
    CHECK(std::abs(back.x2 - b.x2) < 1e-5);
    CHECK(std::abs(back.y2 - b.y2) < 1e-5);
  }
}

TEST_CASE("generate_anchors: 2x2 map enumeration") {
  auto g = geom::generate_anchors(2, 2, 16, {16}, {1});
  REQUIRE(g.count() == 4);
  const double want[4][2] = {{8, 8}, {24, 8}, {8, 24}, {24, 24}};
  for (int i = 0; i < 4; ++i) {
    CHECK(g.anchors[std::size_t(i)].cx() == doctest::Approx(want[i][0]));
    CHECK(g.anchors[std::size_t(i)].cy() == doctest::Approx(want[i][1]));
    CHECK(g.anchors[std::size_t(i)].width() == doctest::Approx(16));
    CHECK(g.anchors[std::size_t(i)].height() == doctest::Approx(16));
  }
}

TEST_CASE("generate_anchors: counting and aspect") {
  Rng rng(4);
  for (int i = 0; i < 10; ++i) {
    const int h = int(rng.uniform_int(1, 9)), w = int(rng.uniform_int(1, 9));
    std::vector<double> scales, ratios;
    for (int s = 0; s < int(rng.uniform_int(1, 3)); ++s) scales.push_back(rng.uniform(4, 40));
    for (int r = 0; r < int(rng.uniform_int(1, 3)); ++r) ratios.push_back(rng.uniform(0.3, 3));
    auto g = geom::generate_anchors(h, w, 8, scales, ratios);
    CHECK(g.count() == int(std::size_t(h) * w * scales.size() * ratios.size()));
  }

  auto g = geom::generate_anchors(1, 1, 8, {16}, {4});
  CHECK(g.anchors[0].width() == doctest::Approx(32));
  CHECK(g.anchors[0].height() == doctest::Approx(8));

  CHECK_THROWS_AS(geom::generate_anchors(2, 2, 8, {}, {1}), std::invalid_argument);
  CHECK_THROWS_AS(geom::generate_anchors(2, 2, 8, {16}, {}), std::invalid_argument);
}

TEST_CASE("match_anchors: exact-anchor gt and empty gt") {
  auto g = geom::generate_anchors(2, 2, 16, {16}, {1});
  auto r = geom::match_anchors(g, {g.anchors[2]}, 0.5, 0.3);
  CHECK(r.labels[2] == geom::AnchorLabel::positive);
  CHECK(r.gt_index[2] == 0);
  CHECK(r.max_iou[2] == doctest::Approx(1.0));

  auto r2 = geom::match_anchors(g, {}, 0.5, 0.3);
  for (auto l : r2.labels) CHECK(l == geom::AnchorLabel::negative);
}

TEST_CASE("match_anchors: argmax rule leaves no gt unmatched") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto g = geom::generate_anchors(4, 4, 8, {8, 16}, {0.5, 1, 2});
    std::vector<Box> gts;
    for (int i = 0; i < 3; ++i) gts.push_back(random_box(rng, 0, 32, 2));
    auto r = geom::match_anchors(g, gts, 1.0, 0.3);
    std::vector<bool> matched(gts.size(), false);
    for (int a = 0; a < g.count(); ++a)
      if (r.labels[std::size_t(a)] == geom::AnchorLabel::positive)
        matched[std::size_t(r.gt_index[std::size_t(a)])] = true;
    int unmatched = 0;
    // A gt can lose its forced anchor only to another gt forcing the same one.
    for (std::size_t i = 0; i < gts.size(); ++i)
      if (!matched[i]) ++unmatched;
    std::vector<int> argmax(gts.size(), -1);
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      double best = -1;
      for (int a = 0; a < g.count(); ++a) {
        const double v = geom::iou(g.anchors[std::size_t(a)], gts[gi]);
        if (v > best) {
          best = v;
          argmax[gi] = a;
        }
      }
    }
    for (std::size_t i = 0; i < gts.size(); ++i)
      if (!matched[i]) {
        bool shared = false;
        for (std::size_t j = 0; j < gts.size(); ++j)
          if (j != i && argmax[j] == argmax[i]) shared = true;
        CHECK(shared);
      }
    (void)unmatched;
  }
}

TEST_CASE("match_anchors agrees with a brute-force oracle") {
  Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    auto grid = geom::generate_anchors(5, 5, 8, {10, 20}, {1});
    REQUIRE(grid.count() == 50);
    std::vector<Box> gts;
    for (int i = 0; i < 3; ++i) gts.push_back(random_box(rng, 0, 40, 3));
    const double pos_thr = 0.5, neg_thr = 0.3;
    auto r = geom::match_anchors(grid, gts, pos_thr, neg_thr);

    // Independent re-derivation straight from the rules.
    const int na = grid.count();
    const int ng = int(gts.size());
    for (int a = 0; a < na; ++a) {
      double best = -1;
      int bg = -1;
      for (int g = 0; g < ng; ++g) {
        const double v = geom::iou(grid.anchors[std::size_t(a)], gts[std::size_t(g)]);
        if (v > best) {
          best = v;
          bg = g;
        }
      }
      // Forced assignment pass (later gts win shared anchors).
      int forced = -1;
      for (int g = 0; g < ng; ++g) {
        double gbest = -1;
        int ga = -1;
        for (int aa = 0; aa < na; ++aa) {
          const double v = geom::iou(grid.anchors[std::size_t(aa)], gts[std::size_t(g)]);
          if (v > gbest) {
            gbest = v;
            ga = aa;
          }
        }
        if (ga == a) forced = g;
      }
      geom::AnchorLabel want;
      int want_gt = -1;
      if (forced >= 0) {
        want = geom::AnchorLabel::positive;
        want_gt = forced;
      } else if (best >= pos_thr) {
        want = geom::AnchorLabel::positive;
        want_gt = bg;
      } else if (best < neg_thr) {
        want = geom::AnchorLabel::negative;
      } else {
        want = geom::AnchorLabel::ignore;
      }
      CHECK(r.labels[std::size_t(a)] == want);
      if (want == geom::AnchorLabel::positive) CHECK(r.gt_index[std::size_t(a)] == want_gt);
    }
  }
}

TEST_CASE("clip_box") {
  Box inside{2, 3, 6, 7};
  auto c = geom::clip_box(inside, 10, 10);
  CHECK(c.x1 == inside.x1);
  CHECK(c.y2 == inside.y2);

  auto out = geom::clip_box({12, 12, 20, 20}, 10, 10);
  CHECK(out.area() == 0.0);
  CHECK(out.x1 == 10.0);

  auto part = geom::clip_box({-5, -5, 5, 5}, 10, 10);
  CHECK(part.x1 == 0.0);
  CHECK(part.y1 == 0.0);
  CHECK(part.x2 == 5.0);
  CHECK(part.y2 == 5.0);
}
