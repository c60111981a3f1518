#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "mimodet/train.hpp"
#include "support/testutil.hpp"

using namespace mimodet;
using testutil::tiny_config;
using testutil::tiny_scene;

namespace {

train::TrainConfig tiny_train_config(std::uint64_t seed) {
  train::TrainConfig cfg;
  cfg.mimo = tiny_config(1);
  cfg.epochs = 2;
  cfg.batch = 4;
  cfg.seed = seed;
  cfg.val_every = 2;
  return cfg;
}

}  // namespace

TEST_CASE("sample_batch: p=1 ties every slot; tied flag mirrors indices") {
  det::MimoConfig cfg = tiny_config(2);
  cfg.p = 1.0;
  Rng rng(1);
  auto plan = train::sample_batch(100, cfg, 64, rng);
  for (const auto& slot : plan.slots) {
    CHECK(slot.tied);
    CHECK(slot.indices[0] == slot.indices[1]);
  }

  cfg.p = 0.3;
  for (int trial = 0; trial < 200; ++trial) {
    auto p2 = train::sample_batch(7, cfg, 8, rng);
    for (const auto& slot : p2.slots)
      CHECK(slot.tied == (slot.indices[0] == slot.indices[1]));
  }
}

TEST_CASE("sample_batch: tied fraction within 3 sigma of p + (1-p)/n") {
  const int n = 1000;
  const int draws = 100000;
  det::MimoConfig cfg = tiny_config(2);
  for (double p : {0.0, 0.4, 1.0}) {
    cfg.p = p;
    Rng rng(mix_seed(42, std::uint64_t(p * 1000)));
    long tied = 0;
    for (int i = 0; i < draws / 100; ++i) {
      auto plan = train::sample_batch(n, cfg, 100, rng);
      for (const auto& slot : plan.slots) tied += slot.tied ? 1 : 0;
    }
    const double q = p + (1.0 - p) / n;
    const double sigma = std::sqrt(q * (1.0 - q) / draws);
    const double observed = double(tied) / draws;
    INFO("p=", p, " observed=", observed, " expected=", q, " sigma=", sigma);
    CHECK(std::abs(observed - q) <= 3.0 * sigma + 1e-12);
  }
}

TEST_CASE("select_fraction: exact count, distinct, deterministic") {
  auto idx = train::select_fraction(1000, 0.3, 7);
  CHECK(idx.size() == 300);
  std::set<int> uniq(idx.begin(), idx.end());
  CHECK(uniq.size() == idx.size());
  CHECK(train::select_fraction(1000, 0.3, 7) == idx);
  CHECK(train::select_fraction(1000, 0.3, 8) != idx);
  CHECK(train::select_fraction(10, 1.0, 3).size() == 10);
  CHECK(train::select_fraction(7, 0.5, 3).size() == 4);  // ceil(3.5)
}

TEST_CASE("lr schedule steps exactly once by the configured factor") {
  train::LrSchedule lr;
  lr.initial = 0.01;
  lr.step_epoch = 23;
  lr.factor = 0.1;
  CHECK(lr.at(0) == 0.01);
  CHECK(lr.at(22) == 0.01);
  CHECK(lr.at(23) == 0.01 * 0.1);
  CHECK(lr.at(29) == 0.01 * 0.1);
}

TEST_CASE("training is bit-deterministic in the seed") {
  data::SceneConfig sc = tiny_scene(3);
  auto train_set = data::generate_dataset(sc, 24);
  auto val_set = data::generate_dataset([&] {
    auto c = sc;
    c.seed = 4;
    return c;
  }(), 8);

  auto cfg = tiny_train_config(11);
  auto r1 = train::train(cfg, train_set, val_set);
  auto r2 = train::train(cfg, train_set, val_set);
  for (std::size_t i = 0; i < r1.model.params.size(); ++i)
    CHECK(r1.model.params[i].val() == r2.model.params[i].val());
  CHECK(r1.metrics_rows == r2.metrics_rows);

  auto r3 = train::train([&] {
    auto c = cfg;
    c.seed = 12;
    return c;
  }(), train_set, val_set);
  bool same = true;
  for (std::size_t i = 0; i < r1.model.params.size(); ++i)
    if (r1.model.params[i].val() != r3.model.params[i].val()) same = false;
  CHECK(!same);
}

TEST_CASE("p=1, M=2: tied slots feed identical annotations to both channels") {
  det::MimoConfig cfg = tiny_config(2);
  cfg.p = 1.0;
  Rng rng(5);
  data::SceneConfig sc = tiny_scene(9);
  auto ds = data::generate_dataset(sc, 16);
  for (int step = 0; step < 10; ++step) {
    auto plan = train::sample_batch(int(ds.size()), cfg, 4, rng);
    for (const auto& slot : plan.slots) {
      REQUIRE(slot.tied);
      const auto& a = ds[std::size_t(slot.indices[0])].annotations;
      const auto& b = ds[std::size_t(slot.indices[1])].annotations;
      REQUIRE(a.size() == b.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].box.x1 == b[i].box.x1);
        CHECK(a[i].category == b[i].category);
      }
    }
  }
}

TEST_CASE("smoke: five epochs on 200 images reduce the training loss") {
  data::SceneConfig sc;  // full-size 64x64 scenes
  sc.seed = 100;
  auto train_set = data::generate_dataset(sc, 200);

  train::TrainConfig cfg;
  cfg.mimo = det::MimoConfig{};  // full-size detector, M=1
  cfg.epochs = 5;
  cfg.batch = 8;
  cfg.seed = 0;
  cfg.val_every = 100;  // no validation pass
  auto r = train::train(cfg, train_set, {});

  auto total_of = [](const std::string& row) {
    // epoch,rpn_cls,rpn_reg,roi_cls,roi_reg,total,val_map
    std::size_t pos = 0;
    for (int i = 0; i < 5; ++i) pos = row.find(',', pos) + 1;
    return std::stod(row.substr(pos));
  };
  const double first = total_of(r.metrics_rows.front());
  const double last = total_of(r.metrics_rows.back());
  INFO("first-epoch loss ", first, " last-epoch loss ", last);
  CHECK(last < first);
}

TEST_CASE("train_ensemble: members differ and carry distinct seeds") {
  data::SceneConfig sc = tiny_scene(21);
  auto train_set = data::generate_dataset(sc, 16);
  auto cfg = tiny_train_config(40);
  cfg.epochs = 1;
  auto members = train::train_ensemble(cfg, train_set, {}, 2);
  REQUIRE(members.size() == 2);
  bool differ = false;
  for (std::size_t i = 0; i < members[0].model.params.size(); ++i)
    if (members[0].model.params[i].val() != members[1].model.params[i].val()) differ = true;
  CHECK(differ);
  CHECK_THROWS_AS(train::train_ensemble(cfg, train_set, {}, 1), std::invalid_argument);
}

TEST_CASE("sweep_p: one row per p, reproducible, finite") {
  data::SceneConfig sc = tiny_scene(33);
  auto train_set = data::generate_dataset(sc, 16);
  auto val_set = data::generate_dataset([&] {
    auto c = sc;
    c.seed = 34;
    return c;
  }(), 6);

  auto cfg = tiny_train_config(50);
  cfg.mimo = tiny_config(2);
  cfg.epochs = 1;
  auto rows = train::sweep_p(cfg, train_set, val_set, {0.0, 0.4, 1.0});
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) {
    CHECK(std::isfinite(r.map));
    CHECK(r.map >= 0.0);
    CHECK(r.map <= 1.0);
  }
  auto rows2 = train::sweep_p(cfg, train_set, val_set, {0.0, 0.4, 1.0});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].map == rows2[i].map);
    CHECK(rows[i].p == rows2[i].p);
  }
  CHECK_THROWS_AS(train::sweep_p(cfg, train_set, val_set, {0.4}), std::invalid_argument);
}

TEST_CASE("metrics rows follow the pinned header layout") {
  data::SceneConfig sc = tiny_scene(60);
  auto ds = data::generate_dataset(sc, 8);
  auto cfg = tiny_train_config(60);
  cfg.epochs = 2;
  cfg.val_every = 2;
  auto r = train::train(cfg, ds, ds);
  REQUIRE(r.metrics_rows.size() == 2);
  CHECK(std::string(train::kMetricsHeader) == "epoch,rpn_cls,rpn_reg,roi_cls,roi_reg,total,val_map");
  // epoch 0: no validation -> empty trailing field; epoch 1: value present
  CHECK(r.metrics_rows[0].back() == ',');
  CHECK(r.metrics_rows[1].back() != ',');
  CHECK(r.metrics_rows[0].substr(0, 2) == "0,");
  CHECK(r.metrics_rows[1].substr(0, 2) == "1,");
}
