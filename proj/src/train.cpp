#include "mimodet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace mimodet::train {

BatchPlan sample_batch(int dataset_size, const det::MimoConfig& cfg, int batch, Rng& rng) {
  if (dataset_size < 1) throw std::invalid_argument("sample_batch: empty dataset");
  BatchPlan plan;
  plan.slots.resize(std::size_t(batch));
  for (auto& slot : plan.slots) {
    slot.indices.resize(std::size_t(cfg.m));
    const double u = rng.uniform01();
    if (u < cfg.p) {
      const int idx = int(rng.uniform_int(0, dataset_size - 1));
      std::fill(slot.indices.begin(), slot.indices.end(), idx);
    } else {
      for (auto& idx : slot.indices) idx = int(rng.uniform_int(0, dataset_size - 1));
    }
    slot.tied = std::all_of(slot.indices.begin(), slot.indices.end(),
                            [&](int i) { return i == slot.indices[0]; });
  }
  return plan;
}

std::vector<int> select_fraction(int n, double fraction, std::uint64_t seed) {
  if (fraction <= 0 || fraction > 1)
    throw std::invalid_argument("select_fraction: fraction outside (0,1]");
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(mix_seed(seed, 0xf7ac7100ull));
  for (std::size_t i = idx.size(); i > 1; --i)
    std::swap(idx[i - 1], idx[std::size_t(rng.uniform_int(0, std::int64_t(i) - 1))]);
  idx.resize(std::size_t(std::ceil(fraction * n)));
  return idx;
}

eval::DetSet predict_fused(det::Model<float>& model, const data::Image& image,
                           const agg::FusionConfig& fusion) {
  return agg::aggregate(det::predict(model, image), fusion);
}

namespace {

data::Sample augment(const data::Sample& s, bool flip, bool jitter, double jitter_strength,
                     Rng& rng) {
  // rng consumption order is fixed so tied channels can replay the stream
  const bool do_flip = flip && rng.uniform01() < 0.5;
  const std::uint64_t jitter_seed = rng.next_u64();
  data::Sample out = do_flip ? data::flip_horizontal(s) : s;
  if (jitter) out.image = data::color_jitter(out.image, jitter_strength, jitter_seed);
  return out;
}

double validation_map50(det::Model<float>& model, const std::vector<data::Sample>& val_set,
                        const agg::FusionConfig& fusion) {
  std::vector<eval::DetSet> dets;
  std::vector<eval::GtSet> gts;
  dets.reserve(val_set.size());
  for (const auto& s : val_set) {
    dets.push_back(predict_fused(model, s.image, fusion));
    gts.push_back(s.annotations);
  }
  return eval::mean_ap(dets, gts, {0.5}).map50;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::vector<data::Sample>& train_set,
                  const std::vector<data::Sample>& val_set) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  const auto t_start = std::chrono::steady_clock::now();

  TrainResult result{det::build_model<float>(cfg.mimo, mix_seed(cfg.seed, 0x0de10000ull)),
                     {}, -1, 0, 0};
  auto& model = result.model;

  const auto subset = select_fraction(int(train_set.size()), cfg.fraction, cfg.seed);
  const int n = int(subset.size());
  const int steps_per_epoch = std::max(1, n / cfg.batch);

  ad::OptimizerState<float> opt;
  opt.momentum = float(cfg.momentum);
  opt.bind(model.params);

  Rng batch_rng(mix_seed(cfg.seed, 0xba7c4000ull));
  Rng aug_rng(mix_seed(cfg.seed, 0xa1160000ull));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.learning_rate = float(cfg.lr.at(epoch));
    double sum_rpn_cls = 0, sum_rpn_reg = 0, sum_roi_cls = 0, sum_roi_reg = 0, sum_total = 0;

    for (int step = 0; step < steps_per_epoch; ++step) {
      const BatchPlan plan = sample_batch(n, cfg.mimo, cfg.batch, batch_rng);

      // materialize augmented samples; tied slots replay one augmentation
      std::vector<std::vector<data::Sample>> slot_samples(plan.slots.size());
      for (std::size_t s = 0; s < plan.slots.size(); ++s) {
        const auto& slot = plan.slots[s];
        if (slot.tied) {
          auto one = augment(train_set[std::size_t(subset[std::size_t(slot.indices[0])])],
                             cfg.augment_flip, cfg.augment_jitter, cfg.jitter_strength, aug_rng);
          slot_samples[s].assign(std::size_t(cfg.mimo.m), one);
        } else {
          for (int m = 0; m < cfg.mimo.m; ++m)
            slot_samples[s].push_back(
                augment(train_set[std::size_t(subset[std::size_t(slot.indices[std::size_t(m)])])],
                        cfg.augment_flip, cfg.augment_jitter, cfg.jitter_strength, aug_rng));
        }
      }

      std::vector<std::vector<const data::Image*>> images(plan.slots.size());
      std::vector<std::vector<const std::vector<data::Annotation>*>> gts(plan.slots.size());
      for (std::size_t s = 0; s < plan.slots.size(); ++s)
        for (int m = 0; m < cfg.mimo.m; ++m) {
          images[s].push_back(&slot_samples[s][std::size_t(m)].image);
          gts[s].push_back(&slot_samples[s][std::size_t(m)].annotations);
        }

      const std::uint64_t step_seed =
          mix_seed(cfg.seed, 0x57e90000ull + std::uint64_t(epoch) * 100000 + std::uint64_t(step));
      auto input = det::stack_batch<float>(images, cfg.mimo.m);
      auto loss = det::detector_loss(model, input, gts, step_seed);
      if (!std::isfinite(loss.value))
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                 " step " + std::to_string(step) + " (batch seed " +
                                 std::to_string(step_seed) + ")");
      ad::backward(loss.total);
      ad::sgd_step(model.params, opt);
      ++result.steps_run;

      sum_rpn_cls += loss.rpn_cls;
      sum_rpn_reg += loss.rpn_reg;
      sum_roi_cls += loss.roi_cls;
      sum_roi_reg += loss.roi_reg;
      sum_total += loss.value;
    }

    const bool do_val = !val_set.empty() &&
                        ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs);
    std::string val_field;
    if (do_val) {
      result.final_val_map50 = validation_map50(model, val_set, cfg.fusion);
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.6f", result.final_val_map50);
      val_field = buf;
    }
    char row[256];
    std::snprintf(row, sizeof(row), "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%s", epoch,
                  sum_rpn_cls / steps_per_epoch, sum_rpn_reg / steps_per_epoch,
                  sum_roi_cls / steps_per_epoch, sum_roi_reg / steps_per_epoch,
                  sum_total / steps_per_epoch, val_field.c_str());
    result.metrics_rows.emplace_back(row);
  }

  result.train_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

  if (!cfg.checkpoint_path.empty()) det::save_model(model, cfg.checkpoint_path);
  if (!cfg.metrics_path.empty()) {
    std::ofstream os(cfg.metrics_path, std::ios::trunc);
    if (!os) throw std::runtime_error("train: cannot write metrics to " + cfg.metrics_path);
    os << kMetricsHeader << "\n";
    for (const auto& row : result.metrics_rows) os << row << "\n";
  }
  return result;
}

std::vector<TrainResult> train_ensemble(const TrainConfig& cfg,
                                        const std::vector<data::Sample>& train_set,
                                        const std::vector<data::Sample>& val_set,
                                        int ensemble) {
  if (ensemble < 2) throw std::invalid_argument("train_ensemble: need E >= 2");
  std::vector<TrainResult> members;
  for (int e = 0; e < ensemble; ++e) {
    TrainConfig member = cfg;
    member.mimo.m = 1;
    member.seed = cfg.seed + std::uint64_t(e);
    if (!cfg.checkpoint_path.empty())
      member.checkpoint_path = cfg.checkpoint_path + ".member" + std::to_string(e);
    if (!cfg.metrics_path.empty())
      member.metrics_path = cfg.metrics_path + ".member" + std::to_string(e);
    members.push_back(train(member, train_set, val_set));
  }
  return members;
}

std::vector<SweepRow> sweep_p(const TrainConfig& cfg,
                              const std::vector<data::Sample>& train_set,
                              const std::vector<data::Sample>& val_set,
                              const std::vector<double>& p_values) {
  if (p_values.size() < 2) throw std::invalid_argument("sweep_p: need at least 2 p values");
  std::vector<SweepRow> rows;
  for (double p : p_values) {
    TrainConfig run = cfg;
    run.mimo.p = p;
    run.checkpoint_path.clear();
    run.metrics_path.clear();
    auto result = train(run, train_set, val_set);

    std::vector<eval::DetSet> dets;
    std::vector<eval::GtSet> gts;
    for (const auto& s : val_set) {
      dets.push_back(predict_fused(result.model, s.image, cfg.fusion));
      gts.push_back(s.annotations);
    }
    auto ap = eval::mean_ap(dets, gts);
    rows.push_back({p, ap.map, ap.map50});
  }
  return rows;
}

}  // namespace mimodet::train
