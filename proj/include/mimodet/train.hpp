#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mimodet/aggregate.hpp"
#include "mimodet/data.hpp"
#include "mimodet/evaluation.hpp"
#include "mimodet/model.hpp"
#include "mimodet/rng.hpp"

// The MIMO training protocol: per-slot input sampling with relaxation
// probability p, SGD with momentum and a single lr step, deterministic in
// the config seed end to end.

namespace mimodet::train {

struct LrSchedule {
  double initial = 0.01;
  int step_epoch = 23;  // 75% of the 30-epoch default
  double factor = 0.1;

  double at(int epoch) const { return epoch >= step_epoch ? initial * factor : initial; }
};

struct TrainConfig {
  det::MimoConfig mimo;
  int epochs = 30;
  int batch = 8;  // slots per step; each slot carries M images
  LrSchedule lr;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  double fraction = 1.0;  // deterministic training subset
  bool augment_flip = true;
  bool augment_jitter = false;
  double jitter_strength = 0.5;
  int val_every = 5;
  agg::FusionConfig fusion;          // validation-time aggregation
  eval::CalibrationConfig calib;
  std::string checkpoint_path;       // written when non-empty
  std::string metrics_path;

  void validate() const {
    mimo.validate();
    if (epochs < 1 || batch < 1) throw std::invalid_argument("TrainConfig: epochs/batch < 1");
    if (fraction <= 0 || fraction > 1)
      throw std::invalid_argument("TrainConfig: fraction outside (0,1]");
  }
};

// One batch slot: M dataset indices (index m feeds channel m); tied iff all
// indices coincide.
struct BatchSlot {
  std::vector<int> indices;
  bool tied = false;
};

struct BatchPlan {
  std::vector<BatchSlot> slots;
};

// Per slot: with probability p one index replicated across channels, else M
// independent uniform draws (with replacement). The tied flag reflects the
// indices, so independent draws that happen to coincide count as tied.
BatchPlan sample_batch(int dataset_size, const det::MimoConfig& cfg, int batch, Rng& rng);

// ceil(fraction * n) distinct indices, deterministic in seed.
std::vector<int> select_fraction(int n, double fraction, std::uint64_t seed);

struct TrainResult {
  det::Model<float> model;
  std::vector<std::string> metrics_rows;  // CSV body, one per epoch
  double final_val_map50 = -1;
  double train_seconds = 0;
  int steps_run = 0;
};

inline const char* kMetricsHeader = "epoch,rpn_cls,rpn_reg,roi_cls,roi_reg,total,val_map";

TrainResult train(const TrainConfig& cfg, const std::vector<data::Sample>& train_set,
                  const std::vector<data::Sample>& val_set);

// E independent M=1 trainings with seeds seed+e, for deep-ensemble fusion.
std::vector<TrainResult> train_ensemble(const TrainConfig& cfg,
                                        const std::vector<data::Sample>& train_set,
                                        const std::vector<data::Sample>& val_set, int ensemble);

struct SweepRow {
  double p = 0;
  double map = 0;
  double map50 = 0;
};

// One model per p value (same seed), evaluated clean; reported, not asserted.
std::vector<SweepRow> sweep_p(const TrainConfig& cfg,
                              const std::vector<data::Sample>& train_set,
                              const std::vector<data::Sample>& val_set,
                              const std::vector<double>& p_values);

// Channel predictions fused with the configured method.
eval::DetSet predict_fused(det::Model<float>& model, const data::Image& image,
                           const agg::FusionConfig& fusion);

}  // namespace mimodet::train
