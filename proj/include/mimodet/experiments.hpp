#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mimodet/config.hpp"
#include "mimodet/evaluation.hpp"
#include "mimodet/train.hpp"

// Multi-run drivers shared by the CLI and the acceptance suite: one
// train+evaluate unit with on-disk caching, plus a bounded worker pool for
// independent runs (each run stays single-threaded and deterministic).

namespace mimodet::exp {

// MIMODET_THREADS caps concurrent workers; defaults to the hardware count.
int worker_cap();
void run_jobs(std::vector<std::function<void()>> jobs);

struct RunRequest {
  std::string name;          // used as the report's model name
  train::TrainConfig tcfg;
  int severity = 3;
  bool corruptions = true;
  bool single_channel_probe = false;  // also evaluate channel 0 alone
  std::uint64_t eval_seed = 1;        // corruption noise seeds
};

struct RunOutcome {
  eval::EvalReport report;   // fused detections; corrupted block when enabled
  eval::EvalReport single0;  // channel-0-only clean eval (probe)
  bool has_single0 = false;
  double train_seconds = 0;
  double ms_per_image = 0;
  std::size_t params = 0;
};

// Trains and evaluates one model. When out_dir is non-empty the artifacts
// (checkpoint.bin, model.json, metrics.csv, report.json, single0.json,
// manifest.json) land there, and an existing directory whose manifest hash
// matches is reused instead of retraining.
RunOutcome run_and_evaluate(const RunRequest& req, const std::vector<data::Sample>& train_set,
                            const std::vector<data::Sample>& val_set,
                            const std::string& out_dir);

// Hash of the fields that determine a run's outputs.
std::string request_hash(const RunRequest& req);

nlohmann::ordered_json mimo_config_json(const det::MimoConfig& cfg);
det::MimoConfig mimo_config_from_json(const nlohmann::json& j);

}  // namespace mimodet::exp
