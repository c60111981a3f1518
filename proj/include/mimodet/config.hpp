#pragma once

#include <json.hpp>
#include <string>

#include "mimodet/data.hpp"
#include "mimodet/train.hpp"

// One flat dotted-key JSON config for every tool. The exhaustive key table
// lives in to_flat_json(); overrides and config files are validated against
// it before any work starts.

namespace mimodet::config {

struct Run {
  data::SceneConfig scene;
  int n_train = 2000;
  int n_val = 500;
  train::TrainConfig tcfg;
  int severity = 3;
  std::vector<double> sweep_ps = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  std::vector<double> lowdata_fractions = {0.3, 1.0};
  int lowdata_seeds = 3;
  int ensemble_size = 2;
};

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

nlohmann::ordered_json to_flat_json(const Run& run);
void apply_override(Run& run, const std::string& key, const nlohmann::json& value);
Run from_file(const std::string& path);

// --set key=value; the value parses as JSON when possible, else as a string.
void apply_set_argument(Run& run, const std::string& key_equals_value);

// FNV-1a over the canonical flat serialization.
std::string config_hash(const Run& run);

void propagate_seed(Run& run, std::uint64_t seed);

}  // namespace mimodet::config
