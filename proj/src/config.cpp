#include "mimodet/config.hpp"

#include <fstream>

#include "mimodet/aggregate.hpp"

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace mimodet::config {

ordered_json to_flat_json(const Run& r) {
  ordered_json j;
  j["data.width"] = r.scene.width;
  j["data.height"] = r.scene.height;
  j["data.min_objects"] = r.scene.min_objects;
  j["data.max_objects"] = r.scene.max_objects;
  j["data.min_size"] = r.scene.min_size;
  j["data.max_size"] = r.scene.max_size;
  j["data.texture_amplitude"] = r.scene.texture_amplitude;
  j["data.train"] = r.n_train;
  j["data.val"] = r.n_val;

  const auto& m = r.tcfg.mimo;
  j["mimo.m"] = m.m;
  j["mimo.p"] = m.p;
  j["mimo.num_classes"] = m.num_classes;
  j["mimo.backbone"] = m.backbone_channels;
  j["mimo.rpn_channels"] = m.rpn_channels;
  j["mimo.roi_fc"] = m.roi_fc;
  j["mimo.roi_size"] = m.roi_size;
  j["mimo.anchor_stride"] = m.anchor_stride;
  j["mimo.anchor_scales"] = m.anchor_scales;
  j["mimo.anchor_ratios"] = m.anchor_ratios;
  j["mimo.pos_iou"] = m.pos_iou;
  j["mimo.neg_iou"] = m.neg_iou;
  j["mimo.pre_nms_topk"] = m.pre_nms_topk;
  j["mimo.train_topk"] = m.train_topk;
  j["mimo.test_topk"] = m.test_topk;
  j["mimo.proposal_nms"] = m.proposal_nms;
  j["mimo.add_gt_proposals"] = m.add_gt_proposals;
  j["mimo.rpn_batch"] = m.rpn_batch;
  j["mimo.roi_batch"] = m.roi_batch;
  j["mimo.lambda"] = m.lambda;
  j["mimo.score_threshold"] = m.score_threshold;
  j["mimo.nms_threshold"] = m.nms_threshold;
  j["mimo.image_size"] = m.image_size;

  j["train.epochs"] = r.tcfg.epochs;
  j["train.batch"] = r.tcfg.batch;
  j["train.lr"] = r.tcfg.lr.initial;
  j["train.lr_step_epoch"] = r.tcfg.lr.step_epoch;
  j["train.lr_factor"] = r.tcfg.lr.factor;
  j["train.momentum"] = r.tcfg.momentum;
  j["train.seed"] = r.tcfg.seed;
  j["train.fraction"] = r.tcfg.fraction;
  j["train.flip"] = r.tcfg.augment_flip;
  j["train.jitter"] = r.tcfg.augment_jitter;
  j["train.jitter_strength"] = r.tcfg.jitter_strength;
  j["train.val_every"] = r.tcfg.val_every;

  j["fusion.method"] = agg::fusion_method_name(r.tcfg.fusion.method);
  j["fusion.iou"] = r.tcfg.fusion.iou_threshold;
  j["fusion.score_floor"] = r.tcfg.fusion.score_floor;

  j["calib.bins"] = r.tcfg.calib.bins;
  j["calib.match_iou"] = r.tcfg.calib.match_iou;
  j["calib.score_floor"] = r.tcfg.calib.score_floor;

  j["eval.severity"] = r.severity;
  j["sweep.p"] = r.sweep_ps;
  j["lowdata.fractions"] = r.lowdata_fractions;
  j["lowdata.seeds"] = r.lowdata_seeds;
  j["ensemble.size"] = r.ensemble_size;
  return j;
}

namespace {

template <class T>
T as(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ValidationError("config key \"" + key + "\": cannot read value " + v.dump());
  }
}

}  // namespace

void apply_override(Run& r, const std::string& key, const json& v) {
  auto& m = r.tcfg.mimo;
  if (key == "data.width") r.scene.width = as<int>(v, key);
  else if (key == "data.height") r.scene.height = as<int>(v, key);
  else if (key == "data.min_objects") r.scene.min_objects = as<int>(v, key);
  else if (key == "data.max_objects") r.scene.max_objects = as<int>(v, key);
  else if (key == "data.min_size") r.scene.min_size = as<double>(v, key);
  else if (key == "data.max_size") r.scene.max_size = as<double>(v, key);
  else if (key == "data.texture_amplitude") r.scene.texture_amplitude = as<double>(v, key);
  else if (key == "data.train") r.n_train = as<int>(v, key);
  else if (key == "data.val") r.n_val = as<int>(v, key);
  else if (key == "mimo.m") m.m = as<int>(v, key);
  else if (key == "mimo.p") m.p = as<double>(v, key);
  else if (key == "mimo.num_classes") m.num_classes = as<int>(v, key);
  else if (key == "mimo.backbone") m.backbone_channels = as<std::vector<int>>(v, key);
  else if (key == "mimo.rpn_channels") m.rpn_channels = as<int>(v, key);
  else if (key == "mimo.roi_fc") m.roi_fc = as<std::vector<int>>(v, key);
  else if (key == "mimo.roi_size") m.roi_size = as<int>(v, key);
  else if (key == "mimo.anchor_stride") m.anchor_stride = as<int>(v, key);
  else if (key == "mimo.anchor_scales") m.anchor_scales = as<std::vector<double>>(v, key);
  else if (key == "mimo.anchor_ratios") m.anchor_ratios = as<std::vector<double>>(v, key);
  else if (key == "mimo.pos_iou") m.pos_iou = as<double>(v, key);
  else if (key == "mimo.neg_iou") m.neg_iou = as<double>(v, key);
  else if (key == "mimo.pre_nms_topk") m.pre_nms_topk = as<int>(v, key);
  else if (key == "mimo.train_topk") m.train_topk = as<int>(v, key);
  else if (key == "mimo.test_topk") m.test_topk = as<int>(v, key);
  else if (key == "mimo.proposal_nms") m.proposal_nms = as<double>(v, key);
  else if (key == "mimo.add_gt_proposals") m.add_gt_proposals = as<bool>(v, key);
  else if (key == "mimo.rpn_batch") m.rpn_batch = as<int>(v, key);
  else if (key == "mimo.roi_batch") m.roi_batch = as<int>(v, key);
  else if (key == "mimo.lambda") m.lambda = as<double>(v, key);
  else if (key == "mimo.score_threshold") m.score_threshold = as<double>(v, key);
  else if (key == "mimo.nms_threshold") m.nms_threshold = as<double>(v, key);
  else if (key == "mimo.image_size") m.image_size = as<int>(v, key);
  else if (key == "train.epochs") r.tcfg.epochs = as<int>(v, key);
  else if (key == "train.batch") r.tcfg.batch = as<int>(v, key);
  else if (key == "train.lr") r.tcfg.lr.initial = as<double>(v, key);
  else if (key == "train.lr_step_epoch") r.tcfg.lr.step_epoch = as<int>(v, key);
  else if (key == "train.lr_factor") r.tcfg.lr.factor = as<double>(v, key);
  else if (key == "train.momentum") r.tcfg.momentum = as<double>(v, key);
  else if (key == "train.seed") r.tcfg.seed = as<std::uint64_t>(v, key);
  else if (key == "train.fraction") r.tcfg.fraction = as<double>(v, key);
  else if (key == "train.flip") r.tcfg.augment_flip = as<bool>(v, key);
  else if (key == "train.jitter") r.tcfg.augment_jitter = as<bool>(v, key);
  else if (key == "train.jitter_strength") r.tcfg.jitter_strength = as<double>(v, key);
  else if (key == "train.val_every") r.tcfg.val_every = as<int>(v, key);
  else if (key == "fusion.method")
    r.tcfg.fusion.method = agg::fusion_method_from_name(as<std::string>(v, key));
  else if (key == "fusion.iou") r.tcfg.fusion.iou_threshold = as<double>(v, key);
  else if (key == "fusion.score_floor") r.tcfg.fusion.score_floor = as<double>(v, key);
  else if (key == "calib.bins") r.tcfg.calib.bins = as<int>(v, key);
  else if (key == "calib.match_iou") r.tcfg.calib.match_iou = as<double>(v, key);
  else if (key == "calib.score_floor") r.tcfg.calib.score_floor = as<double>(v, key);
  else if (key == "eval.severity") r.severity = as<int>(v, key);
  else if (key == "sweep.p") r.sweep_ps = as<std::vector<double>>(v, key);
  else if (key == "lowdata.fractions") r.lowdata_fractions = as<std::vector<double>>(v, key);
  else if (key == "lowdata.seeds") r.lowdata_seeds = as<int>(v, key);
  else if (key == "ensemble.size") r.ensemble_size = as<int>(v, key);
  else
    throw ValidationError("unknown config key \"" + key + "\"");
}

Run from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("config file not found: " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ValidationError("config file " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ValidationError("config file " + path + ": expected an object");
  Run run;
  for (const auto& [key, value] : j.items()) apply_override(run, key, value);
  return run;
}

void apply_set_argument(Run& run, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ValidationError("--set expects key=value, got \"" + kv + "\"");
  const std::string key = kv.substr(0, eq);
  const std::string raw = kv.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;  // plain string
  apply_override(run, key, value);
}

std::string config_hash(const Run& run) {
  const std::string canon = to_flat_json(run).dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : canon) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)h);
  return buf;
}

void propagate_seed(Run& run, std::uint64_t seed) {
  run.scene.seed = seed;
  run.tcfg.seed = seed;
}

}  // namespace mimodet::config
