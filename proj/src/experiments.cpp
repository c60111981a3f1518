#include "mimodet/experiments.hpp"

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include "mimodet/kernels.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace mimodet::exp {

int worker_cap() {
  if (const char* env = std::getenv("MIMODET_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? int(hw) : 1;
}

void run_jobs(std::vector<std::function<void()>> jobs) {
  const int cap = std::max(1, worker_cap());
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      try {
        jobs[i]();
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const int n = std::min<int>(cap, int(jobs.size()));
  for (int t = 0; t < n; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

ordered_json mimo_config_json(const det::MimoConfig& cfg) {
  ordered_json j;
  j["m"] = cfg.m;
  j["p"] = cfg.p;
  j["num_classes"] = cfg.num_classes;
  j["backbone"] = cfg.backbone_channels;
  j["rpn_channels"] = cfg.rpn_channels;
  j["roi_fc"] = cfg.roi_fc;
  j["roi_size"] = cfg.roi_size;
  j["anchor_stride"] = cfg.anchor_stride;
  j["anchor_scales"] = cfg.anchor_scales;
  j["anchor_ratios"] = cfg.anchor_ratios;
  j["pos_iou"] = cfg.pos_iou;
  j["neg_iou"] = cfg.neg_iou;
  j["pre_nms_topk"] = cfg.pre_nms_topk;
  j["train_topk"] = cfg.train_topk;
  j["test_topk"] = cfg.test_topk;
  j["proposal_nms"] = cfg.proposal_nms;
  j["add_gt_proposals"] = cfg.add_gt_proposals;
  j["rpn_batch"] = cfg.rpn_batch;
  j["roi_batch"] = cfg.roi_batch;
  j["lambda"] = cfg.lambda;
  j["score_threshold"] = cfg.score_threshold;
  j["nms_threshold"] = cfg.nms_threshold;
  j["image_size"] = cfg.image_size;
  return j;
}

det::MimoConfig mimo_config_from_json(const nlohmann::json& j) {
  det::MimoConfig cfg;
  cfg.m = j.at("m").get<int>();
  cfg.p = j.at("p").get<double>();
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.backbone_channels = j.at("backbone").get<std::vector<int>>();
  cfg.rpn_channels = j.at("rpn_channels").get<int>();
  cfg.roi_fc = j.at("roi_fc").get<std::vector<int>>();
  cfg.roi_size = j.at("roi_size").get<int>();
  cfg.anchor_stride = j.at("anchor_stride").get<int>();
  cfg.anchor_scales = j.at("anchor_scales").get<std::vector<double>>();
  cfg.anchor_ratios = j.at("anchor_ratios").get<std::vector<double>>();
  cfg.pos_iou = j.at("pos_iou").get<double>();
  cfg.neg_iou = j.at("neg_iou").get<double>();
  cfg.pre_nms_topk = j.at("pre_nms_topk").get<int>();
  cfg.train_topk = j.at("train_topk").get<int>();
  cfg.test_topk = j.at("test_topk").get<int>();
  cfg.proposal_nms = j.at("proposal_nms").get<double>();
  cfg.add_gt_proposals = j.at("add_gt_proposals").get<bool>();
  cfg.rpn_batch = j.at("rpn_batch").get<int>();
  cfg.roi_batch = j.at("roi_batch").get<int>();
  cfg.lambda = j.at("lambda").get<double>();
  cfg.score_threshold = j.at("score_threshold").get<double>();
  cfg.nms_threshold = j.at("nms_threshold").get<double>();
  cfg.image_size = j.at("image_size").get<int>();
  return cfg;
}

std::string request_hash(const RunRequest& req) {
  ordered_json j;
  j["name"] = req.name;
  j["mimo"] = mimo_config_json(req.tcfg.mimo);
  j["epochs"] = req.tcfg.epochs;
  j["batch"] = req.tcfg.batch;
  j["lr"] = req.tcfg.lr.initial;
  j["lr_step_epoch"] = req.tcfg.lr.step_epoch;
  j["lr_factor"] = req.tcfg.lr.factor;
  j["momentum"] = req.tcfg.momentum;
  j["seed"] = req.tcfg.seed;
  j["fraction"] = req.tcfg.fraction;
  j["flip"] = req.tcfg.augment_flip;
  j["jitter"] = req.tcfg.augment_jitter;
  j["jitter_strength"] = req.tcfg.jitter_strength;
  j["val_every"] = req.tcfg.val_every;
  j["fusion"] = agg::fusion_method_name(req.tcfg.fusion.method);
  j["fusion_iou"] = req.tcfg.fusion.iou_threshold;
  j["severity"] = req.severity;
  j["corruptions"] = req.corruptions;
  j["single_channel_probe"] = req.single_channel_probe;
  j["eval_seed"] = req.eval_seed;
  const std::string canon = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : canon) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)h);
  return buf;
}

namespace {

bool try_load_cached(const RunRequest& req, const std::string& out_dir, RunOutcome& out) {
  const fs::path dir(out_dir);
  const fs::path manifest_path = dir / "manifest.json";
  const fs::path report_path = dir / "report.json";
  if (!fs::exists(manifest_path) || !fs::exists(report_path)) return false;
  try {
    std::ifstream is(manifest_path);
    nlohmann::json manifest;
    is >> manifest;
    if (manifest.value("request_hash", "") != request_hash(req)) return false;
    out.report = eval::read_report_json(report_path.string());
    out.train_seconds = manifest.value("train_seconds", 0.0);
    out.ms_per_image = manifest.value("ms_per_image", 0.0);
    out.params = manifest.value("params", std::size_t(0));
    if (req.single_channel_probe) {
      const fs::path single_path = dir / "single0.json";
      if (!fs::exists(single_path)) return false;
      out.single0 = eval::read_report_json(single_path.string());
      out.has_single0 = true;
    }
    return true;
  } catch (const std::exception&) {
    return false;  // unreadable cache: retrain
  }
}

}  // namespace

RunOutcome run_and_evaluate(const RunRequest& req, const std::vector<data::Sample>& train_set,
                            const std::vector<data::Sample>& val_set,
                            const std::string& out_dir) {
  RunOutcome out;
  if (!out_dir.empty() && try_load_cached(req, out_dir, out)) return out;

  train::TrainConfig tcfg = req.tcfg;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    tcfg.checkpoint_path = (fs::path(out_dir) / "checkpoint.bin").string();
    tcfg.metrics_path = (fs::path(out_dir) / "metrics.csv").string();
  }
  auto result = train::train(tcfg, train_set, val_set);
  out.train_seconds = result.train_seconds;
  out.params = result.model.parameter_count();

  auto predict_fn = [&](const data::Image& img) {
    return train::predict_fused(result.model, img, tcfg.fusion);
  };
  std::vector<data::CorruptionKind> kinds;
  if (req.corruptions)
    kinds.assign(std::begin(data::kAllCorruptions), std::end(data::kAllCorruptions));
  out.report = eval::robustness_report(predict_fn, val_set, kinds, req.severity, tcfg.calib,
                                       req.eval_seed);
  out.report.name = req.name;
  out.report.params = double(out.params);

  if (req.single_channel_probe) {
    std::vector<eval::DetSet> dets;
    std::vector<eval::GtSet> gts;
    for (const auto& s : val_set) {
      dets.push_back(det::predict_single_channel(result.model, s.image, 0));
      gts.push_back(s.annotations);
    }
    out.single0 = eval::evaluate(dets, gts, tcfg.calib);
    out.single0.name = req.name + "-single0";
    out.single0.params = double(out.params);
    out.has_single0 = true;
  }

  // wall-clock per fused prediction, small sample
  const std::size_t timing_n = std::min<std::size_t>(val_set.size(), 50);
  if (timing_n > 0) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < timing_n; ++i) predict_fn(val_set[i].image);
    out.ms_per_image =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count() /
        double(timing_n);
  }

  if (!out_dir.empty()) {
    eval::write_report_json(out.report, (fs::path(out_dir) / "report.json").string());
    if (out.has_single0)
      eval::write_report_json(out.single0, (fs::path(out_dir) / "single0.json").string());
    {
      std::ofstream os(fs::path(out_dir) / "model.json", std::ios::trunc);
      ordered_json mj;
      mj["mimo"] = mimo_config_json(tcfg.mimo);
      mj["seed"] = tcfg.seed;
      os << mj.dump(2) << "\n";
    }
    {
      // timing is metadata and may differ run to run; it lives here, not in
      // the report
      std::ofstream os(fs::path(out_dir) / "manifest.json", std::ios::trunc);
      ordered_json manifest;
      manifest["request_hash"] = request_hash(req);
      manifest["name"] = req.name;
      manifest["seed"] = tcfg.seed;
      manifest["version"] = "mimodet 0.1.0";
      manifest["kernels"] = kernels::backend_name(kernels::active_backend());
      manifest["train_seconds"] = out.train_seconds;
      manifest["ms_per_image"] = out.ms_per_image;
      manifest["params"] = out.params;
      manifest["created"] = std::chrono::duration_cast<std::chrono::seconds>(
                                std::chrono::system_clock::now().time_since_epoch())
                                .count();
      os << manifest.dump(2) << "\n";
    }
  }
  return out;
}

}  // namespace mimodet::exp
