#include "mimodet/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mimodet/config.hpp"
#include "mimodet/experiments.hpp"
#include "mimodet/kernels.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace mimodet::cli {

namespace {

struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
  cmd->add_option("--config", c.config_path, "flat dotted-key JSON config");
  cmd->add_option("--seed", c.seed, "master seed for all randomness")
      ->each([&c](const std::string&) { c.seed_given = true; });
  auto* out = cmd->add_option("--out", c.out, "output directory");
  if (out_required) out->required();
  cmd->add_option("--set", c.sets, "config override key=value (repeatable)")
      ->type_size(1)
      ->allow_extra_args(false);
}

config::Run resolve_config(const Common& c) {
  config::Run run;
  if (!c.config_path.empty()) run = config::from_file(c.config_path);
  for (const auto& kv : c.sets) config::apply_set_argument(run, kv);
  if (c.seed_given) config::propagate_seed(run, c.seed);
  run.tcfg.validate();
  return run;
}

void write_manifest(const std::string& dir, const std::string& command,
                    const config::Run& run, const ordered_json& extra = {}) {
  fs::create_directories(dir);
  ordered_json m;
  m["command"] = command;
  m["config_hash"] = config::config_hash(run);
  m["seed"] = run.tcfg.seed;
  m["version"] = "mimodet 0.1.0";
  m["kernels"] = kernels::backend_name(kernels::active_backend());
  m["created"] = std::chrono::duration_cast<std::chrono::seconds>(
                     std::chrono::system_clock::now().time_since_epoch())
                     .count();
  for (const auto& [k, v] : extra.items()) m[k] = v;
  std::ofstream os(fs::path(dir) / "manifest.json", std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write manifest in " + dir);
  os << m.dump(2) << "\n";
}

std::string run_name(const config::Run& run) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "m%d-p%.2f-s%llu", run.tcfg.mimo.m, run.tcfg.mimo.p,
                (unsigned long long)run.tcfg.seed);
  std::string name = buf;
  if (run.tcfg.fraction < 1.0) {
    std::snprintf(buf, sizeof(buf), "-f%.2f", run.tcfg.fraction);
    name += buf;
  }
  return name;
}

// ------------------------------------------------------------- gen-data ----

int cmd_gen_data(const Common& c) {
  config::Run run = resolve_config(c);
  data::SceneConfig train_scene = run.scene;
  data::SceneConfig val_scene = run.scene;
  val_scene.seed = mix_seed(run.scene.seed, 0x7a150000ull);

  auto train_split = data::generate_dataset(train_scene, run.n_train);
  auto val_split = data::generate_dataset(val_scene, run.n_val);
  data::write_dataset(train_split, (fs::path(c.out) / "train").string());
  data::write_dataset(val_split, (fs::path(c.out) / "val").string());
  write_manifest(c.out, "gen-data", run,
                 {{"train_images", run.n_train}, {"val_images", run.n_val}});
  std::printf("gen-data: %d train / %d val images in %s\n", run.n_train, run.n_val,
              c.out.c_str());
  return 0;
}

// ---------------------------------------------------------------- train ----

int cmd_train(const Common& c, const std::string& data_dir) {
  config::Run run = resolve_config(c);
  auto train_set = data::read_dataset((fs::path(data_dir) / "train").string());
  auto val_set = data::read_dataset((fs::path(data_dir) / "val").string());

  exp::RunRequest req;
  req.name = run_name(run);
  req.tcfg = run.tcfg;
  req.severity = run.severity;
  req.corruptions = false;  // train emits a clean report; corrupt-eval adds the rest
  auto outcome = exp::run_and_evaluate(req, train_set, val_set, c.out);
  write_manifest(c.out, "train", run,
                 {{"request_hash", exp::request_hash(req)},
                  {"name", req.name},
                  {"params", outcome.params},
                  {"train_seconds", outcome.train_seconds},
                  {"ms_per_image", outcome.ms_per_image}});
  std::printf("train: %s  map=%.4f map50=%.4f  (%.1fs, %zu params)\n", req.name.c_str(),
              outcome.report.map, outcome.report.map50, outcome.train_seconds, outcome.params);
  return 0;
}

// ----------------------------------------------------------------- eval ----

det::Model<float> load_run_model(const std::string& model_dir) {
  const fs::path mj = fs::path(model_dir) / "model.json";
  std::ifstream is(mj);
  if (!is) throw std::runtime_error("eval: missing " + mj.string());
  nlohmann::json j;
  is >> j;
  auto cfg = exp::mimo_config_from_json(j.at("mimo"));
  auto model = det::build_model<float>(cfg, 0);
  det::load_model(model, (fs::path(model_dir) / "checkpoint.bin").string());
  return model;
}

int cmd_eval(const Common& c, const std::string& model_dir, const std::string& data_dir,
             bool with_corruptions) {
  config::Run run = resolve_config(c);
  auto model = load_run_model(model_dir);
  auto samples = data::read_dataset(data_dir);

  auto predict_fn = [&](const data::Image& img) {
    return train::predict_fused(model, img, run.tcfg.fusion);
  };
  std::vector<data::CorruptionKind> kinds;
  if (with_corruptions)
    kinds.assign(std::begin(data::kAllCorruptions), std::end(data::kAllCorruptions));

  auto report = eval::robustness_report(predict_fn, samples, kinds, run.severity,
                                        run.tcfg.calib, run.tcfg.seed + 1);
  report.name = fs::path(model_dir).filename().string();
  report.params = double(model.parameter_count());

  std::vector<eval::DetSet> dets;
  dets.reserve(samples.size());
  for (const auto& s : samples) dets.push_back(predict_fn(s.image));
  fs::create_directories(c.out);
  eval::write_detections_json(dets, (fs::path(c.out) / "detections.json").string());
  eval::write_report_json(report, (fs::path(c.out) / "report.json").string());
  write_manifest(c.out, with_corruptions ? "corrupt-eval" : "eval", run,
                 {{"model_dir", model_dir}, {"data_dir", data_dir}});
  std::printf("%s: map=%.4f map50=%.4f ece=%.4f", report.name.c_str(), report.map,
              report.map50, report.ece);
  if (with_corruptions) std::printf(" c_map=%.4f c_ece=%.4f", report.c_map, report.c_ece);
  std::printf("\n");
  return 0;
}

// ----------------------------------------------------------------- fuse ----

int cmd_fuse(const Common& c, const std::vector<std::string>& inputs,
             const std::string& out_file) {
  config::Run run = resolve_config(c);
  std::vector<std::vector<eval::DetSet>> sources;
  int images = 0;
  for (const auto& path : inputs) {
    sources.push_back(eval::read_detections_json(path, -1));
    images = std::max(images, int(sources.back().size()));
  }
  std::vector<eval::DetSet> fused(static_cast<std::size_t>(images));
  for (int i = 0; i < images; ++i) {
    std::vector<eval::DetSet> per_model;
    for (auto& s : sources) {
      per_model.push_back(i < int(s.size()) ? s[std::size_t(i)] : eval::DetSet{});
      for (auto& d : per_model.back()) d.source = int(per_model.size()) - 1;
    }
    agg::FusionConfig fcfg = run.tcfg.fusion;
    fcfg.model_count = int(inputs.size());
    fused[std::size_t(i)] = agg::aggregate(per_model, fcfg);
  }
  eval::write_detections_json(fused, out_file);
  const std::string dir = fs::path(out_file).parent_path().string();
  write_manifest(dir.empty() ? "." : dir, "fuse", run,
                 {{"inputs", inputs}, {"images", images}});
  std::printf("fuse: %zu files -> %s (%d images, %s)\n", inputs.size(), out_file.c_str(),
              images, agg::fusion_method_name(run.tcfg.fusion.method));
  return 0;
}

// -------------------------------------------------------------- sweep-p ----

int cmd_sweep_p(const Common& c, const std::string& data_dir, const std::string& p_list) {
  config::Run run = resolve_config(c);
  if (!p_list.empty()) {
    std::vector<double> ps;
    std::stringstream ss(p_list);
    std::string tok;
    while (std::getline(ss, tok, ',')) ps.push_back(std::stod(tok));
    run.sweep_ps = ps;
  }
  if (run.sweep_ps.size() < 2)
    throw config::ValidationError("sweep-p needs at least two p values");
  auto train_set = data::read_dataset((fs::path(data_dir) / "train").string());
  auto val_set = data::read_dataset((fs::path(data_dir) / "val").string());

  std::vector<train::SweepRow> rows(run.sweep_ps.size());
  std::vector<std::function<void()>> jobs;
  for (std::size_t i = 0; i < run.sweep_ps.size(); ++i) {
    jobs.push_back([&, i] {
      exp::RunRequest req;
      req.tcfg = run.tcfg;
      req.tcfg.mimo.p = run.sweep_ps[i];
      req.name = run_name(run) + "-sweep";
      req.corruptions = false;
      char sub[32];
      std::snprintf(sub, sizeof(sub), "p%.2f", run.sweep_ps[i]);
      auto outcome = exp::run_and_evaluate(req, train_set, val_set,
                                           (fs::path(c.out) / "runs" / sub).string());
      rows[i] = {run.sweep_ps[i], outcome.report.map, outcome.report.map50};
    });
  }
  exp::run_jobs(std::move(jobs));

  fs::create_directories(c.out);
  std::ofstream os(fs::path(c.out) / "sweep.csv", std::ios::trunc);
  os << "p,map,map50\n";
  for (const auto& r : rows) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%.3f,%.6f,%.6f", r.p, r.map, r.map50);
    os << buf << "\n";
    std::printf("sweep-p: p=%.2f map=%.4f map50=%.4f\n", r.p, r.map, r.map50);
  }
  write_manifest(c.out, "sweep-p", run, {{"rows", rows.size()}});
  return 0;
}

// -------------------------------------------------------------- lowdata ----

int cmd_lowdata(const Common& c, const std::string& data_dir) {
  config::Run run = resolve_config(c);
  auto train_set = data::read_dataset((fs::path(data_dir) / "train").string());
  auto val_set = data::read_dataset((fs::path(data_dir) / "val").string());

  struct Row {
    double fraction;
    std::uint64_t seed;
    const char* model;
    double map, map50;
  };
  std::vector<Row> rows;
  std::vector<std::function<void()>> jobs;
  std::mutex rows_mutex;
  for (double fraction : run.lowdata_fractions) {
    for (int s = 0; s < run.lowdata_seeds; ++s) {
      for (int mimo = 0; mimo < 2; ++mimo) {
        jobs.push_back([&, fraction, s, mimo] {
          exp::RunRequest req;
          req.tcfg = run.tcfg;
          req.tcfg.fraction = fraction;
          req.tcfg.seed = run.tcfg.seed + std::uint64_t(s);
          req.tcfg.mimo.m = mimo ? 2 : 1;
          req.corruptions = false;
          char name[64];
          std::snprintf(name, sizeof(name), "%s-f%.2f-s%llu", mimo ? "mimo" : "baseline",
                        fraction, (unsigned long long)req.tcfg.seed);
          req.name = name;
          auto outcome = exp::run_and_evaluate(req, train_set, val_set,
                                               (fs::path(c.out) / "runs" / name).string());
          std::lock_guard<std::mutex> lock(rows_mutex);
          rows.push_back({fraction, req.tcfg.seed, mimo ? "mimo" : "baseline",
                          outcome.report.map, outcome.report.map50});
        });
      }
    }
  }
  exp::run_jobs(std::move(jobs));
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.fraction != b.fraction) return a.fraction < b.fraction;
    if (a.seed != b.seed) return a.seed < b.seed;
    return std::string(a.model) < b.model;
  });

  fs::create_directories(c.out);
  std::ofstream os(fs::path(c.out) / "lowdata.csv", std::ios::trunc);
  os << "fraction,seed,model,map,map50\n";
  for (const auto& r : rows) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%.2f,%llu,%s,%.6f,%.6f", r.fraction,
                  (unsigned long long)r.seed, r.model, r.map, r.map50);
    os << buf << "\n";
  }
  for (double fraction : run.lowdata_fractions) {
    double base = 0, mimo = 0;
    int nb = 0, nm = 0;
    for (const auto& r : rows) {
      if (r.fraction != fraction) continue;
      if (std::string(r.model) == "mimo") {
        mimo += r.map;
        ++nm;
      } else {
        base += r.map;
        ++nb;
      }
    }
    if (nb && nm)
      std::printf("lowdata: fraction %.2f  baseline %.4f  mimo %.4f  gap %+.4f\n", fraction,
                  base / nb, mimo / nm, mimo / nm - base / nb);
  }
  write_manifest(c.out, "lowdata", run, {{"rows", rows.size()}});
  return 0;
}

// --------------------------------------------------------------- report ----

int cmd_report(const Common& c, const std::vector<std::string>& run_dirs) {
  config::Run run = resolve_config(c);
  fs::create_directories(c.out);
  std::ofstream csv(fs::path(c.out) / "report.csv", std::ios::trunc);
  std::ofstream md(fs::path(c.out) / "report.md", std::ios::trunc);
  csv << eval::report_csv_header() << ",params,ms_img\n";
  md << "| model | mAP | ECE | c-mAP | c-ECE | params | ms/img |\n";
  md << "|---|---|---|---|---|---|---|\n";
  for (const auto& dir : run_dirs) {
    const fs::path rp = fs::path(dir) / "report.json";
    if (!fs::exists(rp)) throw std::runtime_error("report: missing report file " + rp.string());
    auto report = eval::read_report_json(rp.string());
    double ms = 0;
    const fs::path mp = fs::path(dir) / "manifest.json";
    if (fs::exists(mp)) {
      std::ifstream is(mp);
      nlohmann::json m;
      is >> m;
      ms = m.value("ms_per_image", 0.0);
    }
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%.0f,%.3f", eval::report_csv_row(report).c_str(),
                  report.params, ms);
    csv << buf << "\n";
    std::snprintf(buf, sizeof(buf), "| %s | %.4f | %.4f | %.4f | %.4f | %.0f | %.2f |",
                  report.name.c_str(), report.map, report.ece, report.c_map, report.c_ece,
                  report.params, ms);
    md << buf << "\n";
    std::printf("%s\n", buf);
  }
  write_manifest(c.out, "report", run, {{"runs", run_dirs.size()}});
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"MIMO Faster R-CNN on a synthetic shape-detection benchmark"};
  app.require_subcommand(1);

  Common c_gen, c_train, c_eval, c_ceval, c_fuse, c_sweep, c_low, c_report;
  std::string train_data, eval_model, eval_data, ceval_model, ceval_data, sweep_data,
      low_data, fuse_out, sweep_plist;
  std::vector<std::string> fuse_inputs, report_dirs;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark");
  add_common(gen, c_gen);

  auto* tr = app.add_subcommand("train", "train one detector");
  add_common(tr, c_train);
  tr->add_option("--data", train_data, "dataset directory (train/ + val/)")->required();

  auto* ev = app.add_subcommand("eval", "evaluate a trained model on one split");
  add_common(ev, c_eval);
  ev->add_option("--model", eval_model, "run directory with checkpoint + model.json")
      ->required();
  ev->add_option("--data", eval_data, "dataset split directory")->required();

  auto* cev = app.add_subcommand("corrupt-eval", "evaluate incl. corruption suite");
  add_common(cev, c_ceval);
  cev->add_option("--model", ceval_model, "run directory")->required();
  cev->add_option("--data", ceval_data, "dataset split directory")->required();

  auto* fu = app.add_subcommand("fuse", "fuse detection JSON files");
  add_common(fu, c_fuse, false);
  fu->add_option("--out-file", fuse_out, "fused detections output path")->required();
  fu->add_option("inputs", fuse_inputs, "detections JSON files")->required()->expected(-1);

  auto* sw = app.add_subcommand("sweep-p", "train one model per relaxation probability");
  add_common(sw, c_sweep);
  sw->add_option("--data", sweep_data, "dataset directory")->required();
  sw->add_option("--p", sweep_plist, "comma-separated p values");

  auto* lo = app.add_subcommand("lowdata", "baseline-vs-MIMO across dataset fractions");
  add_common(lo, c_low);
  lo->add_option("--data", low_data, "dataset directory")->required();

  auto* rp = app.add_subcommand("report", "combine run reports into one table");
  add_common(rp, c_report);
  rp->add_option("runs", report_dirs, "run directories")->required()->expected(-1);

  try {
    std::vector<std::string> argv_like = args;
    std::reverse(argv_like.begin(), argv_like.end());
    app.parse(argv_like);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      std::cout << app.help();
      return 0;
    }
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(c_gen);
    if (tr->parsed()) return cmd_train(c_train, train_data);
    if (ev->parsed()) return cmd_eval(c_eval, eval_model, eval_data, false);
    if (cev->parsed()) return cmd_eval(c_ceval, ceval_model, ceval_data, true);
    if (fu->parsed()) return cmd_fuse(c_fuse, fuse_inputs, fuse_out);
    if (sw->parsed()) return cmd_sweep_p(c_sweep, sweep_data, sweep_plist);
    if (lo->parsed()) return cmd_lowdata(c_low, low_data);
    if (rp->parsed()) return cmd_report(c_report, report_dirs);
  } catch (const config::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace mimodet::cli
