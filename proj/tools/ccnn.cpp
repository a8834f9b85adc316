// Command-line front end: train / eval / ablate / synth / encode-demo.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ccnn/checkpoint.hpp"
#include "ccnn/data.hpp"
#include "ccnn/eval.hpp"
#include "ccnn/model.hpp"
#include "ccnn/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct run_options {
  std::string config_path;
  std::string out_dir;
  std::string data_dir;    // overrides config data root
  std::string checkpoint;  // eval input
  std::string pred_dir;    // eval input: predicted .pts directory
  std::string mode;
  std::string k_override;  // single K (train) or comma list (ablate)
  double alpha = -1.0;
  long seed = -1;
  bool verbose = false;
};

json load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ccnn::error("cannot open config file: " + path);
  json j;
  in >> j;
  return j;
}

ccnn::ccnn_config parse_model_config(const json& j) {
  ccnn::ccnn_config cfg;
  if (j.contains("model")) {
    const json& m = j["model"];
    cfg.cascades = m.value("cascades", cfg.cascades);
    cfg.input_side = m.value("input_side", cfg.input_side);
    cfg.heatmap_side = m.value("heatmap_side", cfg.input_side / 4);
    cfg.landmarks = m.value("landmarks", cfg.landmarks);
    cfg.channel_scale = m.value("channel_scale", cfg.channel_scale);
    cfg.sigma = m.value("sigma", cfg.sigma);
  }
  cfg.validate();
  return cfg;
}

ccnn::train_config parse_train_config(const json& j) {
  ccnn::train_config tc;
  if (j.contains("train")) {
    const json& t = j["train"];
    tc.epochs = t.value("epochs", tc.epochs);
    tc.batch_size = t.value("batch_size", tc.batch_size);
    tc.momentum = t.value("momentum", tc.momentum);
    tc.seed = t.value("seed", tc.seed);
    tc.validation_fraction = t.value("validation_fraction", tc.validation_fraction);
    if (t.contains("lr_schedule")) {
      tc.lr_schedule.clear();
      for (const auto& stage : t["lr_schedule"])
        tc.lr_schedule.push_back({stage.at(0).get<int>(), stage.at(1).get<double>()});
    }
    if (t.contains("augment")) {
      const json& a = t["augment"];
      tc.augment.rotation_deg = a.value("rotation_deg", tc.augment.rotation_deg);
      tc.augment.scale = a.value("scale", tc.augment.scale);
      tc.augment.translate_frac = a.value("translate_frac", tc.augment.translate_frac);
      tc.augment.color_gain = a.value("color_gain", tc.augment.color_gain);
    }
    if (t.contains("val_mode")) tc.val_mode = ccnn::norm_mode_from_string(t["val_mode"]);
  }
  return tc;
}

ccnn::synthetic_spec parse_synthetic_spec(const json& s) {
  ccnn::synthetic_spec spec;
  spec.landmarks = s.value("landmarks", spec.landmarks);
  spec.side = s.value("side", spec.side);
  spec.rotation_deg = s.value("rotation_deg", spec.rotation_deg);
  spec.scale = s.value("scale", spec.scale);
  spec.translate_frac = s.value("translate_frac", spec.translate_frac);
  spec.jitter_sigma = s.value("jitter_sigma", spec.jitter_sigma);
  spec.seed = s.value("seed", spec.seed);
  return spec;
}

struct data_sources {
  ccnn::dataset train;
  ccnn::dataset test;
  bool has_test = false;
};

// Synthetic layouts carry their own eye-index convention; everything else is
// treated as iBUG 68-point.
ccnn::landmark_convention config_convention(const json& j) {
  if (j.contains("data") && j["data"].contains("synthetic")) {
    ccnn::synthetic_spec spec = parse_synthetic_spec(j["data"]["synthetic"]);
    return ccnn::make_face_template(spec.landmarks, spec.side).second;
  }
  return ccnn::landmark_convention::ibug68();
}

// data: {"root": dir, "test_root": dir} or
//       {"synthetic": {..., "count": N, "test_count": M, "test_seed": S}}
data_sources load_data(const json& j, const run_options& opt) {
  data_sources out;
  ccnn::landmark_convention conv = config_convention(j);
  if (!opt.data_dir.empty()) {
    out.train = ccnn::load_dataset(opt.data_dir, conv);
    return out;
  }
  if (!j.contains("data")) throw ccnn::error("config has no \"data\" section and no --data given");
  const json& d = j["data"];
  if (d.contains("root")) {
    out.train = ccnn::load_dataset(d["root"].get<std::string>(), conv);
    if (d.contains("test_root")) {
      out.test = ccnn::load_dataset(d["test_root"].get<std::string>(), conv);
      out.has_test = true;
    }
    return out;
  }
  if (d.contains("synthetic")) {
    ccnn::synthetic_spec spec = parse_synthetic_spec(d["synthetic"]);
    int count = d["synthetic"].value("count", 100);
    out.train = ccnn::generate_synthetic(spec, count);
    if (d["synthetic"].contains("test_count")) {
      ccnn::synthetic_spec test_spec = spec;
      test_spec.seed = d["synthetic"].value("test_seed", spec.seed + 1000000);
      out.test = ccnn::generate_synthetic(test_spec, d["synthetic"]["test_count"].get<int>());
      out.has_test = true;
    }
    return out;
  }
  throw ccnn::error("config \"data\" must contain \"root\" or \"synthetic\"");
}

void ensure_out_dir(const std::string& out) {
  if (out.empty()) throw ccnn::error("--out is required");
  fs::create_directories(out);
}

void write_eval_artifacts(const std::string& out, const ccnn::eval_report& report,
                          const std::string& label) {
  ccnn::write_report_json((fs::path(out) / "report.json").string(), report);
  ccnn::write_ced_csv((fs::path(out) / "ced.csv").string(), report);
  std::ofstream table((fs::path(out) / "results_table.txt").string());
  table << ccnn::render_results_table(report, label);
}

int cmd_train(const run_options& opt) {
  json cfg = load_config(opt.config_path);
  ccnn::ccnn_config mc = parse_model_config(cfg);
  ccnn::train_config tc = parse_train_config(cfg);
  if (opt.seed >= 0) tc.seed = static_cast<std::uint64_t>(opt.seed);
  if (!opt.k_override.empty()) mc.cascades = std::stoi(opt.k_override);
  tc.log_to_stderr = opt.verbose;
  ensure_out_dir(opt.out_dir);

  data_sources data = load_data(cfg, opt);
  auto result = ccnn::train<float>(data.train, mc, tc);
  ccnn::write_metrics_csv((fs::path(opt.out_dir) / "metrics.csv").string(), result.log,
                          mc.cascades);
  {
    std::ofstream manifest((fs::path(opt.out_dir) / "layer_manifest.txt").string());
    manifest << ccnn::format_layer_manifest(mc);
  }
  ccnn::save_checkpoint((fs::path(opt.out_dir) / "checkpoint_final.bin").string(), result.params);
  ccnn::save_checkpoint((fs::path(opt.out_dir) / "checkpoint_best.bin").string(), result.best);
  if (result.aborted) {
    std::ofstream diag((fs::path(opt.out_dir) / "error.txt").string());
    diag << result.abort_reason << "\n";
    std::cerr << "training aborted: " << result.abort_reason << "\n";
    return 2;
  }
  std::cout << "trained " << tc.epochs << " epochs; best val NLE "
            << ccnn::format_double(result.best_val_nle) << " at epoch " << result.best_epoch
            << "\n";
  return 0;
}

int cmd_eval(const run_options& opt) {
  json cfg = load_config(opt.config_path);
  ensure_out_dir(opt.out_dir);
  ccnn::norm_mode mode = ccnn::norm_mode::inter_ocular;
  double alpha = 0.08, failure_thr = 0.08;
  if (cfg.contains("eval")) {
    const json& e = cfg["eval"];
    if (e.contains("mode")) mode = ccnn::norm_mode_from_string(e["mode"]);
    alpha = e.value("alpha", alpha);
    failure_thr = e.value("failure_threshold", failure_thr);
  }
  if (!opt.mode.empty()) mode = ccnn::norm_mode_from_string(opt.mode);
  if (opt.alpha > 0) alpha = opt.alpha;

  data_sources data = load_data(cfg, opt);
  const ccnn::dataset& ds = data.has_test ? data.test : data.train;

  ccnn::eval_report report;
  if (!opt.pred_dir.empty()) {
    // Predicted .pts files named like the ground-truth samples.
    std::vector<double> per_image;
    for (const auto& s : ds.samples) {
      fs::path pts = fs::path(opt.pred_dir) / s.name;
      pts.replace_extension(".pts");
      ccnn::landmark_set est = ccnn::read_pts_file(pts.string());
      est.frame_w = s.landmarks.frame_w;
      est.frame_h = s.landmarks.frame_h;
      per_image.push_back(ccnn::nle(est, s.landmarks, mode, ds.convention));
    }
    report = ccnn::make_report(std::move(per_image), mode, alpha, failure_thr);
  } else if (!opt.checkpoint.empty()) {
    auto params = ccnn::load_checkpoint<float>(opt.checkpoint);
    std::vector<int> idx(ds.count());
    for (int i = 0; i < ds.count(); ++i) idx[i] = i;
    std::vector<double> per_image;
    ccnn::evaluate_nle(params, ds.samples, idx, ds.convention, mode, 16, &per_image);
    report = ccnn::make_report(std::move(per_image), mode, alpha, failure_thr);
  } else {
    throw ccnn::error("eval needs --checkpoint or --pred");
  }
  write_eval_artifacts(opt.out_dir, report, "this run");
  std::cout << "images " << report.per_image_nle.size() << "  mean NLE "
            << ccnn::format_double(report.mean_nle) << "  AUC_"
            << ccnn::format_double(report.alpha) << " " << ccnn::format_double(report.auc)
            << "%  failures " << ccnn::format_double(report.failures) << "%\n";
  return 0;
}

int cmd_ablate(const run_options& opt) {
  json cfg = load_config(opt.config_path);
  ccnn::ccnn_config mc = parse_model_config(cfg);
  ccnn::train_config tc = parse_train_config(cfg);
  tc.log_to_stderr = opt.verbose;
  ensure_out_dir(opt.out_dir);

  std::vector<int> k_values{1, 2, 3, 4};
  std::vector<std::uint64_t> seeds{1};
  if (cfg.contains("ablation")) {
    const json& a = cfg["ablation"];
    if (a.contains("k_values")) k_values = a["k_values"].get<std::vector<int>>();
    if (a.contains("seeds")) seeds = a["seeds"].get<std::vector<std::uint64_t>>();
    if (a.contains("epochs")) tc.epochs = a["epochs"].get<int>();
  }
  if (!opt.k_override.empty()) {
    k_values.clear();
    std::stringstream ss(opt.k_override);
    std::string tok;
    while (std::getline(ss, tok, ',')) k_values.push_back(std::stoi(tok));
  }

  data_sources data = load_data(cfg, opt);
  const ccnn::dataset& test = data.has_test ? data.test : data.train;
  ccnn::norm_mode mode = ccnn::norm_mode::inter_ocular;
  if (cfg.contains("eval") && cfg["eval"].contains("mode"))
    mode = ccnn::norm_mode_from_string(cfg["eval"]["mode"]);
  if (!opt.mode.empty()) mode = ccnn::norm_mode_from_string(opt.mode);

  std::ofstream csv((fs::path(opt.out_dir) / "ablation.csv").string());
  csv << "k,seed,test_nle,best_val_nle,final_train_loss\n";
  std::map<int, std::vector<double>> by_k;
  for (int k : k_values) {
    for (std::uint64_t seed : seeds) {
      ccnn::ccnn_config run_cfg = mc;
      run_cfg.cascades = k;
      ccnn::train_config run_tc = tc;
      run_tc.seed = seed;
      auto result = ccnn::train<float>(data.train, run_cfg, run_tc);
      if (result.aborted) throw ccnn::error("ablation run aborted: " + result.abort_reason);
      std::vector<int> idx(test.count());
      for (int i = 0; i < test.count(); ++i) idx[i] = i;
      double test_nle = ccnn::evaluate_nle(result.best, test.samples, idx, test.convention, mode,
                                           run_tc.batch_size);
      by_k[k].push_back(test_nle);
      csv << k << "," << seed << "," << ccnn::format_double(test_nle) << ","
          << ccnn::format_double(result.best_val_nle) << ","
          << ccnn::format_double(result.log.empty() ? 0.0 : result.log.back().loss.total) << "\n";
      csv.flush();
      std::cout << "k=" << k << " seed=" << seed << " test NLE "
                << ccnn::format_double(test_nle) << "\n";
    }
  }
  std::ofstream summary((fs::path(opt.out_dir) / "ablation_summary.csv").string());
  summary << "k,mean_test_nle\n";
  for (const auto& [k, values] : by_k) {
    double mean = 0;
    for (double v : values) mean += v;
    summary << k << "," << ccnn::format_double(mean / values.size()) << "\n";
  }
  return 0;
}

int cmd_synth(const run_options& opt) {
  json cfg = load_config(opt.config_path);
  ensure_out_dir(opt.out_dir);
  if (!cfg.contains("data") || !cfg["data"].contains("synthetic"))
    throw ccnn::error("synth needs a config with data.synthetic");
  ccnn::synthetic_spec spec = parse_synthetic_spec(cfg["data"]["synthetic"]);
  if (opt.seed >= 0) spec.seed = static_cast<std::uint64_t>(opt.seed);
  int count = cfg["data"]["synthetic"].value("count", 100);
  ccnn::dataset ds = ccnn::generate_synthetic(spec, count);
  ccnn::write_dataset(opt.out_dir, ds);
  std::cout << "wrote " << ds.count() << " samples to " << opt.out_dir << "\n";
  return 0;
}

int cmd_encode_demo(const run_options& opt) {
  json cfg = load_config(opt.config_path);
  ensure_out_dir(opt.out_dir);
  ccnn::ccnn_config mc = parse_model_config(cfg);
  data_sources data = load_data(cfg, opt);
  const ccnn::sample& s = data.train.samples.front();

  ccnn::image crop = ccnn::crop_and_resize(s.img, s.box, mc.input_side);
  ccnn::landmark_set lms =
      ccnn::transform_landmarks(s.landmarks, ccnn::square_extend(s.box), mc.input_side);
  auto hm = ccnn::encode_heatmaps<float>(lms, mc.heatmap_side, mc.sigma, mc.stride());

  ccnn::write_pnm((fs::path(opt.out_dir) / "sample.ppm").string(), crop);

  // channel montage: near-square grid of heatmap tiles
  int n = mc.landmarks;
  int cols = 1;
  while (cols * cols < n) ++cols;
  int rows = (n + cols - 1) / cols;
  ccnn::image montage(rows * mc.heatmap_side, cols * mc.heatmap_side, 1, 0.0f, 1.0f);
  for (int i = 0; i < n; ++i) {
    int r0 = (i / cols) * mc.heatmap_side, c0 = (i % cols) * mc.heatmap_side;
    for (int y = 0; y < mc.heatmap_side; ++y)
      for (int x = 0; x < mc.heatmap_side; ++x)
        montage.at(r0 + y, c0 + x, 0) = hm.at(0, y, x, i);
  }
  ccnn::write_pnm((fs::path(opt.out_dir) / "heatmaps.pgm").string(), montage);

  auto decoded = ccnn::decode_heatmaps(hm, 0, mc.stride());
  std::ofstream pts((fs::path(opt.out_dir) / "decoded.pts").string());
  pts << ccnn::serialize_pts(decoded);
  std::cout << "wrote sample.ppm, heatmaps.pgm (" << n << " channels), decoded.pts\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CCNN cascaded facial-landmark localizer"};
  app.require_subcommand(1);
  run_options opt;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "JSON config file")->required();
    sub->add_option("--out", opt.out_dir, "output directory")->required();
    sub->add_option("--seed", opt.seed, "seed override");
    sub->add_option("--k", opt.k_override, "cascade count override (comma list for ablate)");
    sub->add_option("--mode", opt.mode, "inter_ocular or inter_pupil");
    sub->add_option("--alpha", opt.alpha, "AUC threshold (default 0.08)");
    sub->add_option("--data", opt.data_dir, "dataset directory override");
    sub->add_flag("--verbose", opt.verbose, "per-epoch log to stderr");
  };

  CLI::App* train = app.add_subcommand("train", "train a model, write checkpoints + metrics");
  add_common(train);
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint or predicted landmarks");
  add_common(eval);
  eval->add_option("--checkpoint", opt.checkpoint, "model checkpoint to evaluate");
  eval->add_option("--pred", opt.pred_dir, "directory of predicted .pts files");
  CLI::App* ablate = app.add_subcommand("ablate", "train/evaluate across cascade counts");
  add_common(ablate);
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth);
  CLI::App* demo = app.add_subcommand("encode-demo", "write heatmap grids for one sample");
  add_common(demo);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (app.got_subcommand(train)) return cmd_train(opt);
    if (app.got_subcommand(eval)) return cmd_eval(opt);
    if (app.got_subcommand(ablate)) return cmd_ablate(opt);
    if (app.got_subcommand(synth)) return cmd_synth(opt);
    if (app.got_subcommand(demo)) return cmd_encode_demo(opt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (!opt.out_dir.empty()) {
      std::error_code ec;
      fs::create_directories(opt.out_dir, ec);
      if (!ec) {
        std::ofstream diag((fs::path(opt.out_dir) / "error.txt").string());
        diag << e.what() << "\n";
      }
    }
    return 2;
  }
  return 1;
}
