// Acceptance suite. Each criterion prints exactly one PASS/FAIL line; the
// process exits nonzero if any executed criterion fails.
//
//   ccnn_acceptance                 run all criteria
//   ccnn_acceptance --criterion N   run one
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ccnn/checkpoint.hpp"
#include "ccnn/data.hpp"
#include "ccnn/eval.hpp"
#include "ccnn/model.hpp"
#include "ccnn/training.hpp"

using namespace ccnn;
namespace fs = std::filesystem;

#ifndef CCNN_SOURCE_DIR
#define CCNN_SOURCE_DIR "."
#endif
#ifndef CCNN_CLI_PATH
#define CCNN_CLI_PATH ""
#endif

namespace {

struct outcome {
  bool pass = false;
  std::string detail;
};

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// ---- criterion 1: full-scale shape audit -------------------------------------

outcome criterion_shape_audit() {
  double t0 = now_seconds();
  ccnn_config cfg;  // full scale: 256 input, K=4, N=68
  auto params = ccnn_params<float>::init(cfg, 7);
  tape<float> tp(false);
  rng r(11);
  tensor<float> x(1, cfg.input_side, cfg.input_side, 3);
  for (auto& e : x.v) e = static_cast<float>(r.uniform(-0.5, 0.5));
  auto trace = ccnn_forward(tp, tp.constant(x), params);

  std::vector<std::string> problems;
  auto expect = [&](const std::string& what, const std::string& got, const std::string& want) {
    if (got != want) problems.push_back(what + " is " + got + ", expected " + want);
  };
  expect("F1", tp.val(trace.features1).shape_str(), "1x64x64x128");
  expect("F2", tp.val(trace.features2).shape_str(), "1x64x64x128");
  expect("initial heatmap", tp.val(trace.base_heatmap).shape_str(), "1x64x64x68");
  if (trace.heatmaps.size() != 4) problems.push_back("expected 4 heatmap units");
  for (size_t k = 0; k < trace.heatmaps.size(); ++k) {
    expect("H_" + std::to_string(k + 1), tp.val(trace.heatmaps[k]).shape_str(), "1x64x64x68");
    expect("E_" + std::to_string(k + 1), tp.val(trace.reg_features[k]).shape_str(), "1x8x8x256");
    expect("delta_" + std::to_string(k + 1), tp.val(trace.deltas[k]).shape_str(), "1x1x1x136");
  }

  // the layer manifest must agree with the pinned table resolution
  auto rows = layer_manifest(cfg);
  std::map<std::string, std::string> out_shape;
  for (const auto& row : rows) out_shape[row.name] = row.out_shape;
  expect("manifest base1.features", out_shape["base1.features"], "64x64x128");
  expect("manifest base2.heatmap", out_shape["base2.heatmap"], "64x64x68");
  expect("manifest hm1.concat", out_shape["hm1.concat"], "64x64x196");
  expect("manifest hm4.heatmap", out_shape["hm4.heatmap"], "64x64x68");
  expect("manifest reg1.concat", out_shape["reg1.concat"], "64x64x392");
  expect("manifest reg1.features", out_shape["reg1.features"], "8x8x256");
  expect("manifest reg1.fuse_concat", out_shape["reg1.fuse_concat"], "8x8x512");
  expect("manifest reg4.fc", out_shape["reg4.fc"], "1x1x136");
  expect("manifest base2.conv2.pool", out_shape["base2.conv2.pool"], "128x128x64");
  expect("manifest base2.conv4.pool", out_shape["base2.conv4.pool"], "64x64x128");
  expect("manifest reg1.conv1.pool", out_shape["reg1.conv1.pool"], "32x32x64");
  expect("manifest reg1.conv2.pool", out_shape["reg1.conv2.pool"], "16x16x128");
  expect("manifest reg1.conv3.pool", out_shape["reg1.conv3.pool"], "8x8x256");

  double elapsed = now_seconds() - t0;
  if (elapsed >= 60.0) problems.push_back("runtime " + std::to_string(elapsed) + "s >= 60s");
  if (!problems.empty()) return {false, problems.front()};
  char buf[128];
  std::snprintf(buf, sizeof(buf),
                "full-scale pass matches the manifest (H 64x64x68, E 8x8x256, delta 136) in %.1fs",
                elapsed);
  return {true, buf};
}

// ---- criterion 2: finite-difference gradient check ---------------------------

outcome criterion_gradient_check() {
  double t0 = now_seconds();
  ccnn_config cfg = ccnn_config::toy(2);  // input 64, channel_scale 8, N=5, K=2
  auto params = ccnn_params<double>::init(cfg, 21);
  rng r(23);
  tensor<double> x(2, cfg.input_side, cfg.input_side, 3);
  for (auto& e : x.v) e = r.uniform(-0.5, 0.5);
  std::vector<landmark_set> gt(2);
  for (auto& lms : gt) {
    lms.frame_w = lms.frame_h = cfg.input_side;
    for (int i = 0; i < cfg.landmarks; ++i)
      lms.pts.push_back({r.uniform(6.0, cfg.input_side - 6.0),
                         r.uniform(6.0, cfg.input_side - 6.0)});
  }

  // double precision, dropout off, frozen batchnorm statistics
  auto loss_value = [&]() {
    tape<double> tp(false);
    auto trace = ccnn_forward(tp, tp.constant(x), params);
    auto loss = total_loss(tp, trace, std::span<const landmark_set>(gt), cfg, nullptr);
    return tp.val(loss).v[0];
  };

  tape<double> tp(false);
  auto trace = ccnn_forward(tp, tp.constant(x), params);
  auto loss = total_loss(tp, trace, std::span<const landmark_set>(gt), cfg, nullptr);
  tp.backward(loss);

  // Per tensor, check the largest-magnitude gradient entries. A max-pool
  // selection switching inside the difference window makes the quotient
  // measure a kink instead of the derivative, so each sample is validated at
  // two step sizes and skipped as unresolvable when they disagree;
  // implementation bugs stay consistent across step sizes and are still
  // caught.
  const double h = 1e-6;
  double worst = 0.0;
  std::string worst_name;
  int sampled = 0, skipped = 0;
  auto fd_at = [&](tensor<double>& param, size_t i, double step) {
    double orig = param.v[i];
    param.v[i] = orig + step;
    double lp = loss_value();
    param.v[i] = orig - step;
    double lm = loss_value();
    param.v[i] = orig;
    return (lp - lm) / (2.0 * step);
  };
  auto refs = params.params();
  for (auto& ref : refs) {
    if (!ref.trainable) continue;
    const tensor<double>* g = tp.grad_for(*ref.value);
    if (g == nullptr) return {false, "no gradient reached " + ref.name};
    std::vector<size_t> order(g->size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return std::abs(g->v[a]) > std::abs(g->v[b]);
    });
    int accepted = 0;
    const int want = g->size() > 1 ? 2 : 1;
    for (size_t c = 0; c < order.size() && c < 8 && accepted < want; ++c) {
      size_t i = order[c];
      double fd1 = fd_at(*ref.value, i, h);
      double fd2 = fd_at(*ref.value, i, 2.0 * h);
      if (std::abs(fd1 - fd2) > std::max(1e-7, 1e-4 * std::abs(fd1))) {
        ++skipped;  // kink inside the window; not a derivative measurement
        continue;
      }
      double rel = std::abs(g->v[i] - fd1) / std::max(std::abs(fd1), 1e-8);
      if (rel > worst) {
        worst = rel;
        worst_name = ref.name;
      }
      ++accepted;
      ++sampled;
    }
    if (accepted == 0) return {false, "no FD-resolvable sample found in " + ref.name};
  }
  double elapsed = now_seconds() - t0;
  char buf[192];
  if (sampled < 200) return {false, "sampled only " + std::to_string(sampled) + " parameters"};
  if (worst >= 1e-5) {
    std::snprintf(buf, sizeof(buf), "max relative error %.3g at %s (%d samples)", worst,
                  worst_name.c_str(), sampled);
    return {false, buf};
  }
  if (elapsed >= 300.0) return {false, "runtime exceeded 5 minutes"};
  std::snprintf(buf, sizeof(buf),
                "max relative error %.3g over %d sampled parameters (worst: %s; %d "
                "kink-window samples redrawn) in %.0fs",
                worst, sampled, worst_name.c_str(), skipped, elapsed);
  return {true, buf};
}

// ---- criterion 3: heatmap codec ----------------------------------------------

outcome criterion_codec() {
  const double stride = 4.0;
  const int side = 64, n = 68;
  rng r(2025);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    landmark_set lms;
    lms.frame_w = lms.frame_h = side * stride;
    for (int i = 0; i < n; ++i)
      lms.pts.push_back({r.uniform(0.0, side * stride), r.uniform(0.0, side * stride)});
    auto hm = encode_heatmaps<float>(lms, side, 1.3, stride);
    auto dec = decode_heatmaps(hm, 0, stride);
    for (int i = 0; i < n; ++i) {
      worst = std::max(worst, std::abs(dec.pts[i].x - lms.pts[i].x));
      worst = std::max(worst, std::abs(dec.pts[i].y - lms.pts[i].y));
    }
  }
  if (worst > stride) {
    return {false, "round-trip max error " + format_double(worst) + " px exceeds the stride"};
  }

  // peak values against the closed form, double precision
  landmark_set lone;
  lone.frame_w = lone.frame_h = side * stride;
  lone.pts.push_back({(10 + 0.5) * stride, (20 + 0.5) * stride});
  auto hm = encode_heatmaps<double>(lone, side, 1.3, stride);
  double peak = hm.at(0, 20, 10, 0);
  double neighbor = hm.at(0, 20, 11, 0);
  double expected_neighbor = std::exp(-1.0 / (2.0 * 1.3 * 1.3));
  if (std::abs(peak - 1.0) > 1e-12)
    return {false, "peak value " + format_double(peak) + " != 1.0"};
  if (std::abs(neighbor - expected_neighbor) > 1e-12)
    return {false, "neighbor value deviates from the Gaussian closed form"};
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "1000 round trips max |err| %.3f px <= stride 4; peak 1.0, neighbor %.6f",
                worst, neighbor);
  return {true, buf};
}

// ---- criterion 4: metric oracles ----------------------------------------------

outcome criterion_metrics() {
  rng r(31);
  // brute-force references
  auto auc_ref = [](const std::vector<double>& e, double a) {
    double s = 0;
    for (double v : e) s += std::max(0.0, a - std::max(0.0, v));
    return 100.0 * s / (a * static_cast<double>(e.size()));
  };
  auto fail_ref = [](const std::vector<double>& e, double thr) {
    size_t c = 0;
    for (double v : e)
      if (v > thr) ++c;
    return 100.0 * static_cast<double>(c) / static_cast<double>(e.size());
  };
  auto ced_ref = [](const std::vector<double>& e, double q) {
    size_t c = 0;
    for (double v : e)
      if (v <= q) ++c;
    return static_cast<double>(c) / static_cast<double>(e.size());
  };

  for (int trial = 0; trial < 100; ++trial) {
    int count = static_cast<int>(r.uniform_int(1, 60));
    std::vector<double> errors;
    for (int i = 0; i < count; ++i) errors.push_back(r.uniform(0.0, 0.16));
    double alpha = r.uniform(0.02, 0.12);
    if (std::abs(auc_alpha(errors, alpha) - auc_ref(errors, alpha)) > 1e-9)
      return {false, "AUC mismatch vs brute force"};
    double thr = r.uniform(0.01, 0.14);
    if (std::abs(failure_rate(errors, thr) - fail_ref(errors, thr)) > 1e-9)
      return {false, "failure rate mismatch vs brute force"};
    auto curve = ced(errors);
    for (int q = 0; q < 5; ++q) {
      double at = r.uniform(0.0, 0.2);
      if (std::abs(ced_at(curve, at) - ced_ref(errors, at)) > 1e-9)
        return {false, "CED mismatch vs brute force"};
    }
    // NLE against a direct transcription of the formula
    landmark_set gt;
    gt.frame_w = gt.frame_h = 256;
    for (int i = 0; i < 68; ++i)
      gt.pts.push_back({r.uniform(30.0, 220.0), r.uniform(30.0, 220.0)});
    landmark_set est = gt;
    for (auto& p : est.pts) {
      p.x += r.normal(0.0, 3.0);
      p.y += r.normal(0.0, 3.0);
    }
    double d = std::hypot(gt.pts[36].x - gt.pts[45].x, gt.pts[36].y - gt.pts[45].y);
    double sum = 0;
    for (int i = 0; i < 68; ++i)
      sum += std::hypot(est.pts[i].x - gt.pts[i].x, est.pts[i].y - gt.pts[i].y);
    double ref = sum / (68.0 * d);
    if (std::abs(nle(est, gt, norm_mode::inter_ocular) - ref) > 1e-9)
      return {false, "NLE mismatch vs direct formula"};
  }

  // pinned hand cases
  if (std::abs(auc_alpha({0.04}, 0.08) - 50.0) > 1e-12)
    return {false, "single error 0.04 at alpha 0.08 must give AUC exactly 50"};
  if (failure_rate({0.08}, 0.08) != 0.0)
    return {false, "error exactly 0.08 must not count as a failure"};
  return {true, "NLE/CED/AUC/failure match brute force on 100 random sets within 1e-9"};
}

// ---- shared desk-scale benchmark pieces ----------------------------------------

synthetic_spec benchmark_spec() {
  synthetic_spec spec;
  spec.landmarks = 5;
  spec.side = 64;
  spec.rotation_deg = 15.0;
  spec.scale = 0.10;
  spec.translate_frac = 0.08;
  spec.jitter_sigma = 1.0;
  spec.seed = 42;
  return spec;
}

train_config benchmark_train_config(std::uint64_t seed, int epochs) {
  train_config tc;
  tc.epochs = epochs;
  tc.batch_size = 16;
  tc.momentum = 0.9;
  tc.lr_schedule = {{0, 0.01}, {120, 0.005}, {170, 0.002}};
  tc.seed = seed;
  tc.validation_fraction = 0.1;
  tc.val_mode = norm_mode::inter_ocular;
  tc.augment.rotation_deg = 5.0;
  tc.augment.scale = 0.03;
  tc.augment.translate_frac = 0.02;
  tc.augment.color_gain = 0.1;
  return tc;
}

double mean_shape_baseline(const dataset& test_ds, const synthetic_spec& spec) {
  auto [tmpl, conv] = make_face_template(spec.landmarks, spec.side);
  double sum = 0;
  for (const auto& s : test_ds.samples)
    sum += nle(tmpl, s.landmarks, norm_mode::inter_ocular, conv);
  return sum / test_ds.count();
}

double test_set_nle(ccnn_params<float>& params, const dataset& test_ds) {
  std::vector<int> idx(test_ds.count());
  for (int i = 0; i < test_ds.count(); ++i) idx[i] = i;
  return evaluate_nle(params, test_ds.samples, idx, test_ds.convention,
                      norm_mode::inter_ocular, 16);
}

// ---- criterion 5: desk-scale end-to-end ----------------------------------------

outcome criterion_end_to_end() {
  double t0 = now_seconds();
  synthetic_spec spec = benchmark_spec();
  dataset train_ds = generate_synthetic(spec, 500);
  synthetic_spec test_spec = spec;
  test_spec.seed = 4242;
  dataset test_ds = generate_synthetic(test_spec, 100);
  double baseline = mean_shape_baseline(test_ds, spec);

  ccnn_config mc = ccnn_config::toy(2);
  train_config tc = benchmark_train_config(1, 200);
  auto result = train<float>(train_ds, mc, tc);
  if (result.aborted) return {false, "training aborted: " + result.abort_reason};

  double loss0 = result.log.front().loss.total;
  double loss49 = result.log[49].loss.total;
  double nle_best = test_set_nle(result.best, test_ds);
  double nle_final = test_set_nle(result.params, test_ds);
  double elapsed = now_seconds() - t0;

  char buf[256];
  if (loss49 > 0.5 * loss0) {
    std::snprintf(buf, sizeof(buf), "loss fell only %.1f%% in 50 epochs (%.5f -> %.5f)",
                  100.0 * (1.0 - loss49 / loss0), loss0, loss49);
    return {false, buf};
  }
  if (!(nle_best < 0.5 * baseline)) {
    std::snprintf(buf, sizeof(buf), "test NLE %.4f not < 0.5 x baseline %.4f", nle_best,
                  baseline);
    return {false, buf};
  }
  std::snprintf(buf, sizeof(buf),
                "loss -%.0f%% by epoch 50; test NLE %.4f (final %.4f) vs 0.5 x baseline %.4f; "
                "%.0f min",
                100.0 * (1.0 - loss49 / loss0), nle_best, nle_final, 0.5 * baseline,
                elapsed / 60.0);
  return {true, buf};
}

// ---- criterion 6: ablation trend over K ----------------------------------------

outcome criterion_ablation() {
  double t0 = now_seconds();
  synthetic_spec spec = benchmark_spec();
  dataset train_ds = generate_synthetic(spec, 500);
  synthetic_spec test_spec = spec;
  test_spec.seed = 4242;
  dataset test_ds = generate_synthetic(test_spec, 100);

  const std::vector<std::uint64_t> seeds{1, 2, 3};
  std::map<int, double> mean_nle;
  std::string runs;
  for (int k : {1, 2, 3, 4}) {
    double sum = 0;
    for (std::uint64_t seed : seeds) {
      ccnn_config mc = ccnn_config::toy(k);
      train_config tc = benchmark_train_config(seed, 200);
      auto result = train<float>(train_ds, mc, tc);
      if (result.aborted)
        return {false, "ablation run aborted (k=" + std::to_string(k) + ")"};
      double v = test_set_nle(result.best, test_ds);
      sum += v;
      runs += " k" + std::to_string(k) + "/s" + std::to_string(seed) + "=" +
              format_double(std::round(v * 1e4) / 1e4);
    }
    mean_nle[k] = sum / static_cast<double>(seeds.size());
  }
  double elapsed = now_seconds() - t0;
  char buf[384];
  if (!(mean_nle[2] <= mean_nle[1])) {
    std::snprintf(buf, sizeof(buf), "mean NLE K=2 (%.4f) > K=1 (%.4f);%s", mean_nle[2],
                  mean_nle[1], runs.c_str());
    return {false, buf};
  }
  for (int k : {3, 4}) {
    if (std::abs(mean_nle[k] - mean_nle[2]) > 0.05 * mean_nle[2]) {
      std::snprintf(buf, sizeof(buf), "mean NLE K=%d (%.4f) not within 5%% of K=2 (%.4f);%s", k,
                    mean_nle[k], mean_nle[2], runs.c_str());
      return {false, buf};
    }
  }
  std::snprintf(buf, sizeof(buf),
                "mean test NLE K1 %.4f >= K2 %.4f; K3 %.4f, K4 %.4f within 5%% of K2 "
                "(3 seeds, %.0f min)",
                mean_nle[1], mean_nle[2], mean_nle[3], mean_nle[4], elapsed / 60.0);
  return {true, buf};
}

// ---- criterion 7: seeded training determinism -----------------------------------

outcome criterion_determinism() {
  std::string cli = CCNN_CLI_PATH;
  if (cli.empty() || !fs::exists(cli)) return {false, "ccnn CLI binary not found"};
  fs::path work = fs::temp_directory_path() / "ccnn_acceptance_determinism";
  fs::remove_all(work);
  fs::create_directories(work);
  fs::path cfg_path = work / "config.json";
  {
    std::ofstream cfg(cfg_path);
    cfg << R"({
  "model": {"cascades": 2, "input_side": 64, "heatmap_side": 16, "landmarks": 5,
            "channel_scale": 8, "sigma": 1.3},
  "train": {"epochs": 8, "batch_size": 16, "momentum": 0.9,
            "lr_schedule": [[0, 0.01]], "seed": 77, "validation_fraction": 0.1,
            "augment": {"rotation_deg": 5.0, "scale": 0.03,
                         "translate_frac": 0.02, "color_gain": 0.1}},
  "data": {"synthetic": {"landmarks": 5, "side": 64, "rotation_deg": 15.0, "scale": 0.1,
                          "translate_frac": 0.08, "jitter_sigma": 1.0, "seed": 42,
                          "count": 64}}
})";
  }
  auto run = [&](const std::string& out) {
    std::string cmd = "\"" + cli + "\" train --config \"" + cfg_path.string() + "\" --out \"" +
                      (work / out).string() + "\" > /dev/null 2>&1";
    return std::system(cmd.c_str());
  };
  if (run("a") != 0) return {false, "first train run failed"};
  if (run("b") != 0) return {false, "second train run failed"};
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  std::string a = slurp(work / "a" / "metrics.csv");
  std::string b = slurp(work / "b" / "metrics.csv");
  if (a.empty()) return {false, "metrics.csv missing"};
  if (a != b) return {false, "metrics CSVs differ between identical seeded runs"};
  fs::remove_all(work);
  return {true, "two seeded `train` runs produced byte-identical metrics CSVs"};
}

// ---- criterion 8: .pts fixtures ---------------------------------------------------

outcome criterion_pts() {
  fs::path fixtures = fs::path(CCNN_SOURCE_DIR) / "tests" / "fixtures";
  if (!fs::is_directory(fixtures)) return {false, "fixture directory missing"};

  landmark_set lms = read_pts_file((fixtures / "valid_3pt.pts").string());
  if (lms.count() != 3 || lms.pts[1].x != 100.125)
    return {false, "valid fixture parsed incorrectly"};
  landmark_set again = parse_pts(serialize_pts(lms));
  for (int i = 0; i < 3; ++i)
    if (again.pts[i].x != lms.pts[i].x || again.pts[i].y != lms.pts[i].y)
      return {false, "round trip changed coordinates"};

  const char* malformed[] = {"malformed_count.pts", "malformed_line.pts", "missing_brace.pts"};
  for (const char* name : malformed) {
    bool threw = false;
    try {
      read_pts_file((fixtures / name).string());
    } catch (const parse_error&) {
      threw = true;
    }
    if (!threw) return {false, std::string(name) + " was accepted"};
  }
  return {true, "round trip exact; all malformed fixtures rejected with parse errors"};
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    std::string arg = argv[i];
    if (arg == "--criterion" && i + 1 < argc) only = std::atoi(argv[++i]);
  }
  struct entry {
    int id;
    const char* name;
    outcome (*fn)();
  };
  const entry entries[] = {
      {1, "shape audit", criterion_shape_audit},
      {2, "gradient check", criterion_gradient_check},
      {3, "heatmap codec", criterion_codec},
      {4, "metric oracles", criterion_metrics},
      {5, "desk-scale end-to-end training", criterion_end_to_end},
      {6, "ablation trend over K", criterion_ablation},
      {7, "seeded training determinism", criterion_determinism},
      {8, ".pts round trip and malformed input", criterion_pts},
  };
  bool all_pass = true;
  for (const auto& e : entries) {
    if (only != 0 && e.id != only) continue;
    outcome o;
    try {
      o = e.fn();
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", e.id, e.name,
                o.detail.c_str());
    std::fflush(stdout);
    all_pass = all_pass && o.pass;
  }
  return all_pass ? 0 : 1;
}
