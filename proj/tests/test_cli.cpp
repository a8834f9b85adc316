#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#ifndef CCNN_CLI_PATH
#define CCNN_CLI_PATH ""
#endif

namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
  std::string cmd = std::string("\"") + CCNN_CLI_PATH + "\" " + args + " > /dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct temp_dir {
  fs::path path;
  explicit temp_dir(const std::string& name) {
    path = fs::temp_directory_path() / name;
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~temp_dir() { fs::remove_all(path); }
};

const char* quick_config = R"({
  "model": {"cascades": 1, "input_side": 64, "heatmap_side": 16, "landmarks": 5,
            "channel_scale": 8, "sigma": 1.3},
  "train": {"epochs": 2, "batch_size": 8, "momentum": 0.9, "lr_schedule": [[0, 0.01]],
            "seed": 3, "validation_fraction": 0.2,
            "augment": {"rotation_deg": 5.0, "scale": 0.03, "translate_frac": 0.02,
                         "color_gain": 0.1}},
  "data": {"synthetic": {"landmarks": 5, "side": 64, "rotation_deg": 15.0, "scale": 0.1,
                          "translate_frac": 0.08, "jitter_sigma": 1.0, "seed": 7,
                          "count": 24, "test_count": 8, "test_seed": 1007}},
  "eval": {"mode": "inter_ocular", "alpha": 0.08, "failure_threshold": 0.08},
  "ablation": {"k_values": [1, 2], "seeds": [1], "epochs": 2}
})";

}  // namespace

TEST_CASE("cli: bad flags exit 1, missing subcommand exits 1") {
  REQUIRE(fs::exists(CCNN_CLI_PATH));
  CHECK(run_cli("") == 1);
  CHECK(run_cli("definitely-not-a-command") == 1);
  CHECK(run_cli("train") == 1);  // missing required flags
}

TEST_CASE("cli: runtime failure exits 2 with a diagnostics file") {
  temp_dir dir("ccnn_cli_runtime_err");
  fs::path cfg = dir.path / "cfg.json";
  std::ofstream(cfg) << quick_config;
  // eval without --checkpoint/--pred is a runtime error
  int code = run_cli("eval --config " + cfg.string() + " --out " + (dir.path / "o").string());
  CHECK(code == 2);
  CHECK(fs::exists(dir.path / "o" / "error.txt"));
}

TEST_CASE("cli: ablate over K={1,2} emits one csv row per run") {
  temp_dir dir("ccnn_cli_ablate");
  fs::path cfg = dir.path / "cfg.json";
  std::ofstream(cfg) << quick_config;
  int code = run_cli("ablate --config " + cfg.string() + " --out " + (dir.path / "a").string() +
                     " --k 1,2");
  REQUIRE(code == 0);
  std::string csv = slurp(dir.path / "a" / "ablation.csv");
  int lines = 0;
  for (char c : csv)
    if (c == '\n') ++lines;
  CHECK(lines == 3);  // header + 2 rows
  CHECK(csv.rfind("k,seed,test_nle", 0) == 0);
  CHECK(fs::exists(dir.path / "a" / "ablation_summary.csv"));
}

TEST_CASE("cli: eval with predictions equal to ground truth reports zero error") {
  temp_dir dir("ccnn_cli_eval_gt");
  fs::path cfg = dir.path / "cfg.json";
  std::ofstream(cfg) << quick_config;
  fs::path data = dir.path / "data";
  REQUIRE(run_cli("synth --config " + cfg.string() + " --out " + data.string()) == 0);
  REQUIRE(run_cli("eval --config " + cfg.string() + " --out " + (dir.path / "e").string() +
                  " --data " + data.string() + " --pred " + data.string()) == 0);
  std::string report = slurp(dir.path / "e" / "report.json");
  CHECK(report.find("\"mean_nle\": 0.0") != std::string::npos);
  CHECK(report.find("\"auc_alpha_percent\": 100.0") != std::string::npos);
  CHECK(report.find("\"failure_rate_percent\": 0.0") != std::string::npos);
}
