#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ccnn/data.hpp"
#include "ccnn/eval.hpp"

using namespace ccnn;
namespace fs = std::filesystem;

namespace {

struct temp_dir {
  fs::path path;
  explicit temp_dir(const std::string& name) {
    path = fs::temp_directory_path() / name;
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~temp_dir() { fs::remove_all(path); }
};

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

// Test-side landmark recovery that knows the render: each landmark is the
// center of a color-coded anti-aliased disk, so a thresholded intensity
// centroid per channel recovers it. Independent of the codec/model paths.
std::vector<point> recover_n5_landmarks(const image& img) {
  auto centroids = [&](int ch, double thr, int expected) {
    struct blob {
      double wsum = 0, xs = 0, ys = 0;
    };
    // split by x around the weighted median when two blobs are expected
    std::vector<std::array<double, 3>> px;  // weight, x, y
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        double v = img.at(y, x, ch) - thr;
        if (v > 0) px.push_back({v, x + 0.5, y + 0.5});
      }
    REQUIRE(!px.empty());
    std::vector<point> out;
    if (expected == 1) {
      blob b;
      for (auto& p : px) {
        b.wsum += p[0];
        b.xs += p[0] * p[1];
        b.ys += p[0] * p[2];
      }
      out.push_back({b.xs / b.wsum, b.ys / b.wsum});
      return out;
    }
    // two blobs: cluster by x midpoint between extremes
    double lo = 1e9, hi = -1e9;
    for (auto& p : px) {
      lo = std::min(lo, p[1]);
      hi = std::max(hi, p[1]);
    }
    double mid = (lo + hi) / 2;
    blob l, r;
    for (auto& p : px) {
      blob& b = p[1] < mid ? l : r;
      b.wsum += p[0];
      b.xs += p[0] * p[1];
      b.ys += p[0] * p[2];
    }
    out.push_back({l.xs / l.wsum, l.ys / l.wsum});
    out.push_back({r.xs / r.wsum, r.ys / r.wsum});
    return out;
  };
  auto eyes = centroids(0, 0.65, 2);
  auto nose = centroids(1, 0.80, 1);
  auto mouth = centroids(2, 0.80, 2);
  return {eyes[0], eyes[1], nose[0], mouth[0], mouth[1]};
}

}  // namespace

TEST_CASE("parse_pts: minimal well-formed file") {
  auto lms = parse_pts("version: 1\nn_points: 3\n{\n1.5 2.5\n3 4\n5.25 6\n}\n");
  REQUIRE(lms.count() == 3);
  CHECK(lms.pts[0].x == 1.5);
  CHECK(lms.pts[0].y == 2.5);
  CHECK(lms.pts[2].x == 5.25);
}

TEST_CASE("parse_pts: malformed inputs carry line numbers") {
  CHECK_THROWS_AS(parse_pts("n_points: 3\n{\n1 2\n}\n"), parse_error);
  CHECK_THROWS_AS(parse_pts("version: 1\nn_points: 2\n1 2\n3 4\n"), parse_error);
  CHECK_THROWS_AS(parse_pts("version: 1\nn_points: 2\n{\n1 2\nbad line\n}\n"), parse_error);
  CHECK_THROWS_AS(parse_pts("version: 1\nn_points: 2\n{\n1 2\n"), parse_error);

  // 68 declared, 67 pairs: the error points at the brace line
  std::string text = "version: 1\nn_points: 68\n{\n";
  for (int i = 0; i < 67; ++i) text += "1 2\n";
  text += "}\n";
  try {
    parse_pts(text);
    FAIL("expected parse error");
  } catch (const parse_error& e) {
    CHECK(e.line() == 71);  // the closing brace
    CHECK(std::string(e.what()).find("68") != std::string::npos);
  }
}

TEST_CASE("pts round trip is exact") {
  landmark_set lms;
  lms.frame_w = lms.frame_h = 64;
  lms.pts = {{1.0 / 3.0, 2.7182818284590452}, {40.125, 0.1}, {63.999999, 17.0}};
  auto back = parse_pts(serialize_pts(lms));
  REQUIRE(back.count() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(back.pts[i].x == lms.pts[i].x);
    CHECK(back.pts[i].y == lms.pts[i].y);
  }
}

TEST_CASE("load_dataset: ordering, skip rule, box fallback") {
  temp_dir dir("ccnn_test_load");
  synthetic_spec spec;
  dataset ds = generate_synthetic(spec, 3);
  // write two full pairs, plus an image without annotations
  write_pnm((dir.path / "b.ppm").string(), ds.samples[0].img);
  write_file(dir.path / "b.pts", serialize_pts(ds.samples[0].landmarks));
  write_pnm((dir.path / "a.ppm").string(), ds.samples[1].img);
  write_file(dir.path / "a.pts", serialize_pts(ds.samples[1].landmarks));
  write_pnm((dir.path / "c.ppm").string(), ds.samples[2].img);

  dataset loaded = load_dataset(dir.path.string(), ds.convention);
  REQUIRE(loaded.count() == 2);
  CHECK(loaded.samples[0].name == "a.ppm");  // lexicographic
  CHECK(loaded.samples[1].name == "b.ppm");
  bool skipped_c = false, fallback_box = false;
  for (const auto& w : loaded.warnings) {
    if (w.find("c.ppm") != std::string::npos) skipped_c = true;
    if (w.find("bounding box") != std::string::npos) fallback_box = true;
  }
  CHECK(skipped_c);
  CHECK(fallback_box);

  // fallback box = tight landmark bounds inflated 20%
  const auto& s0 = loaded.samples[0];
  bounding_box tight = landmark_bounds(s0.landmarks, 0.0);
  CHECK(s0.box.w == doctest::Approx(tight.w * 1.2).epsilon(1e-6));
  CHECK(s0.box.x == doctest::Approx(tight.x - tight.w * 0.1).epsilon(1e-6));

  temp_dir empty("ccnn_test_empty");
  CHECK_THROWS_AS(load_dataset(empty.path.string()), error);
}

TEST_CASE("dataset written by write_dataset loads back with boxes") {
  temp_dir dir("ccnn_test_roundtrip");
  synthetic_spec spec;
  spec.seed = 17;
  dataset ds = generate_synthetic(spec, 4);
  write_dataset(dir.path.string(), ds);
  dataset loaded = load_dataset(dir.path.string(), ds.convention);
  REQUIRE(loaded.count() == 4);
  CHECK(loaded.warnings.empty());  // sidecar supplies every box
  for (int i = 0; i < 4; ++i) {
    CHECK(loaded.samples[i].box.w == doctest::Approx(spec.side));
    for (int j = 0; j < spec.landmarks; ++j) {
      CHECK(loaded.samples[i].landmarks.pts[j].x ==
            doctest::Approx(ds.samples[i].landmarks.pts[j].x).epsilon(1e-12));
    }
  }
}

TEST_CASE("synthetic generator: determinism and zero-perturbation identity") {
  synthetic_spec spec;
  spec.seed = 5;
  dataset a = generate_synthetic(spec, 3);
  dataset b = generate_synthetic(spec, 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(a.samples[i].img.v == b.samples[i].img.v);
    for (int j = 0; j < spec.landmarks; ++j) {
      CHECK(a.samples[i].landmarks.pts[j].x == b.samples[i].landmarks.pts[j].x);
      CHECK(a.samples[i].landmarks.pts[j].y == b.samples[i].landmarks.pts[j].y);
    }
  }

  synthetic_spec frozen;
  frozen.rotation_deg = 0.0;
  frozen.scale = 0.0;
  frozen.translate_frac = 0.0;
  frozen.jitter_sigma = 0.0;
  auto [tmpl, conv] = make_face_template(frozen.landmarks, frozen.side);
  dataset fixed = generate_synthetic(frozen, 2);
  for (const auto& s : fixed.samples)
    for (int j = 0; j < frozen.landmarks; ++j) {
      CHECK(s.landmarks.pts[j].x == doctest::Approx(tmpl.pts[j].x));
      CHECK(s.landmarks.pts[j].y == doctest::Approx(tmpl.pts[j].y));
    }
}

TEST_CASE("synthetic generator: sample mean approaches the template") {
  synthetic_spec spec;
  spec.rotation_deg = 0.0;
  spec.scale = 0.0;
  spec.translate_frac = 0.0;
  spec.jitter_sigma = 1.5;
  spec.seed = 99;
  auto [tmpl, conv] = make_face_template(spec.landmarks, spec.side);
  const int count = 10000;
  std::vector<point> mean(spec.landmarks);
  for (int i = 0; i < count; ++i) {
    sample s = synthetic_sample(spec, i);
    for (int j = 0; j < spec.landmarks; ++j) {
      mean[j].x += s.landmarks.pts[j].x;
      mean[j].y += s.landmarks.pts[j].y;
    }
  }
  const double bound = 3.0 * spec.jitter_sigma / std::sqrt(static_cast<double>(count));
  for (int j = 0; j < spec.landmarks; ++j) {
    CHECK(std::abs(mean[j].x / count - tmpl.pts[j].x) < bound);
    CHECK(std::abs(mean[j].y / count - tmpl.pts[j].y) < bound);
  }
}

TEST_CASE("synthetic render: oracle recovery certifies visual-label coupling") {
  synthetic_spec spec;  // default desk-scale benchmark spec
  spec.seed = 31;
  dataset ds = generate_synthetic(spec, 40);
  std::vector<double> errors;
  for (const auto& s : ds.samples) {
    auto rec = recover_n5_landmarks(s.img);
    landmark_set est = s.landmarks;
    for (int j = 0; j < 5; ++j) est.pts[j] = rec[j];
    errors.push_back(nle(est, s.landmarks, norm_mode::inter_ocular, ds.convention));
  }
  double mean = 0;
  for (double e : errors) mean += e;
  mean /= errors.size();
  CHECK(mean < 0.02);
  for (double e : errors) CHECK(e < 0.02);
}

TEST_CASE("synthetic generator: impossible perturbations are rejected, frame respected") {
  synthetic_spec spec;
  spec.translate_frac = 2.0;  // pushes everything out almost surely
  CHECK_THROWS_AS(synthetic_sample(spec, 0), error);

  synthetic_spec ok;
  dataset ds = generate_synthetic(ok, 25);
  for (const auto& s : ds.samples)
    for (const auto& p : s.landmarks.pts) {
      CHECK(p.x > 0);
      CHECK(p.x < ok.side);
      CHECK(p.y > 0);
      CHECK(p.y < ok.side);
    }
}

TEST_CASE("face template supports larger N with a meaningful convention") {
  for (int n : {5, 12, 68}) {
    auto [tmpl, conv] = make_face_template(n, 64);
    CHECK(tmpl.count() == n);
    double d = normalization_distance(tmpl, norm_mode::inter_ocular, conv);
    CHECK(d > 10.0);
    double dp = normalization_distance(tmpl, norm_mode::inter_pupil, conv);
    CHECK(dp > 10.0);
    CHECK(conv.right_eye_end < n);
  }
}
