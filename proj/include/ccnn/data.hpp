#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ccnn/core.hpp"
#include "ccnn/geometry.hpp"
#include "ccnn/image.hpp"
#include "ccnn/rng.hpp"

namespace ccnn {

struct sample {
  std::string name;
  image img;
  landmark_set landmarks;
  bounding_box box;
  std::string source;
};

struct dataset {
  std::vector<sample> samples;
  landmark_convention convention = landmark_convention::ibug68();
  std::vector<std::string> warnings;

  int count() const { return static_cast<int>(samples.size()); }
};

// ---- .pts annotations ---------------------------------------------------------
// version: <v>
// n_points: <n>
// {
// <x> <y>        (one pair per line)
// }

inline landmark_set parse_pts(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto next_line = [&]() -> bool {
    while (std::getline(in, line)) {
      ++lineno;
      // Trim trailing carriage return and surrounding spaces.
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t'))
        line.pop_back();
      size_t start = line.find_first_not_of(" \t");
      if (start == std::string::npos) continue;
      line = line.substr(start);
      return true;
    }
    return false;
  };

  if (!next_line() || line.rfind("version:", 0) != 0)
    throw parse_error("pts: expected 'version:' header", lineno);
  if (!next_line() || line.rfind("n_points:", 0) != 0)
    throw parse_error("pts: expected 'n_points:' header", lineno);
  int n_points = 0;
  {
    std::istringstream fs(line.substr(9));
    if (!(fs >> n_points) || n_points <= 0)
      throw parse_error("pts: invalid n_points value", lineno);
  }
  if (!next_line() || line != "{")
    throw parse_error("pts: expected '{'", lineno);

  landmark_set lms;
  lms.pts.reserve(n_points);
  while (true) {
    if (!next_line()) throw parse_error("pts: unexpected end of file, missing '}'", lineno);
    if (line == "}") {
      if (static_cast<int>(lms.pts.size()) != n_points)
        throw parse_error("pts: n_points says " + std::to_string(n_points) + " but found " +
                              std::to_string(lms.pts.size()) + " pairs",
                          lineno);
      break;
    }
    if (static_cast<int>(lms.pts.size()) == n_points)
      throw parse_error("pts: more coordinate pairs than n_points", lineno);
    std::istringstream fs(line);
    double x, y;
    std::string extra;
    if (!(fs >> x >> y) || (fs >> extra))
      throw parse_error("pts: malformed coordinate line '" + line + "'", lineno);
    if (!std::isfinite(x) || !std::isfinite(y))
      throw parse_error("pts: non-finite coordinate", lineno);
    lms.pts.push_back({x, y});
  }

  // Placeholder frame until the caller pairs the points with an image.
  double mx = 1.0, my = 1.0;
  for (const auto& p : lms.pts) {
    mx = std::max(mx, p.x + 1.0);
    my = std::max(my, p.y + 1.0);
  }
  lms.frame_w = mx;
  lms.frame_h = my;
  return lms;
}

inline std::string serialize_pts(const landmark_set& lms) {
  std::string out = "version: 1\nn_points: " + std::to_string(lms.count()) + "\n{\n";
  for (const auto& p : lms.pts)
    out += format_double(p.x) + " " + format_double(p.y) + "\n";
  out += "}\n";
  return out;
}

inline landmark_set read_pts_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw error("cannot open pts file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_pts(buf.str());
}

// ---- directory loading ----------------------------------------------------------
// Layout: <root>/*.ppm|*.pgm with a sibling .pts per image, plus an optional
// bboxes.txt sidecar ("<image-file> x y w h" per line). Images without a
// sidecar entry fall back to the tight landmark bounds inflated by 20%.

inline std::map<std::string, bounding_box> read_bbox_sidecar(const std::string& path) {
  std::map<std::string, bounding_box> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fs(line);
    std::string name;
    bounding_box b;
    if (!(fs >> name >> b.x >> b.y >> b.w >> b.h))
      throw parse_error("bboxes: malformed line", lineno);
    out[name] = b;
  }
  return out;
}

inline dataset load_dataset(const std::string& root,
                            landmark_convention convention = landmark_convention::ibug68(),
                            double box_inflation = 0.2) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw error("load_dataset: not a directory: " + root);

  std::vector<fs::path> images;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    if (ext == ".ppm" || ext == ".pgm") images.push_back(entry.path());
  }
  std::sort(images.begin(), images.end());

  auto boxes = read_bbox_sidecar((fs::path(root) / "bboxes.txt").string());

  dataset ds;
  ds.convention = convention;
  for (const auto& img_path : images) {
    fs::path pts_path = img_path;
    pts_path.replace_extension(".pts");
    if (!fs::exists(pts_path)) {
      ds.warnings.push_back("skipping " + img_path.filename().string() + ": no .pts annotation");
      continue;
    }
    sample s;
    s.name = img_path.filename().string();
    s.source = root;
    try {
      s.img = read_pnm(img_path.string());
      s.landmarks = read_pts_file(pts_path.string());
    } catch (const error& e) {
      ds.warnings.push_back("skipping " + s.name + ": " + e.what());
      continue;
    }
    s.landmarks.frame_w = s.img.w;
    s.landmarks.frame_h = s.img.h;
    auto it = boxes.find(s.name);
    if (it != boxes.end()) {
      s.box = it->second;
    } else {
      s.box = landmark_bounds(s.landmarks, box_inflation);
      ds.warnings.push_back("no bounding box for " + s.name + ": using landmark bounds +" +
                            std::to_string(static_cast<int>(box_inflation * 100)) + "%");
    }
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw error("load_dataset: no usable samples in " + root);
  return ds;
}

// ---- synthetic face-like dataset -------------------------------------------------

struct synthetic_spec {
  int landmarks = 5;
  int side = 64;
  double rotation_deg = 12.0;   // affine perturbation half-ranges
  double scale = 0.08;
  double translate_frac = 0.05;
  double jitter_sigma = 1.0;    // per-point iid jitter, pixels
  std::uint64_t seed = 1;
};

namespace detail {

struct synthetic_layout {
  landmark_set tmpl;
  landmark_convention conv;
  int n_nose = 0, n_mouth = 0;
};

inline synthetic_layout face_layout(int n, int side) {
  require(n >= 5, "synthetic template needs at least 5 landmarks");
  double u = side / 64.0;
  point eye_l{20 * u, 24 * u}, eye_r{44 * u, 24 * u};
  point nose_top{32 * u, 29 * u}, nose_tip{32 * u, 38 * u};
  point mouth_l{24 * u, 47 * u}, mouth_r{40 * u, 47 * u};

  int per_eye = std::max(1, n / 8);
  int n_nose = std::max(1, n / 10);
  int n_mouth = std::max(2, n / 5);
  int n_jaw = n - 2 * per_eye - n_nose - n_mouth;
  while (n_jaw < 0) {  // shrink the mouth first, then the nose
    if (n_mouth > 2) --n_mouth;
    else if (n_nose > 1) --n_nose;
    else --per_eye;
    n_jaw = n - 2 * per_eye - n_nose - n_mouth;
  }

  landmark_set lms;
  lms.frame_w = lms.frame_h = side;
  auto ring = [&](point c, int count, double radius, double first_angle) {
    // first point on the outer side of the ring
    for (int i = 0; i < count; ++i) {
      double a = first_angle + 2.0 * 3.14159265358979323846 * i / count;
      lms.pts.push_back({c.x + radius * std::cos(a), c.y + radius * std::sin(a)});
    }
  };
  double eye_r_px = per_eye > 1 ? 2.2 * u : 0.0;
  ring(eye_l, per_eye, eye_r_px, 3.14159265358979323846);  // leftmost first
  ring(eye_r, per_eye, eye_r_px, 0.0);                     // rightmost first
  for (int i = 0; i < n_nose; ++i) {
    double t = n_nose == 1 ? 1.0 : static_cast<double>(i) / (n_nose - 1);
    lms.pts.push_back({nose_top.x + t * (nose_tip.x - nose_top.x),
                       nose_top.y + t * (nose_tip.y - nose_top.y)});
  }
  for (int i = 0; i < n_mouth; ++i) {
    double t = static_cast<double>(i) / (n_mouth - 1);
    double sag = 3.0 * u * 4.0 * t * (1.0 - t);  // quadratic arc
    lms.pts.push_back({mouth_l.x + t * (mouth_r.x - mouth_l.x), mouth_l.y + sag});
  }
  for (int i = 0; i < n_jaw; ++i) {
    double t = n_jaw == 1 ? 0.5 : static_cast<double>(i) / (n_jaw - 1);
    double a = 3.14159265358979323846 * (1.0 - t);  // left to right, lower half
    point c{32 * u, 28 * u};
    lms.pts.push_back({c.x + 19 * u * std::cos(a), c.y + 27 * u * std::sin(a)});
  }

  landmark_convention conv;
  conv.left_outer_corner = 0;
  conv.right_outer_corner = per_eye;
  conv.left_eye_begin = 0;
  conv.left_eye_end = per_eye - 1;
  conv.right_eye_begin = per_eye;
  conv.right_eye_end = 2 * per_eye - 1;
  return {std::move(lms), conv, n_nose, n_mouth};
}

}  // namespace detail

// Face-like layout: two eye clusters, a nose line, a mouth arc and (when
// points remain) a jaw arc. Eye cluster indices are fixed so inter-ocular
// normalization works at any N.
inline std::pair<landmark_set, landmark_convention> make_face_template(int n, int side) {
  auto lay = detail::face_layout(n, side);
  return {std::move(lay.tmpl), lay.conv};
}

namespace detail {

inline void blend_disk(image& img, double cx, double cy, double radius, const float* color) {
  int x0 = std::max(0, static_cast<int>(std::floor(cx - radius - 1)));
  int x1 = std::min(img.w - 1, static_cast<int>(std::ceil(cx + radius + 1)));
  int y0 = std::max(0, static_cast<int>(std::floor(cy - radius - 1)));
  int y1 = std::min(img.h - 1, static_cast<int>(std::ceil(cy + radius + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
      double a = std::clamp(radius + 0.5 - d, 0.0, 1.0);
      if (a <= 0.0) continue;
      for (int ch = 0; ch < img.c; ++ch) {
        float v = static_cast<float>(a * color[ch]);
        if (v > img.at(y, x, ch)) img.at(y, x, ch) = v;
      }
    }
}

inline void blend_ellipse(image& img, double cx, double cy, double rx, double ry,
                          const float* color) {
  int x0 = std::max(0, static_cast<int>(std::floor(cx - rx - 1)));
  int x1 = std::min(img.w - 1, static_cast<int>(std::ceil(cx + rx + 1)));
  int y0 = std::max(0, static_cast<int>(std::floor(cy - ry - 1)));
  int y1 = std::min(img.h - 1, static_cast<int>(std::ceil(cy + ry + 1)));
  double r = std::min(rx, ry);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      // Signed distance approximation via the normalized radius.
      double nx = (x + 0.5 - cx) / rx, ny = (y + 0.5 - cy) / ry;
      double d = (std::sqrt(nx * nx + ny * ny) - 1.0) * r;
      double a = std::clamp(0.5 - d, 0.0, 1.0);
      if (a <= 0.0) continue;
      for (int ch = 0; ch < img.c; ++ch) {
        float v = static_cast<float>(a * color[ch]);
        if (v > img.at(y, x, ch)) img.at(y, x, ch) = v;
      }
    }
}

inline void blend_stroke(image& img, point a, point b, double width, const float* color) {
  double len2 = (b.x - a.x) * (b.x - a.x) + (b.y - a.y) * (b.y - a.y);
  int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - width - 1)));
  int x1 = std::min(img.w - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + width + 1)));
  int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - width - 1)));
  int y1 = std::min(img.h - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + width + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      double px = x + 0.5, py = y + 0.5;
      double t = len2 > 0.0
                     ? std::clamp(((px - a.x) * (b.x - a.x) + (py - a.y) * (b.y - a.y)) / len2,
                                  0.0, 1.0)
                     : 0.0;
      double d = std::hypot(px - (a.x + t * (b.x - a.x)), py - (a.y + t * (b.y - a.y)));
      double alpha = std::clamp(width / 2.0 + 0.5 - d, 0.0, 1.0);
      if (alpha <= 0.0) continue;
      for (int ch = 0; ch < img.c; ++ch) {
        float v = static_cast<float>(alpha * color[ch]);
        if (v > img.at(y, x, ch)) img.at(y, x, ch) = v;
      }
    }
}

}  // namespace detail

// Renders the stylized face for a landmark layout produced by
// make_face_template. Every visual feature is anchored to landmark positions:
// eye disks (red), nose stroke ending in a tip disk (green), mouth arc with
// corner disks (blue), jaw stroke (gray). Part channels are separated so a
// matched filter can recover each landmark from pixels alone.
inline image render_synthetic_face(const landmark_set& lms, const landmark_convention& conv,
                                   int n_nose, int n_mouth, int side) {
  image img(side, side, 3, 0.0f, 1.0f);
  for (auto& v : img.v) v = 0.05f;
  double u = side / 64.0;

  const int eyes_end = conv.right_eye_end + 1;
  const int nose_begin = eyes_end;
  const int mouth_begin = nose_begin + n_nose;
  const int jaw_begin = mouth_begin + n_mouth;
  const int n = lms.count();

  // face ellipse derived from the point cloud
  double cx = 0, cy = 0;
  for (const auto& p : lms.pts) { cx += p.x; cy += p.y; }
  cx /= n;
  cy /= n;
  double rx = 0, ry = 0;
  for (const auto& p : lms.pts) {
    rx = std::max(rx, std::abs(p.x - cx));
    ry = std::max(ry, std::abs(p.y - cy));
  }
  const float face_color[3] = {0.30f, 0.30f, 0.30f};
  detail::blend_ellipse(img, cx, cy, rx * 1.35 + 2 * u, ry * 1.35 + 2 * u, face_color);

  const float jaw_color[3] = {0.55f, 0.55f, 0.55f};
  for (int i = jaw_begin; i + 1 < n; ++i)
    detail::blend_stroke(img, lms.pts[i], lms.pts[i + 1], 1.1 * u, jaw_color);

  const float nose_stroke[3] = {0.10f, 0.55f, 0.10f};
  for (int i = nose_begin; i + 1 < mouth_begin; ++i)
    detail::blend_stroke(img, lms.pts[i], lms.pts[i + 1], 1.1 * u, nose_stroke);
  if (n_nose == 1) {
    point bridge{(lms.pts[conv.left_eye_begin].x + lms.pts[conv.right_eye_begin].x) / 2,
                 (lms.pts[conv.left_eye_begin].y + lms.pts[conv.right_eye_begin].y) / 2};
    detail::blend_stroke(img, bridge, lms.pts[nose_begin], 1.1 * u, nose_stroke);
  }

  const float mouth_stroke[3] = {0.10f, 0.10f, 0.55f};
  for (int i = mouth_begin; i + 1 < jaw_begin; ++i)
    detail::blend_stroke(img, lms.pts[i], lms.pts[i + 1], 1.1 * u, mouth_stroke);

  const float eye_color[3] = {1.0f, 0.15f, 0.15f};
  for (int i = conv.left_eye_begin; i <= conv.right_eye_end; ++i)
    detail::blend_disk(img, lms.pts[i].x, lms.pts[i].y, 2.8 * u, eye_color);

  const float nose_tip_color[3] = {0.10f, 1.0f, 0.10f};
  detail::blend_disk(img, lms.pts[mouth_begin - 1].x, lms.pts[mouth_begin - 1].y, 2.3 * u,
                     nose_tip_color);

  const float mouth_corner_color[3] = {0.10f, 0.10f, 1.0f};
  detail::blend_disk(img, lms.pts[mouth_begin].x, lms.pts[mouth_begin].y, 2.3 * u,
                     mouth_corner_color);
  detail::blend_disk(img, lms.pts[jaw_begin - 1].x, lms.pts[jaw_begin - 1].y, 2.3 * u,
                     mouth_corner_color);
  return img;
}

// Draws one sample: affine perturbation of the template plus per-point jitter,
// resampled (bounded retries) until all landmarks stay inside the frame, then
// rendered so the ground truth is exact by construction. Deterministic per
// (spec.seed, index) regardless of generation order.
inline sample synthetic_sample(const synthetic_spec& spec, int index) {
  static const double pi = 3.14159265358979323846;
  detail::synthetic_layout lay = detail::face_layout(spec.landmarks, spec.side);
  rng r = rng::derive(spec.seed, static_cast<std::uint64_t>(index));
  const double margin = 3.5 * spec.side / 64.0;
  landmark_set lms;
  bool ok = false;
  for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
    double theta = r.uniform(-spec.rotation_deg, spec.rotation_deg) * pi / 180.0;
    double s = r.uniform(1.0 - spec.scale, 1.0 + spec.scale);
    double tx = r.uniform(-spec.translate_frac, spec.translate_frac) * spec.side;
    double ty = r.uniform(-spec.translate_frac, spec.translate_frac) * spec.side;
    double cosv = std::cos(theta) * s, sinv = std::sin(theta) * s;
    double cx = spec.side / 2.0, cy = spec.side / 2.0;
    lms = lay.tmpl;
    ok = true;
    for (auto& p : lms.pts) {
      double dx = p.x - cx, dy = p.y - cy;
      p.x = cosv * dx - sinv * dy + cx + tx + r.normal(0.0, spec.jitter_sigma);
      p.y = sinv * dx + cosv * dy + cy + ty + r.normal(0.0, spec.jitter_sigma);
      if (p.x < margin || p.x > spec.side - margin || p.y < margin || p.y > spec.side - margin)
        ok = false;
    }
  }
  if (!ok) throw error("synthetic_sample: could not keep landmarks in frame; "
                       "perturbation ranges too large for the template");
  sample out;
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05d", index);
  out.name = std::string(buf) + ".ppm";
  out.source = "synthetic";
  out.landmarks = lms;
  out.img = render_synthetic_face(lms, lay.conv, lay.n_nose, lay.n_mouth, spec.side);
  out.box = bounding_box{0.0, 0.0, static_cast<double>(spec.side),
                         static_cast<double>(spec.side)};
  return out;
}

inline dataset generate_synthetic(const synthetic_spec& spec, int count) {
  require(count > 0, "generate_synthetic: count must be positive");
  dataset ds;
  ds.convention = detail::face_layout(spec.landmarks, spec.side).conv;
  ds.samples.reserve(count);
  for (int i = 0; i < count; ++i) ds.samples.push_back(synthetic_sample(spec, i));
  return ds;
}

// Writes images, .pts annotations and the bboxes.txt sidecar so the directory
// loads back through load_dataset.
inline void write_dataset(const std::string& dir, const dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream boxes((fs::path(dir) / "bboxes.txt").string());
  for (const auto& s : ds.samples) {
    write_pnm((fs::path(dir) / s.name).string(), s.img);
    fs::path pts = fs::path(dir) / s.name;
    pts.replace_extension(".pts");
    std::ofstream out(pts.string());
    out << serialize_pts(s.landmarks);
    boxes << s.name << " " << format_double(s.box.x) << " " << format_double(s.box.y) << " "
          << format_double(s.box.w) << " " << format_double(s.box.h) << "\n";
  }
}

}  // namespace ccnn
