#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ccnn/core.hpp"
#include "ccnn/image.hpp"

namespace ccnn {

struct point {
  double x = 0.0, y = 0.0;
};

// Ordered landmark points in pixel coordinates of a stated frame.
// Pixel i covers [i, i+1); integer coordinates are pixel corners.
struct landmark_set {
  std::vector<point> pts;
  double frame_w = 0.0, frame_h = 0.0;

  int count() const { return static_cast<int>(pts.size()); }

  void validate() const {
    require(!pts.empty(), "landmark_set: empty");
    require(frame_w > 0.0 && frame_h > 0.0, "landmark_set: frame size must be positive");
    for (const auto& p : pts)
      require(std::isfinite(p.x) && std::isfinite(p.y), "landmark_set: non-finite coordinate");
  }
};

struct bounding_box {
  double x = 0.0, y = 0.0, w = 0.0, h = 0.0;

  void validate() const {
    require(w > 0.0 && h > 0.0, "bounding_box: width and height must be positive");
  }
  double cx() const { return x + w / 2.0; }
  double cy() const { return y + h / 2.0; }
};

// Which indices carry the eye geometry used by metric normalization.
// Ranges are inclusive.
struct landmark_convention {
  int left_outer_corner = -1;
  int right_outer_corner = -1;
  int left_eye_begin = -1, left_eye_end = -1;
  int right_eye_begin = -1, right_eye_end = -1;

  // Multi-PIE / iBUG 68-point ordering.
  static landmark_convention ibug68() {
    return landmark_convention{36, 45, 36, 41, 42, 47};
  }
};

enum class norm_mode { inter_ocular, inter_pupil };

inline std::string to_string(norm_mode m) {
  return m == norm_mode::inter_ocular ? "inter_ocular" : "inter_pupil";
}

inline norm_mode norm_mode_from_string(const std::string& s) {
  if (s == "inter_ocular") return norm_mode::inter_ocular;
  if (s == "inter_pupil") return norm_mode::inter_pupil;
  throw error("unknown normalization mode: " + s);
}

inline double distance(const point& a, const point& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

// Extends the shorter box dimension symmetrically about the box center until
// the box is square.
inline bounding_box square_extend(const bounding_box& box) {
  box.validate();
  bounding_box out = box;
  if (box.w < box.h) {
    out.w = box.h;
    out.x = box.cx() - box.h / 2.0;
  } else if (box.h < box.w) {
    out.h = box.w;
    out.y = box.cy() - box.w / 2.0;
  }
  return out;
}

// Square-extends the box, crops (zero padding where the region leaves the
// image) and resizes to side x side with bilinear interpolation.
inline image crop_and_resize(const image& img, const bounding_box& box, int side = 256) {
  box.validate();
  require(side > 0, "crop_and_resize: side must be positive");
  bool intersects = box.x < img.w && box.x + box.w > 0.0 &&
                    box.y < img.h && box.y + box.h > 0.0;
  if (!intersects) throw error("crop_and_resize: box does not intersect the image");
  bounding_box sq = square_extend(box);
  image out(side, side, img.c, img.range_lo, img.range_hi);
  double scale = sq.w / side;
  for (int y = 0; y < side; ++y) {
    double sy = sq.y + (y + 0.5) * scale;
    for (int x = 0; x < side; ++x) {
      double sx = sq.x + (x + 0.5) * scale;
      for (int ch = 0; ch < img.c; ++ch)
        out.at(y, x, ch) = sample_bilinear(img, sx, sy, ch);
    }
  }
  return out;
}

// Affine map onto [-0.5, 0.5] using the image's declared range.
inline image normalize_pixels(const image& img) {
  if (!img.has_declared_range())
    throw error("normalize_pixels: input range is undeclared");
  image out = img;
  float lo = img.range_lo, span = img.range_hi - img.range_lo;
  for (auto& p : out.v) p = (p - lo) / span - 0.5f;
  out.range_lo = -0.5f;
  out.range_hi = 0.5f;
  return out;
}

// Same affine map as crop_and_resize applies to pixels. `crop` must already be
// square-extended.
inline landmark_set transform_landmarks(const landmark_set& lms, const bounding_box& crop,
                                        int side) {
  lms.validate();
  crop.validate();
  landmark_set out;
  out.frame_w = out.frame_h = static_cast<double>(side);
  out.pts.reserve(lms.pts.size());
  double sx = side / crop.w, sy = side / crop.h;
  for (const auto& p : lms.pts)
    out.pts.push_back({(p.x - crop.x) * sx, (p.y - crop.y) * sy});
  return out;
}

// Inverse of transform_landmarks.
inline landmark_set untransform_landmarks(const landmark_set& lms, const bounding_box& crop,
                                          int side, double frame_w, double frame_h) {
  crop.validate();
  landmark_set out;
  out.frame_w = frame_w;
  out.frame_h = frame_h;
  out.pts.reserve(lms.pts.size());
  double sx = crop.w / side, sy = crop.h / side;
  for (const auto& p : lms.pts)
    out.pts.push_back({p.x * sx + crop.x, p.y * sy + crop.y});
  return out;
}

inline double normalization_distance(const landmark_set& lms, norm_mode mode,
                                     const landmark_convention& conv) {
  lms.validate();
  int n = lms.count();
  auto check = [&](int i) {
    require(i >= 0 && i < n, "normalization_distance: convention index out of range");
  };
  if (mode == norm_mode::inter_ocular) {
    check(conv.left_outer_corner);
    check(conv.right_outer_corner);
    return distance(lms.pts[conv.left_outer_corner], lms.pts[conv.right_outer_corner]);
  }
  check(conv.left_eye_begin);
  check(conv.left_eye_end);
  check(conv.right_eye_begin);
  check(conv.right_eye_end);
  auto centroid = [&](int b, int e) {
    point m;
    for (int i = b; i <= e; ++i) {
      m.x += lms.pts[i].x;
      m.y += lms.pts[i].y;
    }
    double k = e - b + 1;
    return point{m.x / k, m.y / k};
  };
  return distance(centroid(conv.left_eye_begin, conv.left_eye_end),
                  centroid(conv.right_eye_begin, conv.right_eye_end));
}

// 68-point sets use the iBUG ordering; anything else needs an explicit
// convention.
inline double normalization_distance(const landmark_set& lms, norm_mode mode) {
  if (lms.count() != 68)
    throw error("normalization_distance: unsupported convention (expected 68 landmarks, got " +
                std::to_string(lms.count()) + ")");
  return normalization_distance(lms, mode, landmark_convention::ibug68());
}

// Tight bounds of the landmarks inflated by `inflate` on each dimension.
inline bounding_box landmark_bounds(const landmark_set& lms, double inflate = 0.2) {
  lms.validate();
  double x0 = lms.pts[0].x, x1 = x0, y0 = lms.pts[0].y, y1 = y0;
  for (const auto& p : lms.pts) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  double w = std::max(x1 - x0, 1e-9), h = std::max(y1 - y0, 1e-9);
  return bounding_box{x0 - w * inflate / 2.0, y0 - h * inflate / 2.0,
                      w * (1.0 + inflate), h * (1.0 + inflate)};
}

}  // namespace ccnn
