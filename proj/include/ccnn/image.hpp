#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "ccnn/core.hpp"

namespace ccnn {

// HWC float image with a declared value range. The range travels with the
// pixels so normalization can check what it was given.
struct image {
  int h = 0, w = 0, c = 0;
  std::vector<float> v;
  float range_lo = 0.0f;
  float range_hi = 0.0f;  // lo == hi means undeclared

  image() = default;
  image(int h_, int w_, int c_, float lo, float hi)
      : h(h_), w(w_), c(c_), v(static_cast<size_t>(h_) * w_ * c_, 0.0f),
        range_lo(lo), range_hi(hi) {}

  float& at(int y, int x, int ch) {
    return v[(static_cast<size_t>(y) * w + x) * c + ch];
  }
  float at(int y, int x, int ch) const {
    return v[(static_cast<size_t>(y) * w + x) * c + ch];
  }

  void fill(float value) { std::fill(v.begin(), v.end(), value); }

  bool has_declared_range() const { return range_hi > range_lo; }
};

// Bilinear sample at continuous position (pixel i covers [i, i+1), center at
// i + 0.5). Outside the frame reads as zero.
inline float sample_bilinear(const image& img, double sx, double sy, int ch) {
  double u = sx - 0.5, v = sy - 0.5;
  int x0 = static_cast<int>(std::floor(u));
  int y0 = static_cast<int>(std::floor(v));
  double fx = u - x0, fy = v - y0;
  auto pix = [&](int y, int x) -> double {
    if (x < 0 || y < 0 || x >= img.w || y >= img.h) return 0.0;
    return img.at(y, x, ch);
  };
  double top = pix(y0, x0) * (1.0 - fx) + pix(y0, x0 + 1) * fx;
  double bot = pix(y0 + 1, x0) * (1.0 - fx) + pix(y0 + 1, x0 + 1) * fx;
  return static_cast<float>(top * (1.0 - fy) + bot * fy);
}

// ---- PPM / PGM (binary, 8-bit) ----------------------------------------------

namespace detail {
inline int pnm_next_int(std::istream& in) {
  // Skips whitespace and '#' comments.
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = in.get();
  }
  if (ch == EOF) throw error("pnm: unexpected end of header");
  int value = 0;
  bool any = false;
  while (ch != EOF && std::isdigit(ch)) {
    value = value * 10 + (ch - '0');
    any = true;
    ch = in.get();
  }
  if (!any) throw error("pnm: malformed header");
  return value;
}
}  // namespace detail

// Reads binary PPM (P6) or PGM (P5). Pixel values are kept as raw bytes with a
// declared [0, 255] range.
inline image read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw error("cannot open image: " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  int channels;
  if (m0 == 'P' && m1 == '6') channels = 3;
  else if (m0 == 'P' && m1 == '5') channels = 1;
  else throw error("unsupported image format (want P5/P6 pnm): " + path);
  int w = detail::pnm_next_int(in);
  int h = detail::pnm_next_int(in);
  int maxval = detail::pnm_next_int(in);
  if (maxval <= 0 || maxval > 255) throw error("pnm: unsupported maxval in " + path);
  image img(h, w, channels, 0.0f, 255.0f);
  std::vector<unsigned char> raw(static_cast<size_t>(h) * w * channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw error("pnm: truncated pixel data in " + path);
  for (size_t i = 0; i < raw.size(); ++i) img.v[i] = static_cast<float>(raw[i]);
  return img;
}

// Writes P6 for 3-channel images, P5 for 1-channel. Values are scaled from the
// declared range (or clamped [0,1] if undeclared) to bytes.
inline void write_pnm(const std::string& path, const image& img) {
  require(img.c == 1 || img.c == 3, "write_pnm: image must have 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw error("cannot write image: " + path);
  out << (img.c == 3 ? "P6" : "P5") << "\n" << img.w << " " << img.h << "\n255\n";
  float lo = img.range_lo, hi = img.range_hi;
  if (!(hi > lo)) { lo = 0.0f; hi = 1.0f; }
  std::vector<unsigned char> raw(img.v.size());
  for (size_t i = 0; i < img.v.size(); ++i) {
    float t = (img.v[i] - lo) / (hi - lo);
    t = t < 0.0f ? 0.0f : (t > 1.0f ? 1.0f : t);
    raw[i] = static_cast<unsigned char>(std::lround(t * 255.0f));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw error("failed writing image: " + path);
}

}  // namespace ccnn
