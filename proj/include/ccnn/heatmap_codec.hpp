#pragma once

#include <cmath>
#include <vector>

#include "ccnn/geometry.hpp"
#include "ccnn/tensor.hpp"

namespace ccnn {

// Interleaved (x1, y1, ..., xN, yN) in input-image pixels.
using coordinate_vector = std::vector<double>;

// Writes one sample's Gaussian label stack into hm(sample, :, :, :).
// Heatmap cell (cx, cy) is sampled at (cx + 0.5, cy + 0.5) in cell units, so a
// landmark on a cell center encodes a peak of exactly 1 there. Centers are
// fractional (landmark / stride), not snapped. Landmarks outside the frame are
// clamped to the border cell and flagged.
template <typename T>
void encode_heatmaps_into(const landmark_set& lms, double sigma, double stride,
                          tensor<T>& hm, int sample, bool* clamped_any = nullptr) {
  require(sigma > 0.0, "encode: sigma must be positive");
  require(stride > 0.0, "encode: stride must be positive");
  lms.validate();
  const int S_h = hm.h, S_w = hm.w, N = lms.count();
  require(hm.c == N, "encode: heatmap channels do not match landmark count");
  require(sample >= 0 && sample < hm.n, "encode: sample index out of range");
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  bool clamped = false;
  for (int i = 0; i < N; ++i) {
    double u = lms.pts[i].x / stride;
    double v = lms.pts[i].y / stride;
    if (u < 0.5 || u > S_w - 0.5 || v < 0.5 || v > S_h - 0.5) {
      u = std::min(std::max(u, 0.5), S_w - 0.5);
      v = std::min(std::max(v, 0.5), S_h - 0.5);
      clamped = true;
    }
    for (int cy = 0; cy < S_h; ++cy) {
      double dy = (cy + 0.5) - v;
      T* row = hm.row(sample, cy, 0) + i;
      for (int cx = 0; cx < S_w; ++cx) {
        double dx = (cx + 0.5) - u;
        row[static_cast<size_t>(cx) * N] =
            static_cast<T>(std::exp(-(dx * dx + dy * dy) * inv2s2));
      }
    }
  }
  if (clamped_any) *clamped_any = clamped;
}

template <typename T>
tensor<T> encode_heatmaps(const landmark_set& lms, int heatmap_side, double sigma,
                          double stride, bool* clamped_any = nullptr) {
  tensor<T> hm(1, heatmap_side, heatmap_side, lms.count());
  encode_heatmaps_into(lms, sigma, stride, hm, 0, clamped_any);
  return hm;
}

// Per channel: first row-major argmax cell, mapped back to input pixels as
// (cell + 0.5) * stride. No sub-cell refinement. An all-equal channel decodes
// to cell (0, 0) and is flagged as degenerate.
template <typename T>
landmark_set decode_heatmaps(const tensor<T>& hm, int sample, double stride,
                             std::vector<int>* degenerate_channels = nullptr) {
  require(sample >= 0 && sample < hm.n, "decode: sample index out of range");
  const int N = hm.c;
  landmark_set out;
  out.frame_w = hm.w * stride;
  out.frame_h = hm.h * stride;
  out.pts.resize(N);
  if (degenerate_channels) degenerate_channels->clear();
  for (int i = 0; i < N; ++i) {
    int best_x = 0, best_y = 0;
    T best = hm.at(sample, 0, 0, i);
    T low = best;
    for (int cy = 0; cy < hm.h; ++cy) {
      const T* row = hm.row(sample, cy, 0) + i;
      for (int cx = 0; cx < hm.w; ++cx) {
        T val = row[static_cast<size_t>(cx) * N];
        if (val > best) {
          best = val;
          best_x = cx;
          best_y = cy;
        }
        if (val < low) low = val;
      }
    }
    if (degenerate_channels && !(best > low)) degenerate_channels->push_back(i);
    out.pts[i] = {(best_x + 0.5) * stride, (best_y + 0.5) * stride};
  }
  return out;
}

// vec(gt) - vec(est), interleaved.
inline coordinate_vector residual(const landmark_set& gt, const landmark_set& est) {
  require(gt.count() == est.count(),
          "residual: landmark counts differ (" + std::to_string(gt.count()) + " vs " +
              std::to_string(est.count()) + ")");
  coordinate_vector out(static_cast<size_t>(gt.count()) * 2);
  for (int i = 0; i < gt.count(); ++i) {
    out[2 * i] = gt.pts[i].x - est.pts[i].x;
    out[2 * i + 1] = gt.pts[i].y - est.pts[i].y;
  }
  return out;
}

// est + delta; exact inverse of residual.
inline landmark_set apply_residual(const landmark_set& est, const coordinate_vector& delta) {
  require(delta.size() == static_cast<size_t>(est.count()) * 2,
          "apply_residual: delta length does not match landmark count");
  landmark_set out = est;
  for (int i = 0; i < est.count(); ++i) {
    out.pts[i].x += delta[2 * i];
    out.pts[i].y += delta[2 * i + 1];
  }
  return out;
}

}  // namespace ccnn
