#include <doctest.h>

#include <cmath>

#include "ccnn/geometry.hpp"
#include "ccnn/rng.hpp"

using namespace ccnn;

namespace {

image ramp_image(int h, int w, int c) {
  image img(h, w, c, 0.0f, 255.0f);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        img.at(y, x, ch) = static_cast<float>((y * 31 + x * 7 + ch * 3) % 256);
  return img;
}

landmark_set grid_landmarks(int n, double frame) {
  landmark_set lms;
  lms.frame_w = lms.frame_h = frame;
  rng r(123);
  for (int i = 0; i < n; ++i)
    lms.pts.push_back({r.uniform(0.1 * frame, 0.9 * frame), r.uniform(0.1 * frame, 0.9 * frame)});
  return lms;
}

}  // namespace

TEST_CASE("square box equal to the image is an identity crop") {
  image img = ramp_image(32, 32, 3);
  image out = crop_and_resize(img, bounding_box{0, 0, 32, 32}, 32);
  REQUIRE(out.v.size() == img.v.size());
  for (size_t i = 0; i < img.v.size(); ++i) CHECK(out.v[i] == doctest::Approx(img.v[i]));
}

TEST_CASE("non-square box extends symmetrically about its center") {
  // 100x50 box centered at (60, 45) -> 100x100 box centered at the same point
  bounding_box b{10, 20, 100, 50};
  bounding_box sq = square_extend(b);
  CHECK(sq.w == 100);
  CHECK(sq.h == 100);
  CHECK(sq.x == 10);
  CHECK(sq.y == doctest::Approx(20 - 25.0));
  CHECK(sq.cx() == doctest::Approx(b.cx()));
  CHECK(sq.cy() == doctest::Approx(b.cy()));

  // extending a tall box widens it
  bounding_box t{40, 0, 20, 80};
  bounding_box sq2 = square_extend(t);
  CHECK(sq2.w == 80);
  CHECK(sq2.cx() == doctest::Approx(t.cx()));
}

TEST_CASE("box fully outside the image is rejected") {
  image img = ramp_image(16, 16, 3);
  CHECK_THROWS_AS(crop_and_resize(img, bounding_box{100, 100, 10, 10}, 8), error);
  CHECK_THROWS_AS(crop_and_resize(img, bounding_box{0, 0, -5, 10}, 8), error);
}

TEST_CASE("out-of-image crop area reads as zero") {
  image img = ramp_image(16, 16, 1);
  img.fill(200.0f);
  image out = crop_and_resize(img, bounding_box{-16, 0, 32, 32}, 32);
  // left half of the crop lies outside the image
  CHECK(out.at(16, 2, 0) == doctest::Approx(0.0f));
  CHECK(out.at(8, 24, 0) == doctest::Approx(200.0f));
}

TEST_CASE("normalize_pixels endpoints and monotonicity") {
  image img(1, 3, 1, 0.0f, 255.0f);
  img.at(0, 0, 0) = 0.0f;
  img.at(0, 1, 0) = 127.5f;
  img.at(0, 2, 0) = 255.0f;
  image out = normalize_pixels(img);
  CHECK(out.at(0, 0, 0) == doctest::Approx(-0.5f));
  CHECK(out.at(0, 1, 0) == doctest::Approx(0.0f));
  CHECK(out.at(0, 2, 0) == doctest::Approx(0.5f));

  image unit(1, 2, 1, 0.0f, 1.0f);
  unit.at(0, 0, 0) = 0.0f;
  unit.at(0, 1, 0) = 1.0f;
  image out2 = normalize_pixels(unit);
  CHECK(out2.at(0, 0, 0) == doctest::Approx(-0.5f));
  CHECK(out2.at(0, 1, 0) == doctest::Approx(0.5f));

  image undeclared(1, 2, 1, 0.0f, 0.0f);
  CHECK_THROWS_AS(normalize_pixels(undeclared), error);
}

TEST_CASE("transform_landmarks: identity, center, round trip") {
  landmark_set lms = grid_landmarks(10, 64.0);
  bounding_box ident{0, 0, 64, 64};
  landmark_set same = transform_landmarks(lms, ident, 64);
  for (int i = 0; i < 10; ++i) {
    CHECK(same.pts[i].x == doctest::Approx(lms.pts[i].x));
    CHECK(same.pts[i].y == doctest::Approx(lms.pts[i].y));
  }

  bounding_box crop = square_extend(bounding_box{10, 6, 40, 40});
  landmark_set center;
  center.frame_w = center.frame_h = 64;
  center.pts.push_back({crop.cx(), crop.cy()});
  landmark_set mapped = transform_landmarks(center, crop, 128);
  CHECK(mapped.pts[0].x == doctest::Approx(64.0));
  CHECK(mapped.pts[0].y == doctest::Approx(64.0));

  landmark_set fwd = transform_landmarks(lms, crop, 256);
  landmark_set back = untransform_landmarks(fwd, crop, 256, lms.frame_w, lms.frame_h);
  for (int i = 0; i < 10; ++i) {
    CHECK(back.pts[i].x == doctest::Approx(lms.pts[i].x).epsilon(1e-12));
    CHECK(back.pts[i].y == doctest::Approx(lms.pts[i].y).epsilon(1e-12));
  }
}

TEST_CASE("crop then transform commutes with pixel lookup") {
  image img = ramp_image(64, 64, 1);
  bounding_box box{8, 8, 32, 32};
  int side = 32;  // same scale so nearest pixels survive resampling
  image crop = crop_and_resize(img, box, side);
  landmark_set lms;
  lms.frame_w = lms.frame_h = 64;
  lms.pts = {{16.5, 20.5}, {24.5, 12.5}, {30.5, 30.5}};
  landmark_set mapped = transform_landmarks(lms, square_extend(box), side);
  for (int i = 0; i < lms.count(); ++i) {
    int sx = static_cast<int>(lms.pts[i].x), sy = static_cast<int>(lms.pts[i].y);
    int mx = static_cast<int>(mapped.pts[i].x), my = static_cast<int>(mapped.pts[i].y);
    CHECK(crop.at(my, mx, 0) == doctest::Approx(img.at(sy, sx, 0)));
  }
}

TEST_CASE("normalization distance: inter-ocular and inter-pupil") {
  landmark_set lms;
  lms.frame_w = lms.frame_h = 256;
  lms.pts.assign(68, {128.0, 128.0});
  lms.pts[36] = {0.0, 0.0};
  lms.pts[45] = {100.0, 0.0};
  CHECK(normalization_distance(lms, norm_mode::inter_ocular) == doctest::Approx(100.0));

  // rigid translation of both 6-point eye rings moves the centroids rigidly
  landmark_set lms2 = lms;
  for (int i = 36; i <= 41; ++i) lms2.pts[i] = {10.0 + i, 20.0 + 2 * i};
  for (int i = 42; i <= 47; ++i) lms2.pts[i] = {10.0 + (i - 6) + 50.0, 20.0 + 2 * (i - 6)};
  // right ring is the left ring translated by (+50, 0): centroids differ by it
  double d0 = normalization_distance(lms2, norm_mode::inter_pupil);
  CHECK(d0 == doctest::Approx(50.0));
  landmark_set lms3 = lms2;
  for (int i = 36; i <= 47; ++i) {
    lms3.pts[i].x += 7.0;
    lms3.pts[i].y -= 3.0;
  }
  CHECK(normalization_distance(lms3, norm_mode::inter_pupil) == doctest::Approx(d0));

  landmark_set coincident;
  coincident.frame_w = coincident.frame_h = 10;
  coincident.pts.assign(68, {5.0, 5.0});
  CHECK(normalization_distance(coincident, norm_mode::inter_ocular) == 0.0);

  landmark_set five = grid_landmarks(5, 64.0);
  CHECK_THROWS_WITH_AS(normalization_distance(five, norm_mode::inter_ocular),
                       doctest::Contains("unsupported convention"), error);
}

TEST_CASE("normalization distance: translation invariance and scale equivariance") {
  landmark_set lms = grid_landmarks(68, 256.0);
  double d_oc = normalization_distance(lms, norm_mode::inter_ocular);
  double d_ip = normalization_distance(lms, norm_mode::inter_pupil);
  landmark_set shifted = lms;
  for (auto& p : shifted.pts) {
    p.x += 13.5;
    p.y -= 4.25;
  }
  CHECK(normalization_distance(shifted, norm_mode::inter_ocular) == doctest::Approx(d_oc));
  CHECK(normalization_distance(shifted, norm_mode::inter_pupil) == doctest::Approx(d_ip));
  landmark_set scaled = lms;
  for (auto& p : scaled.pts) {
    p.x *= 2.5;
    p.y *= 2.5;
  }
  scaled.frame_w *= 2.5;
  scaled.frame_h *= 2.5;
  CHECK(normalization_distance(scaled, norm_mode::inter_ocular) == doctest::Approx(2.5 * d_oc));
  CHECK(normalization_distance(scaled, norm_mode::inter_pupil) == doctest::Approx(2.5 * d_ip));
}
