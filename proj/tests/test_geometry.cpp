#include <gtest/gtest.h>

#include "aleth/geometry.hpp"

using namespace aleth;

namespace {

Camera identity_camera(int w = 101, int h = 101, double focal = 50.0) {
  return Camera(w, h, focal, mat4_identity());
}

}  // namespace

TEST(Camera, rejects_bad_inputs) {
  EXPECT_THROW(Camera(0, 10, 50.0, mat4_identity()), DomainError);
  EXPECT_THROW(Camera(10, 10, 0.0, mat4_identity()), DomainError);
  Mat4 skewed = mat4_identity();
  skewed[0][1] = 0.01;  // breaks orthonormality well past 1e-5
  EXPECT_THROW(Camera(10, 10, 50.0, skewed), DomainError);
}

TEST(RayForPixel, principal_ray_points_down_negative_z) {
  // odd image size so the center pixel's center is exactly the principal point
  Camera cam = identity_camera(101, 101, 123.0);
  Ray r = ray_for_pixel(cam, 50, 50, 0.5, 2.0);
  EXPECT_NEAR(r.direction[0], 0.0, 1e-12);
  EXPECT_NEAR(r.direction[1], 0.0, 1e-12);
  EXPECT_NEAR(r.direction[2], -1.0, 1e-12);
}

TEST(RayForPixel, origin_is_pose_translation) {
  Mat4 pose = mat4_identity();
  pose[0][3] = 1.0;
  pose[1][3] = 2.0;
  pose[2][3] = 3.0;
  Camera cam(64, 64, 80.0, pose);
  Ray r = ray_for_pixel(cam, 10, 20, 0.1, 1.0);
  EXPECT_DOUBLE_EQ(r.origin[0], 1.0);
  EXPECT_DOUBLE_EQ(r.origin[1], 2.0);
  EXPECT_DOUBLE_EQ(r.origin[2], 3.0);
}

TEST(RayForPixel, pinhole_offset_100px_at_focal_100) {
  // pixel center 100px right of the principal point, focal 100 -> (1,0,-1)/sqrt(2)
  Camera cam = identity_camera(401, 401, 100.0);
  Ray r = ray_for_pixel(cam, 300, 200, 0.1, 1.0);
  double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  EXPECT_NEAR(r.direction[0], inv_sqrt2, 1e-12);
  EXPECT_NEAR(r.direction[1], 0.0, 1e-12);
  EXPECT_NEAR(r.direction[2], -inv_sqrt2, 1e-12);
}

TEST(RayForPixel, out_of_bounds_pixel_is_domain_error) {
  Camera cam = identity_camera();
  EXPECT_THROW(ray_for_pixel(cam, -1, 0, 0.1, 1.0), DomainError);
  EXPECT_THROW(ray_for_pixel(cam, 0, 101, 0.1, 1.0), DomainError);
}

TEST(RayForPixel, project_recovers_pixel_center) {
  // an arbitrary posed camera: rotation about two axes plus translation
  double a = 0.7, b = -0.3;
  Mat4 yaw = mat4_identity();
  yaw[0][0] = std::cos(a);
  yaw[0][2] = std::sin(a);
  yaw[2][0] = -std::sin(a);
  yaw[2][2] = std::cos(a);
  Mat4 tilt = mat4_identity();
  tilt[1][1] = std::cos(b);
  tilt[1][2] = -std::sin(b);
  tilt[2][1] = std::sin(b);
  tilt[2][2] = std::cos(b);
  Mat4 m = mat4_identity();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      m[i][j] = 0;
      for (int k = 0; k < 3; ++k) m[i][j] += yaw[i][k] * tilt[k][j];
    }
  m[0][3] = 0.4;
  m[1][3] = -1.2;
  m[2][3] = 2.0;
  Camera cam(37, 23, 41.5, m);

  RngState rng(7);
  for (int it = 0; it < 200; ++it) {
    int px = rng.uniform_int(cam.width);
    int py = rng.uniform_int(cam.height);
    Ray r = ray_for_pixel(cam, px, py, 0.2, 3.0);
    double t = rng.uniform_range(0.05, 5.0);
    auto uv = project_to_pixel(cam, r.at(t));
    EXPECT_NEAR(uv[0], px + 0.5, 1e-4);
    EXPECT_NEAR(uv[1], py + 0.5, 1e-4);
  }
}

TEST(SampleDepths, single_midpoint) {
  Ray r{{0, 0, 0}, {0, 0, -1}, 0.0, 1.0};
  SampleConfig cfg{1, false};
  RngState rng(0);
  auto t = sample_depths(r, cfg, rng);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_DOUBLE_EQ(t[0], 0.5);
}

TEST(SampleDepths, four_midpoints) {
  Ray r{{0, 0, 0}, {0, 0, -1}, 0.0, 1.0};
  SampleConfig cfg{4, false};
  RngState rng(0);
  auto t = sample_depths(r, cfg, rng);
  std::vector<double> want{0.125, 0.375, 0.625, 0.875};
  ASSERT_EQ(t.size(), 4u);
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(t[i], want[i]);
}

TEST(SampleDepths, stratified_reproducible_from_seed) {
  Ray r{{0, 0, 0}, {0, 0, -1}, 0.0, 1.0};
  SampleConfig cfg{4, true};
  RngState rng1(42), rng2(42);
  auto a = sample_depths(r, cfg, rng1);
  auto b = sample_depths(r, cfg, rng2);
  EXPECT_EQ(a, b);
}

TEST(SampleDepths, ordering_and_spacing_bounds) {
  Ray r{{0, 0, 0}, {0, 0, -1}, 1.5, 3.5};
  RngState rng(3);
  for (bool strat : {false, true}) {
    SampleConfig cfg{16, strat};
    double delta = sample_delta(r, cfg);
    for (int rep = 0; rep < 50; ++rep) {
      auto t = sample_depths(r, cfg, rng);
      EXPECT_GE(t.front(), r.t_near);
      EXPECT_LE(t.back(), r.t_far);
      for (std::size_t i = 1; i < t.size(); ++i) {
        double gap = t[i] - t[i - 1];
        EXPECT_GT(gap, 0.0);
        if (strat)
          EXPECT_LE(gap, 2 * delta + 1e-12);
        else
          EXPECT_NEAR(gap, delta, 1e-12);
      }
    }
  }
}

TEST(SamplePatch, full_size_patch_is_pinned_at_origin) {
  RngState rng(0);
  for (int i = 0; i < 10; ++i) {
    auto p = sample_patch(64, 64, 64, 64, rng);
    EXPECT_EQ(p.x0, 0);
    EXPECT_EQ(p.y0, 0);
  }
}

TEST(SamplePatch, oversized_patch_is_domain_error) {
  RngState rng(0);
  EXPECT_THROW(sample_patch(64, 64, 65, 16, rng), DomainError);
}

TEST(SamplePatch, uniform_over_positions_chi_square) {
  // x0 for a 16-wide patch in a 64-wide image has 49 possible values;
  // chi^2(48 dof) at p=0.001 is ~84.0
  RngState rng(12345);
  const int draws = 10000, bins = 49;
  std::vector<int> hist(bins, 0);
  for (int i = 0; i < draws; ++i) hist[sample_patch(64, 64, 16, 16, rng).x0]++;
  double expected = double(draws) / bins;
  double chi2 = 0;
  for (int c : hist) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, 84.0);
}

TEST(SamplePatch, reproducible_from_seed) {
  RngState a(9), b(9);
  for (int i = 0; i < 32; ++i) {
    auto pa = sample_patch(128, 96, 32, 32, a);
    auto pb = sample_patch(128, 96, 32, 32, b);
    EXPECT_EQ(pa.x0, pb.x0);
    EXPECT_EQ(pa.y0, pb.y0);
  }
}

TEST(Rng, serialization_round_trips) {
  RngState a(77);
  for (int i = 0; i < 100; ++i) a.uniform();
  std::string s = a.serialize();
  RngState b;
  b.deserialize(s);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.uniform(), b.uniform());
}
