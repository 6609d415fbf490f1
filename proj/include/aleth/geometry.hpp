#pragma once

// Pinhole cameras, ray generation, depth sampling along rays, and random
// patch placement. Pixel convention: image y grows downward, rays pass
// through pixel centers, the camera looks along -z in its own frame
// (the usual "transforms" pose convention, y-up world).

#include <array>
#include <cmath>
#include <vector>

#include "aleth/common.hpp"

namespace aleth {

using Vec3 = std::array<double, 3>;
using Mat4 = std::array<std::array<double, 4>, 4>;

inline Vec3 vadd(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 vsub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 vscale(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline double vdot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double vnorm(const Vec3& a) { return std::sqrt(vdot(a, a)); }
inline Vec3 vnormalize(const Vec3& a) { return vscale(a, 1.0 / vnorm(a)); }
inline Vec3 vcross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

inline Mat4 mat4_identity() {
  Mat4 m{};
  for (int i = 0; i < 4; ++i) m[i][i] = 1.0;
  return m;
}

struct Camera {
  int width = 0;
  int height = 0;
  double focal = 0;  // pixels
  Mat4 pose = mat4_identity();  // camera-to-world

  Camera() = default;
  Camera(int w, int h, double f, const Mat4& p) : width(w), height(h), focal(f), pose(p) {
    validate();
  }

  void validate() const {
    if (width < 1 || height < 1) throw DomainError("camera: image dimensions must be >= 1");
    if (!(focal > 0)) throw DomainError("camera: focal must be > 0");
    if (rotation_error() > 1e-5) throw DomainError("camera: rotation block is not orthonormal");
  }

  // max |R^T R - I| over the 3x3 block
  double rotation_error() const {
    double worst = 0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double d = 0;
        for (int k = 0; k < 3; ++k) d += pose[k][i] * pose[k][j];
        worst = std::max(worst, std::abs(d - (i == j ? 1.0 : 0.0)));
      }
    return worst;
  }

  Vec3 position() const { return {pose[0][3], pose[1][3], pose[2][3]}; }

  Vec3 rotate_to_world(const Vec3& v) const {
    return {pose[0][0] * v[0] + pose[0][1] * v[1] + pose[0][2] * v[2],
            pose[1][0] * v[0] + pose[1][1] * v[1] + pose[1][2] * v[2],
            pose[2][0] * v[0] + pose[2][1] * v[1] + pose[2][2] * v[2]};
  }
  Vec3 rotate_to_camera(const Vec3& v) const {
    return {pose[0][0] * v[0] + pose[1][0] * v[1] + pose[2][0] * v[2],
            pose[0][1] * v[0] + pose[1][1] * v[1] + pose[2][1] * v[2],
            pose[0][2] * v[0] + pose[1][2] * v[1] + pose[2][2] * v[2]};
  }
};

struct Ray {
  Vec3 origin{};
  Vec3 direction{};  // unit
  double t_near = 0;
  double t_far = 1;

  void validate() const {
    if (std::abs(vnorm(direction) - 1.0) > 1e-6) throw DomainError("ray: direction not unit");
    if (!(t_near >= 0) || !(t_far > t_near)) throw DomainError("ray: bad t range");
  }

  Vec3 at(double t) const { return vadd(origin, vscale(direction, t)); }
};

struct SampleConfig {
  int n_samples = 64;
  bool stratified = false;

  void validate() const {
    if (n_samples < 1) throw DomainError("sample config: n_samples must be >= 1");
  }
};

struct PatchCoords {
  int x0 = 0, y0 = 0;
  int pw = 0, ph = 0;
};

inline Ray ray_for_pixel(const Camera& cam, int px, int py, double t_near, double t_far) {
  if (px < 0 || px >= cam.width || py < 0 || py >= cam.height)
    throw DomainError("ray_for_pixel: pixel out of bounds");
  // pixel center on the image plane at unit focal distance
  Vec3 d_cam{(px + 0.5 - 0.5 * cam.width) / cam.focal,
             -(py + 0.5 - 0.5 * cam.height) / cam.focal, -1.0};
  Ray r;
  r.origin = cam.position();
  r.direction = vnormalize(cam.rotate_to_world(d_cam));
  r.t_near = t_near;
  r.t_far = t_far;
  return r;
}

// Inverse of ray_for_pixel: world point -> continuous pixel coordinates.
// Points behind the camera yield z_cam >= 0 and a DomainError.
inline std::array<double, 2> project_to_pixel(const Camera& cam, const Vec3& p) {
  Vec3 pc = cam.rotate_to_camera(vsub(p, cam.position()));
  if (!(pc[2] < 0)) throw DomainError("project_to_pixel: point not in front of camera");
  return {cam.focal * (pc[0] / -pc[2]) + 0.5 * cam.width,
          -cam.focal * (pc[1] / -pc[2]) + 0.5 * cam.height};
}

// Depths along a ray: bin midpoints, or one uniform jitter per bin.
inline std::vector<double> sample_depths(const Ray& ray, const SampleConfig& cfg, RngState& rng) {
  ray.validate();
  cfg.validate();
  int n = cfg.n_samples;
  double delta = (ray.t_far - ray.t_near) / n;
  std::vector<double> t(n);
  for (int i = 0; i < n; ++i) {
    double u = cfg.stratified ? rng.uniform() : 0.5;
    t[i] = ray.t_near + (i + u) * delta;
  }
  return t;
}

inline double sample_delta(const Ray& ray, const SampleConfig& cfg) {
  return (ray.t_far - ray.t_near) / cfg.n_samples;
}

// Uniform over all valid top-left positions.
inline PatchCoords sample_patch(int image_w, int image_h, int pw, int ph, RngState& rng) {
  if (pw > image_w || ph > image_h) throw DomainError("sample_patch: patch larger than image");
  if (pw < 1 || ph < 1) throw DomainError("sample_patch: patch must be at least 1x1");
  PatchCoords p;
  p.pw = pw;
  p.ph = ph;
  p.x0 = rng.uniform_int(image_w - pw + 1);
  p.y0 = rng.uniform_int(image_h - ph + 1);
  return p;
}

}  // namespace aleth
