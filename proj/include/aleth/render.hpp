#pragma once

// Discrete volume compositing in two modes: normal (plain accumulated
// transmittance) and lowlight (transmittance further attenuated by the local
// and global concealing factors). Transmittance exponents accumulate in log
// space and are clamped at -80 before the single exp per sample.
//
// oracle_composite is a deliberately naive re-derivation used by tests and
// by the synthetic ground-truth generator; it shares no code with the
// composite_* functions or the graph ops.

#include <array>
#include <cmath>
#include <vector>

#include "aleth/field.hpp"

namespace aleth {

enum class RenderMode { normal, lowlight };

inline const char* render_mode_name(RenderMode m) {
  return m == RenderMode::normal ? "normal" : "lowlight";
}

template <class Real>
struct CompositeResult {
  std::array<Real, 3> rgb{};
  std::vector<Real> weights;        // w_i = T(i) (1 - exp(-sigma_i delta))
  std::vector<Real> transmittance;  // T or T_low
  RenderMode mode = RenderMode::normal;
};

// Flat per-patch sample buffers, sample-major: index r*N + i for pixel r,
// depth i. theta has length N. In normal mode omegas/theta may be empty.
template <class Real>
struct PatchBuffers {
  int ph = 0, pw = 0, n = 0;
  Real delta = 0;
  std::vector<Real> sigmas;  // R*N
  std::vector<Real> colors;  // R*N*3
  std::vector<Real> omegas;  // R*N (lowlight)
  std::vector<Real> theta;   // N   (lowlight)

  int pixels() const { return ph * pw; }
};

constexpr double kLogTransmittanceFloor = -80.0;

namespace detail {

template <class Real>
void check_composite_inputs(const Real* sigmas, const Real* colors, int n, Real delta) {
  if (!(delta > Real(0))) throw DomainError("composite: delta must be > 0");
  for (int i = 0; i < n; ++i) {
    if (!std::isfinite(double(sigmas[i])) ) throw NumericError("composite: non-finite sigma");
    if (sigmas[i] < Real(0)) throw DomainError("composite: negative sigma");
  }
  for (int i = 0; i < 3 * n; ++i)
    if (!std::isfinite(double(colors[i]))) throw NumericError("composite: non-finite color");
}

}  // namespace detail

template <class Real>
CompositeResult<Real> composite_normal(const std::vector<Real>& sigmas,
                                       const std::vector<Real>& colors, Real delta) {
  int n = int(sigmas.size());
  if (int(colors.size()) != 3 * n) throw DomainError("composite: colors must be N x 3");
  detail::check_composite_inputs(sigmas.data(), colors.data(), n, delta);

  CompositeResult<Real> out;
  out.mode = RenderMode::normal;
  out.weights.resize(n);
  out.transmittance.resize(n);
  Real log_t = 0;  // -sum_{j<i} sigma_j delta
  for (int i = 0; i < n; ++i) {
    Real t = std::exp(std::max(log_t, Real(kLogTransmittanceFloor)));
    Real alpha = Real(1) - std::exp(-sigmas[i] * delta);
    Real w = t * alpha;
    out.transmittance[i] = t;
    out.weights[i] = w;
    for (int c = 0; c < 3; ++c) out.rgb[c] += w * colors[std::size_t(i) * 3 + c];
    log_t -= sigmas[i] * delta;
  }
  return out;
}

template <class Real>
CompositeResult<Real> composite_lowlight(const PatchBuffers<Real>& buf, int pixel) {
  int n = buf.n;
  if (pixel < 0 || pixel >= buf.pixels()) throw DomainError("composite: pixel out of range");
  if (int(buf.theta.size()) != n || int(buf.omegas.size()) != buf.pixels() * n)
    throw DomainError("composite: missing concealing buffers");
  const Real* sigmas = &buf.sigmas[std::size_t(pixel) * n];
  const Real* colors = &buf.colors[std::size_t(pixel) * n * 3];
  const Real* omegas = &buf.omegas[std::size_t(pixel) * n];
  detail::check_composite_inputs(sigmas, colors, n, buf.delta);
  for (int i = 0; i < n; ++i) {
    // field outputs live in (0,1); 1 is admitted so identity concealing works
    if (!(omegas[i] > Real(0)) || !(omegas[i] <= Real(1)))
      throw DomainError("composite: omega outside (0,1]");
    if (!(buf.theta[i] > Real(0)) || !(buf.theta[i] <= Real(1)))
      throw DomainError("composite: theta outside (0,1]");
  }

  CompositeResult<Real> out;
  out.mode = RenderMode::lowlight;
  out.weights.resize(n);
  out.transmittance.resize(n);
  Real log_t = 0;        // -sum_{j<i} sigma_j delta
  Real log_conceal = 0;  // sum_{j<i} log(omega_j theta_j)
  for (int i = 0; i < n; ++i) {
    Real t = std::exp(std::max(log_t + log_conceal, Real(kLogTransmittanceFloor)));
    Real alpha = Real(1) - std::exp(-sigmas[i] * buf.delta);
    Real w = t * alpha;
    out.transmittance[i] = t;
    out.weights[i] = w;
    for (int c = 0; c < 3; ++c) out.rgb[c] += w * colors[std::size_t(i) * 3 + c];
    log_t -= sigmas[i] * buf.delta;
    log_conceal += std::log(omegas[i] * buf.theta[i]);
  }
  return out;
}

// compositing with Omega = Theta = 1 for a pixel of a PatchBuffers
template <class Real>
CompositeResult<Real> composite_normal(const PatchBuffers<Real>& buf, int pixel) {
  int n = buf.n;
  std::vector<Real> s(&buf.sigmas[std::size_t(pixel) * n], &buf.sigmas[std::size_t(pixel) * n] + n);
  std::vector<Real> c(&buf.colors[std::size_t(pixel) * n * 3],
                      &buf.colors[std::size_t(pixel) * n * 3] + 3 * n);
  return composite_normal(s, c, buf.delta);
}

// Naive reference: direct running products, no log accumulation, no clamp.
template <class Real>
std::array<Real, 3> oracle_composite(const PatchBuffers<Real>& buf, int pixel, RenderMode mode) {
  int n = buf.n;
  const Real* sigmas = &buf.sigmas[std::size_t(pixel) * n];
  const Real* colors = &buf.colors[std::size_t(pixel) * n * 3];
  std::array<Real, 3> rgb{0, 0, 0};
  Real trans = 1;
  Real conceal = 1;
  for (int i = 0; i < n; ++i) {
    Real factor = trans;
    if (mode == RenderMode::lowlight) factor = trans * conceal;
    Real alpha = Real(1) - std::exp(-sigmas[i] * buf.delta);
    for (int c = 0; c < 3; ++c) rgb[c] += factor * alpha * colors[std::size_t(i) * 3 + c];
    trans = trans * std::exp(-sigmas[i] * buf.delta);
    if (mode == RenderMode::lowlight)
      conceal = conceal * (buf.omegas[std::size_t(pixel) * n + i] * buf.theta[i]);
  }
  return rgb;
}

// ---- graph-side compositing (training path) --------------------------------

template <class Real>
struct CompositeNodes {
  int alpha = -1;       // [R x N]
  int log_t = -1;       // [R x N]
  int rgb_normal = -1;  // [R x 3]
  int rgb_low = -1;     // [R x 3], lowlight only
};

// sigma_plane: [R x N]; colors: [R*N x 3]; omega: [R x N] or -1;
// log_theta: [1 x N] or -1.
template <class Real>
CompositeNodes<Real> build_composite(Graph<Real>& g, int sigma_plane, int colors, Real delta,
                                     int omega, int log_theta) {
  CompositeNodes<Real> out;
  int sd = g.affine(sigma_plane, delta, Real(0));
  out.log_t = g.affine(g.excl_cumsum_rows(sd), Real(-1), Real(0));
  out.alpha = g.affine(g.exp_op(g.affine(sd, Real(-1), Real(0))), Real(-1), Real(1));
  int t_norm = g.exp_op(g.cmax_scalar(out.log_t, Real(kLogTransmittanceFloor)));
  out.rgb_normal = g.weighted_sum_groups(g.mul(t_norm, out.alpha), colors);
  if (omega >= 0) {
    int log_c = g.excl_cumsum_rows(g.add_row_vector(g.log_op(omega), log_theta));
    int t_low =
        g.exp_op(g.cmax_scalar(g.add(out.log_t, log_c), Real(kLogTransmittanceFloor)));
    out.rgb_low = g.weighted_sum_groups(g.mul(t_low, out.alpha), colors);
  }
  return out;
}

// ---- patch rendering --------------------------------------------------------

template <class Real>
struct RenderedPatch {
  PatchCoords coords;
  int n = 0;
  Real delta = 0;
  // node ids in the graph that produced this patch
  int sigma_plane = -1;  // [R x N]
  int colors = -1;       // [R*N x 3]
  int hidden = -1;       // [R*N x W]
  int omega = -1;        // [R x N] (lowlight only)
  int theta = -1;        // [1 x N] (lowlight only)
  int rgb_normal = -1;   // [R x 3]
  int rgb_low = -1;      // [R x 3] (lowlight only)
  // ReLU pre-activation node -> bias name (kink diagnostics)
  std::vector<std::pair<int, std::string>> relu_preacts;
  // the image the requested mode defines
  int rgb() const { return rgb_low >= 0 ? rgb_low : rgb_normal; }
};

// Renders a pixel patch through the graph. In lowlight mode the normal-mode
// rgb is composited from the same field evaluations and retained, along with
// omega, for the prior losses. In normal mode the concealing parameters are
// never read.
template <class Real>
RenderedPatch<Real> render_patch(Graph<Real>& g, const ParamIds& ids, const FieldConfig& cfg,
                                 const Camera& cam, const PatchCoords& patch,
                                 const SampleConfig& scfg, double t_near, double t_far,
                                 RenderMode mode, RngState& rng) {
  if (patch.pw < 1 || patch.ph < 1 || patch.x0 < 0 || patch.y0 < 0 ||
      patch.x0 + patch.pw > cam.width || patch.y0 + patch.ph > cam.height)
    throw DomainError("render_patch: patch outside image bounds");
  const int n = scfg.n_samples;
  const int rpix = patch.pw * patch.ph;
  const std::size_t npts = std::size_t(rpix) * n;

  Tensor<Real> points(int(npts), 3);
  Tensor<Real> dirs(rpix, 3);
  Real delta = 0;
  {
    std::size_t row = 0;
    for (int y = 0; y < patch.ph; ++y)
      for (int x = 0; x < patch.pw; ++x) {
        Ray ray = ray_for_pixel(cam, patch.x0 + x, patch.y0 + y, t_near, t_far);
        delta = Real(sample_delta(ray, scfg));
        auto ts = sample_depths(ray, scfg, rng);
        int pr = y * patch.pw + x;
        for (int c = 0; c < 3; ++c) dirs(pr, c) = Real(ray.direction[c]);
        for (int i = 0; i < n; ++i, ++row) {
          Vec3 p = ray.at(ts[i]);
          for (int c = 0; c < 3; ++c) points(int(row), c) = Real(p[c]);
        }
      }
  }

  int x_enc = g.constant(encode_points(points, cfg.pos_levels));
  int d_enc_pix = g.constant(encode_points(dirs, cfg.dir_levels));

  auto trunk = build_trunk(g, ids, x_enc, cfg);

  RenderedPatch<Real> out;
  out.coords = patch;
  out.n = n;
  out.delta = delta;
  out.hidden = trunk.hidden;
  out.relu_preacts = trunk.relu_preacts;
  out.colors = build_color(g, ids, trunk.hidden, d_enc_pix, n, &out.relu_preacts);
  out.sigma_plane = g.reshape_copy(trunk.sigma, rpix, n);

  if (mode == RenderMode::lowlight) {
    out.omega = build_conceal_local(g, ids, trunk.hidden, patch.ph, patch.pw, n, cfg);
    auto th = build_theta_global(g, ids);
    out.theta = th.theta;
    auto comp = build_composite(g, out.sigma_plane, out.colors, delta, out.omega, th.log_theta);
    out.rgb_normal = comp.rgb_normal;
    out.rgb_low = comp.rgb_low;
  } else {
    auto comp = build_composite(g, out.sigma_plane, out.colors, delta, -1, -1);
    out.rgb_normal = comp.rgb_normal;
  }
  return out;
}

template <class Real>
PatchBuffers<Real> extract_buffers(const Graph<Real>& g, const RenderedPatch<Real>& rp) {
  PatchBuffers<Real> buf;
  buf.ph = rp.coords.ph;
  buf.pw = rp.coords.pw;
  buf.n = rp.n;
  buf.delta = rp.delta;
  buf.sigmas = g.value(rp.sigma_plane).v;
  buf.colors = g.value(rp.colors).v;
  if (rp.omega >= 0) {
    buf.omegas = g.value(rp.omega).v;
    buf.theta = g.value(rp.theta).v;
  }
  return buf;
}

// ---- full image rendering ---------------------------------------------------
//
// Field evaluation runs in pixel chunks so trunk activations never cover the
// whole image; the concealing conv then runs over the full pixel plane (no
// tile seams) and pixels composite through the plain composite_* routines.

template <class Real>
struct ImageRender {
  int width = 0, height = 0;
  std::vector<Real> rgb;  // H*W*3, row-major
  PatchBuffers<Real> buffers;  // full-image buffers (sigma/color/omega/theta)
};

template <class Real>
ImageRender<Real> render_image(const ParamStore<Real>& params, const FieldConfig& cfg,
                               const Camera& cam, const SampleConfig& scfg, double t_near,
                               double t_far, RenderMode mode, int chunk_pixels = 1024) {
  const int W = cam.width, H = cam.height, n = scfg.n_samples;
  const int rpix = W * H;
  SampleConfig render_cfg = scfg;
  render_cfg.stratified = false;  // deterministic midpoints for rendering
  RngState rng(0);

  PatchBuffers<Real> buf;
  buf.ph = H;
  buf.pw = W;
  buf.n = n;
  buf.sigmas.resize(std::size_t(rpix) * n);
  buf.colors.resize(std::size_t(rpix) * n * 3);
  std::vector<Real> z_plane(std::size_t(rpix) * n);

  for (int base = 0; base < rpix; base += chunk_pixels) {
    int count = std::min(chunk_pixels, rpix - base);
    Tensor<Real> points(count * n, 3);
    Tensor<Real> dirs(count, 3);
    for (int k = 0; k < count; ++k) {
      int pix = base + k;
      Ray ray = ray_for_pixel(cam, pix % W, pix / W, t_near, t_far);
      buf.delta = Real(sample_delta(ray, render_cfg));
      auto ts = sample_depths(ray, render_cfg, rng);
      for (int c = 0; c < 3; ++c) dirs(k, c) = Real(ray.direction[c]);
      for (int i = 0; i < n; ++i) {
        Vec3 p = ray.at(ts[i]);
        for (int c = 0; c < 3; ++c) points(k * n + i, c) = Real(p[c]);
      }
    }
    Graph<Real> g;
    g.set_no_grad(true);
    auto ids = make_param_leaves(g, params, false);
    int x_enc = g.constant(encode_points(points, cfg.pos_levels));
    auto trunk = build_trunk(g, ids, x_enc, cfg);
    int colors = build_color(g, ids, trunk.hidden,
                             g.constant(encode_points(dirs, cfg.dir_levels)), n);
    std::copy_n(g.value(trunk.sigma).v.begin(), std::size_t(count) * n,
                buf.sigmas.begin() + std::size_t(base) * n);
    std::copy_n(g.value(colors).v.begin(), std::size_t(count) * n * 3,
                buf.colors.begin() + std::size_t(base) * n * 3);
    if (mode == RenderMode::lowlight) {
      int z = g.add_row_vector(g.matmul(trunk.hidden, ids.at("conceal.head.w")),
                               ids.at("conceal.head.b"));
      std::copy_n(g.value(z).v.begin(), std::size_t(count) * n,
                  z_plane.begin() + std::size_t(base) * n);
    }
  }

  if (mode == RenderMode::lowlight) {
    Graph<Real> g;
    g.set_no_grad(true);
    int z = g.constant(Tensor<Real>(rpix, n, std::move(z_plane)));
    int kernel = g.constant(Tensor<Real>(cfg.conv_kernel, cfg.conv_kernel,
                                         params.at("conceal.conv.w").v));
    int bias = g.constant(Tensor<Real>(1, 1, params.at("conceal.conv.b").v));
    int omega = g.sigmoid(g.conv2d_plane(z, kernel, bias, H, W));
    buf.omegas = g.value(omega).v;
    buf.theta = theta_global(params);
  }

  ImageRender<Real> out;
  out.width = W;
  out.height = H;
  out.rgb.resize(std::size_t(rpix) * 3);
  for (int pix = 0; pix < rpix; ++pix) {
    CompositeResult<Real> res = mode == RenderMode::lowlight ? composite_lowlight(buf, pix)
                                                             : composite_normal(buf, pix);
    for (int c = 0; c < 3; ++c) out.rgb[std::size_t(pix) * 3 + c] = res.rgb[c];
  }
  out.buffers = std::move(buf);
  return out;
}

}  // namespace aleth
