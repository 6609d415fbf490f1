#pragma once

// The learnable scene representation: frequency positional encoding, a
// density trunk with one encoded-input skip connection, a view-dependent
// color branch, the local concealing head (linear head + shared depthwise
// conv + sigmoid), and the global per-depth concealing vector.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "aleth/diffcore.hpp"
#include "aleth/geometry.hpp"
#include "aleth/tensor.hpp"

namespace aleth {

struct FieldConfig {
  int pos_levels = 10;   // L_x
  int dir_levels = 4;    // L_d
  int trunk_layers = 4;
  int trunk_width = 128;
  int conv_kernel = 3;   // odd
  int n_samples = 64;    // depth samples per ray; also the length of theta_g
  bool conv_learnable = true;

  void validate() const {
    if (pos_levels < 0 || dir_levels < 0) throw ConfigError("field: encoding levels must be >= 0");
    if (trunk_layers < 1 || trunk_width < 1) throw ConfigError("field: trunk must be >= 1x1");
    if (conv_kernel < 1 || conv_kernel % 2 == 0) throw ConfigError("field: conv kernel must be odd and >= 1");
    if (n_samples < 1) throw ConfigError("field: n_samples must be >= 1");
  }

  bool operator==(const FieldConfig& o) const {
    return pos_levels == o.pos_levels && dir_levels == o.dir_levels &&
           trunk_layers == o.trunk_layers && trunk_width == o.trunk_width &&
           conv_kernel == o.conv_kernel && n_samples == o.n_samples &&
           conv_learnable == o.conv_learnable;
  }

  int pos_enc_dim() const { return 3 + 6 * pos_levels; }
  int dir_enc_dim() const { return 3 + 6 * dir_levels; }
  // layer index (0-based) that receives the encoded input again
  int skip_layer() const { return trunk_layers >= 3 ? 2 : -1; }
  // the color branch runs at half trunk width, as in the usual NeRF heads
  int color_width() const { return std::max(8, trunk_width / 2); }
};

// [v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^{L-1} pi v), cos(2^{L-1} pi v)]
// Higher octaves come from the double-angle recurrence (two libm calls per
// component instead of 2L), evaluated in double.
template <class Real>
void positional_encode(const Real* v, int levels, Real* out) {
  out[0] = v[0];
  out[1] = v[1];
  out[2] = v[2];
  if (levels == 0) return;
  double s[3], c[3];
  for (int k = 0; k < 3; ++k) {
    s[k] = std::sin(M_PI * double(v[k]));
    c[k] = std::cos(M_PI * double(v[k]));
  }
  int o = 3;
  for (int l = 0; l < levels; ++l) {
    for (int k = 0; k < 3; ++k) out[o + k] = Real(s[k]);
    for (int k = 0; k < 3; ++k) out[o + 3 + k] = Real(c[k]);
    o += 6;
    if (l + 1 < levels)
      for (int k = 0; k < 3; ++k) {
        double s2 = 2.0 * s[k] * c[k];
        c[k] = c[k] * c[k] - s[k] * s[k];
        s[k] = s2;
      }
  }
}

template <class Real>
std::vector<Real> positional_encode(const std::array<Real, 3>& v, int levels) {
  std::vector<Real> out(3 + 6 * levels);
  positional_encode(v.data(), levels, out.data());
  return out;
}

// Rows of `points` [n x 3] -> encoded [n x (3+6L)].
template <class Real>
Tensor<Real> encode_points(const Tensor<Real>& points, int levels) {
  Tensor<Real> out(points.rows, 3 + 6 * levels);
#pragma omp parallel for schedule(static) if (points.rows > 4096)
  for (int r = 0; r < points.rows; ++r)
    positional_encode(&points.v[std::size_t(r) * 3], levels, &out.v[std::size_t(r) * out.cols]);
  return out;
}

inline double theta_g_init_logit() { return std::log(0.3 / 0.7); }

// Uniform fan-in init, matching variance 1/fan_in. The concealing conv starts
// as an exact k^-2 averaging kernel so smoothing is present from step zero.
template <class Real>
ParamStore<Real> init_field_params(const FieldConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  RngState rng(seed);
  ParamStore<Real> p;
  auto weight = [&](const std::string& name, int rows, int cols) {
    auto& e = p.add(name, rows, cols);
    double bound = std::sqrt(3.0 / double(rows));
    for (auto& x : e.v) x = Real(rng.uniform_range(-bound, bound));
  };
  auto zeros = [&](const std::string& name, int rows, int cols) { p.add(name, rows, cols); };

  int in = cfg.pos_enc_dim();
  for (int l = 0; l < cfg.trunk_layers; ++l) {
    std::string base = "trunk." + std::to_string(l);
    weight(base + ".w", l == 0 ? in : cfg.trunk_width, cfg.trunk_width);
    if (l == cfg.skip_layer()) weight(base + ".wskip", in, cfg.trunk_width);
    zeros(base + ".b", 1, cfg.trunk_width);
  }
  weight("sigma.w", cfg.trunk_width, 1);
  zeros("sigma.b", 1, 1);

  weight("color.h.w", cfg.trunk_width, cfg.color_width());
  weight("color.d.w", cfg.dir_enc_dim(), cfg.color_width());
  zeros("color.b", 1, cfg.color_width());
  weight("color.out.w", cfg.color_width(), 3);
  zeros("color.out.b", 1, 3);

  weight("conceal.head.w", cfg.trunk_width, 1);
  zeros("conceal.head.b", 1, 1);
  {
    auto& e = p.add("conceal.conv.w", cfg.conv_kernel, cfg.conv_kernel);
    for (auto& x : e.v) x = Real(1.0 / double(cfg.conv_kernel * cfg.conv_kernel));
    zeros("conceal.conv.b", 1, 1);
  }
  {
    auto& e = p.add("theta_g.logits", 1, cfg.n_samples);
    for (auto& x : e.v) x = Real(theta_g_init_logit());
  }
  return p;
}

// Trunk forward on encoded positions [P x enc] -> hidden [P x W], sigma [P x 1].
template <class Real>
struct TrunkNodes {
  int hidden = -1;
  int sigma_raw = -1;
  int sigma = -1;
  // ReLU pre-activation node -> name of the bias feeding it (kink diagnostics)
  std::vector<std::pair<int, std::string>> relu_preacts;
};

template <class Real>
TrunkNodes<Real> build_trunk(Graph<Real>& g, const ParamIds& ids, int x_enc,
                             const FieldConfig& cfg) {
  using Act = typename Graph<Real>::Act;
  TrunkNodes<Real> out;
  int h = x_enc;
  for (int l = 0; l < cfg.trunk_layers; ++l) {
    std::string base = "trunk." + std::to_string(l);
    bool skip = l == cfg.skip_layer();
    if (g.fused()) {
      h = g.linear(h, ids.at(base + ".w"), ids.at(base + ".b"), Act::relu,
                   skip ? x_enc : -1, skip ? ids.at(base + ".wskip") : -1);
    } else {
      int pre = g.matmul(h, ids.at(base + ".w"));
      if (skip) pre = g.add(pre, g.matmul(x_enc, ids.at(base + ".wskip")));
      pre = g.add_row_vector(pre, ids.at(base + ".b"));
      out.relu_preacts.push_back({pre, base + ".b"});
      h = g.relu(pre);
    }
  }
  out.hidden = h;
  if (g.fused()) {
    out.sigma = g.linear(h, ids.at("sigma.w"), ids.at("sigma.b"), Act::relu);
  } else {
    out.sigma_raw = g.add_row_vector(g.matmul(h, ids.at("sigma.w")), ids.at("sigma.b"));
    out.relu_preacts.push_back({out.sigma_raw, "sigma.b"});
    out.sigma = g.relu(out.sigma_raw);
  }
  return out;
}

// Color head: hidden [P x W] + per-pixel encoded directions [P/rep x encd]
// -> rgb [P x 3]. Directions are constant across a pixel's depth samples, so
// the direction product runs per pixel and joins as a grouped addend.
template <class Real>
int build_color(Graph<Real>& g, const ParamIds& ids, int hidden, int d_enc_pix, int rep,
                std::vector<std::pair<int, std::string>>* relu_preacts = nullptr) {
  using Act = typename Graph<Real>::Act;
  if (g.fused()) {
    int pre_d = g.matmul(d_enc_pix, ids.at("color.d.w"));
    int hc = g.linear(hidden, ids.at("color.h.w"), ids.at("color.b"), Act::relu, -1, -1, pre_d,
                      rep);
    return g.linear(hc, ids.at("color.out.w"), ids.at("color.out.b"), Act::sigmoid);
  }
  // unfused path replicates the direction rows explicitly
  int d_enc = d_enc_pix;
  if (rep > 1) {
    std::vector<int> idx(std::size_t(g.value(d_enc_pix).rows) * rep);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = int(i / rep);
    d_enc = g.gather_rows(d_enc_pix, std::move(idx));
  }
  int pre = g.add(g.matmul(hidden, ids.at("color.h.w")), g.matmul(d_enc, ids.at("color.d.w")));
  pre = g.add_row_vector(pre, ids.at("color.b"));
  if (relu_preacts) relu_preacts->push_back({pre, "color.b"});
  int hc = g.relu(pre);
  return g.sigmoid(g.add_row_vector(g.matmul(hc, ids.at("color.out.w")), ids.at("color.out.b")));
}

// Local concealing over a full patch. hidden rows are sample-major
// (pixel-major outer, depth inner): row = (y*pw + x)*N + i.
// Returns omega [ph*pw x N], strictly inside (0,1).
template <class Real>
int build_conceal_local(Graph<Real>& g, const ParamIds& ids, int hidden, int ph, int pw, int n,
                        const FieldConfig& cfg) {
  if (ph < 2 || pw < 2) throw DomainError("conceal: patch must be at least 2x2");
  int z = g.add_row_vector(g.matmul(hidden, ids.at("conceal.head.w")), ids.at("conceal.head.b"));
  int zplane = g.reshape_copy(z, ph * pw, n);
  int kernel = ids.at("conceal.conv.w");
  int zconv = g.conv2d_plane(zplane, kernel, ids.at("conceal.conv.b"), ph, pw);
  (void)cfg;
  return g.sigmoid(zconv);
}

template <class Real>
struct ThetaNodes {
  int theta = -1;      // [1 x N] in (0,1)
  int log_theta = -1;  // [1 x N]
};

template <class Real>
ThetaNodes<Real> build_theta_global(Graph<Real>& g, const ParamIds& ids) {
  ThetaNodes<Real> out;
  out.theta = g.sigmoid(ids.at("theta_g.logits"));
  out.log_theta = g.log_op(out.theta);
  return out;
}

// ---- plain (non-training) entry points ------------------------------------

template <class Real>
std::pair<Real, std::vector<Real>> eval_density(const ParamStore<Real>& params,
                                                const FieldConfig& cfg,
                                                const std::array<Real, 3>& point) {
  Graph<Real> g;
  g.set_no_grad(true);
  auto ids = make_param_leaves(g, params, false);
  Tensor<Real> x(1, 3, {point[0], point[1], point[2]});
  int enc = g.constant(encode_points(x, cfg.pos_levels));
  auto t = build_trunk(g, ids, enc, cfg);
  return {g.value(t.sigma).v[0], g.value(t.hidden).v};
}

template <class Real>
std::array<Real, 3> eval_color(const ParamStore<Real>& params, const FieldConfig& cfg,
                               const std::vector<Real>& hidden, const std::array<Real, 3>& dir) {
  Graph<Real> g;
  g.set_no_grad(true);
  auto ids = make_param_leaves(g, params, false);
  int h = g.constant(Tensor<Real>(1, int(hidden.size()), hidden));
  Tensor<Real> d(1, 3, {dir[0], dir[1], dir[2]});
  int denc = g.constant(encode_points(d, cfg.dir_levels));
  int rgb = build_color(g, ids, h, denc, 1);
  const auto& v = g.value(rgb).v;
  return {v[0], v[1], v[2]};
}

// hidden_patch rows sample-major over a ph x pw patch with n depth samples.
template <class Real>
Tensor<Real> eval_conceal_local(const ParamStore<Real>& params, const FieldConfig& cfg,
                                const Tensor<Real>& hidden_patch, int ph, int pw, int n) {
  if (hidden_patch.rows != ph * pw * n) throw DomainError("conceal: hidden patch shape mismatch");
  Graph<Real> g;
  g.set_no_grad(true);
  auto ids = make_param_leaves(g, params, false);
  int h = g.constant(hidden_patch);
  int omega = build_conceal_local(g, ids, h, ph, pw, n, cfg);
  return g.value(omega);
}

template <class Real>
std::vector<Real> theta_global(const ParamStore<Real>& params) {
  const auto& logits = params.at("theta_g.logits");
  std::vector<Real> out(logits.v.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = Real(1) / (Real(1) + std::exp(-logits.v[i]));
  return out;
}

}  // namespace aleth
