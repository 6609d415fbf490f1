#pragma once

// The four training objectives and their weighted total:
//   nerf  - reconstruction against the observed low-light patch
//   con   - pooled local concealing pulled toward the concealing degree eta
//   st    - neighbor differences of the unconcealed render matched to
//           0.5/eta times the low-light differences
//   cc    - gray-world penalty on the unconcealed render's channel means
// All reductions are means so the lambda balance is patch-size independent.

#include <vector>

#include "aleth/diffcore.hpp"

namespace aleth {

struct LossWeights {
  double lambda1 = 1e-4;  // control
  double lambda2 = 1e-3;  // structure
  double lambda3 = 1e-4;  // color constancy
  double eta = 0.1;       // concealing degree, > 0
  bool cc_per_pixel = false;  // literal per-pixel gray-world variant

  void validate() const {
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0)
      throw ConfigError("loss weights must be non-negative");
    if (!(eta > 0)) throw ConfigError("eta must be > 0");
  }
};

template <class Real>
struct LossBreakdown {
  Real nerf = 0, con = 0, st = 0, cc = 0, total = 0;
};

constexpr int kControlPoolWindow = 64;

// mean over pixels of the squared L2 color difference
template <class Real>
int build_loss_nerf(Graph<Real>& g, int pred, int gt) {
  if (!g.value(pred).same_shape(g.value(gt))) throw DomainError("loss_nerf: shape mismatch");
  int rows = g.value(pred).rows;
  int d = g.sub(pred, gt);
  return g.affine(g.sum_all(g.mul(d, d)), Real(1) / Real(rows), Real(0));
}

// average-pool omega over the pixel plane (window == stride == 64, clipped),
// average over depth, then mean squared deviation from eta
template <class Real>
int build_loss_control(Graph<Real>& g, int omega, int ph, int pw, Real eta) {
  int pooled = g.pool_cells(omega, ph, pw, kControlPoolWindow);
  int cells = g.rowwise_mean(pooled);
  int d = g.affine(cells, Real(1), -eta);
  return g.mean_all(g.mul(d, d));
}

namespace detail {

inline void structure_index_pairs(int ph, int pw, std::vector<int>& center,
                                  std::vector<int>& plus, std::vector<int>& minus) {
  for (int y = 0; y < ph; ++y)
    for (int x = 1; x + 1 < pw; ++x) {
      center.push_back(y * pw + x);
      plus.push_back(y * pw + x + 1);
      minus.push_back(y * pw + x - 1);
    }
}

}  // namespace detail

// d_k(r) = (pred(r) - pred(r+k)) - (0.5/eta) (gt(r) - gt(r+k)), k in {-1,+1}
// over horizontal interior pixels; loss = mean of d_k^2 over pixels, k, channels
template <class Real>
int build_loss_structure(Graph<Real>& g, int pred, const Tensor<Real>& gt_low, int ph, int pw,
                         Real eta) {
  if (pw < 3) throw DomainError("loss_structure: patch width must be >= 3");
  if (g.value(pred).rows != ph * pw || g.value(pred).cols != 3 ||
      !gt_low.same_shape(g.value(pred)))
    throw DomainError("loss_structure: shape mismatch");
  Real scale = Real(0.5) / eta;

  std::vector<int> center, plus, minus;
  detail::structure_index_pairs(ph, pw, center, plus, minus);
  int m = int(center.size());

  auto target = [&](const std::vector<int>& nb) {
    Tensor<Real> t(m, 3);
    for (int i = 0; i < m; ++i)
      for (int c = 0; c < 3; ++c) t(i, c) = scale * (gt_low(center[i], c) - gt_low(nb[i], c));
    return t;
  };
  auto term = [&](const std::vector<int>& nb) {
    int d = g.sub(g.sub(g.gather_rows(pred, center), g.gather_rows(pred, nb)),
                  g.constant(target(nb)));
    return g.sum_all(g.mul(d, d));
  };
  int ss = g.add(term(plus), term(minus));
  return g.affine(ss, Real(1) / Real(2 * m * 3), Real(0));
}

// gray-world: squared differences of channel means over the pairs
// (R,G), (G,B), (B,R); per-pixel variant averages the per-pixel pair terms
template <class Real>
int build_loss_color(Graph<Real>& g, int pred, bool per_pixel = false) {
  int rows = g.value(pred).rows;
  if (g.value(pred).cols != 3 || rows < 1)
    throw DomainError("loss_color: patch must be Nx3, nonempty");
  int base = per_pixel ? pred : g.colwise_mean(pred);
  auto pair = [&](int a, int b) {
    int d = g.sub(g.slice_cols(base, a, 1), g.slice_cols(base, b, 1));
    return g.sum_all(g.mul(d, d));
  };
  int s = g.add(g.add(pair(0, 1), pair(1, 2)), pair(2, 0));
  return per_pixel ? g.affine(s, Real(1) / Real(rows), Real(0)) : s;
}

// total = nerf + lambda1 con + lambda2 st + lambda3 cc, in this exact order
template <class Real>
int build_loss_total(Graph<Real>& g, int nerf, int con, int st, int cc, const LossWeights& w) {
  int total = g.add(nerf, g.affine(con, Real(w.lambda1), Real(0)));
  total = g.add(total, g.affine(st, Real(w.lambda2), Real(0)));
  return g.add(total, g.affine(cc, Real(w.lambda3), Real(0)));
}

// ---- plain evaluation (tests, reporting) -----------------------------------

template <class Real>
Real loss_nerf(const Tensor<Real>& pred, const Tensor<Real>& gt) {
  Graph<Real> g;
  g.set_no_grad(true);
  return g.scalar(build_loss_nerf(g, g.constant(pred), g.constant(gt)));
}

template <class Real>
Real loss_control(const Tensor<Real>& omega, int ph, int pw, Real eta) {
  if (!(eta > 0)) throw DomainError("loss_control: eta must be > 0");
  for (Real x : omega.v)
    if (!(x > Real(0)) || !(x < Real(1))) throw DomainError("loss_control: omega outside (0,1)");
  Graph<Real> g;
  g.set_no_grad(true);
  return g.scalar(build_loss_control(g, g.constant(omega), ph, pw, eta));
}

template <class Real>
Real loss_structure(const Tensor<Real>& pred_nor, const Tensor<Real>& gt_low, int ph, int pw,
                    Real eta) {
  if (!(eta > 0)) throw DomainError("loss_structure: eta must be > 0");
  Graph<Real> g;
  g.set_no_grad(true);
  return g.scalar(build_loss_structure(g, g.constant(pred_nor), gt_low, ph, pw, eta));
}

template <class Real>
Real loss_color(const Tensor<Real>& pred_nor, bool per_pixel = false) {
  Graph<Real> g;
  g.set_no_grad(true);
  return g.scalar(build_loss_color(g, g.constant(pred_nor), per_pixel));
}

template <class Real>
LossBreakdown<Real> loss_total(Real nerf, Real con, Real st, Real cc, const LossWeights& w) {
  w.validate();
  LossBreakdown<Real> b;
  b.nerf = nerf;
  b.con = con;
  b.st = st;
  b.cc = cc;
  b.total = nerf + Real(w.lambda1) * con;
  b.total = b.total + Real(w.lambda2) * st;
  b.total = b.total + Real(w.lambda3) * cc;
  return b;
}

}  // namespace aleth
