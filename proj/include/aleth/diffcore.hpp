#pragma once

// Reverse-mode differentiation over 2-D tensors. A Graph owns an eager tape:
// every op computes its value immediately and records a backward closure.
// Gradients are exact derivatives of the recorded ops; ReLU takes subgradient
// 0 at the kink. A finite-difference checker provides the independent oracle.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "aleth/common.hpp"
#include "aleth/tensor.hpp"

namespace aleth {

// Named flat parameter arrays in a stable (insertion) order. Also used for
// gradients: a GradStore is a ParamStore with the identical key set.
template <class Real>
struct ParamStore {
  struct Entry {
    std::string name;
    int rows = 0, cols = 0;
    std::vector<Real> v;
  };

  std::vector<Entry> entries;

  Entry& add(const std::string& name, int rows, int cols) {
    if (find(name) >= 0) throw DomainError("duplicate parameter name: " + name);
    entries.push_back({name, rows, cols, std::vector<Real>(std::size_t(rows) * cols, Real(0))});
    return entries.back();
  }

  int find(const std::string& name) const {
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].name == name) return int(i);
    return -1;
  }

  Entry& at(const std::string& name) {
    int i = find(name);
    if (i < 0) throw DomainError("no such parameter: " + name);
    return entries[i];
  }
  const Entry& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }

  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.v.size();
    return n;
  }

  bool same_keys(const ParamStore& o) const {
    if (entries.size() != o.entries.size()) return false;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].name != o.entries[i].name || entries[i].rows != o.entries[i].rows ||
          entries[i].cols != o.entries[i].cols)
        return false;
    return true;
  }

  bool all_finite() const {
    for (const auto& e : entries)
      for (Real x : e.v)
        if (!std::isfinite(double(x))) return false;
    return true;
  }

  template <class R2>
  ParamStore<R2> cast() const {
    ParamStore<R2> out;
    for (const auto& e : entries) {
      auto& ne = out.add(e.name, e.rows, e.cols);
      for (std::size_t i = 0; i < e.v.size(); ++i) ne.v[i] = R2(e.v[i]);
    }
    return out;
  }
};

template <class Real>
using GradStore = ParamStore<Real>;

template <class Real>
class Graph {
 public:
  using T = Tensor<Real>;

  Graph() { init_allocator(); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  ~Graph() {
    for (auto& n : nodes_) {
      n.value.recycle();
      if (n.grad_alloc) n.grad.recycle();
    }
  }

  void set_no_grad(bool b) { no_grad_ = b; }
  void set_check_finite(bool b) { check_finite_ = b; }
  // when disabled, tensors above ~1M elements skip the per-op scan; non-finite
  // values still surface at the first smaller downstream op or the loss
  void set_check_finite_large(bool b) { check_finite_large_ = b; }
  // fused dense layers; unfused keeps every pre-activation on the tape
  void set_fused(bool b) { fused_ = b; }
  bool fused() const { return fused_; }

  const T& value(int id) const { return nodes_[id].value; }
  Real scalar(int id) const { return nodes_[id].value.v[0]; }
  bool has_grad(int id) const { return nodes_[id].grad_alloc; }
  const T& grad(int id) const {
    const Node& n = nodes_[id];
    if (!n.grad_alloc) {
      static const T empty;
      return n.grad.rows ? n.grad : empty;
    }
    return n.grad;
  }

  int leaf(T value, bool needs_grad = false, std::string name = "") {
    int id = push(std::move(value), needs_grad && !no_grad_, "leaf");
    nodes_[id].name = std::move(name);
    return id;
  }
  int constant(T value) { return leaf(std::move(value), false); }

  // ---- arithmetic -------------------------------------------------------

  int matmul(int a, int b) {
    const T& A = val(a);
    const T& B = val(b);
    if (A.cols != B.rows) throw DomainError("matmul: inner dimensions differ");
    T out = T::uninit(A.rows, B.cols);
    gemm(A, B, out);
    int id = push(std::move(out), needs(a) || needs(b), "matmul");
    record(id, [this, id, a, b] {
      const T& gy = nodes_[id].grad;
      bool assign;
      if (needs(a)) {
        T& ga = grad_for_gemm(a, assign);
        gemm_a_bt_acc(gy, nodes_[b].value, ga, assign);
      }
      if (needs(b)) {
        T& gb = grad_for_gemm(b, assign);
        gemm_at_b_acc(nodes_[a].value, gy, gb, assign);
      }
    });
    return id;
  }

  int add(int a, int b) { return add_sub(a, b, Real(1), "add"); }
  int sub(int a, int b) { return add_sub(a, b, Real(-1), "sub"); }

  enum class Act { none, relu, sigmoid };

  // Fused dense layer: act(a @ w [+ a2 @ w2] [+ addg rows] + bias). One node
  // instead of three-plus keeps the big intermediate values and gradients off
  // the tape. `addg` is a grouped addend: row r receives addg[r / rep], which
  // lets per-pixel features join a per-sample matrix without replication.
  int linear(int a, int w, int bias, Act act, int a2 = -1, int w2 = -1, int addg = -1,
             int rep = 1) {
    const T& A = val(a);
    const T& W = val(w);
    const T& B = val(bias);
    if (A.cols != W.rows) throw DomainError("linear: inner dimensions differ");
    if (B.rows != 1 || B.cols != W.cols) throw DomainError("linear: bad bias shape");
    T out = T::uninit(A.rows, W.cols);
    gemm(A, W, out);
    if (a2 >= 0) {
      const T& A2 = val(a2);
      const T& W2 = val(w2);
      if (A2.cols != W2.rows || A2.rows != A.rows || W2.cols != W.cols)
        throw DomainError("linear: second input shape mismatch");
      gemm_acc(A2, W2, out);
    }
    const Real* add_base = nullptr;
    if (addg >= 0) {
      const T& G = val(addg);
      if (G.cols != W.cols || G.rows * rep != A.rows)
        throw DomainError("linear: grouped addend shape mismatch");
      add_base = G.data();
    }
    const Real* bp = B.data();
#pragma omp parallel for schedule(static) if (out.size() > (1u << 18))
    for (int r = 0; r < out.rows; ++r) {
      Real* op = &out.v[std::size_t(r) * out.cols];
      const Real* gp = add_base ? add_base + std::size_t(r / rep) * out.cols : nullptr;
      switch (act) {
        case Act::none:
          for (int c = 0; c < out.cols; ++c) op[c] += bp[c] + (gp ? gp[c] : Real(0));
          break;
        case Act::relu:
          for (int c = 0; c < out.cols; ++c) {
            Real z = op[c] + bp[c] + (gp ? gp[c] : Real(0));
            op[c] = z > Real(0) ? z : Real(0);
          }
          break;
        case Act::sigmoid:
          for (int c = 0; c < out.cols; ++c)
            op[c] = Real(1) / (Real(1) + std::exp(-(op[c] + bp[c] + (gp ? gp[c] : Real(0)))));
          break;
      }
    }
    bool ng = needs(a) || needs(w) || needs(bias) || (a2 >= 0 && (needs(a2) || needs(w2))) ||
              (addg >= 0 && needs(addg));
    int id = push(std::move(out), ng, "linear");
    record(id, [this, id, a, w, bias, act, a2, w2, addg, rep] {
      // this node's backward runs exactly once and last for its grad, so the
      // incoming gradient buffer can be masked in place
      T& gy = nodes_[id].grad;
      const T& Y = nodes_[id].value;
      if (act == Act::relu) {
#pragma omp parallel for schedule(static) if (gy.size() > (1u << 18))
        for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(gy.size()); ++i)
          gy.v[i] = Y.v[i] > Real(0) ? gy.v[i] : Real(0);
      } else if (act == Act::sigmoid) {
#pragma omp parallel for schedule(static) if (gy.size() > (1u << 18))
        for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(gy.size()); ++i)
          gy.v[i] = gy.v[i] * Y.v[i] * (Real(1) - Y.v[i]);
      }
      if (needs(bias)) {
        T& gb = grad_acc(bias);
        Real* gbp = gb.data();
        for (int r = 0; r < gy.rows; ++r) {
          const Real* gp = &gy.v[std::size_t(r) * gy.cols];
          for (int c = 0; c < gy.cols; ++c) gbp[c] += gp[c];
        }
      }
      bool assign;
      if (needs(a)) {
        T& ga = grad_for_gemm(a, assign);
        gemm_a_bt_acc(gy, nodes_[w].value, ga, assign);
      }
      if (needs(w)) {
        T& gw = grad_for_gemm(w, assign);
        gemm_at_b_acc(nodes_[a].value, gy, gw, assign);
      }
      if (a2 >= 0) {
        if (needs(a2)) {
          T& ga2 = grad_for_gemm(a2, assign);
          gemm_a_bt_acc(gy, nodes_[w2].value, ga2, assign);
        }
        if (needs(w2)) {
          T& gw2 = grad_for_gemm(w2, assign);
          gemm_at_b_acc(nodes_[a2].value, gy, gw2, assign);
        }
      }
      if (addg >= 0 && needs(addg)) {
        T& gg = grad_acc(addg);
#pragma omp parallel for schedule(static) if (gy.size() > (1u << 18))
        for (int q = 0; q < gg.rows; ++q) {
          Real* gq = &gg.v[std::size_t(q) * gg.cols];
          for (int r = q * rep; r < (q + 1) * rep; ++r) {
            const Real* gp = &gy.v[std::size_t(r) * gy.cols];
            for (int c = 0; c < gy.cols; ++c) gq[c] += gp[c];
          }
        }
      }
    });
    return id;
  }

  int mul(int a, int b) {
    const T& A = val(a);
    const T& B = val(b);
    if (!A.same_shape(B)) throw DomainError("mul: shape mismatch");
    T out = T::uninit(A.rows, A.cols);
    for (std::size_t i = 0; i < out.size(); ++i) out.v[i] = A.v[i] * B.v[i];
    int id = push(std::move(out), needs(a) || needs(b), "mul");
    record(id, [this, id, a, b] {
      const T& gy = nodes_[id].grad;
      if (needs(a)) {
        T& ga = grad_acc(a);
        const T& B = nodes_[b].value;
        for (std::size_t i = 0; i < gy.size(); ++i) ga.v[i] += gy.v[i] * B.v[i];
      }
      if (needs(b)) {
        T& gb = grad_acc(b);
        const T& A = nodes_[a].value;
        for (std::size_t i = 0; i < gy.size(); ++i) gb.v[i] += gy.v[i] * A.v[i];
      }
    });
    return id;
  }

  // k*a + c, elementwise
  int affine(int a, Real k, Real c) {
    const T& A = val(a);
    T out = T::uninit(A.rows, A.cols);
    for (std::size_t i = 0; i < out.size(); ++i) out.v[i] = k * A.v[i] + c;
    int id = push(std::move(out), needs(a), "affine");
    record(id, [this, id, a, k] {
      if (!needs(a)) return;
      const T& gy = nodes_[id].grad;
      T& ga = grad_acc(a);
      for (std::size_t i = 0; i < gy.size(); ++i) ga.v[i] += k * gy.v[i];
    });
    return id;
  }

  // a[m x n] + row[1 x n], broadcast over rows
  int add_row_vector(int a, int b) {
    const T& A = val(a);
    const T& B = val(b);
    if (B.rows != 1 || B.cols != A.cols) throw DomainError("add_row_vector: bad row shape");
    T out = T::uninit(A.rows, A.cols);
    const Real* bp = B.data();
    for (int r = 0; r < A.rows; ++r) {
      const Real* ap = &A.v[std::size_t(r) * A.cols];
      Real* op = &out.v[std::size_t(r) * A.cols];
      for (int c = 0; c < A.cols; ++c) op[c] = ap[c] + bp[c];
    }
    int id = push(std::move(out), needs(a) || needs(b), "add_row_vector");
    record(id, [this, id, a, b] {
      const T& gy = nodes_[id].grad;
      if (needs(a)) {
        T& ga = grad_acc(a);
        for (std::size_t i = 0; i < gy.size(); ++i) ga.v[i] += gy.v[i];
      }
      if (needs(b)) {
        T& gb = grad_acc(b);
        Real* gbp = gb.data();
        for (int r = 0; r < gy.rows; ++r) {
          const Real* gp = &gy.v[std::size_t(r) * gy.cols];
          for (int c = 0; c < gy.cols; ++c) gbp[c] += gp[c];
        }
      }
    });
    return id;
  }

  // ---- elementwise nonlinearities ---------------------------------------

  int relu(int a) {
    return unary(a, "relu", [](Real x) { return x > Real(0) ? x : Real(0); },
                 [](Real x, Real) { return x > Real(0) ? Real(1) : Real(0); });
  }
  int sigmoid(int a) {
    return unary(a, "sigmoid", [](Real x) { return Real(1) / (Real(1) + std::exp(-x)); },
                 [](Real, Real y) { return y * (Real(1) - y); });
  }
  int exp_op(int a) {
    return unary(a, "exp", [](Real x) { return std::exp(x); },
                 [](Real, Real y) { return y; });
  }
  int log_op(int a) {
    return unary(a, "log", [](Real x) { return std::log(x); },
                 [](Real x, Real) { return Real(1) / x; });
  }
  int sin_op(int a) {
    return unary(a, "sin", [](Real x) { return std::sin(x); },
                 [](Real x, Real) { return std::cos(x); });
  }
  int cos_op(int a) {
    return unary(a, "cos", [](Real x) { return std::cos(x); },
                 [](Real x, Real) { return -std::sin(x); });
  }
  // max(a, lo); gradient passes where a > lo
  int cmax_scalar(int a, Real lo) {
    return unary(a, "cmax", [lo](Real x) { return x > lo ? x : lo; },
                 [lo](Real x, Real) { return x > lo ? Real(1) : Real(0); });
  }

  // ---- shape ops ---------------------------------------------------------

  int reshape_copy(int a, int rows, int cols) {
    const T& A = val(a);
    if (std::size_t(rows) * cols != A.size()) throw DomainError("reshape: size mismatch");
    T out(rows, cols, A.v);
    int id = push(std::move(out), needs(a), "reshape");
    record(id, [this, id, a] {
      if (!needs(a)) return;
      const T& gy = nodes_[id].grad;
      T& ga = grad_acc(a);
      for (std::size_t i = 0; i < gy.size(); ++i) ga.v[i] += gy.v[i];
    });
    return id;
  }

  int slice_cols(int a, int j0, int n) {
    const T& A = val(a);
    if (j0 < 0 || j0 + n > A.cols) throw DomainError("slice_cols: out of range");
    T out = T::uninit(A.rows, n);
    for (int r = 0; r < A.rows; ++r)
      for (int c = 0; c < n; ++c) out(r, c) = A(r, j0 + c);
    int id = push(std::move(out), needs(a), "slice_cols");
    record(id, [this, id, a, j0, n] {
      if (!needs(a)) return;
      const T& gy = nodes_[id].grad;
      T& ga = grad_acc(a);
      for (int r = 0; r < gy.rows; ++r)
        for (int c = 0; c < n; ++c) ga(r, j0 + c) += gy(r, c);
    });
    return id;
  }

  int gather_rows(int a, std::vector<int> idx) {
    const T& A = val(a);
    T out = T::uninit(int(idx.size()), A.cols);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (int c = 0; c < A.cols; ++c) out(int(i), c) = A(idx[i], c);
    int id = push(std::move(out), needs(a), "gather_rows");
    record(id, [this, id, a, idx = std::move(idx)] {
      if (!needs(a)) return;
      const T& gy = nodes_[id].grad;
      T& ga = grad_acc(a);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (int c = 0; c < gy.cols; ++c) ga(idx[i], c) += gy(int(i), c);
    });
    return id;
  }

  // ---- reductions --------------------------------------------------------

  int sum_all(int a) {
    const T& A = val(a);
    Real s = 0;
    for (Real x : A.v) s += x;
    int id = push(T::scalar(s), needs(a), "sum");
    record(id, [this, id, a] {
      if (!needs(a)) return;
      Real g = nodes_[id].grad.v[0];
      T& ga = grad_acc(a);
      for (auto& x : ga.v) x += g;
    });
    return id;
  }

  int mean_all(int a) {
    const T& A = val(a);
    return affine(sum_all(a), Real(1) / Real(A.size()), Real(0));
  }

  int rowwise_mean(int a) {
    const T& A = val(a);
    T out(A.rows, 1);
    for (int r = 0; r < A.rows; ++r) {
      Real s = 0;
      for (int c = 0; c < A.cols; ++c) s += A(r, c);
      out(r, 0) = s / Real(A.cols);
    }
    int id = push(std::move(out), needs(a), "rowwise_mean");
    record(id, [this, id, a] {
      if (!needs(a)) return;
      const T& gy = nodes_[id].grad;
      T& ga = grad_acc(a);
      Real inv = Real(1) / Real(ga.cols);
      for (int r = 0; r < ga.rows; ++r)
        for (int c = 0; c < ga.cols; ++c) ga(r, c) += gy(r, 0) * inv;
    });
    return id;
  }

  int colwise_mean(int a) {
    const T& A = val(a);
    T out(1, A.cols);
    for (int c = 0; c < A.cols; ++c) {
      Real s = 0;
      for (int r = 0; r < A.rows; ++r) s += A(r, c);
      out(0, c) = s / Real(A.rows);
    }
    int id = push(std::move(out), needs(a), "colwise_mean");
    record(id, [this, id, a] {
      if (!needs(a)) return;
      const T& gy = nodes_[id].grad;
      T& ga = grad_acc(a);
      Real inv = Real(1) / Real(ga.rows);
      for (int r = 0; r < ga.rows; ++r)
        for (int c = 0; c < ga.cols; ++c) ga(r, c) += gy(0, c) * inv;
    });
    return id;
  }

  // ---- structured ops for rendering --------------------------------------

  // out[r, i] = sum_{j < i} a[r, j]
  int excl_cumsum_rows(int a) {
    const T& A = val(a);
    T out = T::uninit(A.rows, A.cols);
    for (int r = 0; r < A.rows; ++r) {
      Real s = 0;
      for (int c = 0; c < A.cols; ++c) {
        out(r, c) = s;
        s += A(r, c);
      }
    }
    int id = push(std::move(out), needs(a), "excl_cumsum");
    record(id, [this, id, a] {
      if (!needs(a)) return;
      const T& gy = nodes_[id].grad;
      T& ga = grad_acc(a);
      for (int r = 0; r < gy.rows; ++r) {
        Real s = 0;
        for (int c = gy.cols - 1; c >= 0; --c) {
          ga(r, c) += s;  // d out[r,i]/d a[r,j] = 1 for i > j
          s += gy(r, c);
        }
      }
    });
    return id;
  }

  // w: [R x N], c: [R*N x C] (sample-major rows) -> out[r, ch] = sum_i w[r,i] c[r*N+i, ch]
  int weighted_sum_groups(int w, int c) {
    const T& W = val(w);
    const T& C = val(c);
    if (std::size_t(W.rows) * W.cols != std::size_t(C.rows))
      throw DomainError("weighted_sum_groups: row count mismatch");
    int R = W.rows, N = W.cols, ch = C.cols;
    T out = T::uninit(R, ch);
    for (int r = 0; r < R; ++r) {
      Real* op = &out.v[std::size_t(r) * ch];
      for (int k = 0; k < ch; ++k) op[k] = Real(0);
      for (int i = 0; i < N; ++i) {
        Real wi = W(r, i);
        const Real* cp = &C.v[(std::size_t(r) * N + i) * ch];
        for (int k = 0; k < ch; ++k) op[k] += wi * cp[k];
      }
    }
    int id = push(std::move(out), needs(w) || needs(c), "weighted_sum_groups");
    record(id, [this, id, w, c, R, N, ch] {
      const T& gy = nodes_[id].grad;
      const T& W = nodes_[w].value;
      const T& C = nodes_[c].value;
      if (needs(w)) {
        T& gw = grad_acc(w);
        for (int r = 0; r < R; ++r)
          for (int i = 0; i < N; ++i) {
            const Real* cp = &C.v[(std::size_t(r) * N + i) * ch];
            const Real* gp = &gy.v[std::size_t(r) * ch];
            Real s = 0;
            for (int k = 0; k < ch; ++k) s += gp[k] * cp[k];
            gw(r, i) += s;
          }
      }
      if (needs(c)) {
        T& gc = grad_acc(c);
        for (int r = 0; r < R; ++r)
          for (int i = 0; i < N; ++i) {
            Real wi = W(r, i);
            Real* gcp = &gc.v[(std::size_t(r) * N + i) * ch];
            const Real* gp = &gy.v[std::size_t(r) * ch];
            for (int k = 0; k < ch; ++k) gcp[k] += wi * gp[k];
          }
      }
    });
    return id;
  }

  // Depthwise 2-D convolution over the (ph x pw) pixel plane, one shared
  // kernel across all depth slices, replicate padding at the borders.
  // z: [ph*pw x N] pixel-major rows, kernel: [k x k], bias: [1 x 1].
  int conv2d_plane(int z, int kernel, int bias, int ph, int pw) {
    const T& Z = val(z);
    const T& K = val(kernel);
    const T& B = val(bias);
    if (K.rows != K.cols || K.rows % 2 == 0) throw DomainError("conv2d: kernel must be odd square");
    if (Z.rows != ph * pw) throw DomainError("conv2d: plane size mismatch");
    if (B.rows != 1 || B.cols != 1) throw DomainError("conv2d: bias must be scalar");
    int k = K.rows, h = k / 2, N = Z.cols;
    T out = T::uninit(Z.rows, N);
    auto cl = [](int x, int n) { return x < 0 ? 0 : (x >= n ? n - 1 : x); };
    for (int y = 0; y < ph; ++y)
      for (int x = 0; x < pw; ++x) {
        Real* op = &out.v[std::size_t(y * pw + x) * N];
        for (int n = 0; n < N; ++n) op[n] = B.v[0];
        for (int dy = -h; dy <= h; ++dy)
          for (int dx = -h; dx <= h; ++dx) {
            Real kv = K(dy + h, dx + h);
            const Real* zp = &Z.v[std::size_t(cl(y + dy, ph) * pw + cl(x + dx, pw)) * N];
            for (int n = 0; n < N; ++n) op[n] += kv * zp[n];
          }
      }
    int id = push(std::move(out), needs(z) || needs(kernel) || needs(bias), "conv2d");
    record(id, [this, id, z, kernel, bias, ph, pw, k, h] {
      const T& gy = nodes_[id].grad;
      const T& Z = nodes_[z].value;
      const T& K = nodes_[kernel].value;
      int N = Z.cols;
      auto cl = [](int x, int n) { return x < 0 ? 0 : (x >= n ? n - 1 : x); };
      if (needs(bias)) {
        Real s = 0;
        for (Real g : gy.v) s += g;
        grad_acc(bias).v[0] += s;
      }
      if (needs(kernel)) {
        T& gk = grad_acc(kernel);
        for (int y = 0; y < ph; ++y)
          for (int x = 0; x < pw; ++x) {
            const Real* gp = &gy.v[std::size_t(y * pw + x) * N];
            for (int dy = -h; dy <= h; ++dy)
              for (int dx = -h; dx <= h; ++dx) {
                const Real* zp = &Z.v[std::size_t(cl(y + dy, ph) * pw + cl(x + dx, pw)) * N];
                Real s = 0;
                for (int n = 0; n < N; ++n) s += gp[n] * zp[n];
                gk(dy + h, dx + h) += s;
              }
          }
      }
      if (needs(z)) {
        T& gz = grad_acc(z);
        for (int y = 0; y < ph; ++y)
          for (int x = 0; x < pw; ++x) {
            const Real* gp = &gy.v[std::size_t(y * pw + x) * N];
            for (int dy = -h; dy <= h; ++dy)
              for (int dx = -h; dx <= h; ++dx) {
                Real kv = K(dy + h, dx + h);
                Real* zp = &gz.v[std::size_t(cl(y + dy, ph) * pw + cl(x + dx, pw)) * N];
                for (int n = 0; n < N; ++n) zp[n] += kv * gp[n];
              }
          }
      }
    });
    return id;
  }

  // Average pooling over the pixel plane with window == stride, window
  // clipped at the right/bottom edges. a: [ph*pw x N] -> [ncells x N].
  int pool_cells(int a, int ph, int pw, int win) {
    const T& A = val(a);
    if (A.rows != ph * pw) throw DomainError("pool_cells: plane size mismatch");
    int ncy = (ph + win - 1) / win, ncx = (pw + win - 1) / win;
    int N = A.cols;
    T out(ncy * ncx, N);
    for (int cy = 0; cy < ncy; ++cy)
      for (int cx = 0; cx < ncx; ++cx) {
        int y1 = std::min(ph, (cy + 1) * win), x1 = std::min(pw, (cx + 1) * win);
        int cnt = (y1 - cy * win) * (x1 - cx * win);
        Real* op = &out.v[std::size_t(cy * ncx + cx) * N];
        for (int y = cy * win; y < y1; ++y)
          for (int x = cx * win; x < x1; ++x) {
            const Real* ap = &A.v[std::size_t(y * pw + x) * N];
            for (int n = 0; n < N; ++n) op[n] += ap[n];
          }
        for (int n = 0; n < N; ++n) op[n] /= Real(cnt);
      }
    int id = push(std::move(out), needs(a), "pool_cells");
    record(id, [this, id, a, ph, pw, win, ncx] {
      if (!needs(a)) return;
      const T& gy = nodes_[id].grad;
      T& ga = grad_acc(a);
      int N = ga.cols;
      for (int y = 0; y < ph; ++y)
        for (int x = 0; x < pw; ++x) {
          int cy = y / win, cx = x / win;
          int y1 = std::min(ph, (cy + 1) * win), x1 = std::min(pw, (cx + 1) * win);
          Real inv = Real(1) / Real((y1 - cy * win) * (x1 - cx * win));
          const Real* gp = &gy.v[std::size_t(cy * ncx + cx) * N];
          Real* ap = &ga.v[std::size_t(y * pw + x) * N];
          for (int n = 0; n < N; ++n) ap[n] += gp[n] * inv;
        }
    });
    return id;
  }

  // ---- reverse sweep ------------------------------------------------------

  void backward(int loss_id) {
    Node& ln = nodes_[loss_id];
    if (ln.value.size() != 1) throw DomainError("backward: loss must be a scalar");
    ensure_grad(loss_id);
    nodes_[loss_id].grad.v[0] = Real(1);
    for (int i = loss_id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.needs && n.grad_alloc && n.back) n.back();
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    T value;
    T grad;
    bool needs = false;
    bool grad_alloc = false;
    const char* op = "leaf";
    std::string name;
    std::function<void()> back;
  };

  // deque: growing the tape must not invalidate value/grad references
  std::deque<Node> nodes_;
  bool no_grad_ = false;
  bool check_finite_ = true;
  bool check_finite_large_ = true;
  bool fused_ = true;

  const T& val(int id) const { return nodes_[id].value; }
  bool needs(int id) const { return nodes_[id].needs; }

  void ensure_grad(int id) {
    Node& n = nodes_[id];
    if (!n.grad_alloc) {
      n.grad = T::pooled_zero(n.value.rows, n.value.cols);
      n.grad_alloc = true;
    }
  }
  T& grad_acc(int id) {
    ensure_grad(id);
    return nodes_[id].grad;
  }
  // For GEMM sinks, which overwrite every element: the first toucher gets an
  // uninitialized buffer and assigns; later touchers accumulate.
  T& grad_for_gemm(int id, bool& assign) {
    Node& n = nodes_[id];
    assign = !n.grad_alloc;
    if (assign) {
      n.grad = T::uninit(n.value.rows, n.value.cols);
      n.grad_alloc = true;
    }
    return n.grad;
  }

  int push(T value, bool needs_grad, const char* op) {
    if (check_finite_ && (check_finite_large_ || value.size() <= (1u << 20)) &&
        !value.all_finite())
      throw NumericError("non-finite value produced by op '" + std::string(op) + "'");
    nodes_.push_back(Node{std::move(value), T(), needs_grad && !no_grad_, false, op, "", nullptr});
    return int(nodes_.size()) - 1;
  }

  void record(int id, std::function<void()> fn) {
    if (!no_grad_ && nodes_[id].needs) nodes_[id].back = std::move(fn);
  }

  int add_sub(int a, int b, Real sign, const char* op) {
    const T& A = val(a);
    const T& B = val(b);
    if (!A.same_shape(B)) throw DomainError(std::string(op) + ": shape mismatch");
    T out = T::uninit(A.rows, A.cols);
    for (std::size_t i = 0; i < out.size(); ++i) out.v[i] = A.v[i] + sign * B.v[i];
    int id = push(std::move(out), needs(a) || needs(b), op);
    record(id, [this, id, a, b, sign] {
      const T& gy = nodes_[id].grad;
      if (needs(a)) {
        T& ga = grad_acc(a);
        for (std::size_t i = 0; i < gy.size(); ++i) ga.v[i] += gy.v[i];
      }
      if (needs(b)) {
        T& gb = grad_acc(b);
        for (std::size_t i = 0; i < gy.size(); ++i) gb.v[i] += sign * gy.v[i];
      }
    });
    return id;
  }

  template <class F, class DF>
  int unary(int a, const char* op, F f, DF df) {
    const T& A = val(a);
    T out = T::uninit(A.rows, A.cols);
    for (std::size_t i = 0; i < out.size(); ++i) out.v[i] = f(A.v[i]);
    int id = push(std::move(out), needs(a), op);
    record(id, [this, id, a, df] {
      if (!needs(a)) return;
      const T& gy = nodes_[id].grad;
      const T& X = nodes_[a].value;
      const T& Y = nodes_[id].value;
      T& ga = grad_acc(a);
      for (std::size_t i = 0; i < gy.size(); ++i) ga.v[i] += gy.v[i] * df(X.v[i], Y.v[i]);
    });
    return id;
  }
};

using ParamIds = std::map<std::string, int>;  // parameter name -> leaf node id

// A pipeline builds a scalar loss node from parameter leaves.
template <class Real>
using PipelineFn = std::function<int(Graph<Real>&, const ParamIds&)>;

template <class Real>
std::map<std::string, int> make_param_leaves(Graph<Real>& g, const ParamStore<Real>& params,
                                             bool needs_grad = true) {
  std::map<std::string, int> ids;
  for (const auto& e : params.entries)
    ids[e.name] = g.leaf(Tensor<Real>(e.rows, e.cols, e.v), needs_grad, e.name);
  return ids;
}

template <class Real>
std::pair<Real, GradStore<Real>> eval_loss_and_grads(const PipelineFn<Real>& pipeline,
                                                     const ParamStore<Real>& params) {
  Graph<Real> g;
  auto ids = make_param_leaves(g, params, true);
  int loss = pipeline(g, ids);
  g.backward(loss);

  GradStore<Real> grads;
  for (const auto& e : params.entries) {
    auto& ge = grads.add(e.name, e.rows, e.cols);
    int id = ids.at(e.name);
    if (g.has_grad(id)) ge.v = g.grad(id).v;
  }
  if (!grads.all_finite()) throw NumericError("non-finite gradient after backward pass");
  return {g.scalar(loss), std::move(grads)};
}

template <class Real>
Real eval_loss_only(const PipelineFn<Real>& pipeline, const ParamStore<Real>& params) {
  Graph<Real> g;
  g.set_no_grad(true);
  auto ids = make_param_leaves(g, params, false);
  return g.scalar(pipeline(g, ids));
}

template <class Real>
struct FdReport {
  Real max_rel_error = 0;
  std::string worst_param;
  int worst_index = -1;
  Real worst_analytic = 0;
  Real worst_numeric = 0;
};

// Central finite differences over every parameter scalar.
// rel = |analytic - central| / max(1, |central|)
template <class Real>
FdReport<Real> finite_difference_check(const PipelineFn<Real>& pipeline,
                                       const ParamStore<Real>& params, Real epsilon) {
  if (!(epsilon > Real(0))) throw DomainError("finite_difference_check: epsilon must be > 0");
  auto [loss, grads] = eval_loss_and_grads(pipeline, params);
  (void)loss;

  FdReport<Real> report;
  ParamStore<Real> work = params;
  for (std::size_t ei = 0; ei < work.entries.size(); ++ei) {
    auto& entry = work.entries[ei];
    for (std::size_t i = 0; i < entry.v.size(); ++i) {
      Real saved = entry.v[i];
      entry.v[i] = saved + epsilon;
      Real lp = eval_loss_only(pipeline, work);
      entry.v[i] = saved - epsilon;
      Real lm = eval_loss_only(pipeline, work);
      entry.v[i] = saved;
      Real central = (lp - lm) / (2 * epsilon);
      Real analytic = grads.entries[ei].v[i];
      Real rel = std::abs(analytic - central) / std::max(Real(1), std::abs(central));
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = entry.name;
        report.worst_index = int(i);
        report.worst_analytic = analytic;
        report.worst_numeric = central;
      }
    }
  }
  return report;
}

}  // namespace aleth
