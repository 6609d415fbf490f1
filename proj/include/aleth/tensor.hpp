#pragma once

// Dense row-major 2-D tensor. Everything the differentiation engine moves
// around is one of these; matrix products are delegated to Eigen.

#include <Eigen/Core>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "aleth/common.hpp"

namespace aleth {

// Branch-free finiteness scan: the exponent field is all ones exactly for
// Inf/NaN, so min-reducing (bits & mask) ^ mask hits 0 iff any value is
// non-finite. The min reduction vectorizes; a naive isfinite loop does not.
inline bool all_finite_fast(const float* p, std::size_t n) {
  constexpr std::uint32_t mask = 0x7f800000u;
  std::uint32_t lo = mask;
#pragma omp parallel for schedule(static) reduction(min : lo) if (n > (1u << 20))
  for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(n); ++i) {
    std::uint32_t t = (std::bit_cast<std::uint32_t>(p[i]) & mask) ^ mask;
    lo = t < lo ? t : lo;
  }
  return lo != 0;
}

inline bool all_finite_fast(const double* p, std::size_t n) {
  constexpr std::uint64_t mask = 0x7ff0000000000000ull;
  std::uint64_t lo = mask;
#pragma omp parallel for schedule(static) reduction(min : lo) if (n > (1u << 20))
  for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(n); ++i) {
    std::uint64_t t = (std::bit_cast<std::uint64_t>(p[i]) & mask) ^ mask;
    lo = t < lo ? t : lo;
  }
  return lo != 0;
}

namespace detail {

// Recycles large buffers between graph iterations so repeated allocations skip
// both the page faults and the zero-fill. Contents of a taken buffer are stale.
template <class Real>
inline std::unordered_map<std::size_t, std::vector<std::vector<Real>>>& buffer_pool() {
  thread_local std::unordered_map<std::size_t, std::vector<std::vector<Real>>> pool;
  return pool;
}

constexpr std::size_t kPoolMinElems = std::size_t(1) << 14;

template <class Real>
inline std::vector<Real> pool_take(std::size_t n) {
  if (n >= kPoolMinElems) {
    auto& pool = buffer_pool<Real>();
    auto it = pool.find(n);
    if (it != pool.end() && !it->second.empty()) {
      std::vector<Real> v = std::move(it->second.back());
      it->second.pop_back();
      return v;
    }
  }
  return std::vector<Real>(n);
}

template <class Real>
inline void pool_put(std::vector<Real>&& v) {
  if (v.size() >= kPoolMinElems) buffer_pool<Real>()[v.size()].push_back(std::move(v));
}

}  // namespace detail

template <class Real>
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<Real> v;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), v(std::size_t(r) * c, Real(0)) {}
  Tensor(int r, int c, std::vector<Real> data) : rows(r), cols(c), v(std::move(data)) {}

  // pooled buffer with stale contents; caller must overwrite every element
  static Tensor uninit(int r, int c) {
    Tensor t;
    t.rows = r;
    t.cols = c;
    t.v = detail::pool_take<Real>(std::size_t(r) * c);
    return t;
  }
  // pooled buffer, zero-filled
  static Tensor pooled_zero(int r, int c) {
    Tensor t = uninit(r, c);
    std::fill(t.v.begin(), t.v.end(), Real(0));
    return t;
  }
  void recycle() { detail::pool_put(std::move(v)); }

  static Tensor full(int r, int c, Real x) {
    Tensor t = uninit(r, c);
    std::fill(t.v.begin(), t.v.end(), x);
    return t;
  }
  static Tensor scalar(Real x) { return full(1, 1, x); }

  std::size_t size() const { return v.size(); }
  Real& operator()(int r, int c) { return v[std::size_t(r) * cols + c]; }
  Real operator()(int r, int c) const { return v[std::size_t(r) * cols + c]; }
  Real* data() { return v.data(); }
  const Real* data() const { return v.data(); }

  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const { return all_finite_fast(v.data(), v.size()); }
};

namespace detail {

template <class Real>
using EigenMapRM =
    Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class Real>
using EigenCMapRM =
    Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace detail

// c = a * b
template <class Real>
void gemm(const Tensor<Real>& a, const Tensor<Real>& b, Tensor<Real>& c) {
  detail::EigenCMapRM<Real> ma(a.data(), a.rows, a.cols);
  detail::EigenCMapRM<Real> mb(b.data(), b.rows, b.cols);
  detail::EigenMapRM<Real> mc(c.data(), c.rows, c.cols);
  mc.noalias() = ma * mb;
}

// c += a * b
template <class Real>
void gemm_acc(const Tensor<Real>& a, const Tensor<Real>& b, Tensor<Real>& c) {
  detail::EigenCMapRM<Real> ma(a.data(), a.rows, a.cols);
  detail::EigenCMapRM<Real> mb(b.data(), b.rows, b.cols);
  detail::EigenMapRM<Real> mc(c.data(), c.rows, c.cols);
  mc.noalias() += ma * mb;
}

// c += a^T * b, or c = a^T * b when assign
template <class Real>
void gemm_at_b_acc(const Tensor<Real>& a, const Tensor<Real>& b, Tensor<Real>& c,
                   bool assign = false) {
  detail::EigenCMapRM<Real> ma(a.data(), a.rows, a.cols);
  detail::EigenCMapRM<Real> mb(b.data(), b.rows, b.cols);
  detail::EigenMapRM<Real> mc(c.data(), c.rows, c.cols);
  if (assign)
    mc.noalias() = ma.transpose() * mb;
  else
    mc.noalias() += ma.transpose() * mb;
}

// c += a * b^T, or c = a * b^T when assign
template <class Real>
void gemm_a_bt_acc(const Tensor<Real>& a, const Tensor<Real>& b, Tensor<Real>& c,
                   bool assign = false) {
  detail::EigenCMapRM<Real> ma(a.data(), a.rows, a.cols);
  detail::EigenCMapRM<Real> mb(b.data(), b.rows, b.cols);
  detail::EigenMapRM<Real> mc(c.data(), c.rows, c.cols);
  if (assign)
    mc.noalias() = ma * mb.transpose();
  else
    mc.noalias() += ma * mb.transpose();
}

}  // namespace aleth
