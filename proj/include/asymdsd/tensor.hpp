#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "asymdsd/common.hpp"

namespace asymdsd {

// Dense row-major tensor. Rank is dynamic but almost everything in the
// pipeline is a (rows x cols) matrix; rank-1 tensors are treated as a
// single row where a matrix is expected.
//
// All matrix kernels below use a fixed accumulation order in which output
// row i depends only on row i of the left operand. That makes per-token
// results bit-identical under removal or permutation of the other tokens,
// which the predictor leakage tests rely on.
template <typename S>
struct TensorT {
  std::vector<int> shape;
  std::vector<S> data;

  TensorT() = default;
  explicit TensorT(std::vector<int> shp, S fill = S(0)) : shape(std::move(shp)) {
    data.assign(size_t(numel_of(shape)), fill);
  }
  static TensorT zeros(std::vector<int> shp) { return TensorT(std::move(shp)); }
  static TensorT full(std::vector<int> shp, S v) { return TensorT(std::move(shp), v); }
  static TensorT from(std::vector<int> shp, std::vector<S> vals) {
    TensorT t;
    t.shape = std::move(shp);
    check(int64_t(vals.size()) == numel_of(t.shape), "tensor: data/shape mismatch");
    t.data = std::move(vals);
    return t;
  }

  static int64_t numel_of(const std::vector<int>& shp) {
    int64_t n = 1;
    for (int d : shp) n *= d;
    return n;
  }
  int64_t numel() const { return int64_t(data.size()); }
  int ndim() const { return int(shape.size()); }

  int rows() const { return ndim() <= 1 ? 1 : shape[0]; }
  int cols() const {
    if (ndim() == 0) return 1;
    if (ndim() == 1) return shape[0];
    int64_t c = 1;
    for (size_t i = 1; i < shape.size(); ++i) c *= shape[i];
    return int(c);
  }

  S& at(int r, int c) { return data[size_t(r) * cols() + c]; }
  S at(int r, int c) const { return data[size_t(r) * cols() + c]; }
  const S* row(int r) const { return data.data() + size_t(r) * cols(); }
  S* row(int r) { return data.data() + size_t(r) * cols(); }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  void fill(S v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  template <typename T>
  TensorT<T> cast() const {
    TensorT<T> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = T(data[i]);
    return out;
  }
};

using Tensor = TensorT<float>;

// C (m x n) = A (m x k) * B (k x n). Accumulates over k in index order;
// the j loop vectorizes without changing per-element rounding.
template <typename S>
void matmul_into(const S* a, const S* b, S* c, int m, int k, int n) {
  std::fill(c, c + size_t(m) * n, S(0));
  for (int i = 0; i < m; ++i) {
    const S* arow = a + size_t(i) * k;
    S* crow = c + size_t(i) * n;
    for (int p = 0; p < k; ++p) {
      const S av = arow[p];
      if (av == S(0)) continue;
      const S* brow = b + size_t(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Dot product with eight fixed accumulator lanes. The lane structure (and
// therefore the rounding) depends only on k, so results are reproducible
// and independent of the surrounding matrix; the split reduction lets the
// compiler vectorize what a strict sequential sum cannot.
template <typename S>
inline S dot_lanes(const S* a, const S* b, int k) {
  S acc[8] = {S(0), S(0), S(0), S(0), S(0), S(0), S(0), S(0)};
  int p = 0;
  for (; p + 8 <= k; p += 8)
    for (int l = 0; l < 8; ++l) acc[l] += a[p + l] * b[p + l];
  for (int l = 0; p < k; ++p, ++l) acc[l] += a[p] * b[p];
  const S s0 = acc[0] + acc[4], s1 = acc[1] + acc[5];
  const S s2 = acc[2] + acc[6], s3 = acc[3] + acc[7];
  return (s0 + s2) + (s1 + s3);
}

// C (m x n) = A (m x k) * B^T with B stored (n x k). Row-contiguous dot
// products: the natural layout for x * W^T linear layers.
template <typename S>
void matmul_nt_into(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + size_t(i) * k;
    S* crow = c + size_t(i) * n;
    for (int j = 0; j < n; ++j)
      crow[j] = dot_lanes(arow, b + size_t(j) * k, k);
  }
}

// C (k x n) += A^T * B with A stored (m x k), B stored (m x n).
template <typename S>
void matmul_tn_acc(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + size_t(i) * k;
    const S* brow = b + size_t(i) * n;
    for (int p = 0; p < k; ++p) {
      const S av = arow[p];
      if (av == S(0)) continue;
      S* crow = c + size_t(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C (m x n) += A (m x k) * B (k x n).
template <typename S>
void matmul_acc(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + size_t(i) * k;
    S* crow = c + size_t(i) * n;
    for (int p = 0; p < k; ++p) {
      const S av = arow[p];
      if (av == S(0)) continue;
      const S* brow = b + size_t(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C (m x n) += A (m x k) * B^T with B stored (n x k).
template <typename S>
void matmul_nt_acc(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + size_t(i) * k;
    S* crow = c + size_t(i) * n;
    for (int j = 0; j < n; ++j)
      crow[j] += dot_lanes(arow, b + size_t(j) * k, k);
  }
}

}  // namespace asymdsd
