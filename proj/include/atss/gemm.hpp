// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef ATSS_GEMM_HPP_
#define ATSS_GEMM_HPP_

// Dense contractions are delegated to Eigen; everything else in the tensor
// engine is hand-rolled. Eigen's own threading is disabled so a gemm call is
// single-threaded and bit-stable; parallelism happens at the sample level.
#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE
#endif
#include <Eigen/Core>

#include <cstdint>

namespace atss::detail {

// Vectorized tree-reduced dot product (plain loops serialize the FP adds).
template <class T>
T dotprod(const T* a, const T* b, int64_t n) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  return (Eigen::Map<const Arr>(a, n) * Eigen::Map<const Arr>(b, n)).sum();
}

// C(m x n) = alpha * op(A) * op(B) + beta * C, all row-major contiguous.
// op(A) is m x k (stored k x m when trans_a), op(B) is k x n.
template <class T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
          T alpha, const T* a, const T* b, T beta, T* c) {
  using Mat =
      Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;

  MMap cm(c, m, n);
  CMap am(a, trans_a ? k : m, trans_a ? m : k);
  CMap bm(b, trans_b ? n : k, trans_b ? k : n);

  if (beta == T(0)) cm.setZero();
  else if (beta != T(1)) cm *= beta;

  if (!trans_a && !trans_b) cm.noalias() += alpha * (am * bm);
  else if (trans_a && !trans_b) cm.noalias() += alpha * (am.transpose() * bm);
  else if (!trans_a && trans_b) cm.noalias() += alpha * (am * bm.transpose());
  else cm.noalias() += alpha * (am.transpose() * bm.transpose());
}

}  // namespace atss::detail

#endif  // ATSS_GEMM_HPP_
