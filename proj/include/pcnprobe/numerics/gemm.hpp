#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace pcnprobe::detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

enum class Trans { no, yes };

/// C[m,n] = alpha * op(A) * op(B) + beta * C, all row-major and contiguous.
/// op(A) is m x k, op(B) is k x n.
template <typename T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a, const T* b,
          T beta, T* c) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  MatrixMap<T> C(c, M, N);
  if (beta == T{0}) {
    C.setZero();
  } else if (beta != T{1}) {
    C *= beta;
  }
  if (m == 0 || n == 0 || k == 0) return;
  if (ta == Trans::no && tb == Trans::no) {
    C.noalias() += alpha * (ConstMatrixMap<T>(a, M, K) * ConstMatrixMap<T>(b, K, N));
  } else if (ta == Trans::no && tb == Trans::yes) {
    C.noalias() += alpha * (ConstMatrixMap<T>(a, M, K) * ConstMatrixMap<T>(b, N, K).transpose());
  } else if (ta == Trans::yes && tb == Trans::no) {
    C.noalias() += alpha * (ConstMatrixMap<T>(a, K, M).transpose() * ConstMatrixMap<T>(b, K, N));
  } else {
    C.noalias() += alpha * (ConstMatrixMap<T>(a, K, M).transpose() * ConstMatrixMap<T>(b, N, K).transpose());
  }
}

}  // namespace pcnprobe::detail
