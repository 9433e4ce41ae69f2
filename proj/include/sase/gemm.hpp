#pragma once

// Row-major C = alpha op(A) op(B) + beta C. float and double go through
// CBLAS on a single thread; other types use a plain triple loop.

#include <cblas.h>

#include <cstddef>
#include <type_traits>

namespace sase {

namespace detail {
inline void pin_blas_threads() {
  static const bool once = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)once;
}
}  // namespace detail

template <class T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb, T beta,
          T* c, int ldc) {
  if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
    detail::pin_blas_threads();
    const auto ta = trans_a ? CblasTrans : CblasNoTrans;
    const auto tb = trans_b ? CblasTrans : CblasNoTrans;
    if constexpr (std::is_same_v<T, float>)
      cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    else
      cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  } else {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        T acc = T(0);
        for (int p = 0; p < k; ++p) {
          const T av = trans_a ? a[static_cast<std::size_t>(p) * lda + i] : a[static_cast<std::size_t>(i) * lda + p];
          const T bv = trans_b ? b[static_cast<std::size_t>(j) * ldb + p] : b[static_cast<std::size_t>(p) * ldb + j];
          acc += av * bv;
        }
        T& out = c[static_cast<std::size_t>(i) * ldc + j];
        out = alpha * acc + (beta == T(0) ? T(0) : beta * out);
      }
  }
}

}  // namespace sase
