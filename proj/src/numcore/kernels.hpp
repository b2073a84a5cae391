#pragma once

#include <cstddef>
#include <vector>

// Dense kernels with a fixed accumulation order. Each output row depends only
// on the matching input row, so results do not change with batch composition.
namespace loraloop::num::kernels {

/// C[m,n] += A[m,k] · B[k,n]
inline void gemm_nn_acc(std::size_t m, std::size_t n, std::size_t k, const double* a,
                        const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C[m,n] += A[k,m]ᵀ · B[k,n]
inline void gemm_tn_acc(std::size_t m, std::size_t n, std::size_t k, const double* a,
                        const double* b, double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline std::vector<double> transposed(std::size_t rows, std::size_t cols, const double* src) {
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
  return out;
}

}  // namespace loraloop::num::kernels
