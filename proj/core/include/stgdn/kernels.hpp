#pragma once

// Small dense kernels shared by the autodiff ops and the fused model ops.
// All matrices are row-major and every routine accumulates into its output.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>

namespace stgdn::kernels {

// C[n x m] += A[n x k] * B[k x m]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = c + i * m;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = ai[p];
      if (s == 0.0) continue;
      const double* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += s * bp[j];
    }
  }
}

// C[n x k] += A[n x m] * B^T, with B stored [k x m]
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t m, std::size_t k) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * m;
    double* ci = c + i * k;
    for (std::size_t j = 0; j < k; ++j) {
      const double* bj = b + j * m;
      double s = 0.0;
      for (std::size_t q = 0; q < m; ++q) s += ai[q] * bj[q];
      ci[j] += s;
    }
  }
}

// C[k x m] += A^T * B, with A stored [n x k] and B stored [n x m]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = ai[p];
      if (s == 0.0) continue;
      double* cp = c + p * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += s * bi[j];
    }
  }
}

// out = softmax(in), max-subtracted. Overwrites out.
inline void softmax(std::span<const double> in, std::span<double> out) {
  const double mx = *std::max_element(in.begin(), in.end());
  double z = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = std::exp(in[i] - mx);
    z += out[i];
  }
  for (auto& x : out) x /= z;
}

inline double leaky(double x, double slope) { return x >= 0.0 ? x : slope * x; }
inline double leaky_grad(double x, double slope) { return x >= 0.0 ? 1.0 : slope; }

}  // namespace stgdn::kernels
