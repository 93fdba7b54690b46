#pragma once

#include <algorithm>
#include <cstddef>

// Dense kernels behind conv2d and linear. Every output element of the
// forward GEMM accumulates its reduction index in ascending order, so the
// result matches a naive loop nest that sums in the same order.

namespace afnn::kernels {

/// C[M,N] += A[M,K] * B[K,N], all row-major.
template <class T>
void gemm_acc(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m,
              std::size_t k, std::size_t n) {
  constexpr std::size_t kTile = 512;
  for (std::size_t p0 = 0; p0 < n; p0 += kTile) {
    const std::size_t p1 = std::min(n, p0 + kTile);
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      T* __restrict c0 = c + (i + 0) * n;
      T* __restrict c1 = c + (i + 1) * n;
      T* __restrict c2 = c + (i + 2) * n;
      T* __restrict c3 = c + (i + 3) * n;
      for (std::size_t r = 0; r < k; ++r) {
        const T w0 = a[(i + 0) * k + r];
        const T w1 = a[(i + 1) * k + r];
        const T w2 = a[(i + 2) * k + r];
        const T w3 = a[(i + 3) * k + r];
        const T* __restrict br = b + r * n;
        for (std::size_t p = p0; p < p1; ++p) {
          const T v = br[p];
          c0[p] += w0 * v;
          c1[p] += w1 * v;
          c2[p] += w2 * v;
          c3[p] += w3 * v;
        }
      }
    }
    for (; i < m; ++i) {
      T* __restrict ci = c + i * n;
      for (std::size_t r = 0; r < k; ++r) {
        const T w = a[i * k + r];
        const T* __restrict br = b + r * n;
        for (std::size_t p = p0; p < p1; ++p) ci[p] += w * br[p];
      }
    }
  }
}

/// C[K,N] += A[M,K]^T * B[M,N].
template <class T>
void gemm_at_b_acc(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m,
                   std::size_t k, std::size_t n) {
  constexpr std::size_t kTile = 512;
  for (std::size_t p0 = 0; p0 < n; p0 += kTile) {
    const std::size_t p1 = std::min(n, p0 + kTile);
    std::size_t r = 0;
    for (; r + 4 <= k; r += 4) {
      T* __restrict c0 = c + (r + 0) * n;
      T* __restrict c1 = c + (r + 1) * n;
      T* __restrict c2 = c + (r + 2) * n;
      T* __restrict c3 = c + (r + 3) * n;
      for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a + i * k + r;
        const T w0 = ai[0], w1 = ai[1], w2 = ai[2], w3 = ai[3];
        const T* __restrict bi = b + i * n;
        for (std::size_t p = p0; p < p1; ++p) {
          const T v = bi[p];
          c0[p] += w0 * v;
          c1[p] += w1 * v;
          c2[p] += w2 * v;
          c3[p] += w3 * v;
        }
      }
    }
    for (; r < k; ++r) {
      T* __restrict cr = c + r * n;
      for (std::size_t i = 0; i < m; ++i) {
        const T w = a[i * k + r];
        const T* __restrict bi = b + i * n;
        for (std::size_t p = p0; p < p1; ++p) cr[p] += w * bi[p];
      }
    }
  }
}

/// C[M,K] += A[M,N] * B[K,N]^T. Reductions run in 16 independent lanes.
template <class T>
void gemm_a_bt_acc(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m,
                   std::size_t k, std::size_t n) {
  constexpr std::size_t kLanes = 16;
  for (std::size_t i = 0; i < m; ++i) {
    const T* __restrict ai = a + i * n;
    for (std::size_t r = 0; r < k; ++r) {
      const T* __restrict br = b + r * n;
      T acc[kLanes] = {};
      std::size_t p = 0;
      for (; p + kLanes <= n; p += kLanes) {
        for (std::size_t l = 0; l < kLanes; ++l) acc[l] += ai[p + l] * br[p + l];
      }
      T tail = T{0};
      for (; p < n; ++p) tail += ai[p] * br[p];
      T total = tail;
      for (std::size_t l = 0; l < kLanes; ++l) total += acc[l];
      c[i * k + r] += total;
    }
  }
}

}  // namespace afnn::kernels
