#pragma once

#include <cstddef>
#include <cstring>

// Dense kernels shared by the autograd ops. Every reduction runs sequentially
// in increasing index order so results are bitwise reproducible for a given
// build, independent of blocking.

namespace perp::kernels {

namespace detail {

template <class T>
struct Simd {
  static constexpr std::size_t bytes = 64;
  static constexpr std::size_t lanes = bytes / sizeof(T);
  typedef T type __attribute__((vector_size(bytes)));

  static type load(const T* p) {
    type v;
    std::memcpy(&v, p, sizeof(v));
    return v;
  }
  static void store(T* p, const type& v) { std::memcpy(p, &v, sizeof(v)); }
  static type splat(T x) {
    type v;
    for (std::size_t l = 0; l < lanes; ++l) v[l] = x;
    return v;
  }
};

// Computes a Rows x (NV * lanes) tile of C. Each accumulator lane sums over k in order.
template <class T, std::size_t Rows, std::size_t NV>
inline void gemm_tile(std::size_t k, std::size_t m, const T* a, std::size_t lda, const T* b, T* c,
                      bool accumulate) {
  using S = Simd<T>;
  using V = typename S::type;
  V acc[Rows][NV];
  for (std::size_t r = 0; r < Rows; ++r) {
    for (std::size_t v = 0; v < NV; ++v) {
      acc[r][v] = accumulate ? S::load(c + r * m + v * S::lanes) : S::splat(T{0});
    }
  }
  for (std::size_t p = 0; p < k; ++p) {
    V bv[NV];
    for (std::size_t v = 0; v < NV; ++v) bv[v] = S::load(b + p * m + v * S::lanes);
    for (std::size_t r = 0; r < Rows; ++r) {
      const V av = S::splat(a[r * lda + p]);
      for (std::size_t v = 0; v < NV; ++v) acc[r][v] += av * bv[v];
    }
  }
  for (std::size_t r = 0; r < Rows; ++r) {
    for (std::size_t v = 0; v < NV; ++v) S::store(c + r * m + v * S::lanes, acc[r][v]);
  }
}

template <class T, std::size_t Rows>
inline void gemm_rows(std::size_t k, std::size_t m, const T* a, std::size_t lda, const T* b, T* c,
                      bool accumulate) {
  using S = Simd<T>;
  std::size_t j = 0;
  for (; j + 4 * S::lanes <= m; j += 4 * S::lanes) {
    gemm_tile<T, Rows, 4>(k, m, a, lda, b + j, c + j, accumulate);
  }
  for (; j + 2 * S::lanes <= m; j += 2 * S::lanes) {
    gemm_tile<T, Rows, 2>(k, m, a, lda, b + j, c + j, accumulate);
  }
  for (; j + S::lanes <= m; j += S::lanes) {
    gemm_tile<T, Rows, 1>(k, m, a, lda, b + j, c + j, accumulate);
  }
  for (; j < m; ++j) {
    for (std::size_t r = 0; r < Rows; ++r) {
      T acc = accumulate ? c[r * m + j] : T{0};
      for (std::size_t p = 0; p < k; ++p) acc += a[r * lda + p] * b[p * m + j];
      c[r * m + j] = acc;
    }
  }
}

}  // namespace detail

/// C[n x m] = A[n x k] * B[k x m], or C += A * B when accumulate is set.
template <class T>
void gemm(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c, bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) detail::gemm_rows<T, 4>(k, m, a + i * k, k, b, c + i * m, accumulate);
  for (; i < n; ++i) detail::gemm_rows<T, 1>(k, m, a + i * k, k, b, c + i * m, accumulate);
}

/// dst[m x n] = transpose(src[n x m]).
template <class T>
void transpose(std::size_t n, std::size_t m, const T* src, T* dst) {
  constexpr std::size_t blk = 32;
  for (std::size_t i0 = 0; i0 < n; i0 += blk) {
    const std::size_t i1 = i0 + blk < n ? i0 + blk : n;
    for (std::size_t j0 = 0; j0 < m; j0 += blk) {
      const std::size_t j1 = j0 + blk < m ? j0 + blk : m;
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) dst[j * n + i] = src[i * m + j];
      }
    }
  }
}

}  // namespace perp::kernels
