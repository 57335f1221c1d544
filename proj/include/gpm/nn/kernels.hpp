#pragma once

// Dense row-major matrix products.
//
// All three product shapes funnel into one packed micro-kernel. Rows are
// processed in zero-padded blocks and columns in zero-padded tiles, so every
// output element goes through the same instruction sequence wherever it
// sits: permuting input rows permutes output rows bit-exactly, and rows never
// influence each other. Several invariance tests rely on this.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace gpm::nn::kernels {

namespace detail {

constexpr std::size_t kRowBlock = 4;

#if defined(__GNUC__) || defined(__clang__)

template <class T>
void gemm_nn_packed(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  typedef T V __attribute__((vector_size(64)));
  constexpr std::size_t W = 64 / sizeof(T);
  constexpr std::size_t JT = 2 * W;
  constexpr std::size_t RB = kRowBlock;
  const std::size_t Np = (N + JT - 1) / JT * JT;
  std::vector<T> Bp(K * Np, T(0));
  for (std::size_t k = 0; k < K; ++k) std::copy_n(B + k * N, N, Bp.data() + k * Np);
  std::vector<T> Ap(K * RB);
  alignas(64) T out[RB][JT];
  for (std::size_t i = 0; i < M; i += RB) {
    const std::size_t rows = std::min(RB, M - i);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t r = 0; r < RB; ++r) Ap[k * RB + r] = r < rows ? A[(i + r) * K + k] : T(0);
    for (std::size_t j = 0; j < Np; j += JT) {
      V c0[RB], c1[RB];
      for (std::size_t r = 0; r < RB; ++r) {
        c0[r] = V{};
        c1[r] = V{};
      }
      const T* bp = Bp.data() + j;
      const T* ap = Ap.data();
      for (std::size_t k = 0; k < K; ++k, bp += Np, ap += RB) {
        V b0, b1;
        std::memcpy(&b0, bp, sizeof(V));
        std::memcpy(&b1, bp + W, sizeof(V));
        for (std::size_t r = 0; r < RB; ++r) {
          const T a = ap[r];
          c0[r] = c0[r] + a * b0;
          c1[r] = c1[r] + a * b1;
        }
      }
      for (std::size_t r = 0; r < RB; ++r) {
        std::memcpy(out[r], &c0[r], sizeof(V));
        std::memcpy(out[r] + W, &c1[r], sizeof(V));
      }
      const std::size_t cols = std::min(JT, N - j);
      for (std::size_t r = 0; r < rows; ++r) {
        T* c = C + (i + r) * N + j;
        for (std::size_t l = 0; l < cols; ++l) c[l] += out[r][l];
      }
    }
  }
}

#else

template <class T>
void gemm_nn_packed(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  std::vector<T> row(N);
  for (std::size_t i = 0; i < M; ++i) {
    std::fill(row.begin(), row.end(), T(0));
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[i * K + k];
      for (std::size_t j = 0; j < N; ++j) row[j] = row[j] + a * B[k * N + j];
    }
    for (std::size_t j = 0; j < N; ++j) C[i * N + j] += row[j];
  }
}

#endif

template <class T>
std::vector<T> transposed(const T* A, std::size_t rows, std::size_t cols) {
  std::vector<T> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = A[r * cols + c];
  return t;
}

}  // namespace detail

/// C[MxN] += A[MxK] * B[KxN]
template <class T>
void gemm_nn_acc(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  if (M == 0 || N == 0 || K == 0) return;
  detail::gemm_nn_packed(M, N, K, A, B, C);
}

/// C[MxN] += A[MxK] * B[NxK]^T
template <class T>
void gemm_nt_acc(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  if (M == 0 || N == 0 || K == 0) return;
  const auto bt = detail::transposed(B, N, K);
  detail::gemm_nn_packed(M, N, K, A, bt.data(), C);
}

/// C[MxN] += A[KxM]^T * B[KxN]
template <class T>
void gemm_tn_acc(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  if (M == 0 || N == 0 || K == 0) return;
  const auto at = detail::transposed(A, K, M);
  detail::gemm_nn_packed(M, N, K, at.data(), B, C);
}

}  // namespace gpm::nn::kernels
