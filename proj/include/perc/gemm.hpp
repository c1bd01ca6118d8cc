#pragma once

#include <cstdint>

namespace perc {

// Row-major GEMM kernels. Accumulation over k runs sequentially inside
// each output element, so results are bit-identical for any thread count.
// `parallel` splits over row blocks of C.

// C[M,N] (+)= A[M,K] * B[K,N]
template <typename S>
void gemm_nn(int M, int N, int K, const S* A, int lda, const S* B, int ldb,
             S* C, int ldc, bool accumulate, bool parallel);

// C[M,N] (+)= A[M,K] * B[N,K]^T
template <typename S>
void gemm_nt(int M, int N, int K, const S* A, int lda, const S* B, int ldb,
             S* C, int ldc, bool accumulate, bool parallel);

// dst[c,r] = src[r,c]
template <typename S>
void transpose_copy(int rows, int cols, const S* src, int lds, S* dst, int ldd);

}  // namespace perc
