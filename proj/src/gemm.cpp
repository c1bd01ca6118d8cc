#include "perc/gemm.hpp"

#include <algorithm>
#include <cstring>

#include "perc/threads.hpp"

namespace perc {

namespace {

constexpr int kRowTile = 4;
constexpr int kColTile = 128;

// one kRowTile x nb panel of C; k loop outermost, n loop vectorizes
template <typename S>
inline void kernel_nn(int mr, int nb, int K, const S* __restrict a0, int lda,
                      const S* __restrict b, int ldb, S* __restrict c, int ldc,
                      bool accumulate) {
  S acc[kRowTile][kColTile];
  for (int m = 0; m < mr; ++m)
    for (int n = 0; n < nb; ++n) acc[m][n] = S(0);
  for (int k = 0; k < K; ++k) {
    const S* __restrict brow = b + static_cast<int64_t>(k) * ldb;
    for (int m = 0; m < mr; ++m) {
      S amk = a0[static_cast<int64_t>(m) * lda + k];
      S* __restrict accm = acc[m];
      for (int n = 0; n < nb; ++n) accm[n] += amk * brow[n];
    }
  }
  for (int m = 0; m < mr; ++m) {
    S* __restrict crow = c + static_cast<int64_t>(m) * ldc;
    if (accumulate)
      for (int n = 0; n < nb; ++n) crow[n] += acc[m][n];
    else
      for (int n = 0; n < nb; ++n) crow[n] = acc[m][n];
  }
}

}  // namespace

template <typename S>
void gemm_nn(int M, int N, int K, const S* A, int lda, const S* B, int ldb,
             S* C, int ldc, bool accumulate, bool parallel) {
  int mblocks = (M + kRowTile - 1) / kRowTile;
  auto run_block = [&](int64_t bi) {
    int m0 = static_cast<int>(bi) * kRowTile;
    int mr = std::min(kRowTile, M - m0);
    for (int n0 = 0; n0 < N; n0 += kColTile) {
      int nb = std::min(kColTile, N - n0);
      kernel_nn(mr, nb, K, A + static_cast<int64_t>(m0) * lda, lda, B + n0,
                ldb, C + static_cast<int64_t>(m0) * ldc + n0, ldc, accumulate);
    }
  };
  if (parallel)
    parallel_for(mblocks, run_block);
  else
    for (int64_t bi = 0; bi < mblocks; ++bi) run_block(bi);
}

template <typename S>
void gemm_nt(int M, int N, int K, const S* A, int lda, const S* B, int ldb,
             S* C, int ldc, bool accumulate, bool parallel) {
  auto run_row = [&](int64_t m) {
    const S* __restrict arow = A + m * lda;
    S* __restrict crow = C + m * ldc;
    for (int n = 0; n < N; ++n) {
      const S* __restrict brow = B + static_cast<int64_t>(n) * ldb;
      S sum = S(0);
      for (int k = 0; k < K; ++k) sum += arow[k] * brow[k];
      if (accumulate)
        crow[n] += sum;
      else
        crow[n] = sum;
    }
  };
  if (parallel)
    parallel_for(M, run_row);
  else
    for (int64_t m = 0; m < M; ++m) run_row(m);
}

template <typename S>
void transpose_copy(int rows, int cols, const S* src, int lds, S* dst,
                    int ldd) {
  constexpr int T = 32;
  for (int r0 = 0; r0 < rows; r0 += T)
    for (int c0 = 0; c0 < cols; c0 += T) {
      int r1 = std::min(r0 + T, rows), c1 = std::min(c0 + T, cols);
      for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c)
          dst[static_cast<int64_t>(c) * ldd + r] =
              src[static_cast<int64_t>(r) * lds + c];
    }
}

template void gemm_nn<float>(int, int, int, const float*, int, const float*,
                             int, float*, int, bool, bool);
template void gemm_nn<double>(int, int, int, const double*, int, const double*,
                              int, double*, int, bool, bool);
template void gemm_nt<float>(int, int, int, const float*, int, const float*,
                             int, float*, int, bool, bool);
template void gemm_nt<double>(int, int, int, const double*, int, const double*,
                              int, double*, int, bool, bool);
template void transpose_copy<float>(int, int, const float*, int, float*, int);
template void transpose_copy<double>(int, int, const double*, int, double*,
                                     int);

}  // namespace perc
