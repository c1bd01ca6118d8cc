// Rough throughput probe for the GEMM and conv paths; prints GFLOP/s.
#include <chrono>
#include <cstdio>
#include <vector>

#include "perc/gemm.hpp"
#include "perc/rng.hpp"
#include "perc/tensor.hpp"

using namespace perc;

static double now_s() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

int main() {
  Rng rng(1);
  {
    int M = 64, N = 16384, K = 315;
    std::vector<float> a(static_cast<size_t>(M) * K), b(static_cast<size_t>(K) * N),
        c(static_cast<size_t>(M) * N);
    for (auto& v : a) v = rng.next_normal_f();
    for (auto& v : b) v = rng.next_normal_f();
    gemm_nn<float>(M, N, K, a.data(), K, b.data(), N, c.data(), N, false, true);
    int reps = 20;
    double t0 = now_s();
    for (int r = 0; r < reps; ++r)
      gemm_nn<float>(M, N, K, a.data(), K, b.data(), N, c.data(), N, false,
                     true);
    double dt = now_s() - t0;
    double gf = 2.0 * M * N * K * reps / dt / 1e9;
    std::printf("gemm_nn  M=%d N=%d K=%d: %.2f GFLOP/s\n", M, N, K, gf);
  }
  {
    int M = 32, N = 1024, K = 288;
    std::vector<float> a(static_cast<size_t>(M) * K), b(static_cast<size_t>(K) * N),
        c(static_cast<size_t>(M) * N);
    gemm_nn<float>(M, N, K, a.data(), K, b.data(), N, c.data(), N, false, true);
    int reps = 200;
    double t0 = now_s();
    for (int r = 0; r < reps; ++r)
      gemm_nn<float>(M, N, K, a.data(), K, b.data(), N, c.data(), N, false,
                     true);
    double dt = now_s() - t0;
    double gf = 2.0 * M * N * K * reps / dt / 1e9;
    std::printf("gemm_nn  M=%d N=%d K=%d: %.2f GFLOP/s\n", M, N, K, gf);
  }
  {
    // conv fwd+bwd, roughly the acceptance stem shape
    int B = 8, Ci = 35, H = 64, W = 64, Co = 32;
    Rng r2(2);
    auto x = TensorF::randn({B, Ci, H, W}, r2, 1.f, true);
    auto w = TensorF::randn({Co, Ci, 3, 3}, r2, 0.05f, true);
    auto bias = TensorF::zeros({Co}, true);
    // warmup
    {
      auto y = conv2d(x, w, bias, 2, 1);
      auto l = sum_all(y);
      backward(l);
    }
    int reps = 10;
    double t0 = now_s();
    for (int r = 0; r < reps; ++r) {
      x.zero_grad();
      w.zero_grad();
      bias.zero_grad();
      auto y = conv2d(x, w, bias, 2, 1);
      auto l = sum_all(y);
      backward(l);
    }
    double dt = now_s() - t0;
    int Ho = 32, Wo = 32;
    double macs = static_cast<double>(B) * Co * Ho * Wo * Ci * 9;
    double gf = 2.0 * macs * 3 * reps / dt / 1e9;  // fwd + two bwd gemms
    std::printf("conv2d fwd+bwd B=%d %dx%dx%d -> %d: %.2f GFLOP/s (%.1f ms/iter)\n",
                B, Ci, H, W, Co, gf, dt / reps * 1e3);
  }
  return 0;
}
