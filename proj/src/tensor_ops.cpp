#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "perc/gemm.hpp"
#include "perc/tensor.hpp"
#include "perc/threads.hpp"

namespace perc {

namespace {

template <typename S>
using NodePtr = std::shared_ptr<detail::Node<S>>;

template <typename S>
Tensor<S> make_op(Shape shape, std::vector<S> value,
                  std::vector<NodePtr<S>> parents,
                  std::function<void(detail::Node<S>&)> fn) {
  auto node = std::make_shared<detail::Node<S>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool req = false;
  if (grad_enabled())
    for (const auto& p : parents) req = req || p->requires_grad;
  if (req) {
    node->requires_grad = true;
    node->leaf = false;
    node->parents = std::move(parents);
    node->backward_fn = std::move(fn);
  }
  return Tensor<S>::wrap(std::move(node));
}

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b,
                      const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "add");
  int64_t n = a.numel();
  std::vector<S> out(n);
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  for (int64_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
  return make_op<S>(a.shape(), std::move(out), {a.node(), b.node()},
                    [](detail::Node<S>& self) {
                      auto& ga = *self.parents[0];
                      auto& gb = *self.parents[1];
                      const S* g = self.grad.data();
                      int64_t n = self.numel();
                      if (ga.requires_grad) {
                        ga.ensure_grad();
                        for (int64_t i = 0; i < n; ++i) ga.grad[i] += g[i];
                      }
                      if (gb.requires_grad) {
                        gb.ensure_grad();
                        for (int64_t i = 0; i < n; ++i) gb.grad[i] += g[i];
                      }
                    });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "sub");
  int64_t n = a.numel();
  std::vector<S> out(n);
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  for (int64_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i];
  return make_op<S>(a.shape(), std::move(out), {a.node(), b.node()},
                    [](detail::Node<S>& self) {
                      auto& ga = *self.parents[0];
                      auto& gb = *self.parents[1];
                      const S* g = self.grad.data();
                      int64_t n = self.numel();
                      if (ga.requires_grad) {
                        ga.ensure_grad();
                        for (int64_t i = 0; i < n; ++i) ga.grad[i] += g[i];
                      }
                      if (gb.requires_grad) {
                        gb.ensure_grad();
                        for (int64_t i = 0; i < n; ++i) gb.grad[i] -= g[i];
                      }
                    });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "mul");
  int64_t n = a.numel();
  std::vector<S> out(n);
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  for (int64_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
  return make_op<S>(a.shape(), std::move(out), {a.node(), b.node()},
                    [](detail::Node<S>& self) {
                      auto& na = *self.parents[0];
                      auto& nb = *self.parents[1];
                      const S* g = self.grad.data();
                      int64_t n = self.numel();
                      if (na.requires_grad) {
                        na.ensure_grad();
                        for (int64_t i = 0; i < n; ++i)
                          na.grad[i] += g[i] * nb.value[i];
                      }
                      if (nb.requires_grad) {
                        nb.ensure_grad();
                        for (int64_t i = 0; i < n; ++i)
                          nb.grad[i] += g[i] * na.value[i];
                      }
                    });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  int64_t n = a.numel();
  std::vector<S> out(n);
  const S* pa = a.data().data();
  for (int64_t i = 0; i < n; ++i) out[i] = pa[i] + c;
  return make_op<S>(a.shape(), std::move(out), {a.node()},
                    [](detail::Node<S>& self) {
                      auto& na = *self.parents[0];
                      if (!na.requires_grad) return;
                      na.ensure_grad();
                      int64_t n = self.numel();
                      for (int64_t i = 0; i < n; ++i)
                        na.grad[i] += self.grad[i];
                    });
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
  int64_t n = a.numel();
  std::vector<S> out(n);
  const S* pa = a.data().data();
  for (int64_t i = 0; i < n; ++i) out[i] = pa[i] * c;
  return make_op<S>(a.shape(), std::move(out), {a.node()},
                    [c](detail::Node<S>& self) {
                      auto& na = *self.parents[0];
                      if (!na.requires_grad) return;
                      na.ensure_grad();
                      int64_t n = self.numel();
                      for (int64_t i = 0; i < n; ++i)
                        na.grad[i] += c * self.grad[i];
                    });
}

template <typename S>
Tensor<S> silu(const Tensor<S>& x) {
  int64_t n = x.numel();
  std::vector<S> out(n);
  const S* px = x.data().data();
  parallel_for((n + 16383) / 16384, [&](int64_t blk) {
    int64_t lo = blk * 16384, hi = std::min(lo + 16384, n);
    for (int64_t i = lo; i < hi; ++i) {
      S sg = S(1) / (S(1) + std::exp(-px[i]));
      out[static_cast<size_t>(i)] = px[i] * sg;
    }
  });
  return make_op<S>(x.shape(), std::move(out), {x.node()},
                    [](detail::Node<S>& self) {
                      auto& nx = *self.parents[0];
                      if (!nx.requires_grad) return;
                      nx.ensure_grad();
                      int64_t n = self.numel();
                      const S* px = nx.value.data();
                      const S* g = self.grad.data();
                      S* gx = nx.grad.data();
                      for (int64_t i = 0; i < n; ++i) {
                        S sg = S(1) / (S(1) + std::exp(-px[i]));
                        gx[i] += g[i] * sg * (S(1) + px[i] * (S(1) - sg));
                      }
                    });
}

template <typename S>
Tensor<S> add_bcast0(const Tensor<S>& x, const Tensor<S>& b) {
  int64_t n = x.numel();
  int64_t bn = b.numel();
  if (bn == 0 || n % bn != 0)
    throw std::invalid_argument("add_bcast0: sizes incompatible");
  std::vector<S> out(n);
  const S* px = x.data().data();
  const S* pb = b.data().data();
  for (int64_t i = 0; i < n; ++i) out[i] = px[i] + pb[i % bn];
  return make_op<S>(x.shape(), std::move(out), {x.node(), b.node()},
                    [bn](detail::Node<S>& self) {
                      auto& nx = *self.parents[0];
                      auto& nb = *self.parents[1];
                      const S* g = self.grad.data();
                      int64_t n = self.numel();
                      if (nx.requires_grad) {
                        nx.ensure_grad();
                        for (int64_t i = 0; i < n; ++i) nx.grad[i] += g[i];
                      }
                      if (nb.requires_grad) {
                        nb.ensure_grad();
                        for (int64_t i = 0; i < n; ++i)
                          nb.grad[i % bn] += g[i];
                      }
                    });
}

template <typename S>
Tensor<S> add_channel_bias(const Tensor<S>& x, const Tensor<S>& b) {
  if (x.rank() != 4 || b.rank() != 1 || b.dim(0) != x.dim(1))
    throw std::invalid_argument("add_channel_bias: want [B,C,H,W] and [C]");
  int B = x.dim(0), C = x.dim(1);
  int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
  std::vector<S> out(x.numel());
  const S* px = x.data().data();
  const S* pb = b.data().data();
  for (int bi = 0; bi < B; ++bi)
    for (int c = 0; c < C; ++c) {
      const S* src = px + (static_cast<int64_t>(bi) * C + c) * hw;
      S* dst = out.data() + (static_cast<int64_t>(bi) * C + c) * hw;
      S bias = pb[c];
      for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] + bias;
    }
  return make_op<S>(x.shape(), std::move(out), {x.node(), b.node()},
                    [B, C, hw](detail::Node<S>& self) {
                      auto& nx = *self.parents[0];
                      auto& nb = *self.parents[1];
                      const S* g = self.grad.data();
                      if (nx.requires_grad) {
                        nx.ensure_grad();
                        int64_t n = self.numel();
                        for (int64_t i = 0; i < n; ++i) nx.grad[i] += g[i];
                      }
                      if (nb.requires_grad) {
                        nb.ensure_grad();
                        for (int bi = 0; bi < B; ++bi)
                          for (int c = 0; c < C; ++c) {
                            const S* gr =
                                g + (static_cast<int64_t>(bi) * C + c) * hw;
                            S s = S(0);
                            for (int64_t i = 0; i < hw; ++i) s += gr[i];
                            nb.grad[c] += s;
                          }
                      }
                    });
}

template <typename S>
Tensor<S> add_channel_bias_batched(const Tensor<S>& x, const Tensor<S>& b) {
  if (x.rank() != 4 || b.rank() != 2 || b.dim(0) != x.dim(0) ||
      b.dim(1) != x.dim(1))
    throw std::invalid_argument(
        "add_channel_bias_batched: want [B,C,H,W] and [B,C]");
  int B = x.dim(0), C = x.dim(1);
  int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
  std::vector<S> out(x.numel());
  const S* px = x.data().data();
  const S* pb = b.data().data();
  for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
    const S* src = px + bc * hw;
    S* dst = out.data() + bc * hw;
    S bias = pb[bc];
    for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] + bias;
  }
  return make_op<S>(x.shape(), std::move(out), {x.node(), b.node()},
                    [B, C, hw](detail::Node<S>& self) {
                      auto& nx = *self.parents[0];
                      auto& nb = *self.parents[1];
                      const S* g = self.grad.data();
                      if (nx.requires_grad) {
                        nx.ensure_grad();
                        int64_t n = self.numel();
                        for (int64_t i = 0; i < n; ++i) nx.grad[i] += g[i];
                      }
                      if (nb.requires_grad) {
                        nb.ensure_grad();
                        for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C;
                             ++bc) {
                          const S* gr = g + bc * hw;
                          S s = S(0);
                          for (int64_t i = 0; i < hw; ++i) s += gr[i];
                          nb.grad[bc] += s;
                        }
                      }
                    });
}

// ------------------------------------------------------------- linear algebra

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: want [M,K]x[K,N], got " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<S> out(static_cast<int64_t>(M) * N);
  gemm_nn<S>(M, N, K, a.data().data(), K, b.data().data(), N, out.data(), N,
             false, true);
  return make_op<S>({M, N}, std::move(out), {a.node(), b.node()},
                    [M, K, N](detail::Node<S>& self) {
                      auto& na = *self.parents[0];
                      auto& nb = *self.parents[1];
                      const S* g = self.grad.data();
                      if (na.requires_grad) {
                        na.ensure_grad();
                        // dA = g * B^T
                        gemm_nt<S>(M, K, N, g, N, nb.value.data(), N,
                                   na.grad.data(), K, true, true);
                      }
                      if (nb.requires_grad) {
                        nb.ensure_grad();
                        // dB = A^T * g
                        std::vector<S> at(static_cast<int64_t>(K) * M);
                        transpose_copy<S>(M, K, na.value.data(), K, at.data(),
                                          M);
                        gemm_nn<S>(K, N, M, at.data(), M, g, N,
                                   nb.grad.data(), N, true, true);
                      }
                    });
}

template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(1))
    throw std::invalid_argument("bmm: want [B,M,K]x[B,K,N], got " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  int B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  std::vector<S> out(static_cast<int64_t>(B) * M * N);
  parallel_for(B, [&](int64_t bi) {
    gemm_nn<S>(M, N, K, a.data().data() + bi * M * K, K,
               b.data().data() + bi * K * N, N, out.data() + bi * M * N, N,
               false, false);
  });
  return make_op<S>(
      {B, M, N}, std::move(out), {a.node(), b.node()},
      [B, M, K, N](detail::Node<S>& self) {
        auto& na = *self.parents[0];
        auto& nb = *self.parents[1];
        const S* g = self.grad.data();
        if (na.requires_grad) {
          na.ensure_grad();
          parallel_for(B, [&](int64_t bi) {
            gemm_nt<S>(M, K, N, g + bi * M * N, N, nb.value.data() + bi * K * N,
                       N, na.grad.data() + bi * M * K, K, true, false);
          });
        }
        if (nb.requires_grad) {
          nb.ensure_grad();
          parallel_for(B, [&](int64_t bi) {
            std::vector<S> at(static_cast<int64_t>(K) * M);
            transpose_copy<S>(M, K, na.value.data() + bi * M * K, K, at.data(),
                              M);
            gemm_nn<S>(K, N, M, at.data(), M, g + bi * M * N, N,
                       nb.grad.data() + bi * K * N, N, true, false);
          });
        }
      });
}

template <typename S>
Tensor<S> transpose_last2(const Tensor<S>& x) {
  if (x.rank() != 2 && x.rank() != 3)
    throw std::invalid_argument("transpose_last2: want rank 2 or 3");
  int B = x.rank() == 3 ? x.dim(0) : 1;
  int M = x.dim(x.rank() - 2), N = x.dim(x.rank() - 1);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  std::vector<S> out(x.numel());
  for (int bi = 0; bi < B; ++bi)
    transpose_copy<S>(M, N, x.data().data() + static_cast<int64_t>(bi) * M * N,
                      N, out.data() + static_cast<int64_t>(bi) * M * N, M);
  return make_op<S>(out_shape, std::move(out), {x.node()},
                    [B, M, N](detail::Node<S>& self) {
                      auto& nx = *self.parents[0];
                      if (!nx.requires_grad) return;
                      nx.ensure_grad();
                      // transpose the gradient back and accumulate
                      for (int bi = 0; bi < B; ++bi) {
                        const S* g =
                            self.grad.data() + static_cast<int64_t>(bi) * M * N;
                        S* gx =
                            nx.grad.data() + static_cast<int64_t>(bi) * M * N;
                        for (int n = 0; n < N; ++n)
                          for (int m = 0; m < M; ++m)
                            gx[static_cast<int64_t>(m) * N + n] +=
                                g[static_cast<int64_t>(n) * M + m];
                      }
                    });
}

// ----------------------------------------------------------------------- conv

namespace {

struct ConvDims {
  int B, Ci, H, W, Co, kh, kw, stride, pad, Ho, Wo;
  int64_t K() const { return static_cast<int64_t>(Ci) * kh * kw; }
  int64_t N() const { return static_cast<int64_t>(Ho) * Wo; }
};

template <typename S>
void im2col(const S* x, const ConvDims& d, S* col) {
  // col is K x N for one image; x points at that image's [Ci,H,W] block
  int64_t N = d.N();
  for (int ci = 0; ci < d.Ci; ++ci) {
    const S* plane = x + static_cast<int64_t>(ci) * d.H * d.W;
    for (int ky = 0; ky < d.kh; ++ky)
      for (int kx = 0; kx < d.kw; ++kx) {
        S* row =
            col + ((static_cast<int64_t>(ci) * d.kh + ky) * d.kw + kx) * N;
        for (int oy = 0; oy < d.Ho; ++oy) {
          int iy = oy * d.stride + ky - d.pad;
          S* dst = row + static_cast<int64_t>(oy) * d.Wo;
          if (iy < 0 || iy >= d.H) {
            std::fill(dst, dst + d.Wo, S(0));
            continue;
          }
          const S* src = plane + static_cast<int64_t>(iy) * d.W;
          if (d.stride == 1) {
            int ix0 = kx - d.pad;
            int lo = std::max(0, -ix0);
            int hi = std::min(d.Wo, d.W - ix0);
            for (int ox = 0; ox < lo; ++ox) dst[ox] = S(0);
            if (hi > lo)
              std::memcpy(dst + lo, src + ix0 + lo,
                          static_cast<size_t>(hi - lo) * sizeof(S));
            for (int ox = std::max(lo, hi); ox < d.Wo; ++ox) dst[ox] = S(0);
          } else {
            for (int ox = 0; ox < d.Wo; ++ox) {
              int ix = ox * d.stride + kx - d.pad;
              dst[ox] = (ix >= 0 && ix < d.W)
                            ? src[ix]
                            : S(0);
            }
          }
        }
      }
  }
}

template <typename S>
void col2im_add(const S* col, const ConvDims& d, S* gx) {
  int64_t N = d.N();
  for (int ci = 0; ci < d.Ci; ++ci) {
    S* plane = gx + static_cast<int64_t>(ci) * d.H * d.W;
    for (int ky = 0; ky < d.kh; ++ky)
      for (int kx = 0; kx < d.kw; ++kx) {
        const S* row =
            col + ((static_cast<int64_t>(ci) * d.kh + ky) * d.kw + kx) * N;
        for (int oy = 0; oy < d.Ho; ++oy) {
          int iy = oy * d.stride + ky - d.pad;
          if (iy < 0 || iy >= d.H) continue;
          const S* src = row + static_cast<int64_t>(oy) * d.Wo;
          S* dst = plane + static_cast<int64_t>(iy) * d.W;
          for (int ox = 0; ox < d.Wo; ++ox) {
            int ix = ox * d.stride + kx - d.pad;
            if (ix >= 0 && ix < d.W) dst[ix] += src[ox];
          }
        }
      }
  }
}

}  // namespace

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                 int stride, int padding) {
  if (x.rank() != 4 || w.rank() != 4)
    throw std::invalid_argument("conv2d: want [B,Ci,H,W] and [Co,Ci,kh,kw]");
  if (w.dim(1) != x.dim(1))
    throw std::invalid_argument("conv2d: channel mismatch, input " +
                                shape_str(x.shape()) + " kernel " +
                                shape_str(w.shape()));
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv2d: negative padding");
  ConvDims d;
  d.B = x.dim(0);
  d.Ci = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.Co = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.stride = stride;
  d.pad = padding;
  d.Ho = (d.H + 2 * padding - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * padding - d.kw) / stride + 1;
  if (d.H + 2 * padding < d.kh || d.W + 2 * padding < d.kw)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  bool with_bias = bias.defined();
  if (with_bias && (bias.rank() != 1 || bias.dim(0) != d.Co))
    throw std::invalid_argument("conv2d: bias must be [Co]");

  int64_t K = d.K(), N = d.N();
  std::vector<S> col_all(static_cast<int64_t>(d.B) * K * N);
  const S* px = x.data().data();
  parallel_for(d.B, [&](int64_t bi) {
    im2col<S>(px + bi * d.Ci * d.H * d.W, d, col_all.data() + bi * K * N);
  });

  std::vector<S> out(static_cast<int64_t>(d.B) * d.Co * N);
  const S* pw = w.data().data();
  if (d.B >= max_threads()) {
    parallel_for(d.B, [&](int64_t bi) {
      gemm_nn<S>(d.Co, static_cast<int>(N), static_cast<int>(K), pw,
                 static_cast<int>(K), col_all.data() + bi * K * N,
                 static_cast<int>(N), out.data() + bi * d.Co * N,
                 static_cast<int>(N), false, false);
    });
  } else {
    for (int bi = 0; bi < d.B; ++bi)
      gemm_nn<S>(d.Co, static_cast<int>(N), static_cast<int>(K), pw,
                 static_cast<int>(K), col_all.data() + bi * K * N,
                 static_cast<int>(N), out.data() + static_cast<int64_t>(bi) * d.Co * N,
                 static_cast<int>(N), false, true);
  }
  if (with_bias) {
    const S* pb = bias.data().data();
    for (int bi = 0; bi < d.B; ++bi)
      for (int c = 0; c < d.Co; ++c) {
        S* dst = out.data() + (static_cast<int64_t>(bi) * d.Co + c) * N;
        S bv = pb[c];
        for (int64_t i = 0; i < N; ++i) dst[i] += bv;
      }
  }

  std::vector<NodePtr<S>> parents = {x.node(), w.node()};
  if (with_bias) parents.push_back(bias.node());
  auto fn = [d, with_bias](detail::Node<S>& self) {
    auto& nx = *self.parents[0];
    auto& nw = *self.parents[1];
    int64_t K = d.K(), N = d.N();
    const S* g = self.grad.data();

    bool need_col = nw.requires_grad;
    std::vector<S> col_all;
    if (need_col) {
      col_all.resize(static_cast<int64_t>(d.B) * K * N);
      const S* px = nx.value.data();
      parallel_for(d.B, [&](int64_t bi) {
        im2col<S>(px + bi * d.Ci * d.H * d.W, d, col_all.data() + bi * K * N);
      });
    }

    if (nw.requires_grad) {
      nw.ensure_grad();
      for (int bi = 0; bi < d.B; ++bi)
        gemm_nt<S>(d.Co, static_cast<int>(K), static_cast<int>(N),
                   g + static_cast<int64_t>(bi) * d.Co * N,
                   static_cast<int>(N), col_all.data() + static_cast<int64_t>(bi) * K * N,
                   static_cast<int>(N), nw.grad.data(), static_cast<int>(K),
                   true, true);
    }
    if (nx.requires_grad) {
      nx.ensure_grad();
      std::vector<S> wt(static_cast<int64_t>(K) * d.Co);
      transpose_copy<S>(d.Co, static_cast<int>(K), nw.value.data(),
                        static_cast<int>(K), wt.data(), d.Co);
      parallel_for(d.B, [&](int64_t bi) {
        std::vector<S> dcol(K * N);
        gemm_nn<S>(static_cast<int>(K), static_cast<int>(N), d.Co, wt.data(),
                   d.Co, g + bi * d.Co * N, static_cast<int>(N), dcol.data(),
                   static_cast<int>(N), false, d.B < max_threads());
        col2im_add<S>(dcol.data(), d, nx.grad.data() + bi * d.Ci * d.H * d.W);
      });
    }
    if (with_bias) {
      auto& nb = *self.parents[2];
      if (nb.requires_grad) {
        nb.ensure_grad();
        for (int bi = 0; bi < d.B; ++bi)
          for (int c = 0; c < d.Co; ++c) {
            const S* gr = g + (static_cast<int64_t>(bi) * d.Co + c) * N;
            S s = S(0);
            for (int64_t i = 0; i < N; ++i) s += gr[i];
            nb.grad[c] += s;
          }
      }
    }
  };
  return make_op<S>({d.B, d.Co, d.Ho, d.Wo}, std::move(out),
                    std::move(parents), std::move(fn));
}

template <typename S>
Tensor<S> upsample_nearest(const Tensor<S>& x, int factor) {
  if (x.rank() != 4) throw std::invalid_argument("upsample: want [B,C,H,W]");
  if (factor < 1) throw std::invalid_argument("upsample: factor must be >= 1");
  int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int Ho = H * factor, Wo = W * factor;
  std::vector<S> out(static_cast<int64_t>(B) * C * Ho * Wo);
  const S* px = x.data().data();
  for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
    const S* src = px + bc * H * W;
    S* dst = out.data() + bc * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      const S* srow = src + static_cast<int64_t>(oy / factor) * W;
      S* drow = dst + static_cast<int64_t>(oy) * Wo;
      for (int ox = 0; ox < Wo; ++ox) drow[ox] = srow[ox / factor];
    }
  }
  return make_op<S>({B, C, Ho, Wo}, std::move(out), {x.node()},
                    [B, C, H, W, factor](detail::Node<S>& self) {
                      auto& nx = *self.parents[0];
                      if (!nx.requires_grad) return;
                      nx.ensure_grad();
                      int Ho = H * factor, Wo = W * factor;
                      const S* g = self.grad.data();
                      for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C;
                           ++bc) {
                        const S* gsrc = g + bc * Ho * Wo;
                        S* gdst = nx.grad.data() + bc * H * W;
                        for (int oy = 0; oy < Ho; ++oy) {
                          const S* grow = gsrc + static_cast<int64_t>(oy) * Wo;
                          S* drow = gdst + static_cast<int64_t>(oy / factor) * W;
                          for (int ox = 0; ox < Wo; ++ox)
                            drow[ox / factor] += grow[ox];
                        }
                      }
                    });
}

// -------------------------------------------------------------- normalization

template <typename S>
Tensor<S> group_norm(const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& beta, int groups, S eps) {
  if (x.rank() != 4) throw std::invalid_argument("group_norm: want [B,C,H,W]");
  int B = x.dim(0), C = x.dim(1);
  int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
  if (groups < 1 || C % groups != 0)
    throw std::invalid_argument("group_norm: groups must divide channels");
  if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 ||
      beta.dim(0) != C)
    throw std::invalid_argument("group_norm: gamma/beta must be [C]");
  int cg = C / groups;
  int64_t m = cg * hw;

  std::vector<S> out(x.numel());
  std::vector<S> mean(static_cast<size_t>(B) * groups);
  std::vector<S> inv(static_cast<size_t>(B) * groups);
  const S* px = x.data().data();
  const S* pg = gamma.data().data();
  const S* pb = beta.data().data();
  parallel_for(static_cast<int64_t>(B) * groups, [&](int64_t bg) {
    int bi = static_cast<int>(bg) / groups;
    int gi = static_cast<int>(bg) % groups;
    const S* src = px + (static_cast<int64_t>(bi) * C + gi * cg) * hw;
    S mu = S(0);
    for (int64_t i = 0; i < m; ++i) mu += src[i];
    mu /= static_cast<S>(m);
    S var = S(0);
    for (int64_t i = 0; i < m; ++i) {
      S dx = src[i] - mu;
      var += dx * dx;
    }
    var /= static_cast<S>(m);
    S iv = S(1) / std::sqrt(var + eps);
    mean[bg] = mu;
    inv[bg] = iv;
    S* dst = out.data() + (static_cast<int64_t>(bi) * C + gi * cg) * hw;
    for (int c = 0; c < cg; ++c) {
      S gsc = pg[gi * cg + c], bsc = pb[gi * cg + c];
      const S* s = src + static_cast<int64_t>(c) * hw;
      S* o = dst + static_cast<int64_t>(c) * hw;
      for (int64_t i = 0; i < hw; ++i) o[i] = gsc * (s[i] - mu) * iv + bsc;
    }
  });

  auto fn = [B, C, groups, cg, hw, m, mean, inv](detail::Node<S>& self) {
    auto& nx = *self.parents[0];
    auto& ng = *self.parents[1];
    auto& nb = *self.parents[2];
    const S* px = nx.value.data();
    const S* pg = ng.value.data();
    const S* g = self.grad.data();
    if (ng.requires_grad) ng.ensure_grad();
    if (nb.requires_grad) nb.ensure_grad();
    if (nx.requires_grad) nx.ensure_grad();
    for (int bi = 0; bi < B; ++bi)
      for (int gi = 0; gi < groups; ++gi) {
        int64_t base = (static_cast<int64_t>(bi) * C + gi * cg) * hw;
        S mu = mean[static_cast<size_t>(bi) * groups + gi];
        S iv = inv[static_cast<size_t>(bi) * groups + gi];
        if (ng.requires_grad || nb.requires_grad) {
          for (int c = 0; c < cg; ++c) {
            const S* s = px + base + static_cast<int64_t>(c) * hw;
            const S* gr = g + base + static_cast<int64_t>(c) * hw;
            S dg = S(0), db = S(0);
            for (int64_t i = 0; i < hw; ++i) {
              dg += gr[i] * (s[i] - mu) * iv;
              db += gr[i];
            }
            if (ng.requires_grad) ng.grad[gi * cg + c] += dg;
            if (nb.requires_grad) nb.grad[gi * cg + c] += db;
          }
        }
        if (nx.requires_grad) {
          // d = g*gamma; dx = iv*(d - mean(d) - xhat*mean(d*xhat))
          S sum_d = S(0), sum_dx = S(0);
          for (int c = 0; c < cg; ++c) {
            const S* s = px + base + static_cast<int64_t>(c) * hw;
            const S* gr = g + base + static_cast<int64_t>(c) * hw;
            S gsc = pg[gi * cg + c];
            for (int64_t i = 0; i < hw; ++i) {
              S dv = gr[i] * gsc;
              sum_d += dv;
              sum_dx += dv * (s[i] - mu) * iv;
            }
          }
          S mean_d = sum_d / static_cast<S>(m);
          S mean_dx = sum_dx / static_cast<S>(m);
          for (int c = 0; c < cg; ++c) {
            const S* s = px + base + static_cast<int64_t>(c) * hw;
            const S* gr = g + base + static_cast<int64_t>(c) * hw;
            S* gx = nx.grad.data() + base + static_cast<int64_t>(c) * hw;
            S gsc = pg[gi * cg + c];
            for (int64_t i = 0; i < hw; ++i) {
              S xh = (s[i] - mu) * iv;
              gx[i] += iv * (gr[i] * gsc - mean_d - xh * mean_dx);
            }
          }
        }
      }
  };
  return make_op<S>(x.shape(), std::move(out),
                    {x.node(), gamma.node(), beta.node()}, std::move(fn));
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& beta, S eps) {
  if (x.rank() < 1) throw std::invalid_argument("layer_norm: rank >= 1");
  int D = x.dim(x.rank() - 1);
  if (gamma.rank() != 1 || gamma.dim(0) != D || beta.rank() != 1 ||
      beta.dim(0) != D)
    throw std::invalid_argument("layer_norm: gamma/beta must be [last_dim]");
  int64_t rows = x.numel() / D;
  std::vector<S> out(x.numel());
  std::vector<S> mean(rows), inv(rows);
  const S* px = x.data().data();
  const S* pg = gamma.data().data();
  const S* pb = beta.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* s = px + r * D;
    S mu = S(0);
    for (int d = 0; d < D; ++d) mu += s[d];
    mu /= static_cast<S>(D);
    S var = S(0);
    for (int d = 0; d < D; ++d) {
      S dx = s[d] - mu;
      var += dx * dx;
    }
    var /= static_cast<S>(D);
    S iv = S(1) / std::sqrt(var + eps);
    mean[r] = mu;
    inv[r] = iv;
    S* o = out.data() + r * D;
    for (int d = 0; d < D; ++d) o[d] = pg[d] * (s[d] - mu) * iv + pb[d];
  }
  auto fn = [D, rows, mean, inv](detail::Node<S>& self) {
    auto& nx = *self.parents[0];
    auto& ng = *self.parents[1];
    auto& nb = *self.parents[2];
    const S* px = nx.value.data();
    const S* pg = ng.value.data();
    const S* g = self.grad.data();
    if (nx.requires_grad) nx.ensure_grad();
    if (ng.requires_grad) ng.ensure_grad();
    if (nb.requires_grad) nb.ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const S* s = px + r * D;
      const S* gr = g + r * D;
      S mu = mean[r], iv = inv[r];
      if (ng.requires_grad || nb.requires_grad) {
        for (int d = 0; d < D; ++d) {
          if (ng.requires_grad) ng.grad[d] += gr[d] * (s[d] - mu) * iv;
          if (nb.requires_grad) nb.grad[d] += gr[d];
        }
      }
      if (nx.requires_grad) {
        S sum_d = S(0), sum_dx = S(0);
        for (int d = 0; d < D; ++d) {
          S dv = gr[d] * pg[d];
          sum_d += dv;
          sum_dx += dv * (s[d] - mu) * iv;
        }
        S mean_d = sum_d / static_cast<S>(D);
        S mean_dx = sum_dx / static_cast<S>(D);
        S* gx = nx.grad.data() + r * D;
        for (int d = 0; d < D; ++d) {
          S xh = (s[d] - mu) * iv;
          gx[d] += iv * (gr[d] * pg[d] - mean_d - xh * mean_dx);
        }
      }
    }
  };
  return make_op<S>(x.shape(), std::move(out),
                    {x.node(), gamma.node(), beta.node()}, std::move(fn));
}

template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  if (x.rank() < 1) throw std::invalid_argument("softmax: rank >= 1");
  int D = x.dim(x.rank() - 1);
  int64_t rows = x.numel() / D;
  std::vector<S> out(x.numel());
  const S* px = x.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* s = px + r * D;
    S* o = out.data() + r * D;
    S mx = s[0];
    for (int d = 1; d < D; ++d) mx = std::max(mx, s[d]);
    S sum = S(0);
    for (int d = 0; d < D; ++d) {
      o[d] = std::exp(s[d] - mx);
      sum += o[d];
    }
    S is = S(1) / sum;
    for (int d = 0; d < D; ++d) o[d] *= is;
  }
  return make_op<S>(x.shape(), std::move(out), {x.node()},
                    [D, rows](detail::Node<S>& self) {
                      auto& nx = *self.parents[0];
                      if (!nx.requires_grad) return;
                      nx.ensure_grad();
                      const S* y = self.value.data();
                      const S* g = self.grad.data();
                      for (int64_t r = 0; r < rows; ++r) {
                        const S* yr = y + r * D;
                        const S* gr = g + r * D;
                        S dot = S(0);
                        for (int d = 0; d < D; ++d) dot += yr[d] * gr[d];
                        S* gx = nx.grad.data() + r * D;
                        for (int d = 0; d < D; ++d)
                          gx[d] += yr[d] * (gr[d] - dot);
                      }
                    });
}

// ---------------------------------------------------------------------- shape

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw std::invalid_argument("reshape: numel mismatch " +
                                shape_str(x.shape()) + " -> " +
                                shape_str(shape));
  std::vector<S> out(x.data().begin(), x.data().end());
  return make_op<S>(std::move(shape), std::move(out), {x.node()},
                    [](detail::Node<S>& self) {
                      auto& nx = *self.parents[0];
                      if (!nx.requires_grad) return;
                      nx.ensure_grad();
                      int64_t n = self.numel();
                      for (int64_t i = 0; i < n; ++i)
                        nx.grad[i] += self.grad[i];
                    });
}

template <typename S>
Tensor<S> concat_dim1(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() < 2 || a.rank() != b.rank())
    throw std::invalid_argument("concat_dim1: rank mismatch");
  for (int i = 0; i < a.rank(); ++i)
    if (i != 1 && a.dim(i) != b.dim(i))
      throw std::invalid_argument("concat_dim1: shape mismatch " +
                                  shape_str(a.shape()) + " vs " +
                                  shape_str(b.shape()));
  int outer = a.dim(0);
  int ca = a.dim(1), cb = b.dim(1);
  int64_t inner = 1;
  for (int i = 2; i < a.rank(); ++i) inner *= a.dim(i);
  Shape shape = a.shape();
  shape[1] = ca + cb;
  std::vector<S> out(shape_numel(shape));
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  for (int o = 0; o < outer; ++o) {
    std::memcpy(out.data() + static_cast<int64_t>(o) * (ca + cb) * inner,
                pa + static_cast<int64_t>(o) * ca * inner,
                static_cast<size_t>(ca * inner) * sizeof(S));
    std::memcpy(out.data() + (static_cast<int64_t>(o) * (ca + cb) + ca) * inner,
                pb + static_cast<int64_t>(o) * cb * inner,
                static_cast<size_t>(cb * inner) * sizeof(S));
  }
  return make_op<S>(std::move(shape), std::move(out), {a.node(), b.node()},
                    [outer, ca, cb, inner](detail::Node<S>& self) {
                      auto& na = *self.parents[0];
                      auto& nb = *self.parents[1];
                      const S* g = self.grad.data();
                      if (na.requires_grad) {
                        na.ensure_grad();
                        for (int o = 0; o < outer; ++o) {
                          const S* src =
                              g + static_cast<int64_t>(o) * (ca + cb) * inner;
                          S* dst =
                              na.grad.data() + static_cast<int64_t>(o) * ca * inner;
                          for (int64_t i = 0; i < ca * inner; ++i)
                            dst[i] += src[i];
                        }
                      }
                      if (nb.requires_grad) {
                        nb.ensure_grad();
                        for (int o = 0; o < outer; ++o) {
                          const S* src =
                              g +
                              (static_cast<int64_t>(o) * (ca + cb) + ca) * inner;
                          S* dst =
                              nb.grad.data() + static_cast<int64_t>(o) * cb * inner;
                          for (int64_t i = 0; i < cb * inner; ++i)
                            dst[i] += src[i];
                        }
                      }
                    });
}

template <typename S>
Tensor<S> slice_dim1(const Tensor<S>& x, int start, int len) {
  if (x.rank() < 2) throw std::invalid_argument("slice_dim1: rank >= 2");
  int c = x.dim(1);
  if (start < 0 || len < 1 || start + len > c)
    throw std::invalid_argument("slice_dim1: range out of bounds");
  int outer = x.dim(0);
  int64_t inner = 1;
  for (int i = 2; i < x.rank(); ++i) inner *= x.dim(i);
  Shape shape = x.shape();
  shape[1] = len;
  std::vector<S> out(shape_numel(shape));
  const S* px = x.data().data();
  for (int o = 0; o < outer; ++o)
    std::memcpy(out.data() + static_cast<int64_t>(o) * len * inner,
                px + (static_cast<int64_t>(o) * c + start) * inner,
                static_cast<size_t>(len * inner) * sizeof(S));
  return make_op<S>(std::move(shape), std::move(out), {x.node()},
                    [outer, c, start, len, inner](detail::Node<S>& self) {
                      auto& nx = *self.parents[0];
                      if (!nx.requires_grad) return;
                      nx.ensure_grad();
                      const S* g = self.grad.data();
                      for (int o = 0; o < outer; ++o) {
                        const S* src =
                            g + static_cast<int64_t>(o) * len * inner;
                        S* dst = nx.grad.data() +
                                 (static_cast<int64_t>(o) * c + start) * inner;
                        for (int64_t i = 0; i < len * inner; ++i)
                          dst[i] += src[i];
                      }
                    });
}

// ----------------------------------------------------------------- reductions

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  int64_t n = x.numel();
  const S* px = x.data().data();
  // fixed block partials keep the summation order thread-independent
  constexpr int64_t kBlock = 4096;
  int64_t nblk = (n + kBlock - 1) / kBlock;
  std::vector<S> partial(nblk);
  parallel_for(nblk, [&](int64_t b) {
    int64_t lo = b * kBlock, hi = std::min(lo + kBlock, n);
    S s = S(0);
    for (int64_t i = lo; i < hi; ++i) s += px[i];
    partial[b] = s;
  });
  S total = S(0);
  for (S s : partial) total += s;
  return make_op<S>({1}, {total}, {x.node()}, [](detail::Node<S>& self) {
    auto& nx = *self.parents[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    S g = self.grad[0];
    for (auto& v : nx.grad) v += g;
  });
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
  int64_t n = x.numel();
  Tensor<S> s = sum_all(x);
  return mul_scalar(s, S(1) / static_cast<S>(n));
}

// --------------------------------------------------------------------- lookup

template <typename S>
Tensor<S> embed_rows(const Tensor<S>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw std::invalid_argument("embed_rows: want [V,E]");
  int V = table.dim(0), E = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= V)
      throw std::invalid_argument("embed_rows: id out of range");
  int n = static_cast<int>(ids.size());
  std::vector<S> out(static_cast<int64_t>(n) * E);
  const S* pt = table.data().data();
  for (int i = 0; i < n; ++i)
    std::memcpy(out.data() + static_cast<int64_t>(i) * E,
                pt + static_cast<int64_t>(ids[i]) * E,
                static_cast<size_t>(E) * sizeof(S));
  return make_op<S>({n, E}, std::move(out), {table.node()},
                    [ids, E](detail::Node<S>& self) {
                      auto& nt = *self.parents[0];
                      if (!nt.requires_grad) return;
                      nt.ensure_grad();
                      const S* g = self.grad.data();
                      for (size_t i = 0; i < ids.size(); ++i) {
                        S* dst =
                            nt.grad.data() + static_cast<int64_t>(ids[i]) * E;
                        const S* src = g + static_cast<int64_t>(i) * E;
                        for (int e = 0; e < E; ++e) dst[e] += src[e];
                      }
                    });
}

template <typename S>
Tensor<S> stop_gradient(const Tensor<S>& x) {
  return Tensor<S>::from_data(x.shape(),
                              std::vector<S>(x.data().begin(), x.data().end()),
                              false);
}

// ----------------------------------------------------------------- composites

template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> d = sub(a, b);
  return mean_all(mul(d, d));
}

template <typename S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k,
                    const Tensor<S>& v) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
    throw std::invalid_argument("attention: want rank-3 [B,L,C]");
  int C = q.dim(2);
  Tensor<S> scores = bmm(q, transpose_last2(k));
  Tensor<S> scaled =
      mul_scalar(scores, static_cast<S>(1.0 / std::sqrt(static_cast<double>(C))));
  Tensor<S> w = softmax_lastdim(scaled);
  return bmm(w, v);
}

template <typename S>
bool all_finite(const Tensor<S>& x) {
  for (S v : x.data())
    if (!std::isfinite(v)) return false;
  return true;
}

// ------------------------------------------------------------- instantiations

#define PERC_INSTANTIATE_OPS(S)                                              \
  template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&);             \
  template Tensor<S> sub<S>(const Tensor<S>&, const Tensor<S>&);             \
  template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&);             \
  template Tensor<S> add_scalar<S>(const Tensor<S>&, S);                     \
  template Tensor<S> mul_scalar<S>(const Tensor<S>&, S);                     \
  template Tensor<S> silu<S>(const Tensor<S>&);                              \
  template Tensor<S> add_bcast0<S>(const Tensor<S>&, const Tensor<S>&);      \
  template Tensor<S> add_channel_bias<S>(const Tensor<S>&, const Tensor<S>&); \
  template Tensor<S> add_channel_bias_batched<S>(const Tensor<S>&,           \
                                                 const Tensor<S>&);          \
  template Tensor<S> matmul<S>(const Tensor<S>&, const Tensor<S>&);          \
  template Tensor<S> bmm<S>(const Tensor<S>&, const Tensor<S>&);             \
  template Tensor<S> transpose_last2<S>(const Tensor<S>&);                   \
  template Tensor<S> conv2d<S>(const Tensor<S>&, const Tensor<S>&,           \
                               const Tensor<S>&, int, int);                  \
  template Tensor<S> upsample_nearest<S>(const Tensor<S>&, int);             \
  template Tensor<S> group_norm<S>(const Tensor<S>&, const Tensor<S>&,       \
                                   const Tensor<S>&, int, S);                \
  template Tensor<S> layer_norm<S>(const Tensor<S>&, const Tensor<S>&,       \
                                   const Tensor<S>&, S);                     \
  template Tensor<S> softmax_lastdim<S>(const Tensor<S>&);                   \
  template Tensor<S> reshape<S>(const Tensor<S>&, Shape);                    \
  template Tensor<S> concat_dim1<S>(const Tensor<S>&, const Tensor<S>&);     \
  template Tensor<S> slice_dim1<S>(const Tensor<S>&, int, int);              \
  template Tensor<S> sum_all<S>(const Tensor<S>&);                           \
  template Tensor<S> mean_all<S>(const Tensor<S>&);                          \
  template Tensor<S> embed_rows<S>(const Tensor<S>&, const std::vector<int>&); \
  template Tensor<S> stop_gradient<S>(const Tensor<S>&);                     \
  template Tensor<S> mse<S>(const Tensor<S>&, const Tensor<S>&);             \
  template Tensor<S> attention<S>(const Tensor<S>&, const Tensor<S>&,        \
                                  const Tensor<S>&);                         \
  template bool all_finite<S>(const Tensor<S>&);

PERC_INSTANTIATE_OPS(float)
PERC_INSTANTIATE_OPS(double)

#undef PERC_INSTANTIATE_OPS

}  // namespace perc
