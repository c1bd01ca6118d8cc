#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "perc/rng.hpp"

namespace perc {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node<S>>> parents;
  std::function<void(Node<S>&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

}  // namespace detail

// Thread-local switch: while disabled, ops record no graph. Used for
// sampling and evaluation so long chains do not retain their history.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense row-major tensor participating in a reverse-mode graph. The
// handle is a cheap shared reference to the underlying node; values are
// immutable once an op has consumed them, grads accumulate in place.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, S value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<S> data,
                          bool requires_grad = false);
  static Tensor scalar(S value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, S stddev = S(1),
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return node_->numel(); }

  std::span<const S> data() const { return node_->value; }
  std::span<S> mutable_data() { return node_->value; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool v);
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const S> grad() const;
  std::span<S> mutable_grad();
  void zero_grad();

  S item() const;

  // deep copy of values; no graph history
  Tensor clone_detached(bool requires_grad = false) const;

  std::shared_ptr<detail::Node<S>>& node() { return node_; }
  const std::shared_ptr<detail::Node<S>>& node() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node<S>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  std::shared_ptr<detail::Node<S>> node_;
};

// Populates grads of every requires_grad ancestor of `loss` (a scalar),
// then consumes the recorded graph. Throws std::invalid_argument for a
// non-scalar loss or a loss with no recorded history.
template <typename S>
void backward(Tensor<S>& loss);

// ---- elementwise ----
template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> add_scalar(const Tensor<S>& a, S c);
template <typename S> Tensor<S> mul_scalar(const Tensor<S>& a, S c);
template <typename S> Tensor<S> silu(const Tensor<S>& x);

// y[i] = x[i] + b[i % b.numel]; broadcast of a trailing-shape tensor
template <typename S> Tensor<S> add_bcast0(const Tensor<S>& x, const Tensor<S>& b);

// ---- bias forms used by the model graphs ----
// x: [B,C,H,W], b: [C]
template <typename S> Tensor<S> add_channel_bias(const Tensor<S>& x, const Tensor<S>& b);
// x: [B,C,H,W], b: [B,C]  (per-sample conditioning bias)
template <typename S> Tensor<S> add_channel_bias_batched(const Tensor<S>& x, const Tensor<S>& b);

// ---- linear algebra ----
template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);
// a: [B,M,K], b: [B,K,N]
template <typename S> Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b);
// x: [B,M,N] -> [B,N,M] (also accepts rank 2)
template <typename S> Tensor<S> transpose_last2(const Tensor<S>& x);

// ---- conv / resampling ----
// x: [B,Ci,H,W], w: [Co,Ci,kh,kw], bias: [Co] or undefined
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                 int stride, int padding);
template <typename S> Tensor<S> upsample_nearest(const Tensor<S>& x, int factor);

// ---- normalization / attention pieces ----
// x: [B,C,H,W]; gamma, beta: [C]; groups must divide C
template <typename S>
Tensor<S> group_norm(const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& beta, int groups, S eps = S(1e-5));
// normalizes the last dim; gamma, beta: [D]
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& beta, S eps = S(1e-5));
template <typename S> Tensor<S> softmax_lastdim(const Tensor<S>& x);

// ---- shape ----
template <typename S> Tensor<S> reshape(const Tensor<S>& x, Shape shape);
// concatenate along dim 1 (rank >= 2)
template <typename S> Tensor<S> concat_dim1(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> slice_dim1(const Tensor<S>& x, int start, int len);

// ---- reductions ----
template <typename S> Tensor<S> sum_all(const Tensor<S>& x);
template <typename S> Tensor<S> mean_all(const Tensor<S>& x);

// ---- lookup ----
// table: [V,E]; one output row per id
template <typename S>
Tensor<S> embed_rows(const Tensor<S>& table, const std::vector<int>& ids);

// forward identity, zero gradient contribution
template <typename S> Tensor<S> stop_gradient(const Tensor<S>& x);

// ---- composites ----
template <typename S> Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b);
// single-head scaled dot-product attention; q: [B,Lq,C], k/v: [B,Lk,C]
template <typename S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v);

template <typename S> bool all_finite(const Tensor<S>& x);

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace perc
