#include "perc/optim.hpp"

#include <cmath>

#include "perc/errors.hpp"

namespace perc {

template <typename S>
AdamW<S>::AdamW(std::vector<Tensor<S>> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (auto& p : params_) {
    m_.emplace_back(p.numel(), S(0));
    v_.emplace_back(p.numel(), S(0));
  }
}

template <typename S>
void AdamW<S>::step(double lr_scale) {
  // validate first so a NaN aborts the whole step, not half of it
  for (auto& p : params_) {
    if (!p.has_grad()) continue;
    for (S g : p.grad())
      if (!std::isfinite(g))
        throw NanError("adamw: non-finite gradient in parameter update");
  }
  ++step_count_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
  S lr = static_cast<S>(cfg_.lr * lr_scale);
  S b1 = static_cast<S>(cfg_.beta1);
  S b2 = static_cast<S>(cfg_.beta2);
  S eps = static_cast<S>(cfg_.eps);
  S wd = static_cast<S>(cfg_.weight_decay);
  S ibc1 = static_cast<S>(1.0 / bc1);
  S ibc2 = static_cast<S>(1.0 / bc2);
  for (size_t pi = 0; pi < params_.size(); ++pi) {
    auto& p = params_[pi];
    auto data = p.mutable_data();
    bool has_grad = p.has_grad();
    std::span<const S> g = has_grad ? std::span<const S>(p.grad())
                                    : std::span<const S>();
    S* m = m_[pi].data();
    S* v = v_[pi].data();
    for (size_t i = 0; i < data.size(); ++i) {
      S gi = has_grad ? g[i] : S(0);
      m[i] = b1 * m[i] + (S(1) - b1) * gi;
      v[i] = b2 * v[i] + (S(1) - b2) * gi * gi;
      S mhat = m[i] * ibc1;
      S vhat = v[i] * ibc2;
      data[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * data[i]);
    }
    p.zero_grad();
  }
}

double warmup_lr_scale(int64_t step, int64_t warmup_steps) {
  if (warmup_steps <= 0) return 1.0;
  if (step >= warmup_steps) return 1.0;
  return static_cast<double>(step) / static_cast<double>(warmup_steps);
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace perc
