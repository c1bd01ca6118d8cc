#pragma once

#include <string>
#include <vector>

#include "perc/tensor.hpp"

namespace perc {

// What a parameter is made of; used to select trainable subsets.
enum class ParamKind { kConv, kLinear, kNorm, kEmbed, kOther };

template <typename S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
  ParamKind kind = ParamKind::kOther;
};

template <typename S>
using ParamList = std::vector<NamedParam<S>>;

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// AdamW with decoupled multiplicative weight decay. Throws NanError and
// leaves parameters untouched when any gradient is non-finite.
template <typename S>
class AdamW {
 public:
  AdamW(std::vector<Tensor<S>> params, AdamWConfig cfg);

  // applies one update using the tensors' accumulated grads, then clears them;
  // lr_scale multiplies the configured peak rate (warmup)
  void step(double lr_scale = 1.0);

  int64_t step_count() const { return step_count_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor<S>> params_;
  std::vector<std::vector<S>> m_;
  std::vector<std::vector<S>> v_;
  AdamWConfig cfg_;
  int64_t step_count_ = 0;
};

// linear warmup to the peak rate, constant afterwards
double warmup_lr_scale(int64_t step, int64_t warmup_steps);

}  // namespace perc
