#pragma once

#include <functional>
#include <string>
#include <vector>

#include "perc/tensor.hpp"

namespace perc {

struct GradCheckReport {
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  int64_t checked_coords = 0;
  bool pass = false;
  std::string worst_input;
};

// Central-difference check of reverse-mode gradients, 64-bit only.
// `op` must be a pure function of the inputs and return a scalar loss.
// Inputs with requires_grad are perturbed coordinate-wise (up to
// max_coords per input, chosen deterministically) with step h.
GradCheckReport gradient_check(
    const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& op,
    std::vector<Tensor<double>> point, double tolerance,
    double h = 1e-5, int64_t max_coords = 256, uint64_t select_seed = 1234);

// One registered-op case: fresh random inputs in [-2, 2] plus the loss
// builder that exercises the op.
struct OpCheckCase {
  std::string name;
  double tolerance;
  std::function<Tensor<double>(std::vector<Tensor<double>>&)> op;
  std::vector<Tensor<double>> point;
};

// Every differentiable op in the library, with inputs seeded from `seed`.
std::vector<OpCheckCase> builtin_op_checks(uint64_t seed);

}  // namespace perc
