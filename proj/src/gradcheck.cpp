#include "perc/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace perc {

namespace {

Tensor<double> rand_range(Shape shape, Rng& rng, bool requires_grad = true) {
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = rng.next_double() * 4.0 - 2.0;
  return Tensor<double>::from_data(std::move(shape), std::move(data),
                                   requires_grad);
}

}  // namespace

GradCheckReport gradient_check(
    const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& op,
    std::vector<Tensor<double>> point, double tolerance, double h,
    int64_t max_coords, uint64_t select_seed) {
  GradCheckReport report;
  report.tolerance = tolerance;

  for (auto& t : point) t.zero_grad();
  Tensor<double> loss = op(point);
  backward(loss);

  std::vector<std::vector<double>> ad_grads;
  for (auto& t : point) {
    if (t.requires_grad() && t.has_grad())
      ad_grads.emplace_back(t.grad().begin(), t.grad().end());
    else
      ad_grads.emplace_back(t.numel(), 0.0);
  }

  NoGradGuard no_grad;
  Rng rng(select_seed);
  for (size_t pi = 0; pi < point.size(); ++pi) {
    auto& t = point[pi];
    if (!t.requires_grad()) continue;
    int64_t n = t.numel();
    std::vector<int64_t> coords;
    if (n <= max_coords) {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      for (int64_t i = 0; i < max_coords; ++i)
        coords.push_back(
            static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(n))));
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }
    auto data = t.mutable_data();
    for (int64_t ci : coords) {
      double orig = data[static_cast<size_t>(ci)];
      data[static_cast<size_t>(ci)] = orig + h;
      double fp = op(point).item();
      data[static_cast<size_t>(ci)] = orig - h;
      double fm = op(point).item();
      data[static_cast<size_t>(ci)] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double ad = ad_grads[pi][static_cast<size_t>(ci)];
      double denom = std::max({std::abs(fd), std::abs(ad), 1.0});
      double rel = std::abs(fd - ad) / denom;
      ++report.checked_coords;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_input =
            "input " + std::to_string(pi) + " coord " + std::to_string(ci);
      }
    }
  }
  report.pass = report.max_rel_err <= tolerance;
  return report;
}

std::vector<OpCheckCase> builtin_op_checks(uint64_t seed) {
  std::vector<OpCheckCase> cases;
  Rng rng(seed);
  using T = Tensor<double>;
  using V = std::vector<Tensor<double>>;

  // fixed projection makes the scalar loss sensitive to every output coord
  auto proj = [](const T& y) {
    std::vector<double> w(y.numel());
    Rng pr(0x9E37u, 17);
    for (auto& v : w) v = pr.next_double() * 2.0 - 1.0;
    return sum_all(mul(y, T::from_data(y.shape(), std::move(w))));
  };

  auto add_case = [&](const std::string& name, double tol, V point,
                      std::function<T(V&)> op) {
    cases.push_back({name, tol, std::move(op), std::move(point)});
  };

  add_case("add", 1e-4, {rand_range({3, 5}, rng), rand_range({3, 5}, rng)},
           [proj](V& p) { return proj(add(p[0], p[1])); });
  add_case("sub", 1e-4, {rand_range({3, 5}, rng), rand_range({3, 5}, rng)},
           [proj](V& p) { return proj(sub(p[0], p[1])); });
  add_case("mul", 1e-4, {rand_range({3, 5}, rng), rand_range({3, 5}, rng)},
           [proj](V& p) { return proj(mul(p[0], p[1])); });
  add_case("add_scalar", 1e-4, {rand_range({7}, rng)},
           [proj](V& p) { return proj(add_scalar(p[0], 0.7)); });
  add_case("mul_scalar", 1e-4, {rand_range({7}, rng)},
           [proj](V& p) { return proj(mul_scalar(p[0], -1.3)); });
  add_case("silu", 1e-4, {rand_range({4, 9}, rng)},
           [proj](V& p) { return proj(silu(p[0])); });
  add_case("add_bcast0", 1e-4,
           {rand_range({2, 3, 4}, rng), rand_range({3, 4}, rng)},
           [proj](V& p) { return proj(add_bcast0(p[0], p[1])); });
  add_case("add_channel_bias", 1e-4,
           {rand_range({2, 3, 4, 4}, rng), rand_range({3}, rng)},
           [proj](V& p) { return proj(add_channel_bias(p[0], p[1])); });
  add_case("add_channel_bias_batched", 1e-4,
           {rand_range({2, 3, 4, 4}, rng), rand_range({2, 3}, rng)},
           [proj](V& p) { return proj(add_channel_bias_batched(p[0], p[1])); });
  add_case("matmul", 1e-4, {rand_range({4, 6}, rng), rand_range({6, 5}, rng)},
           [proj](V& p) { return proj(matmul(p[0], p[1])); });
  add_case("bmm", 1e-4,
           {rand_range({2, 3, 4}, rng), rand_range({2, 4, 5}, rng)},
           [proj](V& p) { return proj(bmm(p[0], p[1])); });
  add_case("transpose_last2", 1e-4, {rand_range({2, 3, 5}, rng)},
           [proj](V& p) { return proj(transpose_last2(p[0])); });
  add_case("conv2d_s1p1", 1e-4,
           {rand_range({2, 3, 6, 6}, rng), rand_range({4, 3, 3, 3}, rng),
            rand_range({4}, rng)},
           [proj](V& p) { return proj(conv2d(p[0], p[1], p[2], 1, 1)); });
  add_case("conv2d_s2p0", 1e-4,
           {rand_range({2, 3, 6, 6}, rng), rand_range({4, 3, 2, 2}, rng),
            rand_range({4}, rng)},
           [proj](V& p) { return proj(conv2d(p[0], p[1], p[2], 2, 0)); });
  add_case("conv2d_nobias", 1e-4,
           {rand_range({1, 2, 5, 5}, rng), rand_range({3, 2, 3, 3}, rng)},
           [proj](V& p) {
             return proj(conv2d(p[0], p[1], Tensor<double>(), 1, 1));
           });
  add_case("upsample_nearest", 1e-4, {rand_range({2, 3, 3, 3}, rng)},
           [proj](V& p) { return proj(upsample_nearest(p[0], 2)); });
  add_case("group_norm", 1e-4,
           {rand_range({2, 6, 4, 4}, rng), rand_range({6}, rng),
            rand_range({6}, rng)},
           [proj](V& p) { return proj(group_norm(p[0], p[1], p[2], 3)); });
  add_case("layer_norm", 1e-4,
           {rand_range({3, 4, 8}, rng), rand_range({8}, rng),
            rand_range({8}, rng)},
           [proj](V& p) { return proj(layer_norm(p[0], p[1], p[2])); });
  add_case("softmax_lastdim", 1e-4, {rand_range({3, 7}, rng)},
           [proj](V& p) { return proj(softmax_lastdim(p[0])); });
  add_case("reshape", 1e-4, {rand_range({3, 4}, rng)},
           [proj](V& p) { return proj(reshape(p[0], {2, 6})); });
  add_case("concat_dim1", 1e-4,
           {rand_range({2, 3, 4}, rng), rand_range({2, 2, 4}, rng)},
           [proj](V& p) { return proj(concat_dim1(p[0], p[1])); });
  add_case("slice_dim1", 1e-4, {rand_range({2, 5, 3}, rng)},
           [proj](V& p) { return proj(slice_dim1(p[0], 1, 3)); });
  add_case("sum_all", 1e-4, {rand_range({4, 4}, rng)},
           [](V& p) { return sum_all(p[0]); });
  add_case("mean_all", 1e-4, {rand_range({4, 4}, rng)},
           [](V& p) { return mean_all(p[0]); });
  add_case("embed_rows", 1e-4, {rand_range({5, 3}, rng)},
           [proj](V& p) {
             return proj(embed_rows(p[0], std::vector<int>{1, 3, 3, 0}));
           });
  add_case("mse", 1e-4, {rand_range({3, 5}, rng), rand_range({3, 5}, rng)},
           [](V& p) { return mse(p[0], p[1]); });
  add_case("attention", 1e-4,
           {rand_range({2, 4, 6}, rng), rand_range({2, 3, 6}, rng),
            rand_range({2, 3, 6}, rng)},
           [proj](V& p) { return proj(attention(p[0], p[1], p[2])); });
  return cases;
}

}  // namespace perc
