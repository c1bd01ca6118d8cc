#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "perc/checkpoint.hpp"
#include "perc/errors.hpp"
#include "perc/gradcheck.hpp"
#include "perc/optim.hpp"
#include "perc/rng.hpp"
#include "perc/tensor.hpp"

using namespace perc;

TEST_CASE("rng: philox stream is reproducible") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("rng: split streams differ and are deterministic") {
  Rng root(7);
  Rng c1 = root.split(1);
  Rng c2 = root.split(2);
  Rng c1b = root.split(1);
  bool any_diff = false;
  for (int i = 0; i < 64; ++i) {
    uint64_t x = c1.next_u64();
    CHECK(x == c1b.next_u64());
    if (x != c2.next_u64()) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("rng: doubles in range, normals have sane moments") {
  Rng r(3);
  double sum = 0, sum2 = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    double u = r.next_double();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  for (int i = 0; i < n; ++i) {
    double z = r.next_normal();
    sum += z;
    sum2 += z * z;
  }
  double mean = sum / n;
  double var = sum2 / n - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.03);
}

TEST_CASE("backward: sum(x*x) gives 2x") {
  auto x = TensorD::from_data({3}, {1, 2, 3}, true);
  auto loss = sum_all(mul(x, x));
  backward(loss);
  auto g = x.grad();
  CHECK(g[0] == doctest::Approx(2).epsilon(1e-12));
  CHECK(g[1] == doctest::Approx(4).epsilon(1e-12));
  CHECK(g[2] == doctest::Approx(6).epsilon(1e-12));
}

TEST_CASE("backward: stop_gradient blocks exactly") {
  auto x = TensorD::from_data({2}, {1, 2}, true);
  auto y = TensorD::from_data({2}, {5, 7}, true);
  auto sg = stop_gradient(x);
  CHECK(sg.data()[0] == 1.0);
  CHECK(sg.data()[1] == 2.0);
  auto loss = sum_all(mul(sg, y));
  backward(loss);
  CHECK(!x.has_grad());  // zero contribution, bit-level: no grad at all
  auto gy = y.grad();
  CHECK(gy[0] == 1.0);
  CHECK(gy[1] == 2.0);
}

TEST_CASE("backward: d/dx sum((x - sg(x))^2) = 0") {
  auto x = TensorD::from_data({4}, {0.3, -1.2, 2.0, 0.0}, true);
  auto d = sub(x, stop_gradient(x));
  auto loss = sum_all(mul(d, d));
  backward(loss);
  CHECK(loss.item() == 0.0);
  REQUIRE(x.has_grad());
  for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward: rejects non-scalar loss") {
  auto x = TensorD::from_data({2}, {1, 2}, true);
  auto y = mul(x, x);
  CHECK_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("conv2d: 1x1 scaling kernel") {
  auto x = TensorF::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  auto w = TensorF::from_data({1, 1, 1, 1}, {2});
  auto y = conv2d(x, w, TensorF(), 1, 0);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y.data()[0] == 2);
  CHECK(y.data()[1] == 4);
  CHECK(y.data()[2] == 6);
  CHECK(y.data()[3] == 8);
}

TEST_CASE("conv2d: all-ones 3x3 on constant image") {
  const float c = 0.75f;
  auto x = TensorF::full({1, 1, 6, 6}, c);
  auto w = TensorF::full({1, 1, 3, 3}, 1.0f);
  auto y = conv2d(x, w, TensorF(), 1, 1);
  CHECK(y.shape() == Shape{1, 1, 6, 6});
  // interior output = 9c, corners = 4c, edges = 6c
  auto v = y.data();
  for (int i = 1; i < 5; ++i)
    for (int j = 1; j < 5; ++j)
      CHECK(v[static_cast<size_t>(i * 6 + j)] == doctest::Approx(9 * c));
  CHECK(v[0] == doctest::Approx(4 * c));
  CHECK(v[1] == doctest::Approx(6 * c));
}

TEST_CASE("conv2d: shape and stride errors") {
  auto x = TensorF::zeros({1, 3, 4, 4});
  auto w = TensorF::zeros({2, 4, 3, 3});
  CHECK_THROWS_AS(conv2d(x, w, TensorF(), 1, 1), std::invalid_argument);
  auto w2 = TensorF::zeros({2, 3, 3, 3});
  CHECK_THROWS_AS(conv2d(x, w2, TensorF(), 0, 1), std::invalid_argument);
}

TEST_CASE("gradient_check: every registered op at 1e-4") {
  auto cases = builtin_op_checks(2024);
  REQUIRE(!cases.empty());
  for (auto& c : cases) {
    CAPTURE(c.name);
    auto report = gradient_check(c.op, c.point, c.tolerance);
    CAPTURE(report.max_rel_err);
    CAPTURE(report.worst_input);
    CHECK(report.pass);
  }
}

TEST_CASE("gradient_check: silu at 0.5") {
  auto point = std::vector<TensorD>{TensorD::from_data({1}, {0.5}, true)};
  auto report = gradient_check(
      [](std::vector<TensorD>& p) { return sum_all(silu(p[0])); }, point,
      1e-4);
  CHECK(report.pass);
}

TEST_CASE("adamw: pure decay with zero gradients") {
  auto p = TensorF::from_data({3}, {1.0f, -2.0f, 0.5f}, true);
  AdamWConfig cfg;
  cfg.lr = 1e-4;
  cfg.weight_decay = 0.01;
  AdamW<float> opt({p}, cfg);
  p.mutable_grad();  // zero grad buffer
  opt.step();
  CHECK(p.data()[0] == doctest::Approx(1.0 * (1 - 1e-6)).epsilon(1e-9));
  CHECK(p.data()[1] == doctest::Approx(-2.0 * (1 - 1e-6)).epsilon(1e-9));
  CHECK(p.data()[2] == doctest::Approx(0.5 * (1 - 1e-6)).epsilon(1e-9));
}

TEST_CASE("adamw: first step moves by about -lr*sign(g)") {
  auto p = TensorD::from_data({2}, {0.0, 0.0}, true);
  AdamWConfig cfg;
  cfg.lr = 1e-3;
  cfg.weight_decay = 0.0;
  AdamW<double> opt({p}, cfg);
  auto g = p.mutable_grad();
  g[0] = 0.37;
  g[1] = -1234.5;
  opt.step();
  CHECK(p.data()[0] == doctest::Approx(-1e-3).epsilon(1e-6));
  CHECK(p.data()[1] == doctest::Approx(1e-3).epsilon(1e-6));
}

TEST_CASE("adamw: weight decay shrinks magnitudes monotonically") {
  auto p = TensorF::from_data({2}, {0.8f, -1.7f}, true);
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  cfg.lr = 1e-2;
  AdamW<float> opt({p}, cfg);
  float prev0 = 0.8f, prev1 = 1.7f;
  for (int i = 0; i < 50; ++i) {
    p.mutable_grad();
    opt.step();
    CHECK(std::abs(p.data()[0]) < prev0);
    CHECK(std::abs(p.data()[1]) < prev1);
    prev0 = std::abs(p.data()[0]);
    prev1 = std::abs(p.data()[1]);
  }
}

TEST_CASE("adamw: NaN gradient aborts the step") {
  auto p = TensorF::from_data({2}, {1.0f, 2.0f}, true);
  AdamW<float> opt({p}, {});
  auto g = p.mutable_grad();
  g[0] = std::nanf("");
  CHECK_THROWS_AS(opt.step(), NanError);
  CHECK(p.data()[0] == 1.0f);  // untouched
  CHECK(p.data()[1] == 2.0f);
}

TEST_CASE("adamw: identical runs are bit-identical") {
  auto run = [] {
    Rng rng(11);
    auto p = TensorF::randn({8}, rng, 1.0f, true);
    AdamW<float> opt({p}, {});
    for (int s = 0; s < 25; ++s) {
      auto x = TensorF::randn({8}, rng);
      auto loss = mse(p, x);
      backward(loss);
      opt.step();
    }
    return std::vector<float>(p.data().begin(), p.data().end());
  };
  auto a = run();
  auto b = run();
  CHECK(a == b);
}

TEST_CASE("checkpoint: round trip preserves exact bytes") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "perc_ckpt_test";
  fs::create_directories(dir);
  std::string path = (dir / "params.pckp").string();

  Rng rng(5);
  ParamList<float> params;
  params.push_back({"enc.w", TensorF::randn({4, 3, 3, 3}, rng), ParamKind::kConv});
  params.push_back({"enc.b", TensorF::randn({4}, rng), ParamKind::kConv});
  save_checkpoint(path, params);

  ParamList<float> loaded;
  loaded.push_back({"enc.w", TensorF::zeros({4, 3, 3, 3}), ParamKind::kConv});
  loaded.push_back({"enc.b", TensorF::zeros({4}), ParamKind::kConv});
  load_checkpoint(path, loaded);
  for (size_t i = 0; i < params.size(); ++i) {
    auto a = params[i].tensor.data();
    auto b = loaded[i].tensor.data();
    REQUIRE(a.size() == b.size());
    for (size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);
  }

  auto raw = read_checkpoint_raw(path);
  REQUIRE(raw.size() == 2);
  CHECK(raw[0].name == "enc.w");
  CHECK(raw[0].shape == Shape{4, 3, 3, 3});

  ParamList<float> wrong;
  wrong.push_back({"enc.w", TensorF::zeros({4, 3, 3, 2}), ParamKind::kConv});
  CHECK_THROWS_AS(load_checkpoint(path, wrong), MismatchError);
  fs::remove_all(dir);
}
