#include <cmath>

#include "doctest.h"
#include "hst/params.hpp"
#include "hst/tensor.hpp"
#include "support/oracles.hpp"

using namespace hst;
using hst::testing::max_grad_rel_err;

TEST_CASE("matmul identity and unit-row selection") {
  Tensor I = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor A = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor C = matmul(I, A);
  CHECK(C.values() == std::vector<double>{1, 2, 3, 4});

  Tensor row = Tensor::from_data({1, 2}, {1, 0});
  Tensor col = Tensor::from_data({2, 1}, {2, 5});
  CHECK(matmul(row, col).item() == doctest::Approx(2.0));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b),
                       doctest::Contains("[2, 3]"), Error);
}

TEST_CASE("matmul gradient matches central finite differences") {
  RandomStream rng(7);
  Tensor a = Tensor::randn({3, 4}, rng);
  Tensor b = Tensor::randn({4, 2}, rng);
  const double err_a = max_grad_rel_err(a, [&] { return sum(matmul(a, b)); });
  CHECK(err_a < 1e-6);
  const double err_b = max_grad_rel_err(b, [&] { return sum(matmul(a, b)); });
  CHECK(err_b < 1e-6);
}

TEST_CASE("batched matmul broadcasts leading dimensions") {
  RandomStream rng(11);
  Tensor a = Tensor::randn({2, 3, 3, 4}, rng);
  Tensor b = Tensor::randn({1, 3, 4, 2}, rng);
  Tensor c = matmul(a, b);
  CHECK(c.shape() == std::vector<int>{2, 3, 3, 2});
  // spot check one batch against the rank-2 path
  Tensor a10 = slice(slice(a, 0, 1, 1), 1, 0, 1);
  Tensor b00 = slice(b, 1, 0, 1);
  Tensor ref = matmul(reshape(a10, {3, 4}), reshape(b00, {4, 2}));
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) {
      CHECK(c.at({1, 0, i, j}) == doctest::Approx(ref.at({i, j})).epsilon(1e-12));
    }
  }
  const double err = max_grad_rel_err(b, [&] { return sum(matmul(a, b)); });
  CHECK(err < 1e-6);
}

TEST_CASE("softmax symmetry, stability and closed form") {
  Tensor s = softmax(Tensor::from_data({2}, {0, 0}), 0);
  CHECK(s.values()[0] == doctest::Approx(0.5));
  CHECK(s.values()[1] == doctest::Approx(0.5));

  Tensor big = softmax(Tensor::from_data({2}, {1000, 0}), 0);
  CHECK(big.values()[0] == doctest::Approx(1.0));
  CHECK(big.values()[1] < 1e-300);

  Tensor x = Tensor::from_data({3}, {1, 2, 3});
  Tensor p = softmax(x, 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) {
    CHECK(p.values()[i] == doctest::Approx(std::exp(1.0 + i) / z).epsilon(1e-14));
  }
}

TEST_CASE("softmax rows sum to one within 1e-12") {
  RandomStream rng(3);
  Tensor x = Tensor::randn({5, 9}, rng, 4.0);
  Tensor p = softmax(x, -1);
  for (int r = 0; r < 5; ++r) {
    double s = 0.0;
    for (int c = 0; c < 9; ++c) s += p.at({r, c});
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("layer_norm zero-variance and already-normalized cases") {
  Tensor gain = Tensor::full({4}, 1.0);
  Tensor bias = Tensor::zeros({4});
  Tensor c = layer_norm(Tensor::full({4}, 3.7), gain, bias);
  for (double v : c.values()) CHECK(v == doctest::Approx(0.0));

  Tensor g2 = Tensor::full({2}, 1.0);
  Tensor b2 = Tensor::zeros({2});
  Tensor pm = layer_norm(Tensor::from_data({2}, {1, -1}), g2, b2);
  CHECK(pm.values()[0] == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(pm.values()[1] == doctest::Approx(-1.0).epsilon(1e-5));
}

TEST_CASE("layer_norm output statistics") {
  RandomStream rng(17);
  // large-variance input so the 1e-5 epsilon bias stays below 1e-9
  Tensor x = Tensor::rand_uniform({64}, rng, -500.0, 500.0);
  Tensor y = layer_norm(x, Tensor::full({64}, 1.0), Tensor::zeros({64}));
  double mean = 0.0;
  for (double v : y.values()) mean += v;
  mean /= 64.0;
  double var = 0.0;
  for (double v : y.values()) var += (v - mean) * (v - mean);
  var /= 64.0;
  CHECK(std::abs(mean) < 1e-9);
  CHECK(std::abs(var - 1.0) < 1e-9);
}

TEST_CASE("adam zero gradient leaves parameters unchanged") {
  ParameterStore store;
  Tensor w = store.add("w", Tensor::from_data({2}, {1.5, -0.5}));
  AdamOptimizer opt;
  store.zero_grads();
  opt.step(store);
  CHECK(w.values()[0] == doctest::Approx(1.5));
  CHECK(w.values()[1] == doctest::Approx(-0.5));
}

TEST_CASE("adam first step with unit gradient") {
  ParameterStore store;
  Tensor w = store.add("w", Tensor::scalar(1.0));
  AdamConfig cfg;
  cfg.learning_rate = 0.1;
  AdamOptimizer opt(cfg);
  w.mutable_grad()[0] = 1.0;
  opt.step(store);
  // bias-corrected first step moves by lr / (1 + eps)
  CHECK(w.item() == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
}

TEST_CASE("adam converges on a quadratic") {
  ParameterStore store;
  Tensor w = store.add("w", Tensor::scalar(1.0));
  AdamConfig cfg;
  cfg.learning_rate = 0.05;
  AdamOptimizer opt(cfg);
  for (int i = 0; i < 200; ++i) {
    store.zero_grads();
    w.mutable_grad()[0] = 2.0 * w.item();
    opt.step(store);
  }
  CHECK(std::abs(w.item()) < 1e-2);
}

TEST_CASE("elementwise broadcasting and gradients") {
  RandomStream rng(23);
  Tensor a = Tensor::randn({3, 1, 4}, rng);
  Tensor b = Tensor::randn({2, 4}, rng);
  Tensor c = a * b;
  CHECK(c.shape() == std::vector<int>{3, 2, 4});
  const double err = max_grad_rel_err(a, [&] { return sum(mul(a, b)); });
  CHECK(err < 1e-6);
  const double err_b = max_grad_rel_err(b, [&] { return sum(mul(a, b)); });
  CHECK(err_b < 1e-6);
}

TEST_CASE("broadcast shape mismatch raises a dimension error") {
  Tensor a = Tensor::zeros({3, 2});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_AS((void)add(a, b), Error);
}

TEST_CASE("gradient check across unary and reduction ops") {
  RandomStream rng(31);
  struct Case {
    const char* name;
    std::function<Tensor(const Tensor&)> fn;
    double lo, hi;
  };
  const std::vector<Case> cases = {
      {"exp", [](const Tensor& t) { return exp(t); }, -1.5, 1.5},
      {"log", [](const Tensor& t) { return log(t); }, 0.2, 3.0},
      {"sqrt", [](const Tensor& t) { return sqrt(t); }, 0.3, 4.0},
      {"gelu", [](const Tensor& t) { return gelu(t); }, -2.5, 2.5},
      {"relu", [](const Tensor& t) { return relu(t); }, 0.2, 2.0},
      {"softplus", [](const Tensor& t) { return softplus(t); }, -3.0, 3.0},
      {"abs", [](const Tensor& t) { return abs(t); }, 0.3, 2.0},
      {"neg", [](const Tensor& t) { return neg(t); }, -2.0, 2.0},
      {"softmax", [](const Tensor& t) { return softmax(t, -1); }, -2.0, 2.0},
      {"log_softmax", [](const Tensor& t) { return log_softmax(t, -1); }, -2.0, 2.0},
      {"logsumexp", [](const Tensor& t) { return logsumexp(t, -1); }, -2.0, 2.0},
      {"sum_axis", [](const Tensor& t) { return sum(t, 0); }, -2.0, 2.0},
      {"permute", [](const Tensor& t) { return permute(t, {1, 0}); }, -2.0, 2.0},
      {"reshape", [](const Tensor& t) { return reshape(t, {12}); }, -2.0, 2.0},
      {"slice", [](const Tensor& t) { return slice(t, 1, 1, 2); }, -2.0, 2.0},
      {"gather_rows", [](const Tensor& t) { return gather_rows(t, {2, 0, 2}); }, -2.0, 2.0},
      {"clamp_min", [](const Tensor& t) { return clamp_min(t, 0.5); }, 0.8, 2.0},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    Tensor x = Tensor::rand_uniform({3, 4}, rng, c.lo, c.hi);
    // weight the output so the gradient is not constant over entries
    Tensor w = Tensor::rand_uniform(c.fn(x).shape(), rng, -1.0, 1.0);
    auto loss = [&] { return sum(c.fn(x) * w); };
    const double err = max_grad_rel_err(x, loss);
    CHECK_MESSAGE(err < 1e-4, c.name);
  }
}

TEST_CASE("gradient check for binary ops") {
  RandomStream rng(37);
  Tensor a = Tensor::rand_uniform({2, 3}, rng, 0.3, 2.0);
  Tensor b = Tensor::rand_uniform({2, 3}, rng, 0.4, 2.2);
  Tensor w = Tensor::rand_uniform({2, 3}, rng, -1.0, 1.0);
  const std::vector<std::pair<const char*, std::function<Tensor()>>> cases = {
      {"add", [&] { return sum((a + b) * w); }},
      {"sub", [&] { return sum((a - b) * w); }},
      {"mul", [&] { return sum((a * b) * w); }},
      {"div", [&] { return sum((a / b) * w); }},
      {"arctan2", [&] { return sum(arctan2(a, b) * w); }},
  };
  for (const auto& [name, fn] : cases) {
    CAPTURE(name);
    CHECK_MESSAGE(max_grad_rel_err(a, fn) < 1e-4, name);
    CHECK_MESSAGE(max_grad_rel_err(b, fn) < 1e-4, name);
  }
}

TEST_CASE("concat gradient and layout") {
  RandomStream rng(41);
  Tensor a = Tensor::randn({2, 2}, rng);
  Tensor b = Tensor::randn({2, 3}, rng);
  Tensor c = concat({a, b}, 1);
  CHECK(c.shape() == std::vector<int>{2, 5});
  CHECK(c.at({1, 0}) == a.at({1, 0}));
  CHECK(c.at({1, 4}) == b.at({1, 2}));
  Tensor w = Tensor::randn({2, 5}, rng);
  auto loss = [&] { return sum(concat({a, b}, 1) * w); };
  CHECK(max_grad_rel_err(a, loss) < 1e-6);
  CHECK(max_grad_rel_err(b, loss) < 1e-6);
}

TEST_CASE("layer_norm gradient") {
  RandomStream rng(43);
  Tensor x = Tensor::randn({2, 5}, rng);
  Tensor g = Tensor::rand_uniform({5}, rng, 0.5, 1.5);
  Tensor b = Tensor::randn({5}, rng, 0.1);
  Tensor w = Tensor::randn({2, 5}, rng);
  auto loss = [&] { return sum(layer_norm(x, g, b) * w); };
  CHECK(max_grad_rel_err(x, loss) < 1e-4);
  CHECK(max_grad_rel_err(g, loss) < 1e-4);
  CHECK(max_grad_rel_err(b, loss) < 1e-4);
}

TEST_CASE("non-finite forward values are rejected") {
  Tensor z = Tensor::zeros({2});
  CHECK_THROWS_AS((void)log(z), Error);
  CHECK_THROWS_AS((void)div(Tensor::scalar(1.0), Tensor::scalar(0.0)), Error);
  CHECK_THROWS_AS(Tensor::from_data({1}, {std::nan("")}), Error);
}

TEST_CASE("checkpoint round-trips parameters exactly") {
  RandomStream rng(47);
  ParameterStore a;
  a.add("layer.w", Tensor::randn({4, 3}, rng));
  a.add("layer.b", Tensor::randn({3}, rng, 0.01));
  const std::string path = "test_ckpt_roundtrip.hst";
  save_checkpoint(a, path);

  ParameterStore b;
  RandomStream rng2(999);
  b.add("layer.w", Tensor::randn({4, 3}, rng2));
  b.add("layer.b", Tensor::randn({3}, rng2));
  load_checkpoint(b, path);
  CHECK(b.get("layer.w").values() == a.get("layer.w").values());
  CHECK(b.get("layer.b").values() == a.get("layer.b").values());

  ParameterStore wrong;
  wrong.add("layer.w", Tensor::zeros({4, 2}));
  wrong.add("layer.b", Tensor::zeros({3}));
  CHECK_THROWS_AS(load_checkpoint(wrong, path), Error);
  std::remove(path.c_str());
}

TEST_CASE("no-grad guard suppresses graph construction") {
  Tensor x = Tensor::scalar(2.0);
  x.set_requires_grad(true);
  NoGradGuard ng;
  Tensor y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
}
