#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "m2m/nn.hpp"
#include "m2m/rng.hpp"

using namespace m2m;

TEST_CASE("init_mlp is deterministic in the seed", "[nn]") {
  MlpSpec spec = mlp_spec({2, 3, 1}, Act::relu, Act::none);
  Network a = init_mlp(spec, 7);
  Network b = init_mlp(spec, 7);
  CHECK(a == b);
  Network c = init_mlp(spec, 8);
  CHECK_FALSE(a == c);
}

TEST_CASE("init_mlp zeroes biases", "[nn]") {
  Network net = init_mlp(mlp_spec({4, 4}, Act::relu, Act::relu), 3);
  for (double v : net.layers[0].bias.data()) CHECK(v == 0.0);
}

TEST_CASE("init_mlp rejects zero-width layers", "[nn]") {
  MlpSpec spec = mlp_spec({4, 0, 2}, Act::relu, Act::none);
  CHECK_THROWS_AS(init_mlp(spec, 1), validation_error);
}

TEST_CASE("critic architecture has the expected parameter count", "[nn]") {
  Network net = init_mlp(mlp_spec({256, 256, 256, 1}, Act::relu, Act::none), 1);
  CHECK(net.parameter_count() == 131841);
}

TEST_CASE("identity network forwards its input", "[nn]") {
  Network net = identity_network(3);
  Tensor x({2, 3}, {1, -2, 3, 0.5, 0, -1});
  CHECK(forward(net, x, Mode::eval) == x);
}

TEST_CASE("all-zero weights with tanh output give zeros", "[nn]") {
  Network net = init_mlp(mlp_spec({3, 4, 2}, Act::relu, Act::tanh), 5);
  for (auto& layer : net.layers)
    for (auto& w : layer.weight.data()) w = 0.0;
  Tensor y = forward(net, Tensor::full({3, 3}, 0.7), Mode::eval);
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("hand-evaluated relu layer", "[nn]") {
  Network net = init_mlp(mlp_spec({2, 2}, Act::relu, Act::relu), 0);
  net.layers[0].weight = Tensor({2, 2}, {1, 0, 0, -1});
  net.layers[0].bias = Tensor::zeros({2});
  Tensor y = forward(net, Tensor({1, 2}, {1, 1}), Mode::eval);
  CHECK(y.at(0, 0) == 1.0);
  CHECK(y.at(0, 1) == 0.0);
}

TEST_CASE("forward validates widths and batch-norm batch size", "[nn]") {
  Network net = init_mlp(mlp_spec({3, 4, 2}, Act::relu, Act::none, true), 2);
  CHECK_THROWS_AS(forward(net, Tensor::zeros({2, 5}), Mode::eval), validation_error);
  CHECK_THROWS_AS(forward(net, Tensor::zeros({1, 3}), Mode::train), validation_error);
  CHECK_NOTHROW(forward(net, Tensor::zeros({2, 3}), Mode::train));
  CHECK_NOTHROW(forward(net, Tensor::zeros({1, 3}), Mode::eval));
}

TEST_CASE("train-mode batch norm normalizes the batch", "[nn]") {
  MlpSpec spec = mlp_spec({2, 8, 2}, Act::none, Act::none, true);
  Network net = init_mlp(spec, 9);
  Rng rng(17);
  Tensor x = Tensor::zeros({16, 2});
  for (auto& v : x.data()) v = rng.uniform(-1.0, 1.0);

  ExprGraph g;
  int xi = g.input("x", x.shape());
  std::vector<std::pair<std::string, int>> stats;
  int h = build_forward(net, g, xi, "net", Mode::train, &stats);
  g.mark_output("h", h);
  REQUIRE(stats.size() == 2);  // mean and var of the single bn layer

  Bindings b{{"x", x}};
  bind_params(net, "net", Mode::train, b);
  Bindings out = evaluate(g, b);
  // gamma=1, beta=0: the hidden pre-activation columns have near-zero mean
  const Tensor& bm = out.at("net/bn0/batch_mean");
  CHECK(bm.numel() == 8);

  Network updated = net;
  update_bn_running(updated, "net", out);
  for (std::size_t j = 0; j < 8; ++j) {
    double expect = kBnMomentum * 0.0 + (1.0 - kBnMomentum) * bm[j];
    CHECK(updated.layers[0].bn->running_mean[j] == Catch::Approx(expect).margin(1e-15));
    CHECK(updated.layers[0].bn->running_var[j] > 0.0);
  }
}

TEST_CASE("eval-mode forward is batch-order equivariant", "[nn]") {
  Network net = init_mlp(mlp_spec({3, 6, 2}, Act::relu, Act::tanh, true), 21);
  Rng rng(4);
  Tensor x = Tensor::zeros({5, 3});
  for (auto& v : x.data()) v = rng.uniform(-1.0, 1.0);
  Tensor y = forward(net, x, Mode::eval);

  std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Tensor xp = Tensor::zeros({5, 3});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) xp.at(i, j) = x.at(perm[i], j);
  Tensor yp = forward(net, xp, Mode::eval);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 2; ++j) CHECK(yp.at(i, j) == y.at(perm[i], j));
}

TEST_CASE("networks without activations are affine maps", "[nn]") {
  Network net = init_mlp(mlp_spec({4, 5, 3}, Act::none, Act::none), 33);
  Rng rng(8);
  for (int trial = 0; trial < 3; ++trial) {
    Tensor x = Tensor::zeros({1, 4}), y = Tensor::zeros({1, 4});
    for (auto& v : x.data()) v = rng.uniform(-2.0, 2.0);
    for (auto& v : y.data()) v = rng.uniform(-2.0, 2.0);
    Tensor sum = x;
    for (std::size_t i = 0; i < 4; ++i) sum[i] += y[i];
    Tensor fx = forward(net, x, Mode::eval);
    Tensor fy = forward(net, y, Mode::eval);
    Tensor fs = forward(net, sum, Mode::eval);
    Tensor f0 = forward(net, Tensor::zeros({1, 4}), Mode::eval);
    for (std::size_t j = 0; j < 3; ++j)
      CHECK(fs[j] - fx[j] - fy[j] + f0[j] == Catch::Approx(0.0).margin(1e-12));
  }
}

TEST_CASE("critic outputs are row-local", "[nn]") {
  Network net = init_mlp(mlp_spec({3, 8, 1}, Act::relu, Act::none), 12);
  Rng rng(9);
  Tensor x = Tensor::zeros({6, 3});
  for (auto& v : x.data()) v = rng.uniform(-1.0, 1.0);
  Tensor full = forward(net, x, Mode::eval);
  // each row alone gives the same value as within the batch
  for (std::size_t i = 0; i < 6; ++i) {
    Tensor row = Tensor::zeros({1, 3});
    for (std::size_t j = 0; j < 3; ++j) row.at(0, j) = x.at(i, j);
    CHECK(forward(net, row, Mode::eval)[0] == full[i]);
  }
}

TEST_CASE("adam with zero gradients is the identity", "[nn]") {
  Bindings params{{"w", Tensor({2, 2}, {1, 2, 3, 4})}};
  Bindings grads{{"w", Tensor::zeros({2, 2})}};
  AdamState st = make_adam({}, params);
  auto [next, st2] = adam_step(st, params, grads);
  CHECK(next.at("w") == params.at("w"));
  CHECK(st2.t == 1);
}

TEST_CASE("adam first step matches the hand computation", "[nn]") {
  // g=2, lr=1e-3, betas (.1,.5): mhat=2, vhat=4, step = 1e-3 * 2/(2+1e-8)
  Bindings params{{"w", Tensor::scalar(1.0)}};
  Bindings grads{{"w", Tensor::scalar(2.0)}};
  AdamConfig cfg;
  cfg.lr = 1e-3;
  cfg.beta1 = 0.1;
  cfg.beta2 = 0.5;
  cfg.eps = 1e-8;
  auto [next, st] = adam_step(make_adam(cfg, params), params, grads);
  double expect = 1.0 - 1e-3 * (2.0 / (2.0 + 1e-8));
  CHECK(next.at("w").item() == Catch::Approx(expect).margin(1e-15));
}

TEST_CASE("adam validates gradients", "[nn]") {
  Bindings params{{"w", Tensor::scalar(1.0)}};
  AdamState st = make_adam({}, params);
  Bindings bad_shape{{"w", Tensor::zeros({2})}};
  CHECK_THROWS_AS(adam_step(st, params, bad_shape), validation_error);
  Bindings nonfinite{{"w", Tensor::scalar(std::nan(""))}};
  CHECK_THROWS_AS(adam_step(st, params, nonfinite), numeric_error);
}
