#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>

#include "m2m/autodiff.hpp"
#include "m2m/nn.hpp"
#include "m2m/rng.hpp"

using namespace m2m;

namespace {

// Random scalar-output MLP graph fixture: y = mean(net(x)).
struct MlpFixture {
  ExprGraph g;
  Bindings bindings;
  Network net;
};

MlpFixture random_mlp_fixture(std::uint64_t seed, std::size_t batch, std::size_t max_width,
                              std::size_t max_depth) {
  Rng rng(mix_seed(seed, "fixture"));
  std::size_t depth = 1 + rng.index(max_depth);
  std::vector<std::size_t> widths{1 + rng.index(4)};
  for (std::size_t i = 0; i < depth; ++i) widths.push_back(2 + rng.index(max_width - 1));
  widths.push_back(1);
  MlpSpec spec;
  spec.layer_widths = widths;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    double pick = rng.uniform();
    spec.activations.push_back(pick < 0.4 ? Act::relu : (pick < 0.8 ? Act::tanh : Act::none));
    spec.batch_norm.push_back(false);
  }

  MlpFixture f;
  f.net = init_mlp(spec, mix_seed(seed, "weights"));
  int x = f.g.input("x", {batch, widths.front()});
  int y = build_forward(f.net, f.g, x, "net", Mode::eval);
  f.g.mark_output("loss", f.g.mean(y, Axis::all));

  Tensor xs = Tensor::zeros({batch, widths.front()});
  for (auto& v : xs.data()) v = rng.uniform(-1.0, 1.0);
  f.bindings["x"] = xs;
  bind_params(f.net, "net", Mode::eval, f.bindings);
  return f;
}

}  // namespace

TEST_CASE("evaluate on elementary graphs", "[autodiff]") {
  SECTION("x^2 at x=3 gives 9") {
    ExprGraph g;
    int x = g.input("x", {});
    g.mark_output("y", g.power(x, 2.0));
    Bindings b{{"x", Tensor::scalar(3.0)}};
    CHECK(evaluate(g, b)["y"].item() == 9.0);
  }
  SECTION("relu at -1 gives 0") {
    ExprGraph g;
    int x = g.input("x", {});
    g.mark_output("y", g.relu(x));
    Bindings b{{"x", Tensor::scalar(-1.0)}};
    CHECK(evaluate(g, b)["y"].item() == 0.0);
  }
  SECTION("tanh at 0 gives 0") {
    ExprGraph g;
    int x = g.input("x", {});
    g.mark_output("y", g.tanh_(x));
    Bindings b{{"x", Tensor::scalar(0.0)}};
    CHECK(evaluate(g, b)["y"].item() == 0.0);
  }
}

TEST_CASE("evaluate error paths", "[autodiff]") {
  ExprGraph g;
  int x = g.input("x", {2});
  g.mark_output("y", g.sum(x, Axis::all));

  SECTION("unbound leaf") {
    Bindings empty;
    CHECK_THROWS_AS(evaluate(g, empty), validation_error);
  }
  SECTION("shape mismatch") {
    Bindings b{{"x", Tensor::scalar(1.0)}};
    CHECK_THROWS_AS(evaluate(g, b), validation_error);
  }
  SECTION("unknown binding name") {
    Bindings b{{"x", Tensor::zeros({2})}, {"zz", Tensor::scalar(0.0)}};
    CHECK_THROWS_AS(evaluate(g, b), validation_error);
  }
  SECTION("non-finite intermediate") {
    ExprGraph h;
    int v = h.input("v", {});
    h.mark_output("y", h.power(v, 0.5));
    Bindings b{{"v", Tensor::scalar(-1.0)}};
    CHECK_THROWS_AS(evaluate(h, b), numeric_error);
  }
}

TEST_CASE("evaluate is pure", "[autodiff]") {
  auto f = random_mlp_fixture(11, 5, 8, 3);
  Tensor a = evaluate(f.g, f.bindings)["loss"];
  Tensor b = evaluate(f.g, f.bindings)["loss"];
  CHECK(a == b);
}

TEST_CASE("first derivatives of polynomials", "[autodiff]") {
  ExprGraph g;
  int x = g.input("x", {}, true);
  g.mark_output("y", g.power(x, 2.0));
  ExprGraph dg = gradient(g, "y", {"x"});
  Bindings b{{"x", Tensor::scalar(3.0)}};
  CHECK(evaluate(dg, b)["grad::x"].item() == Catch::Approx(6.0).margin(1e-12));
}

TEST_CASE("second derivative via repeated differentiation", "[autodiff]") {
  // d^2/dx^2 x^3 = 6x, which is 12 at x=2
  ExprGraph g;
  int x = g.input("x", {}, true);
  g.mark_output("y", g.power(x, 3.0));
  ExprGraph dg = gradient(g, "y", {"x"});
  ExprGraph ddg = gradient(dg, "grad::x", {"x"}, "grad2::");
  Bindings b{{"x", Tensor::scalar(2.0)}};
  CHECK(evaluate(ddg, b)["grad2::x"].item() == Catch::Approx(12.0).epsilon(1e-9));
}

TEST_CASE("second derivatives of polynomials match analytic", "[autodiff]") {
  // f(x) = 2x^4 - 3x^2 + x -> f''(x) = 24x^2 - 6
  ExprGraph g;
  int x = g.input("x", {}, true);
  int f = g.add(g.add(g.affine(g.power(x, 4.0), 2.0, 0.0), g.affine(g.power(x, 2.0), -3.0, 0.0)), x);
  g.mark_output("y", f);
  ExprGraph dg = gradient(g, "y", {"x"});
  ExprGraph ddg = gradient(dg, "grad::x", {"x"}, "grad2::");
  for (double v : {-1.7, -0.3, 0.9, 2.4}) {
    Bindings b{{"x", Tensor::scalar(v)}};
    double expect = 24.0 * v * v - 6.0;
    CHECK(evaluate(ddg, b)["grad2::x"].item() == Catch::Approx(expect).epsilon(1e-9));
  }
}

TEST_CASE("penalty-shaped gradient: d/dw (|w|-1)^2", "[autodiff]") {
  ExprGraph g;
  int w = g.input("w", {1, 2}, true);
  int norm = g.l2norm_rows(w);
  g.mark_output("y", g.sum(g.power(g.affine(norm, 1.0, -1.0), 2.0), Axis::all));
  ExprGraph dg = gradient(g, "y", {"w"});
  Bindings b{{"w", Tensor({1, 2}, {3.0, 4.0})}};
  Tensor grad = evaluate(dg, b)["grad::w"];
  // |w| = 5, gradient = 2(5-1) * w/5
  CHECK(grad[0] == Catch::Approx(4.8).epsilon(1e-12));
  CHECK(grad[1] == Catch::Approx(6.4).epsilon(1e-12));
  CHECK(check_gradients(g, "y", b, 1e-6) < 1e-7);
}

TEST_CASE("gradient rejects bad arguments", "[autodiff]") {
  ExprGraph g;
  int x = g.input("x", {3}, true);
  g.mark_output("v", x);
  g.mark_output("s", g.sum(x, Axis::all));
  CHECK_THROWS_AS(gradient(g, "v", {"x"}), validation_error);   // non-scalar output
  CHECK_THROWS_AS(gradient(g, "s", {"nope"}), validation_error);  // unknown leaf
  CHECK_THROWS_AS(gradient(g, "nope", {"x"}), validation_error);  // unknown output
}

TEST_CASE("check_gradients on x^2 is exact to roundoff", "[autodiff]") {
  ExprGraph g;
  int x = g.input("x", {}, true);
  g.mark_output("y", g.power(x, 2.0));
  Bindings b{{"x", Tensor::scalar(3.0)}};
  CHECK(check_gradients(g, "y", b, 1e-5) < 1e-7);
}

TEST_CASE("check_gradients on random MLPs", "[autodiff]") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto f = random_mlp_fixture(seed, 4, 16, 3);
    INFO("seed " << seed);
    CHECK(check_gradients(f.g, "loss", f.bindings, 1e-5) < 1e-4);
  }
}

TEST_CASE("second-order graph on a random critic checks out", "[autodiff]") {
  for (std::uint64_t seed = 100; seed < 105; ++seed) {
    auto f = random_mlp_fixture(seed, 3, 8, 2);
    // gradient of the per-row input-gradient norms, then differentiate the
    // resulting scalar with respect to the parameters
    ExprGraph dg = gradient(f.g, "loss", {"x"});
    int gx = dg.output_id("grad::x");
    int norms = dg.l2norm_rows(gx);
    dg.mark_output("pen", dg.mean(dg.power(dg.affine(norms, 1.0, -1.0), 2.0), Axis::all));
    INFO("seed " << seed);
    CHECK(check_gradients(dg, "pen", f.bindings, 1e-5) < 1e-4);
  }
}

TEST_CASE("gradient is linear", "[autodiff]") {
  Rng rng(42);
  for (int trial = 0; trial < 5; ++trial) {
    double ca = rng.uniform(-2.0, 2.0), cb = rng.uniform(-2.0, 2.0);
    ExprGraph g;
    int x = g.input("x", {4}, true);
    int f = g.sum(g.power(x, 2.0), Axis::all);
    int h = g.sum(g.tanh_(x), Axis::all);
    g.mark_output("f", f);
    g.mark_output("h", h);
    g.mark_output("combo", g.add(g.affine(f, ca, 0.0), g.affine(h, cb, 0.0)));

    Tensor xs = Tensor::zeros({4});
    for (auto& v : xs.data()) v = rng.uniform(-1.0, 1.0);
    Bindings b{{"x", xs}};

    Tensor gf = evaluate(gradient(g, "f", {"x"}), b)["grad::x"];
    Tensor gh = evaluate(gradient(g, "h", {"x"}), b)["grad::x"];
    Tensor gc = evaluate(gradient(g, "combo", {"x"}), b)["grad::x"];
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(gc[i] == Catch::Approx(ca * gf[i] + cb * gh[i]).margin(1e-9));
  }
}

TEST_CASE("gradient of an unconnected leaf is zero", "[autodiff]") {
  ExprGraph g;
  int x = g.input("x", {}, true);
  g.input("unused", {2, 2}, true);
  g.mark_output("y", g.power(x, 2.0));
  ExprGraph dg = gradient(g, "y", {"unused"});
  Bindings b{{"x", Tensor::scalar(1.0)}, {"unused", Tensor::full({2, 2}, 5.0)}};
  Tensor grad = evaluate(dg, b)["grad::unused"];
  for (std::size_t i = 0; i < grad.numel(); ++i) CHECK(grad[i] == 0.0);
}

TEST_CASE("relu subgradient at zero is zero", "[autodiff]") {
  ExprGraph g;
  int x = g.input("x", {}, true);
  g.mark_output("y", g.relu(x));
  Bindings b{{"x", Tensor::scalar(0.0)}};
  CHECK(evaluate(gradient(g, "y", {"x"}), b)["grad::x"].item() == 0.0);
}
