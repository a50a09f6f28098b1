#include <cmath>
#include <random>
#include <sstream>

#include "advdino/checkpoint.hpp"
#include "advdino/gradcheck.hpp"
#include "advdino/graph.hpp"
#include "doctest.h"

using namespace advdino;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

}  // namespace

TEST_CASE("identity graph passes values through") {
  Graph g;
  auto x = g.input("x", Tensor::vector({1, 2, 3}));
  auto y = ops::identity(x);
  g.mark_output("y", y);
  auto out = g.forward({{"x", Tensor::vector({1, 2, 3})}});
  CHECK(out.at("y") == Tensor::vector({1, 2, 3}));
}

TEST_CASE("sum of squares value and gradient") {
  Graph g;
  auto x = g.parameter("x", Tensor::vector({1, 2}));
  auto y = ops::sum(x * x);
  CHECK(y.value().item() == 5.0);
  auto grads = g.backward(y, Tensor::scalar(1.0));
  CHECK(grads.at("x") == Tensor::vector({2, 4}));
}

TEST_CASE("two-layer MLP matches straight-line recomputation") {
  std::vector<double> w1 = {0.1, -0.2, 0.3, 0.4, 0.5, -0.6};  // 2x3
  std::vector<double> b1 = {0.01, 0.02, -0.03};
  std::vector<double> w2 = {0.7, -0.8, 0.9};  // 3x1
  std::vector<double> x = {1.5, -2.0};

  Graph g;
  auto xv = g.input("x", Tensor::matrix(1, 2, x));
  auto h = ops::relu(ops::matmul(xv, g.parameter("w1", Tensor::matrix(2, 3, w1))) +
                     g.parameter("b1", Tensor(Shape{3}, b1)));
  auto y = ops::matmul(h, g.parameter("w2", Tensor::matrix(3, 1, w2)));

  double expect = 0.0;
  for (int j = 0; j < 3; ++j) {
    double a = x[0] * w1[j] + x[1] * w1[3 + j] + b1[j];
    expect += (a > 0 ? a : 0) * w2[j];
  }
  CHECK(y.value().item() == doctest::Approx(expect).epsilon(1e-15));
}

TEST_CASE("softmax cross-entropy gradient is p minus onehot") {
  Graph g;
  auto z = g.parameter("z", Tensor::vector({0, 0, 0}));
  auto onehot = g.constant(Tensor::vector({0, 1, 0}));
  auto loss = -ops::sum(onehot * ops::log(ops::softmax(z)));
  auto grads = g.backward(loss);
  const Tensor& gz = grads.at("z");
  CHECK(gz[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(gz[1] == doctest::Approx(-2.0 / 3.0).epsilon(1e-12));
  CHECK(gz[2] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("layer norm gradient matches finite differences") {
  std::mt19937_64 rng(7);
  Graph g;
  auto x = g.parameter("x", random_tensor({4}, rng));
  auto gamma = g.parameter("gamma", random_tensor({4}, rng));
  auto beta = g.parameter("beta", random_tensor({4}, rng));
  auto w = g.constant(random_tensor({4}, rng));
  auto loss = ops::sum(ops::layer_norm(x, gamma, beta) * w);
  auto report = grad_check(g, loss, {.tolerance = 1e-6, .step = 1e-5});
  CHECK(report.pass);
}

TEST_CASE("grad_check passes on sum of squares and rejects non-scalar outputs") {
  Graph g;
  auto x = g.parameter("x", Tensor::vector({1, 2}));
  auto sq = x * x;
  auto y = ops::sum(sq);
  CHECK(grad_check(g, y, {.tolerance = 1e-6}).pass);
  CHECK_THROWS_AS(grad_check(g, sq), ShapeError);
}

TEST_CASE("corrupted backward rule is reported on its node") {
  Graph g;
  auto x = g.parameter("x", Tensor::vector({0.3, -0.7, 1.1}));
  auto bad = g.apply(
      "bad_square", {x},
      [](std::span<const Tensor* const> in) {
        Tensor out(in[0]->shape());
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = (*in[0])[i] * (*in[0])[i];
        return out;
      },
      [](const BackwardArgs& a) {
        for (std::size_t i = 0; i < a.output.numel(); ++i) (*a.grad_inputs[0])[i] += a.grad_output[i] * 3.0 * (*a.inputs[0])[i];
      });
  auto y = ops::sum(ops::tanh(bad));
  auto report = grad_check(g, y);
  CHECK_FALSE(report.pass);
  REQUIRE(report.faulty_nodes.size() == 1);
  CHECK(report.faulty_nodes[0].node == bad.id);
  CHECK(report.faulty_nodes[0].op == "bad_square");
}

TEST_CASE("every op agrees with finite differences on random inputs") {
  using OpBuilder = std::function<Var(Graph&, std::mt19937_64&)>;
  std::vector<std::pair<std::string, OpBuilder>> cases = {
      {"add_broadcast", [](Graph& g, auto& r) { return g.parameter("a", random_tensor({3, 4}, r)) + g.parameter("b", random_tensor({4}, r)); }},
      {"sub_col", [](Graph& g, auto& r) { return g.parameter("a", random_tensor({3, 4}, r)) - g.parameter("b", random_tensor({3, 1}, r)); }},
      {"mul", [](Graph& g, auto& r) { return g.parameter("a", random_tensor({2, 3}, r)) * g.parameter("b", random_tensor({2, 3}, r)); }},
      {"div", [](Graph& g, auto& r) { return ops::div(g.parameter("a", random_tensor({2, 3}, r)), g.parameter("b", random_tensor({2, 3}, r, 0.5, 2.0))); }},
      {"exp_log", [](Graph& g, auto& r) { return ops::log(ops::exp(g.parameter("a", random_tensor({5}, r)))); }},
      {"log", [](Graph& g, auto& r) { return ops::log(g.parameter("a", random_tensor({5}, r, 0.2, 3.0))); }},
      {"sqrt", [](Graph& g, auto& r) { return ops::sqrt(g.parameter("a", random_tensor({5}, r, 0.2, 3.0))); }},
      {"tanh", [](Graph& g, auto& r) { return ops::tanh(g.parameter("a", random_tensor({5}, r))); }},
      {"gelu", [](Graph& g, auto& r) { return ops::gelu(g.parameter("a", random_tensor({6}, r, -3, 3))); }},
      {"relu", [](Graph& g, auto& r) { return ops::relu(g.parameter("a", random_tensor({6}, r))); }},
      {"matmul", [](Graph& g, auto& r) { return ops::matmul(g.parameter("a", random_tensor({3, 4}, r)), g.parameter("b", random_tensor({4, 2}, r))); }},
      {"matmul_tb", [](Graph& g, auto& r) { return ops::matmul(g.parameter("a", random_tensor({3, 4}, r)), g.parameter("b", random_tensor({2, 4}, r)), true); }},
      {"bmm", [](Graph& g, auto& r) { return ops::matmul(g.parameter("a", random_tensor({2, 3, 4}, r)), g.parameter("b", random_tensor({2, 4, 3}, r))); }},
      {"matmul_nd", [](Graph& g, auto& r) { return ops::matmul(g.parameter("a", random_tensor({2, 3, 4}, r)), g.parameter("b", random_tensor({4, 5}, r))); }},
      {"permute", [](Graph& g, auto& r) { return ops::permute(g.parameter("a", random_tensor({2, 3, 4}, r)), {2, 0, 1}); }},
      {"reshape", [](Graph& g, auto& r) { return ops::reshape(g.parameter("a", random_tensor({2, 6}, r)), {3, 4}); }},
      {"slice", [](Graph& g, auto& r) { return ops::slice(g.parameter("a", random_tensor({2, 5, 3}, r)), 1, 1, 3); }},
      {"concat", [](Graph& g, auto& r) { return ops::concat({g.parameter("a", random_tensor({2, 2}, r)), g.parameter("b", random_tensor({2, 3}, r))}, 1); }},
      {"gather", [](Graph& g, auto& r) { return ops::gather(g.parameter("a", random_tensor({4, 3}, r)), {2, 0, 2}); }},
      {"softmax", [](Graph& g, auto& r) { return ops::softmax(g.parameter("a", random_tensor({3, 5}, r, -3, 3))); }},
      {"log_softmax", [](Graph& g, auto& r) { return ops::log_softmax(g.parameter("a", random_tensor({3, 5}, r, -3, 3))); }},
      {"layer_norm", [](Graph& g, auto& r) { return ops::layer_norm(g.parameter("a", random_tensor({3, 5}, r)), g.parameter("g", random_tensor({5}, r)), g.parameter("b", random_tensor({5}, r))); }},
      {"sum_axis", [](Graph& g, auto& r) { return ops::sum(g.parameter("a", random_tensor({3, 4}, r)), 0); }},
      {"mean_axis", [](Graph& g, auto& r) { return ops::mean(g.parameter("a", random_tensor({3, 4, 2}, r)), 1, true); }},
      {"clamp_min", [](Graph& g, auto& r) { return ops::clamp_min(g.parameter("a", random_tensor({6}, r)), 0.1); }},
  };
  for (auto& [name, build] : cases) {
    CAPTURE(name);
    for (int trial = 0; trial < 100; ++trial) {
      std::mt19937_64 rng(1000 * trial + name.size());
      Graph g;
      Var y = build(g, rng);
      auto w = g.constant(random_tensor(y.shape(), rng));
      auto loss = ops::sum(y * w);
      auto report = grad_check(g, loss, {.tolerance = 1e-4, .step = 1e-5, .locate_nodes = false});
      REQUIRE(report.pass);
    }
  }
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(3);
  Tensor xv = random_tensor({4}, rng);
  auto grad_of = [&](double a, double b) {
    Graph g;
    auto x = g.parameter("x", xv);
    auto l1 = ops::sum(ops::tanh(x) * x);
    auto l2 = ops::sum(ops::exp(x));
    return g.backward(ops::scale(l1, a) + ops::scale(l2, b)).at("x");
  };
  Tensor combined = grad_of(2.0, -3.0);
  Tensor g1 = grad_of(1.0, 0.0);
  Tensor g2 = grad_of(0.0, 1.0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(combined[i] == doctest::Approx(2.0 * g1[i] - 3.0 * g2[i]).epsilon(1e-14));
}

TEST_CASE("repeated runs are bit-identical") {
  auto run = [] {
    std::mt19937_64 rng(11);
    Graph g;
    auto a = g.parameter("a", random_tensor({3, 4}, rng));
    auto b = g.parameter("b", random_tensor({4, 2}, rng));
    auto y = ops::sum(ops::gelu(ops::matmul(a, b)));
    auto grads = g.backward(y);
    return std::make_pair(y.value(), grads);
  };
  auto r1 = run();
  auto r2 = run();
  CHECK(r1.first == r2.first);
  CHECK(r1.second == r2.second);
}

TEST_CASE("error paths") {
  Graph g;
  auto x = g.parameter("x", Tensor::vector({1, 2}));
  auto y = ops::sum(x * x);
  SUBCASE("seed shape mismatch") { CHECK_THROWS_AS(g.backward(y, Tensor::vector({1, 1})), ShapeError); }
  SUBCASE("backward before forward") {
    g.set_value(x, Tensor::vector({3, 4}));
    CHECK_THROWS_AS(g.backward(y), Error);
    g.forward();
    CHECK(g.backward(y).at("x") == Tensor::vector({6, 8}));
  }
  SUBCASE("forward input shape mismatch") {
    CHECK_THROWS_AS(g.forward({{"x", Tensor::vector({1, 2, 3})}}), ShapeError);
  }
  SUBCASE("shape mismatch in op") {
    auto z = g.parameter("z", Tensor::vector({1, 2, 3}));
    CHECK_THROWS_AS(x + z, ShapeError);
    CHECK_THROWS_AS(ops::matmul(g.constant(Tensor(Shape{2, 3})), g.constant(Tensor(Shape{2, 3}))), ShapeError);
  }
}

TEST_CASE("non-finite values are reported with the offending node") {
  Graph g(Graph::Options{.check_finite = true});
  auto x = g.input("x", Tensor::vector({1.0, 2.0}));
  auto y = ops::exp(ops::log(x));
  g.mark_output("y", y);
  try {
    g.forward({{"x", Tensor::vector({1.0, 0.0})}});
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(e.op() == "log");
    CHECK(e.node() == y.id - 1);
  }

  Graph quiet(Graph::Options{.check_finite = false});
  auto q = ops::log(quiet.input("x", Tensor::vector({0.0})));
  CHECK(quiet.first_nonfinite() == q.id);
}

TEST_CASE("checkpoint round trip is bit exact") {
  std::mt19937_64 rng(5);
  ParamStore params;
  params["encoder/w"] = random_tensor({3, 4}, rng, -1e6, 1e6);
  params["encoder/b"] = random_tensor({4}, rng);
  params["center"] = Tensor::scalar(-0.0);
  params["odd"] = Tensor::vector({std::nextafter(1.0, 2.0), 5e-324, -1e308});
  std::ostringstream os;
  write_checkpoint(os, params);
  std::string bytes = os.str();
  CHECK(bytes.substr(0, 4) == "ADVD");
  std::istringstream is(bytes);
  ParamStore back = read_checkpoint(is);
  CHECK(back == params);
  std::ostringstream os2;
  write_checkpoint(os2, back);
  CHECK(os2.str() == bytes);

  std::istringstream bad("ADVX\x01\0\0\0");
  CHECK_THROWS(read_checkpoint(bad));
  std::istringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS(read_checkpoint(truncated));
}
