#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "advdino/adversary.hpp"
#include "advdino/gradcheck.hpp"

using namespace advdino;
using namespace advdino::adv;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = n(rng);
  return t;
}

}  // namespace

TEST_CASE("gradient reversal forward is the identity") {
  std::mt19937_64 rng(1);
  for (Tensor x : {Tensor::vector({1, 2, 3}), Tensor(Shape{4}, 0.0), random_tensor({7}, rng)}) {
    Graph g;
    Var y = grad_reverse(g.input("x", x));
    CHECK(y.value() == x);
  }
}

TEST_CASE("gradient reversal backward negates exactly") {
  Graph g;
  Var y = grad_reverse(g.parameter("x", Tensor::vector({0.3, 0.1, 0.7})));
  auto gx = g.node_backward(y.id, Tensor::vector({1, -2, 0}));
  CHECK(gx.at(0) == Tensor::vector({-1, 2, 0}));
  CHECK(g.node_backward(y.id, Tensor(Shape{3}, 0.0)).at(0) == Tensor(Shape{3}, 0.0));
  std::mt19937_64 rng(2);
  Tensor r = random_tensor({3}, rng);
  CHECK(g.node_backward(y.id, g.node_backward(y.id, r).at(0)).at(0) == r);
}

TEST_CASE("discriminator forward") {
  DiscriminatorConfig cfg{8, {6, 5}, 4};
  std::mt19937_64 rng(3);
  ParamStore p = init_discriminator(cfg, rng);
  CHECK(p.at("layers.0.weight").shape() == Shape{8, 6});
  CHECK(p.at("layers.2.weight").shape() == Shape{5, 4});
  {
    ParamStore zero = p;
    for (auto& [k, t] : zero) t.fill(0.0);
    Graph g;
    Bound b(g, zero, "disc.", true);
    Var probs = discriminator_forward(g.input("x", Tensor(Shape{1, 8}, 0.0)), b, cfg);
    for (double v : probs.value().values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  }
  Graph g;
  Bound b(g, p, "disc.", false);
  Var probs = discriminator_forward(g.input("x", random_tensor({1000, 8}, rng, 3.0)), b, cfg);
  for (std::size_t r = 0; r < 1000; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 4; ++j) s += probs.value().at(r, j);
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
  CHECK_THROWS_AS(discriminator_forward(g.input("y", Tensor(Shape{1, 7}, 1.0)), b, cfg), ShapeError);
}

TEST_CASE("hand-built two-domain linear discriminator") {
  DiscriminatorConfig cfg{2, {}, 2};
  ParamStore p{{"layers.0.weight", Tensor::matrix(2, 2, {1.0, -1.0, 0.5, 2.0})},
               {"layers.0.bias", Tensor::vector({0.1, -0.2})}};
  Graph g;
  Bound b(g, p, "", false);
  Var probs = discriminator_forward(g.input("x", Tensor::matrix(1, 2, {0.4, -0.3})), b, cfg);
  double z0 = 0.4 * 1.0 + -0.3 * 0.5 + 0.1;
  double z1 = 0.4 * -1.0 + -0.3 * 2.0 - 0.2;
  double p0 = 1.0 / (1.0 + std::exp(z1 - z0));
  CHECK(probs.value()[0] == doctest::Approx(p0).epsilon(1e-14));
  CHECK(probs.value()[1] == doctest::Approx(1.0 - p0).epsilon(1e-14));
}

TEST_CASE("adversarial loss values") {
  {
    Graph g;
    std::vector<std::size_t> lab{2};
    Var l = adversarial_loss(g.input("z", Tensor(Shape{1, 4}, 0.3)), lab, 1, 1);
    CHECK(l.value().item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
    CHECK(l.value().item() == doctest::Approx(1.3863).epsilon(1e-4));
  }
  {
    Graph g;
    Tensor z(Shape{2, 3}, 0.0);
    z.at(0, 1) = 1000.0;
    z.at(1, 2) = 1000.0;
    std::vector<std::size_t> lab{1, 2};
    CHECK(adversarial_loss(g.input("z", z), lab, 2, 1).value().item() == 0.0);
  }
  std::mt19937_64 rng(4);
  Tensor z = random_tensor({20, 3}, rng, 2.0);
  std::vector<std::size_t> lab(20);
  for (std::size_t i = 0; i < 20; ++i) lab[i] = i < 10 ? 0 : 2;  // one label per image, shared by its 10 crops
  Graph g;
  double got = adversarial_loss(g.input("z", z), lab, 2, 10).value().item();
  std::vector<double> terms;
  for (std::size_t r = 0; r < 20; ++r) {
    double m = std::max({z.at(r, 0), z.at(r, 1), z.at(r, 2)});
    double lse = m + std::log(std::exp(z.at(r, 0) - m) + std::exp(z.at(r, 1) - m) + std::exp(z.at(r, 2) - m));
    terms.push_back(lse - z.at(r, lab[r]));
  }
  double mean = 0.0;
  for (double t : terms) mean += t;
  CHECK(got == doctest::Approx(mean / 20).epsilon(1e-13));
  // Order-independent reduction: sorted summation agrees within 1e-9.
  std::sort(terms.begin(), terms.end());
  double sorted = 0.0;
  for (double t : terms) sorted += t;
  CHECK(std::abs(got - sorted / 20) <= 1e-9);

  // Permutation invariance over crops.
  std::vector<std::size_t> perm(20);
  for (std::size_t i = 0; i < 20; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor zp(z.shape());
  std::vector<std::size_t> lp(20);
  for (std::size_t i = 0; i < 20; ++i) {
    for (std::size_t j = 0; j < 3; ++j) zp.at(i, j) = z.at(perm[i], j);
    lp[i] = lab[perm[i]];
  }
  Graph g2;
  CHECK(adversarial_loss(g2.input("z", zp), lp, 2, 10).value().item() == doctest::Approx(got).epsilon(1e-13));

  Graph g3;
  CHECK_THROWS_AS(adversarial_loss(g3.input("z", z), lab, 2, 9), ShapeError);
  std::vector<std::size_t> bad(20, 3);
  CHECK_THROWS_AS(adversarial_loss(g3.input("w", z), bad, 2, 10), Error);
}

TEST_CASE("total loss combination") {
  CHECK(total_loss(2.0, 1.0, 0.1, LossWeights{1, 1, 50}) == doctest::Approx(8.0).epsilon(1e-14));
  CHECK(total_loss(2.0, 1.0, 0.1, LossWeights{1, 1, 0}) == 3.0);
  CHECK(total_loss(2.0, 1.0, 0.1, LossWeights{0, 0, 0}) == 0.0);
  CHECK_THROWS_AS(total_loss(NAN, 1.0, 0.1, LossWeights{}), Error);
  CHECK_THROWS_AS(total_loss(1.0, 1.0, 0.1, LossWeights{1, -1, 0}), Error);
  Graph g;
  Var l = total_loss(g.input("a", Tensor::scalar(2.0)), g.input("b", Tensor::scalar(1.0)),
                     g.input("c", Tensor::scalar(0.1)), LossWeights{1, 1, 50});
  CHECK(l.value().item() == doctest::Approx(8.0).epsilon(1e-14));
}

namespace {

// Scalar encoder f = theta * x feeding a scalar-output discriminator through an
// optional reversal. Returns (dL/dtheta, dL/dw).
std::pair<double, double> scalar_grads(bool reverse, double lambda) {
  Graph g;
  Var theta = g.parameter("theta", Tensor::matrix(1, 1, {0.7}));
  Var w = g.parameter("w", Tensor::matrix(1, 2, {0.4, -0.9}));
  Var f = ops::mul(theta, g.input("x", Tensor::matrix(1, 1, {1.3})));
  Var h = reverse ? grad_reverse(f) : f;
  Var logits = ops::matmul(h, w);
  std::vector<std::size_t> lab{1};
  Var ladv = adversarial_loss(logits, lab, 1, 1);
  Var zero = g.constant(Tensor::scalar(0.0));
  Var total = total_loss(zero, zero, ladv, LossWeights{1, 1, lambda});
  auto grads = g.backward(total);
  return {grads["theta"][0], grads["w"][1]};
}

}  // namespace

TEST_CASE("GRL sign contract on a scalar construction") {
  const double lambda = 50.0;
  auto [enc_rev, disc_rev] = scalar_grads(true, lambda);
  auto [enc_plain, disc_plain] = scalar_grads(false, 1.0);
  CHECK(enc_plain != 0.0);
  CHECK(std::abs(enc_rev - (-lambda * enc_plain)) <= 1e-12 * std::abs(lambda * enc_plain));
  // The discriminator still descends on L_adv: same sign as the plain gradient.
  CHECK(disc_rev == doctest::Approx(lambda * disc_plain).epsilon(1e-12));
  CHECK((disc_rev > 0) == (disc_plain > 0));
  CHECK((enc_rev > 0) != (enc_plain > 0));
}

TEST_CASE("end-to-end sign check by finite differences on a micro-model") {
  std::mt19937_64 rng(5);
  DiscriminatorConfig cfg{3, {4}, 3};
  ParamStore disc = init_discriminator(cfg, rng);
  Tensor enc_w = random_tensor({5, 3}, rng, 0.5);
  Tensor x = random_tensor({6, 5}, rng);
  std::vector<std::size_t> lab{0, 0, 0, 2, 2, 2};
  auto loss_of = [&](const Tensor& w, bool reverse, std::map<std::string, Tensor>* grads) {
    Graph g;
    Var wv = g.parameter("enc", w);
    Var f = ops::tanh(ops::matmul(g.input("x", x), wv));
    Bound b(g, disc, "disc.", true);
    Var l = adversarial_loss(discriminator_logits(reverse ? grad_reverse(f) : f, b, cfg), lab, 2, 3);
    if (grads) *grads = g.backward(l);
    return l.value().item();
  };
  std::map<std::string, Tensor> g_rev;
  loss_of(enc_w, true, &g_rev);
  const double h = 1e-6;
  double max_err = 0.0, max_mag = 0.0;
  for (std::size_t i = 0; i < enc_w.numel(); ++i) {
    Tensor wp = enc_w, wm = enc_w;
    wp[i] += h;
    wm[i] -= h;
    double fd = (loss_of(wp, false, nullptr) - loss_of(wm, false, nullptr)) / (2 * h);
    max_err = std::max(max_err, std::abs(g_rev["enc"][i] - (-fd)));
    max_mag = std::max(max_mag, std::abs(fd));
  }
  CHECK(max_err / max_mag < 1e-4);
}

TEST_CASE("adversarial loss passes grad_check through the discriminator and reversal") {
  std::mt19937_64 rng(6);
  DiscriminatorConfig cfg{4, {5, 3}, 3};
  ParamStore disc = init_discriminator(cfg, rng);
  Graph g;
  Bound b(g, disc, "disc.", true);
  Var f = g.parameter("f", random_tensor({4, 4}, rng));
  std::vector<std::size_t> lab{0, 1, 2, 1};
  Var l = adversarial_loss(discriminator_logits(grad_reverse(f), b, cfg), lab, 2, 2);
  // grad_check compares against finite differences of the forward map, which
  // does not see the reversal; check the discriminator leaves only here and
  // the reversal via the sign tests above.
  auto report = grad_check(g, l);
  for (auto& e : report.entries) {
    if (e.name == "f") continue;
    CHECK_MESSAGE(e.pass, e.name);
  }
}
