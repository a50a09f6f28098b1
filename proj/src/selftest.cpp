#include "advdino/selftest.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <ostream>
#include <random>
#include <sstream>
#include <unistd.h>

#include "advdino/adversary.hpp"
#include "advdino/binary_io.hpp"
#include "advdino/evalkit.hpp"
#include "advdino/gradcheck.hpp"
#include "advdino/harness.hpp"
#include "advdino/slidepipe.hpp"
#include "advdino/ssl.hpp"
#include "advdino/survival.hpp"

namespace advdino::selftest {

namespace fs = std::filesystem;

namespace {

Tensor randn(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = n(rng);
  return t;
}

CheckResult grl_sign() {
  const double lambda = 50.0;
  auto encoder_grad = [](bool reverse, double weight) {
    Graph g;
    Var theta = g.parameter("theta", Tensor::matrix(1, 1, {0.7}));
    Var f = ops::tanh(theta);
    Var h = reverse ? adv::grad_reverse(f) : f;
    Var logits = ops::matmul(h, g.parameter("w", Tensor::matrix(1, 2, {0.3, -1.1})));
    std::vector<std::size_t> label{1};
    Var zero = g.constant(Tensor::scalar(0.0));
    Var total = adv::total_loss(zero, zero, adv::adversarial_loss(logits, label, 1, 1), adv::LossWeights{1, 1, weight});
    return g.backward(total)["theta"][0];
  };
  const double rev = encoder_grad(true, lambda), plain = encoder_grad(false, 1.0);
  const double rel = std::abs(rev + lambda * plain) / std::abs(lambda * plain);
  return {"grl_sign", plain != 0.0 && rel <= 1e-6, "relative deviation " + std::to_string(rel)};
}

CheckResult grad_check_total() {
  std::mt19937_64 rng(11);
  ssl::HeadConfig hc;
  hc.prototypes = 6;
  hc.hidden_dim = 5;
  hc.bottleneck_dim = 4;
  ParamStore head = ssl::init_head(hc, 3, rng);
  // Freshly initialized heads emit near-zero z, where the L2 normalization is
  // too sharp for a 1e-5 finite-difference step; check at a generic point.
  for (auto& [name, t] : head)
    for (auto& v : t.values()) v += 0.3 * std::normal_distribution<double>(0, 1)(rng);
  adv::DiscriminatorConfig dc{3, {4}, 2};
  ParamStore disc = adv::init_discriminator(dc, rng);
  Graph g;
  Bound h(g, head, "head.", true), d(g, disc, "disc.", true);
  Var cls = g.parameter("cls", randn({6, 3}, rng));  // B = 1, 2 globals + 4 locals
  Var logits = ssl::dino_head(cls, h);
  Tensor center = randn({6}, rng, 0.1);
  Var ld = ssl::distillation_loss(logits, randn({2, 6}, rng), ssl::cross_view_pairs(1, 2, 4), center, 0.1, 0.04);
  std::vector<std::size_t> rows{0, 0, 1};
  Var lm = ssl::mim_loss(g, ssl::dino_head(g.parameter("patch", randn({3, 3}, rng)), h), randn({3, 6}, rng), rows,
                         center, 0.1, 0.04);
  std::vector<std::size_t> labels(6, 1);
  Var la = adv::adversarial_loss(adv::discriminator_logits(cls, d, dc), labels, 1, 6);
  Var total = adv::total_loss(ld, lm, la, adv::LossWeights{1, 1, 50}) + ops::scale(ssl::koleo_loss(cls), 0.1);
  const auto report = grad_check(g, total);
  double worst = 0.0;
  for (const auto& e : report.entries) worst = std::max(worst, e.max_rel_error);
  return {"grad_check_total", report.pass, "worst relative error " + std::to_string(worst)};
}

CheckResult metric_oracles() {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> small(0, 4);
  std::size_t bad = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 2 + rep % 15;
    std::vector<double> s(n), t(n);
    std::vector<int> e(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = small(rng);
      t[i] = small(rng);
      e[i] = small(rng) % 2;
    }
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (e[i] && t[i] < t[j]) {
          den += 1.0;
          num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
        }
    if (den == 0.0) continue;
    if (std::abs(eval::concordance_index(s, t, e) - num / den) > 1e-12) ++bad;
  }
  std::vector<std::size_t> a{0, 0, 1, 1, 2}, b{5, 5, 7, 7, 9};
  if (eval::adjusted_rand_index(a, b) != 1.0) ++bad;
  std::vector<double> hist(256, 0.0);
  for (int v = 20; v < 40; ++v) hist[v] = 10.0;
  for (int v = 200; v < 220; ++v) hist[v] = 10.0;
  const auto otsu = slide::otsu_threshold(hist);
  if (otsu.threshold <= 39 || otsu.threshold > 200) ++bad;
  return {"metric_oracles", bad == 0, std::to_string(bad) + " mismatches"};
}

CheckResult cox_recovery() {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> g(0, 1);
  std::uniform_real_distribution<double> u(0, 1);
  const std::size_t n = 500;
  Tensor x(Shape{n, 1});
  std::vector<double> t(n);
  std::vector<int> e(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = g(rng);
    t[i] = -std::log(u(rng)) / (0.01 * std::exp(x[i]));
  }
  const auto fit = surv::coxph_fit(x, t, e);
  return {"cox_recovery", fit.converged && std::abs(fit.beta[0] - 1.0) <= 0.2,
          "beta " + std::to_string(fit.beta[0])};
}

CheckResult fold_plan() {
  std::vector<SlideRecord> records;
  for (int i = 0; i < 10; ++i) records.push_back({"s" + std::to_string(i), 10.0 + i, i % 2, -1, {}});
  const auto plan = harness::make_folds(records, 5, 4);
  bool ok = !plan.degraded;
  for (std::size_t f = 0; f < 5; ++f) {
    int events = 0, censored = 0;
    for (std::size_t i : plan.members(f)) (records[i].event ? events : censored) += 1;
    ok = ok && events == 1 && censored == 1;
  }
  return {"fold_plan", ok, "10 slides, 5 events, k = 5"};
}

CheckResult format_round_trips() {
  std::mt19937_64 rng(8);
  ParamStore params{{"a", randn({3, 4}, rng)}, {"b.c", randn({5}, rng)}};
  std::ostringstream c1;
  write_checkpoint(c1, params);
  std::istringstream c_in(c1.str());
  std::ostringstream c2;
  write_checkpoint(c2, read_checkpoint(c_in));

  std::vector<slide::TileImage> tiles{slide::TileImage::from_tensor("S1", 0, 64, randn({2, 8, 8}, rng)),
                                      slide::TileImage::from_tensor("S2", 128, 0, randn({2, 8, 8}, rng))};
  std::ostringstream t1;
  slide::write_tile_store(t1, tiles);
  std::istringstream t_in(t1.str());
  std::ostringstream t2;
  slide::write_tile_store(t2, slide::read_tile_store(t_in));

  std::vector<cluster::EmbeddingRecord> emb{{"S1:0:64", "S1", {0.5f, -1.25f, 3.0f}},
                                            {"S2:128:0", "S2", {1e-7f, 2.0f, -0.0f}}};
  std::ostringstream e1;
  cluster::write_embedding_store(e1, emb);
  std::istringstream e_in(e1.str());
  std::ostringstream e2;
  cluster::write_embedding_store(e2, cluster::read_embedding_store(e_in));

  const bool ok = io::fnv1a(c1.str()) == io::fnv1a(c2.str()) && io::fnv1a(t1.str()) == io::fnv1a(t2.str()) &&
                  io::fnv1a(e1.str()) == io::fnv1a(e2.str());
  return {"format_round_trips", ok, "checkpoint, ADVT and ADVE digests"};
}

CheckResult micro_pipeline() {
  const fs::path root = fs::temp_directory_path() / ("advdino-selftest-" + std::to_string(::getpid()));
  const auto level = spdlog::get_level();
  spdlog::set_level(spdlog::level::warn);
  CheckResult r{"micro_pipeline_deterministic", false, ""};
  try {
    const auto a = harness::run_pipeline(micro_config((root / "a").string()));
    const auto b = harness::run_pipeline(micro_config((root / "b").string()));
    const bool clean = a.report.at("audit").at("blind_stages_clean").get<bool>();
    r.passed = a.report_text == b.report_text && clean;
    r.detail = std::string(a.report_text == b.report_text ? "identical" : "different") + " reports, audit " +
               (clean ? "clean" : "violated");
  } catch (const std::exception& e) {
    r.detail = e.what();
  }
  spdlog::set_level(level);
  fs::remove_all(root);
  return r;
}

}  // namespace

harness::RunConfig micro_config(const std::string& out) {
  harness::RunConfig c = harness::RunConfig::desk();
  c.out = out;
  c.seed = 3;
  c.synth.n_slides = 12;
  c.synth.tiles_per_slide = 12;
  c.synth.tile_size = 32;
  c.preprocess.tile_size = 32;
  c.pretrain.steps = 3;
  c.pretrain.warmup_steps = 1;
  c.pretrain.batch_size = 4;
  c.pretrain.head.prototypes = 32;
  c.pretrain.disc_hidden = {16};
  c.cluster.pca_dim = 8;
  c.cluster.knn_k = 4;
  c.cluster.reference_fraction = 0.5;
  c.cluster.leiden_restarts = 2;
  c.abmil.epochs = 2;
  c.abmil.n_bins = 2;
  c.folds = 3;
  c.probe_folds = 2;
  return c;
}

std::vector<CheckResult> run_all(std::ostream& log) {
  std::vector<std::function<CheckResult()>> checks{grl_sign,     grad_check_total,   metric_oracles, cox_recovery,
                                                   fold_plan,    format_round_trips, micro_pipeline};
  std::vector<CheckResult> out;
  for (const auto& check : checks) {
    CheckResult r;
    try {
      r = check();
    } catch (const std::exception& e) {
      r.passed = false;
      r.detail = e.what();
    }
    log << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
    out.push_back(std::move(r));
  }
  return out;
}

bool all_passed(const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    if (!r.passed) return false;
  return true;
}

}  // namespace advdino::selftest
