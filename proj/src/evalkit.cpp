#include "advdino/evalkit.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <json.hpp>
#include <map>
#include <numeric>
#include <random>

namespace advdino::eval {

double concordance_index(std::span<const double> s, std::span<const double> t, std::span<const int> e) {
  if (s.size() != t.size() || s.size() != e.size()) throw ShapeError("concordance_index: arrays differ in length");
  double conc = 0.0, comp = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!e[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!(t[i] < t[j])) continue;
      comp += 1.0;
      if (s[i] > s[j]) {
        conc += 1.0;
      } else if (s[i] == s[j]) {
        conc += 0.5;
      }
    }
  }
  if (comp == 0.0) throw Error("concordance_index: no comparable pairs");
  return conc / comp;
}

double adjusted_rand_index(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.size() != b.size()) throw ShapeError("adjusted_rand_index: labelings differ in length");
  const std::size_t n = a.size();
  if (n < 2) throw Error("adjusted_rand_index needs at least two items");
  // Pair counts are integers; the ratio is formed once so the result is the
  // correctly rounded value of the exact rational.
  std::map<std::pair<std::size_t, std::size_t>, std::int64_t> cell;
  std::map<std::size_t, std::int64_t> ra, rb;
  for (std::size_t i = 0; i < n; ++i) {
    cell[{a[i], b[i]}] += 1;
    ra[a[i]] += 1;
    rb[b[i]] += 1;
  }
  auto c2 = [](std::int64_t x) { return static_cast<__int128>(x) * (x - 1) / 2; };
  __int128 index = 0, sa = 0, sb = 0;
  for (auto& [k, v] : cell) index += c2(v);
  for (auto& [k, v] : ra) sa += c2(v);
  for (auto& [k, v] : rb) sb += c2(v);
  const __int128 pairs = c2(static_cast<std::int64_t>(n));
  // ARI = (index - sa sb / N) / ((sa + sb) / 2 - sa sb / N), scaled by 2N.
  const __int128 num = 2 * (index * pairs - sa * sb);
  const __int128 den = (sa + sb) * pairs - 2 * sa * sb;
  if (den == 0) return 1.0;
  return static_cast<double>(num) / static_cast<double>(den);
}

ProbeResult domain_probe(const Tensor& x, std::span<const std::size_t> labels, std::size_t folds, std::uint64_t seed,
                         double l2, std::size_t iterations) {
  if (x.rank() != 2 || x.dim(0) != labels.size()) throw ShapeError("domain_probe: embeddings/labels mismatch");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::size_t k = 0;
  for (auto l : labels) k = std::max(k, l + 1);
  std::vector<std::size_t> count(k, 0);
  for (auto l : labels) ++count[l];
  std::size_t present = 0;
  for (auto c : count) present += c > 0;
  if (present < 2) throw Error("domain_probe needs at least two domains");
  if (folds < 2 || folds > n) throw Error("domain_probe: invalid fold count");

  // Stratified fold assignment.
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> fold(n);
  std::vector<std::vector<std::size_t>> by_class(k);
  for (std::size_t i = 0; i < n; ++i) by_class[labels[i]].push_back(i);
  std::size_t cursor = 0;
  for (auto& idx : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (auto i : idx) fold[i] = cursor++ % folds;
  }

  using Mat = Eigen::MatrixXd;
  Mat X(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) X(i, j) = x.at(i, j);

  std::size_t correct = 0;
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<std::size_t> tr, te;
    for (std::size_t i = 0; i < n; ++i) (fold[i] == f ? te : tr).push_back(i);
    if (te.empty() || tr.empty()) continue;
    Eigen::RowVectorXd mu = Eigen::RowVectorXd::Zero(d), sd = Eigen::RowVectorXd::Zero(d);
    for (auto i : tr) mu += X.row(i);
    mu /= static_cast<double>(tr.size());
    for (auto i : tr) sd += (X.row(i) - mu).cwiseAbs2();
    sd = (sd / static_cast<double>(tr.size())).cwiseSqrt();
    for (std::size_t j = 0; j < d; ++j)
      if (!(sd(j) > 1e-12)) sd(j) = 1.0;
    auto prep = [&](const std::vector<std::size_t>& idx) {
      Mat Z(idx.size(), d + 1);
      for (std::size_t r = 0; r < idx.size(); ++r) {
        Z.row(r).head(d) = (X.row(idx[r]) - mu).cwiseQuotient(sd);
        Z(r, d) = 1.0;
      }
      return Z;
    };
    Mat Ztr = prep(tr), Zte = prep(te);
    Mat Y = Mat::Zero(tr.size(), k);
    for (std::size_t r = 0; r < tr.size(); ++r) Y(r, labels[tr[r]]) = 1.0;
    // Full-batch Adam on the penalized mean cross-entropy.
    Mat W = Mat::Zero(d + 1, k), m = W, v = W;
    const double lr = 0.05, b1 = 0.9, b2 = 0.999;
    for (std::size_t it = 1; it <= iterations; ++it) {
      Mat logits = Ztr * W;
      for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double mx = logits.row(r).maxCoeff();
        logits.row(r) = (logits.row(r).array() - mx).exp();
        logits.row(r) /= logits.row(r).sum();
      }
      Mat g = Ztr.transpose() * (logits - Y) / static_cast<double>(tr.size());
      g.topRows(d) += l2 * W.topRows(d);
      m = b1 * m + (1 - b1) * g;
      v = b2 * v + (1 - b2) * g.cwiseAbs2();
      const double c1 = 1 - std::pow(b1, static_cast<double>(it)), c2 = 1 - std::pow(b2, static_cast<double>(it));
      W -= lr * ((m / c1).array() / ((v / c2).array().sqrt() + 1e-8)).matrix();
    }
    Mat pred = Zte * W;
    for (std::size_t r = 0; r < te.size(); ++r) {
      Eigen::Index arg;
      pred.row(r).maxCoeff(&arg);
      correct += static_cast<std::size_t>(arg) == labels[te[r]];
    }
  }
  ProbeResult res;
  res.n = n;
  res.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  res.chance = static_cast<double>(*std::max_element(count.begin(), count.end())) / static_cast<double>(n);
  return res;
}

std::vector<double> attention_cluster_delta(const std::vector<std::vector<double>>& attention,
                                            const std::vector<std::vector<std::size_t>>& clusters,
                                            std::span<const double> risk, std::size_t n_clusters, std::size_t top_k) {
  const std::size_t n = attention.size();
  if (n == 0) throw Error("attention_cluster_delta: no slides");
  if (clusters.size() != n || risk.size() != n) throw ShapeError("attention_cluster_delta: inputs misaligned");
  std::vector<double> sorted(risk.begin(), risk.end());
  std::sort(sorted.begin(), sorted.end());
  const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  std::vector<double> high(n_clusters, 0.0), low(n_clusters, 0.0);
  double nh = 0, nl = 0;
  for (std::size_t s = 0; s < n; ++s) {
    if (attention[s].size() != clusters[s].size()) throw ShapeError("attention/cluster length mismatch");
    std::vector<std::size_t> order(attention[s].size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return attention[s][i] > attention[s][j]; });
    order.resize(std::min(order.size(), top_k));
    const bool is_high = risk[s] > median;
    for (auto i : order) {
      if (clusters[s][i] >= n_clusters) throw Error("cluster id out of range");
      (is_high ? high : low)[clusters[s][i]] += 1;
    }
    (is_high ? nh : nl) += static_cast<double>(order.size());
  }
  std::vector<double> delta(n_clusters, 0.0);
  for (std::size_t c = 0; c < n_clusters; ++c) delta[c] = (nh > 0 ? high[c] / nh : 0.0) - (nl > 0 ? low[c] / nl : 0.0);
  return delta;
}

std::string metrics_json(const std::vector<MetricReport>& metrics) {
  nlohmann::json j = nlohmann::json::array();
  for (auto& m : metrics)
    j.push_back({{"name", m.name}, {"value", m.value}, {"n", m.n}, {"config_digest", m.config_digest}, {"seed", m.seed}});
  return j.dump(2) + "\n";
}

}  // namespace advdino::eval
