#include "advdino/phenocluster.hpp"

#include <spdlog/spdlog.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <json.hpp>
#include <map>
#include <numeric>
#include <random>

#include "advdino/binary_io.hpp"
#include "advdino/rng.hpp"

namespace advdino::cluster {

using nlohmann::json;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

ClusterConfig ClusterConfig::paper() {
  ClusterConfig c;
  c.pca_dim = 128;
  c.knn_k = 250;
  c.resolution = 2.0;
  return c;
}

void ClusterConfig::validate() const {
  if (pca_dim == 0) throw Error("pca_dim must be positive");
  if (knn_k == 0) throw Error("knn_k must be positive");
  if (!(resolution > 0.0)) throw Error("resolution must be positive");
  if (!(reference_fraction > 0.0 && reference_fraction <= 1.0)) throw Error("reference_fraction must lie in (0, 1]");
  if (max_iterations == 0) throw Error("max_iterations must be positive");
  if (sample_per_cluster == 0) throw Error("sample_per_cluster must be positive");
}

Split subsample_reference(std::size_t n, double fraction, std::uint64_t seed) {
  if (n == 0) throw Error("cannot subsample an empty embedding set");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error("fraction must lie in (0, 1]");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto m = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  Split s;
  s.reference.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m));
  s.remainder.assign(order.begin() + static_cast<std::ptrdiff_t>(m), order.end());
  std::sort(s.reference.begin(), s.reference.end());
  std::sort(s.remainder.begin(), s.remainder.end());
  return s;
}

Tensor gather_rows(const Tensor& rows, std::span<const std::size_t> index) {
  if (rows.rank() != 2) throw ShapeError("gather_rows expects a matrix");
  const std::size_t d = rows.dim(1);
  Tensor out(Shape{index.size(), d});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows.dim(0)) throw ShapeError("row index out of range");
    std::copy_n(rows.data() + index[i] * d, d, out.data() + i * d);
  }
  return out;
}

Tensor PCAModel::transform(const Tensor& rows) const {
  if (rows.rank() != 2 || rows.dim(1) != mean.size()) throw ShapeError("PCA input dimension mismatch");
  const std::size_t n = rows.dim(0), d = rows.dim(1), k = components.dim(1);
  Eigen::Map<const RowMat> x(rows.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  Eigen::Map<const RowMat> w(components.data(), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k));
  Eigen::Map<const Eigen::RowVectorXd> mu(mean.data(), static_cast<Eigen::Index>(d));
  Tensor out(Shape{n, k});
  Eigen::Map<RowMat> y(out.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
  y.noalias() = (x.rowwise() - mu) * w;
  return out;
}

PCAResult pca_fit_transform(const Tensor& rows, std::size_t k) {
  if (rows.rank() != 2) throw ShapeError("PCA expects a matrix");
  const std::size_t n = rows.dim(0), d = rows.dim(1);
  if (k == 0 || k > std::min(n, d)) {
    throw Error("PCA k=" + std::to_string(k) + " exceeds min(n, dim)=" + std::to_string(std::min(n, d)));
  }
  Eigen::Map<const RowMat> x(rows.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mu;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Eigen::VectorXd& s = svd.singularValues();
  const Eigen::MatrixXd& v = svd.matrixV();
  const double smax = s.size() ? s(0) : 0.0;
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;

  PCAResult r;
  r.model.mean.assign(mu.data(), mu.data() + d);
  r.model.components = Tensor(Shape{d, k}, 0.0);
  r.model.explained_variance.assign(k, 0.0);
  r.model.degenerate.assign(k, false);
  for (std::size_t c = 0; c < k; ++c) {
    const double sc = s(static_cast<Eigen::Index>(c));
    if (smax <= 0.0 || sc <= 1e-10 * smax) {
      r.model.degenerate[c] = true;
      continue;
    }
    // Deterministic sign: the largest-magnitude loading is positive.
    Eigen::Index arg = 0;
    v.col(static_cast<Eigen::Index>(c)).cwiseAbs().maxCoeff(&arg);
    const double sign = v(arg, static_cast<Eigen::Index>(c)) < 0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < d; ++i) {
      r.model.components.at(i, c) = sign * v(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
    }
    r.model.explained_variance[c] = sc * sc / denom;
  }
  const auto flagged = std::count(r.model.degenerate.begin(), r.model.degenerate.end(), true);
  if (flagged) spdlog::warn("PCA: {} of {} components exceed the data rank and are zero-padded", flagged, k);
  r.reduced = r.model.transform(rows);
  return r;
}

std::vector<std::vector<std::uint32_t>> KnnGraph::adjacency() const {
  std::vector<std::vector<std::uint32_t>> adj(n);
  for (auto [a, b] : edges) {
    adj[a].push_back(b);
    adj[b].push_back(a);
  }
  for (auto& row : adj) std::sort(row.begin(), row.end());
  return adj;
}

namespace {

double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

}  // namespace

std::vector<std::uint32_t> nearest_neighbors(const Tensor& rows, std::size_t i, std::size_t k) {
  const std::size_t n = rows.dim(0), d = rows.dim(1);
  std::vector<std::pair<double, std::uint32_t>> cand;
  cand.reserve(n - 1);
  for (std::size_t j = 0; j < n; ++j) {
    if (j != i) cand.emplace_back(sq_dist(rows.data() + i * d, rows.data() + j * d, d), static_cast<std::uint32_t>(j));
  }
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
  std::vector<std::uint32_t> out(k);
  for (std::size_t t = 0; t < k; ++t) out[t] = cand[t].second;
  return out;
}

KnnGraph knn_graph(const Tensor& rows, std::size_t k) {
  if (rows.rank() != 2) throw ShapeError("knn_graph expects a matrix");
  const std::size_t n = rows.dim(0);
  if (k == 0 || k >= n) throw Error("knn_graph requires 0 < k < n (k=" + std::to_string(k) + ", n=" + std::to_string(n) + ")");
  KnnGraph g;
  g.n = n;
  g.k = k;
  g.edges.reserve(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto j : nearest_neighbors(rows, i, k)) {
      const auto a = static_cast<std::uint32_t>(std::min<std::size_t>(i, j));
      const auto b = static_cast<std::uint32_t>(std::max<std::size_t>(i, j));
      g.edges.emplace_back(a, b);
    }
  }
  std::sort(g.edges.begin(), g.edges.end());
  g.edges.erase(std::unique(g.edges.begin(), g.edges.end()), g.edges.end());
  return g;
}

double modularity(const KnnGraph& graph, std::span<const std::size_t> labels, double resolution) {
  if (labels.size() != graph.n) throw ShapeError("partition size does not match graph");
  const double m = static_cast<double>(graph.edges.size());
  if (m == 0.0) return 0.0;
  const std::size_t kmax = graph.n ? *std::max_element(labels.begin(), labels.end()) + 1 : 0;
  std::vector<double> internal(kmax, 0.0), degree(kmax, 0.0);
  for (auto [a, b] : graph.edges) {
    degree[labels[a]] += 1.0;
    degree[labels[b]] += 1.0;
    if (labels[a] == labels[b]) internal[labels[a]] += 1.0;
  }
  double q = 0.0;
  for (std::size_t c = 0; c < kmax; ++c) q += internal[c] / m - resolution * (degree[c] / (2 * m)) * (degree[c] / (2 * m));
  return q;
}

bool communities_connected(const KnnGraph& graph, std::span<const std::size_t> labels) {
  const auto adj = graph.adjacency();
  std::vector<bool> seen(graph.n, false), cluster_seen;
  for (std::size_t s = 0; s < graph.n; ++s) {
    if (seen[s]) continue;
    if (labels[s] >= cluster_seen.size()) cluster_seen.resize(labels[s] + 1, false);
    if (cluster_seen[labels[s]]) return false;  // second component of one community
    cluster_seen[labels[s]] = true;
    std::vector<std::size_t> stack{s};
    seen[s] = true;
    while (!stack.empty()) {
      const auto u = stack.back();
      stack.pop_back();
      for (auto v : adj[u]) {
        if (!seen[v] && labels[v] == labels[u]) {
          seen[v] = true;
          stack.push_back(v);
        }
      }
    }
  }
  return true;
}

namespace {

// Weighted graph used across aggregation levels. strength includes self loops.
struct WGraph {
  std::size_t n = 0;
  std::vector<std::vector<std::pair<std::size_t, double>>> adj;  // no self loops
  std::vector<double> strength;
  double total = 0.0;  // 2m
};

WGraph from_knn(const KnnGraph& g) {
  WGraph w;
  w.n = g.n;
  w.adj.resize(g.n);
  w.strength.assign(g.n, 0.0);
  for (auto [a, b] : g.edges) {
    w.adj[a].emplace_back(b, 1.0);
    w.adj[b].emplace_back(a, 1.0);
    w.strength[a] += 1.0;
    w.strength[b] += 1.0;
  }
  for (auto& row : w.adj) std::sort(row.begin(), row.end());
  w.total = 2.0 * static_cast<double>(g.edges.size());
  return w;
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::size_t relabel(std::vector<std::size_t>& p) {
  std::map<std::size_t, std::size_t> ids;
  for (auto& c : p) {
    auto [it, fresh] = ids.emplace(c, ids.size());
    c = it->second;
  }
  return ids.size();
}

class Leiden {
 public:
  Leiden(double gamma, std::mt19937_64& rng) : gamma_(gamma), rng_(rng) {}

  // Fast local moving; returns true if any node changed community.
  bool move_nodes(const WGraph& g, std::vector<std::size_t>& p) {
    std::vector<double> ktot(g.n, 0.0);
    std::vector<std::size_t> size(g.n, 0);
    for (std::size_t v = 0; v < g.n; ++v) {
      ktot[p[v]] += g.strength[v];
      ++size[p[v]];
    }
    std::vector<std::size_t> empty;
    for (std::size_t c = g.n; c-- > 0;) {
      if (size[c] == 0) empty.push_back(c);
    }
    std::vector<std::size_t> order(g.n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng_);
    std::deque<std::size_t> queue(order.begin(), order.end());
    std::vector<bool> queued(g.n, true);
    std::vector<double> wto(g.n, 0.0);
    std::vector<std::size_t> touched;
    bool changed = false;
    while (!queue.empty()) {
      const auto v = queue.front();
      queue.pop_front();
      queued[v] = false;
      const std::size_t from = p[v];
      const double kv = g.strength[v];
      touched.clear();
      for (auto [u, w] : g.adj[v]) {
        if (wto[p[u]] == 0.0) touched.push_back(p[u]);
        wto[p[u]] += w;
      }
      ktot[from] -= kv;
      --size[from];
      std::size_t best = from;
      double best_gain = wto[from] - gamma_ * kv * ktot[from] / g.total;
      for (auto c : touched) {
        if (c == from) continue;
        const double gain = wto[c] - gamma_ * kv * ktot[c] / g.total;
        if (gain > best_gain + 1e-12) {
          best = c;
          best_gain = gain;
        }
      }
      if (size[from] > 0 && 0.0 > best_gain + 1e-12) {
        best = empty.back();
        empty.pop_back();
      }
      for (auto c : touched) wto[c] = 0.0;
      ktot[best] += kv;
      ++size[best];
      if (size[from] == 0 && best != from) empty.push_back(from);
      if (best != from) {
        p[v] = best;
        changed = true;
        for (auto [u, w] : g.adj[v]) {
          if (!queued[u] && p[u] != best) {
            queued[u] = true;
            queue.push_back(u);
          }
        }
      }
    }
    return changed;
  }

  // Refinement: merge singletons within each community toward well-connected
  // subcommunities with randomized (theta) selection.
  std::vector<std::size_t> refine(const WGraph& g, const std::vector<std::size_t>& p) {
    std::vector<std::size_t> r(g.n);
    std::iota(r.begin(), r.end(), 0);
    std::vector<double> rk(g.strength);          // refined community strength
    std::vector<double> rext(g.n, 0.0);          // weight from refined community to rest of its parent
    std::vector<std::size_t> rsize(g.n, 1);
    std::vector<double> pk(g.n, 0.0);
    for (std::size_t v = 0; v < g.n; ++v) pk[p[v]] += g.strength[v];
    for (std::size_t v = 0; v < g.n; ++v) {
      for (auto [u, w] : g.adj[v]) {
        if (p[u] == p[v]) rext[v] += w;
      }
    }
    const std::vector<double> inner = rext;  // weight from each node to the rest of its community
    std::vector<std::size_t> order(g.n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng_);
    std::vector<double> wto(g.n, 0.0);
    std::vector<std::size_t> touched;
    std::vector<std::pair<std::size_t, double>> cand;
    for (auto v : order) {
      const double kv = g.strength[v];
      const double kc = pk[p[v]];
      if (inner[v] < gamma_ * kv * (kc - kv) / g.total) continue;  // node not well connected
      if (rsize[r[v]] != 1) continue;                          // already merged into
      touched.clear();
      for (auto [u, w] : g.adj[v]) {
        if (p[u] != p[v]) continue;
        if (wto[r[u]] == 0.0) touched.push_back(r[u]);
        wto[r[u]] += w;
      }
      cand.clear();
      double max_gain = 0.0;
      for (auto c : touched) {
        if (c == r[v]) continue;
        if (rext[c] < gamma_ * rk[c] * (kc - rk[c]) / g.total) continue;  // subcommunity not well connected
        // Quality units: modularity changes by gain / m.
        const double gain = 2.0 * (wto[c] - gamma_ * kv * rk[c] / g.total) / g.total;
        if (gain >= 0.0) {
          cand.emplace_back(c, gain);
          max_gain = std::max(max_gain, gain);
        }
      }
      if (!cand.empty()) {
        // Staying a singleton has gain 0 and is a candidate too.
        double z = std::exp(-max_gain / kTheta);
        for (auto& [c, gain] : cand) z += std::exp((gain - max_gain) / kTheta);
        double u = uniform01(rng_) * z - std::exp(-max_gain / kTheta);
        std::size_t target = r[v];
        if (u >= 0.0) {
          target = cand.back().first;
          for (auto& [c, gain] : cand) {
            u -= std::exp((gain - max_gain) / kTheta);
            if (u < 0.0) {
              target = c;
              break;
            }
          }
        }
        if (target != r[v]) {
          const std::size_t from = r[v];
          rext[target] = rext[target] + rext[from] - 2.0 * wto[target];
          rk[target] += kv;
          ++rsize[target];
          rk[from] = 0.0;
          rsize[from] = 0;
          rext[from] = 0.0;
          r[v] = target;
        }
      }
      for (auto c : touched) wto[c] = 0.0;
    }
    return r;
  }

 private:
  static constexpr double kTheta = 0.01;
  double gamma_;
  std::mt19937_64& rng_;
};

WGraph aggregate(const WGraph& g, const std::vector<std::size_t>& r, std::size_t nr) {
  WGraph a;
  a.n = nr;
  a.adj.resize(nr);
  a.strength.assign(nr, 0.0);
  a.total = g.total;
  std::vector<std::map<std::size_t, double>> acc(nr);
  for (std::size_t v = 0; v < g.n; ++v) {
    a.strength[r[v]] += g.strength[v];
    for (auto [u, w] : g.adj[v]) {
      if (r[u] != r[v]) acc[r[v]][r[u]] += w;
    }
  }
  for (std::size_t c = 0; c < nr; ++c) a.adj[c].assign(acc[c].begin(), acc[c].end());
  return a;
}

// Splits any disconnected community into its components.
std::size_t split_disconnected(const KnnGraph& graph, std::vector<std::size_t>& labels) {
  const auto adj = graph.adjacency();
  std::vector<std::size_t> out(graph.n, SIZE_MAX);
  std::size_t next = 0;
  for (std::size_t s = 0; s < graph.n; ++s) {
    if (out[s] != SIZE_MAX) continue;
    out[s] = next;
    std::vector<std::size_t> stack{s};
    while (!stack.empty()) {
      const auto u = stack.back();
      stack.pop_back();
      for (auto v : adj[u]) {
        if (out[v] == SIZE_MAX && labels[v] == labels[u]) {
          out[v] = next;
          stack.push_back(v);
        }
      }
    }
    ++next;
  }
  labels = std::move(out);
  return relabel(labels);
}

}  // namespace

namespace {

Partition leiden_single(const KnnGraph& graph, double resolution, std::uint64_t seed, std::size_t max_iterations,
                        bool random_start) {
  Partition out;
  out.resolution = resolution;
  out.seed = seed;
  out.labels.resize(graph.n);
  std::iota(out.labels.begin(), out.labels.end(), 0);
  if (graph.edges.empty()) {
    out.n_clusters = graph.n;
    out.quality = 0.0;
    out.quality_trace.push_back(0.0);
    return out;
  }
  std::mt19937_64 rng(seed);
  Leiden leiden(resolution, rng);
  const WGraph base = from_knn(graph);
  std::vector<std::size_t> labels = out.labels;
  if (random_start) {
    // Random initial membership over a random number of groups.
    const std::size_t groups = 1 + rng() % graph.n;
    for (auto& l : labels) l = rng() % groups;
    split_disconnected(graph, labels);
  }
  double quality = modularity(graph, labels, resolution);
  for (std::size_t it = 0; it < std::max<std::size_t>(1, max_iterations); ++it) {
    WGraph g = base;
    std::vector<std::size_t> p = labels;  // partition of current level's nodes
    std::vector<std::size_t> node_of(graph.n);
    std::iota(node_of.begin(), node_of.end(), 0);
    bool any_change = false;
    while (true) {
      any_change |= leiden.move_nodes(g, p);
      std::vector<std::size_t> pl = p;
      const std::size_t np = relabel(pl);
      if (np == g.n) break;
      std::vector<std::size_t> r = leiden.refine(g, pl);
      const std::size_t nr = relabel(r);
      WGraph a = aggregate(g, r, nr);
      std::vector<std::size_t> ap(nr);
      for (std::size_t v = 0; v < g.n; ++v) ap[r[v]] = pl[v];
      for (auto& x : node_of) x = r[x];
      // Refinement that leaves every node alone cannot make progress.
      if (nr == g.n) {
        p = pl;
        break;
      }
      g = std::move(a);
      p = std::move(ap);
    }
    std::vector<std::size_t> next(graph.n);
    for (std::size_t v = 0; v < graph.n; ++v) next[v] = p[node_of[v]];
    relabel(next);
    const double q = modularity(graph, next, resolution);
    if (q < quality - 1e-12) throw Error("Leiden quality decreased across iterations");
    const bool same = next == labels;
    labels = std::move(next);
    quality = q;
    out.quality_trace.push_back(q);
    if (same || !any_change) break;
  }
  std::size_t k = relabel(labels);
  if (!communities_connected(graph, labels)) {
    spdlog::warn("Leiden produced a disconnected community; splitting into components");
    k = split_disconnected(graph, labels);
  }
  out.labels = std::move(labels);
  out.n_clusters = k;
  out.quality = modularity(graph, out.labels, resolution);
  return out;
}

}  // namespace

Partition leiden_partition(const KnnGraph& graph, double resolution, std::uint64_t seed, std::size_t max_iterations,
                           std::size_t restarts) {
  if (graph.n == 0) throw Error("leiden_partition requires a nonempty graph");
  if (!(resolution > 0.0)) throw Error("resolution must be positive");
  Partition best;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, restarts); ++r) {
    Partition p = leiden_single(graph, resolution, r == 0 ? seed : derive_seed(seed, r), max_iterations, r % 2 == 1);
    if (r == 0 || p.quality > best.quality + 1e-12) best = std::move(p);
  }
  best.seed = seed;
  return best;
}

std::vector<std::size_t> propagate_labels(const Tensor& reference, std::span<const std::size_t> labels,
                                          const Tensor& query) {
  if (reference.rank() != 2 || query.rank() != 2) throw ShapeError("propagate_labels expects matrices");
  if (reference.dim(0) == 0) throw Error("reference set is empty");
  if (reference.dim(1) != query.dim(1)) throw ShapeError("reference and query dimensions differ");
  if (labels.size() != reference.dim(0)) throw ShapeError("one label per reference row required");
  const std::size_t d = reference.dim(1), nr = reference.dim(0), nq = query.dim(0);
  std::vector<std::size_t> out(nq);
  for (std::size_t q = 0; q < nq; ++q) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t r = 0; r < nr; ++r) {
      const double dist = sq_dist(query.data() + q * d, reference.data() + r * d, d);
      if (dist < best) {
        best = dist;
        arg = r;
      }
    }
    out[q] = labels[arg];
  }
  return out;
}

Tensor cluster_profile(const Tensor& tile_channel_means, std::span<const std::size_t> labels,
                       std::size_t sample_per_cluster, std::uint64_t seed) {
  if (tile_channel_means.rank() != 2 || tile_channel_means.dim(0) != labels.size()) {
    throw ShapeError("cluster_profile expects [tiles, channels] and one label per tile");
  }
  if (labels.empty()) throw Error("cluster_profile requires tiles");
  const std::size_t k = *std::max_element(labels.begin(), labels.end()) + 1, c = tile_channel_means.dim(1);
  if (k < 2) throw Error("cluster_profile requires at least 2 clusters");
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
  std::mt19937_64 rng(seed);
  Tensor z(Shape{k, c}, 0.0);
  for (std::size_t a = 0; a < k; ++a) {
    auto& m = members[a];
    if (m.empty()) throw Error("cluster " + std::to_string(a) + " has no tiles");
    if (m.size() > sample_per_cluster) {
      std::shuffle(m.begin(), m.end(), rng);
      m.resize(sample_per_cluster);
    }
    for (auto i : m) {
      for (std::size_t ch = 0; ch < c; ++ch) z.at(a, ch) += tile_channel_means.at(i, ch);
    }
    for (std::size_t ch = 0; ch < c; ++ch) z.at(a, ch) /= static_cast<double>(m.size());
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0.0, var = 0.0;
    for (std::size_t a = 0; a < k; ++a) mean += z.at(a, ch);
    mean /= static_cast<double>(k);
    for (std::size_t a = 0; a < k; ++a) var += (z.at(a, ch) - mean) * (z.at(a, ch) - mean);
    const double sd = std::sqrt(var / static_cast<double>(k));
    for (std::size_t a = 0; a < k; ++a) z.at(a, ch) = sd > 1e-12 ? (z.at(a, ch) - mean) / sd : 0.0;
  }
  return z;
}

Abundance cluster_abundance(std::span<const std::size_t> labels, std::span<const std::string> tile_slides,
                            std::size_t n_clusters, std::span<const std::string> slide_order) {
  if (labels.size() != tile_slides.size()) throw ShapeError("one slide id per tile required");
  Abundance a;
  if (slide_order.empty()) {
    a.slide_ids.assign(tile_slides.begin(), tile_slides.end());
    std::sort(a.slide_ids.begin(), a.slide_ids.end());
    a.slide_ids.erase(std::unique(a.slide_ids.begin(), a.slide_ids.end()), a.slide_ids.end());
  } else {
    a.slide_ids.assign(slide_order.begin(), slide_order.end());
  }
  std::map<std::string, std::size_t> row;
  for (std::size_t i = 0; i < a.slide_ids.size(); ++i) row.emplace(a.slide_ids[i], i);
  a.proportions = Tensor(Shape{a.slide_ids.size(), n_clusters}, 0.0);
  std::vector<double> count(a.slide_ids.size(), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = row.find(tile_slides[i]);
    if (it == row.end()) throw Error("tile slide " + tile_slides[i] + " not in slide list");
    if (labels[i] >= n_clusters) throw Error("cluster label out of range");
    a.proportions.at(it->second, labels[i]) += 1.0;
    count[it->second] += 1.0;
  }
  for (std::size_t s = 0; s < a.slide_ids.size(); ++s) {
    if (count[s] == 0.0) throw Error("slide " + a.slide_ids[s] + " has zero tiles");
    for (std::size_t c = 0; c < n_clusters; ++c) a.proportions.at(s, c) /= count[s];
  }
  return a;
}

void write_embedding_store(std::ostream& os, std::span<const EmbeddingRecord> records) {
  io::write_magic(os, "ADVE", kEmbeddingStoreVersion);
  io::write_pod<std::uint64_t>(os, records.size());
  const std::uint32_t dim = records.empty() ? 0 : static_cast<std::uint32_t>(records[0].values.size());
  io::write_pod<std::uint32_t>(os, dim);
  for (const auto& r : records) {
    if (r.values.size() != dim) throw ShapeError("embedding store requires a uniform dimension");
    io::write_string(os, r.tile_id);
    io::write_string(os, r.slide_id);
    os.write(reinterpret_cast<const char*>(r.values.data()), static_cast<std::streamsize>(dim * sizeof(float)));
  }
  if (!os) throw io::FormatError("embedding store write failed");
}

std::vector<EmbeddingRecord> read_embedding_store(std::istream& is) {
  const auto version = io::read_magic(is, "ADVE");
  if (version != kEmbeddingStoreVersion) throw io::FormatError("unsupported embedding store version " + std::to_string(version));
  const auto n = io::read_pod<std::uint64_t>(is);
  const auto dim = io::read_pod<std::uint32_t>(is);
  std::vector<EmbeddingRecord> out;
  out.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(n, 1u << 20)));
  for (std::uint64_t i = 0; i < n; ++i) {
    EmbeddingRecord r;
    r.tile_id = io::read_string(is);
    r.slide_id = io::read_string(is);
    r.values.resize(dim);
    if (!is.read(reinterpret_cast<char*>(r.values.data()), static_cast<std::streamsize>(dim * sizeof(float)))) {
      throw io::FormatError("truncated embedding record");
    }
    out.push_back(std::move(r));
  }
  return out;
}

void save_embedding_store(const std::string& path, std::span<const EmbeddingRecord> records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io::FormatError("cannot open " + path);
  write_embedding_store(os, records);
}

std::vector<EmbeddingRecord> load_embedding_store(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io::FormatError("cannot open " + path);
  return read_embedding_store(is);
}

Tensor embedding_matrix(std::span<const EmbeddingRecord> records) {
  const std::size_t d = records.empty() ? 0 : records[0].values.size();
  Tensor m(Shape{records.size(), d});
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].values.size() != d) throw ShapeError("embedding dimension mismatch");
    for (std::size_t j = 0; j < d; ++j) m.at(i, j) = records[i].values[j];
  }
  return m;
}

std::string partition_json(const Partition& p, std::span<const std::string> tile_ids) {
  if (tile_ids.size() != p.labels.size()) throw ShapeError("one tile id per node required");
  json clusters = json::object();
  for (std::size_t i = 0; i < tile_ids.size(); ++i) clusters[tile_ids[i]] = p.labels[i];
  json j{{"seed", p.seed}, {"resolution", p.resolution}, {"quality", p.quality},
         {"n_clusters", p.n_clusters}, {"clusters", clusters}};
  return j.dump(2) + "\n";
}

}  // namespace advdino::cluster
