#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "advdino/tensor.hpp"

namespace advdino::eval {

// Harrell's C. Comparable pairs: i has an event and t_i < t_j. Concordant when
// score_i > score_j (higher score = higher risk); score ties earn 0.5.
double concordance_index(std::span<const double> scores, std::span<const double> times, std::span<const int> events);

// Pair-counting ARI from the contingency table. Returns 1 when both labelings
// are a single cluster or all singletons on both sides (degenerate agreement).
double adjusted_rand_index(std::span<const std::size_t> a, std::span<const std::size_t> b);

struct ProbeResult {
  double accuracy = 0.0;
  double chance = 0.0;  // largest class prior
  std::size_t n = 0;
};

// Held-out accuracy of a multinomial logistic regression (standardized
// features, L2 penalty) under stratified k-fold cross-validation.
ProbeResult domain_probe(const Tensor& embeddings, std::span<const std::size_t> labels, std::size_t folds,
                         std::uint64_t seed, double l2 = 1e-3, std::size_t iterations = 300);

// Slides split at the median risk score (ties to the low group); per group,
// cluster proportions among each slide's top_k attended tiles (all tiles when
// fewer); returns high minus low per cluster.
std::vector<double> attention_cluster_delta(const std::vector<std::vector<double>>& attention,
                                            const std::vector<std::vector<std::size_t>>& clusters,
                                            std::span<const double> risk, std::size_t n_clusters,
                                            std::size_t top_k = 25);

struct MetricReport {
  std::string name;
  double value = 0.0;
  std::size_t n = 0;
  std::string config_digest;
  std::uint64_t seed = 0;
};

std::string metrics_json(const std::vector<MetricReport>& metrics);

}  // namespace advdino::eval
