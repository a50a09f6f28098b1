#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "advdino/tensor.hpp"

namespace advdino::cluster {

struct ClusterConfig {
  std::size_t pca_dim = 32;
  std::size_t knn_k = 15;
  double resolution = 1.0;
  double reference_fraction = 0.2;
  std::size_t max_iterations = 10;
  std::size_t leiden_restarts = 32;
  std::size_t sample_per_cluster = 2000;

  static ClusterConfig paper();
  void validate() const;
};

struct Split {
  std::vector<std::size_t> reference;  // row indices, ascending
  std::vector<std::size_t> remainder;  // row indices, ascending
};

Split subsample_reference(std::size_t n, double fraction, std::uint64_t seed);

Tensor gather_rows(const Tensor& rows, std::span<const std::size_t> index);

struct PCAModel {
  std::vector<double> mean;
  Tensor components;  // [input_dim, k], orthonormal columns
  std::vector<double> explained_variance;
  std::vector<bool> degenerate;  // zero-padded components beyond the data rank

  Tensor transform(const Tensor& rows) const;
};

struct PCAResult {
  PCAModel model;
  Tensor reduced;
};

PCAResult pca_fit_transform(const Tensor& rows, std::size_t k);

struct KnnGraph {
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;  // i < j, sorted, unique

  std::vector<std::vector<std::uint32_t>> adjacency() const;
};

// The k nearest other rows of row i, ties to lower index.
std::vector<std::uint32_t> nearest_neighbors(const Tensor& rows, std::size_t i, std::size_t k);
KnnGraph knn_graph(const Tensor& rows, std::size_t k);

struct Partition {
  std::vector<std::size_t> labels;
  std::size_t n_clusters = 0;
  double resolution = 1.0;
  double quality = 0.0;
  std::uint64_t seed = 0;
  std::vector<double> quality_trace;  // quality after each outer iteration
};

// Modularity with resolution gamma on an unweighted graph.
double modularity(const KnnGraph& graph, std::span<const std::size_t> labels, double resolution);

bool communities_connected(const KnnGraph& graph, std::span<const std::size_t> labels);

// Leiden (local moving, refinement, aggregation) iterated until the partition
// is stable or max_iterations is reached. Independent restarts use seeds
// derived from seed (odd restarts begin from a random membership split into
// connected pieces); the highest-quality partition wins, earliest on ties.
Partition leiden_partition(const KnnGraph& graph, double resolution, std::uint64_t seed,
                           std::size_t max_iterations = 10, std::size_t restarts = 32);

std::vector<std::size_t> propagate_labels(const Tensor& reference, std::span<const std::size_t> labels,
                                          const Tensor& query);

// Rows: per-tile channel means. Returns [clusters, channels] z-scores across clusters.
Tensor cluster_profile(const Tensor& tile_channel_means, std::span<const std::size_t> labels,
                       std::size_t sample_per_cluster, std::uint64_t seed);

struct Abundance {
  std::vector<std::string> slide_ids;
  Tensor proportions;  // [slides, clusters]
};

// Slide order follows slide_order when given, otherwise sorted unique ids.
Abundance cluster_abundance(std::span<const std::size_t> labels, std::span<const std::string> tile_slides,
                            std::size_t n_clusters, std::span<const std::string> slide_order = {});

struct EmbeddingRecord {
  std::string tile_id;
  std::string slide_id;
  std::vector<float> values;
};

inline constexpr std::uint32_t kEmbeddingStoreVersion = 1;
void write_embedding_store(std::ostream& os, std::span<const EmbeddingRecord> records);
std::vector<EmbeddingRecord> read_embedding_store(std::istream& is);
void save_embedding_store(const std::string& path, std::span<const EmbeddingRecord> records);
std::vector<EmbeddingRecord> load_embedding_store(const std::string& path);
Tensor embedding_matrix(std::span<const EmbeddingRecord> records);

std::string partition_json(const Partition& p, std::span<const std::string> tile_ids);

}  // namespace advdino::cluster
