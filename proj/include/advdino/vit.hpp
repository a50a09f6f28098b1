#pragma once

#include <optional>
#include <random>
#include <span>
#include <vector>

#include "advdino/checkpoint.hpp"
#include "advdino/graph.hpp"
#include "advdino/module.hpp"

namespace advdino::vit {

struct EncoderConfig {
  std::size_t channels = 6;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t global_size = 32;
  std::size_t local_size = 16;

  // ViT-L/16 on 224/96 crops.
  static EncoderConfig paper() { return {6, 16, 1024, 24, 16, 4, 224, 96}; }

  void validate() const;
  std::size_t grid(std::size_t size) const { return size / patch_size; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
};

struct TokenOutput {
  Tensor cls;      // [D]
  Tensor patches;  // [N, D]
};

// Graph-level outputs for a batch of V same-size views.
struct EncodedBatch {
  Var cls;      // [V, D]
  Var patches;  // [V, N, D]
};

// Image tensors are [C, H, W]. Patches are scanned row-major, and each patch
// row is flattened in (channel, y, x) order.
Tensor patchify(const Tensor& image, std::size_t patch_size);
Tensor unpatchify(const Tensor& patches, std::size_t channels, std::size_t height, std::size_t width,
                  std::size_t patch_size);

ParamStore init_encoder(const EncoderConfig& config, std::mt19937_64& rng);

// Averages a [D, 3, P, P] kernel over its input channels and replicates the
// mean into `channels` input channels.
Tensor adapt_patch_embed_channels(const Tensor& weights3, std::size_t channels);

// Bicubic resampling matrix from an n_in x n_in grid to n_out x n_out
// (half-pixel centres, cubic coefficient -0.75, clamped borders).
Tensor bicubic_grid_matrix(std::size_t n_in, std::size_t n_out);

// `masks`, when given, holds one boolean per patch per view; masked patch
// embeddings are replaced by the learned mask token.
EncodedBatch encode_batch(const Bound& params, const EncoderConfig& config, std::span<const Tensor> images,
                          const std::vector<std::vector<bool>>* masks = nullptr);

TokenOutput encode(const Tensor& image, const ParamStore& params, const EncoderConfig& config);

// CLS embeddings for many images of the same size, chunked; rows follow input order.
std::vector<std::vector<double>> embed_cls(std::span<const Tensor> images, const ParamStore& params,
                                           const EncoderConfig& config, std::size_t chunk = 64);

}  // namespace advdino::vit
