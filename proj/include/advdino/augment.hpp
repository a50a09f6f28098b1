#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "advdino/tensor.hpp"

namespace advdino::aug {

struct Range {
  double lo;
  double hi;
};

struct AugmentConfig {
  std::size_t global_size = 32;
  std::size_t local_size = 16;
  std::size_t patch_size = 8;
  std::size_t n_global = 2;
  std::size_t n_local = 8;
  Range global_scale{0.48, 1.0};
  Range local_scale{0.16, 0.48};
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  Range blur_sigma{0.1, 2.0};
  double blur_prob_global = 0.5;
  double blur_prob_local = 0.1;
  Range mask_ratio{0.1, 0.5};

  static AugmentConfig paper();
  void validate() const;
};

struct Crop {
  Tensor image;  // [C, S, S]
  std::size_t source = 0;
  std::size_t domain = 0;
  // Source region in tile pixels (before resampling).
  double x0 = 0, y0 = 0, side = 0;
  bool hflip = false, vflip = false;
  double blur_sigma = 0.0;  // 0 when no blur was applied
};

struct MaskedCrop {
  Crop crop;
  std::vector<bool> mask;  // one entry per patch, row-major
};

struct CropSet {
  std::vector<Crop> globals;
  std::vector<Crop> locals;
  std::vector<MaskedCrop> masked;

  std::size_t view_count() const { return globals.size() + locals.size() + masked.size(); }
};

// Names of the transforms multi_crop applies, in order. Every stage is either
// purely spatial or acts on each channel independently.
std::vector<std::string> pipeline_stages();

// Two global, eight local and two masked global views of one [C, H, W] tile.
// The masked views share the pixels of the global views and add patch masks.
CropSet multi_crop(const Tensor& tile, std::size_t source, std::size_t domain, const AugmentConfig& config,
                   std::mt19937_64& rng);

// Resamples the square region (x0, y0, side) of every channel to out x out with
// bilinear interpolation at pixel centres (edges clamped).
Tensor resize_region(const Tensor& image, double x0, double y0, double side, std::size_t out);

Tensor flip(const Tensor& image, bool horizontal, bool vertical);

struct FlipResult {
  Tensor image;
  bool horizontal;
  bool vertical;
};
FlipResult random_flip(const Tensor& image, std::mt19937_64& rng, double p_horizontal = 0.5, double p_vertical = 0.5);

// Normalized Gaussian taps for offsets -r..r, r = ceil(3 sigma).
std::vector<double> gaussian_kernel(double sigma);

// Separable per-channel blur with half-sample symmetric reflection at borders.
Tensor gaussian_blur_channelwise(const Tensor& image, double sigma);

// Block-wise patch mask on a grid_h x grid_w grid covering round(ratio * N)
// patches exactly: rectangular blocks are added until the next block would
// overshoot, which is then truncated.
std::vector<bool> sample_mim_mask(std::size_t grid_h, std::size_t grid_w, double ratio, std::mt19937_64& rng);
// Square grid of num_patches.
std::vector<bool> sample_mim_mask(std::size_t num_patches, double ratio, std::mt19937_64& rng);

}  // namespace advdino::aug
