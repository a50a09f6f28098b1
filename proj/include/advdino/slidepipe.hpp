#pragma once

#include <array>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "advdino/tensor.hpp"

namespace advdino::slide {

inline const std::vector<std::string>& default_channel_names() {
  static const std::vector<std::string> names{"DAPI", "CD8", "FOXP3", "PD-L1", "PD-1", "CK", "AF"};
  return names;
}

// Multi-channel slide with intensities on a nominal [0, 255] scale. The last
// channel is autofluorescence.
struct SlideImage {
  std::string id;
  std::vector<std::string> channel_names;
  Tensor pixels;  // [C, H, W]

  std::size_t channels() const { return pixels.dim(0); }
  std::size_t height() const { return pixels.dim(1); }
  std::size_t width() const { return pixels.dim(2); }
};

// Fixed-size square tile stored in single precision.
struct TileImage {
  std::string slide_id;
  std::uint32_t x = 0, y = 0;
  std::uint32_t channels = 0, size = 0;
  std::vector<float> data;  // [channels, size, size]

  Tensor to_tensor() const;
  static TileImage from_tensor(std::string slide_id, std::uint32_t x, std::uint32_t y, const Tensor& t);
};

struct OtsuResult {
  int threshold = 0;  // foreground is bin >= threshold
  bool degenerate = false;
};

// Maximizes between-class variance over thresholds 1..255; ties go to the
// lowest threshold. All mass in one bin returns that bin, flagged degenerate.
OtsuResult otsu_threshold(std::span<const double> histogram);

// 256-bin histogram over [0, 255] (values floored and clamped).
std::array<double, 256> histogram256(std::span<const double> values);

// Box-mean downsample of one [H, W] plane by `factor` (partial edge boxes dropped).
Tensor box_downsample(const double* plane, std::size_t h, std::size_t w, std::size_t factor);

struct ForegroundMask {
  std::size_t factor = 1;
  std::size_t height = 0, width = 0;  // downsampled geometry
  std::vector<bool> on;
  std::vector<OtsuResult> per_channel;

  bool at(std::size_t y, std::size_t x) const { return on[y * width + x]; }
  std::size_t count() const;
};

// Per-channel Otsu on the downsampled slide, OR across channels. Degenerate
// channels (a single intensity) contribute no foreground.
ForegroundMask foreground_mask(const SlideImage& slide, std::size_t factor);

struct TileOrigin {
  std::uint32_t x, y;
};

// Fraction of a tile's pixels lying on foreground mask cells.
double tile_coverage(const ForegroundMask& mask, std::size_t x, std::size_t y, std::size_t tile_size);

// Non-overlapping grid tiles with coverage above `min_coverage`, row-major.
std::vector<TileOrigin> select_tiles(const ForegroundMask& mask, std::size_t slide_h, std::size_t slide_w,
                                     std::size_t tile_size, double min_coverage = 0.25);

// Raw (all-channel) tiles at the selected origins.
std::vector<TileImage> extract_tiles(const SlideImage& slide, const ForegroundMask& mask, std::size_t tile_size,
                                     double min_coverage = 0.25);

// Biomarker channels minus the last (autofluorescence) channel, clamped at 0;
// the autofluorescence channel is dropped.
Tensor background_subtract(const Tensor& tile);

// min(v, 200) * 255 / 200, elementwise.
void clip_rescale(std::span<double> values);
double clip_rescale(double v);

// Full per-tile preprocessing in fixed order: background subtraction, then clip/rescale.
TileImage preprocess_tile(const TileImage& raw);

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
};

// Streaming per-channel Welford accumulation; partial states merge exactly.
class NormAccumulator {
 public:
  explicit NormAccumulator(std::size_t channels = 0);
  void add(const TileImage& tile);
  void add(const Tensor& tile);
  void merge(const NormAccumulator& other);
  // Zero-variance channels get std 1 with a warning.
  NormStats finish() const;

 private:
  void add_value(std::size_t c, double v);
  std::vector<double> count_, mean_, m2_;
};

NormStats fit_norm_stats(std::span<const TileImage> tiles);
Tensor apply_norm(const Tensor& tile, const NormStats& stats);

// Slide IO: one raw little-endian plane per channel plus a JSON sidecar.
void write_slide(const std::string& sidecar_path, const SlideImage& slide, int bit_depth = 8);
SlideImage read_slide(const std::string& sidecar_path);

// Tile store: "ADVT", version, tile count u64, channels u32, tile size u32, then
// per tile: slide id string, x u32, y u32, channels*size*size f32.
inline constexpr std::uint32_t kTileStoreVersion = 1;
void write_tile_store(std::ostream& os, std::span<const TileImage> tiles);
std::vector<TileImage> read_tile_store(std::istream& is);
void save_tile_store(const std::string& path, std::span<const TileImage> tiles);
std::vector<TileImage> load_tile_store(const std::string& path);

std::string norm_stats_json(const NormStats& stats);
NormStats norm_stats_from_json(const std::string& text);

}  // namespace advdino::slide
