#include "advdino/slidepipe.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "advdino/binary_io.hpp"

namespace advdino::slide {

using nlohmann::json;

Tensor TileImage::to_tensor() const {
  Tensor t(Shape{channels, size, size});
  for (std::size_t i = 0; i < data.size(); ++i) t[i] = data[i];
  return t;
}

TileImage TileImage::from_tensor(std::string slide_id, std::uint32_t x, std::uint32_t y, const Tensor& t) {
  if (t.rank() != 3 || t.dim(1) != t.dim(2)) throw ShapeError("tiles must be [C, S, S], got " + shape_str(t.shape()));
  TileImage tile;
  tile.slide_id = std::move(slide_id);
  tile.x = x;
  tile.y = y;
  tile.channels = static_cast<std::uint32_t>(t.dim(0));
  tile.size = static_cast<std::uint32_t>(t.dim(1));
  tile.data.resize(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) tile.data[i] = static_cast<float>(t[i]);
  return tile;
}

OtsuResult otsu_threshold(std::span<const double> hist) {
  if (hist.size() != 256) throw Error("otsu_threshold expects 256 bins");
  double total = 0.0, total_sum = 0.0;
  int nonzero = 0, last = 0;
  for (int i = 0; i < 256; ++i) {
    if (hist[i] < 0.0) throw Error("negative histogram count");
    total += hist[i];
    total_sum += i * hist[i];
    if (hist[i] > 0.0) ++nonzero, last = i;
  }
  if (total <= 0.0) throw Error("otsu_threshold on an empty histogram");
  if (nonzero == 1) return {last, true};
  std::array<double, 256> score{};
  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  for (int t = 1; t < 256; ++t) {
    w0 += hist[t - 1];
    sum0 += (t - 1) * hist[t - 1];
    const double w1 = total - w0;
    if (w0 <= 0.0 || w1 <= 0.0) continue;
    const double mu0 = sum0 / w0, mu1 = (total_sum - sum0) / w1;
    score[t] = (w0 / total) * (w1 / total) * (mu0 - mu1) * (mu0 - mu1);
    best = std::max(best, score[t]);
  }
  for (int t = 1; t < 256; ++t)
    if (score[t] >= best * (1.0 - 1e-12)) return {t, false};
  return {last, true};
}

std::array<double, 256> histogram256(std::span<const double> values) {
  std::array<double, 256> h{};
  for (double v : values) {
    const int b = std::clamp(static_cast<int>(std::floor(v)), 0, 255);
    h[b] += 1.0;
  }
  return h;
}

Tensor box_downsample(const double* plane, std::size_t h, std::size_t w, std::size_t f) {
  if (f == 0) throw Error("downsample factor must be >= 1");
  const std::size_t dh = h / f, dw = w / f;
  if (dh == 0 || dw == 0) throw Error("slide smaller than one downsampled pixel");
  Tensor out(Shape{dh, dw}, 0.0);
  for (std::size_t y = 0; y < dh * f; ++y)
    for (std::size_t x = 0; x < dw * f; ++x) out[(y / f) * dw + x / f] += plane[y * w + x];
  const double inv = 1.0 / static_cast<double>(f * f);
  for (auto& v : out.values()) v *= inv;
  return out;
}

std::size_t ForegroundMask::count() const { return static_cast<std::size_t>(std::count(on.begin(), on.end(), true)); }

ForegroundMask foreground_mask(const SlideImage& s, std::size_t factor) {
  ForegroundMask m;
  m.factor = factor;
  const std::size_t h = s.height(), w = s.width();
  for (std::size_t c = 0; c < s.channels(); ++c) {
    Tensor small = box_downsample(s.pixels.data() + c * h * w, h, w, factor);
    if (c == 0) {
      m.height = small.dim(0);
      m.width = small.dim(1);
      m.on.assign(m.height * m.width, false);
    }
    auto hist = histogram256(small.values());
    OtsuResult r = otsu_threshold(hist);
    m.per_channel.push_back(r);
    if (r.degenerate) continue;
    for (std::size_t i = 0; i < small.numel(); ++i) {
      const int b = std::clamp(static_cast<int>(std::floor(small[i])), 0, 255);
      if (b >= r.threshold) m.on[i] = true;
    }
  }
  return m;
}

double tile_coverage(const ForegroundMask& mask, std::size_t x, std::size_t y, std::size_t tile_size) {
  const std::size_t f = mask.factor;
  std::size_t fg = 0;
  for (std::size_t py = y; py < y + tile_size; ++py) {
    const std::size_t my = py / f;
    if (my >= mask.height) continue;
    for (std::size_t px = x; px < x + tile_size; ++px) {
      const std::size_t mx = px / f;
      if (mx < mask.width && mask.on[my * mask.width + mx]) ++fg;
    }
  }
  return static_cast<double>(fg) / static_cast<double>(tile_size * tile_size);
}

std::vector<TileOrigin> select_tiles(const ForegroundMask& mask, std::size_t h, std::size_t w, std::size_t tile_size,
                                     double min_coverage) {
  if (tile_size == 0) throw Error("tile size must be positive");
  if (mask.height != h / mask.factor || mask.width != w / mask.factor) {
    throw ShapeError("mask geometry does not match the slide");
  }
  std::vector<TileOrigin> out;
  for (std::size_t y = 0; y + tile_size <= h; y += tile_size)
    for (std::size_t x = 0; x + tile_size <= w; x += tile_size)
      if (tile_coverage(mask, x, y, tile_size) > min_coverage) {
        out.push_back({static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y)});
      }
  return out;
}

std::vector<TileImage> extract_tiles(const SlideImage& s, const ForegroundMask& mask, std::size_t tile_size,
                                     double min_coverage) {
  std::vector<TileImage> tiles;
  const std::size_t c = s.channels(), h = s.height(), w = s.width();
  for (auto o : select_tiles(mask, h, w, tile_size, min_coverage)) {
    TileImage t;
    t.slide_id = s.id;
    t.x = o.x;
    t.y = o.y;
    t.channels = static_cast<std::uint32_t>(c);
    t.size = static_cast<std::uint32_t>(tile_size);
    t.data.resize(c * tile_size * tile_size);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t yy = 0; yy < tile_size; ++yy)
        for (std::size_t xx = 0; xx < tile_size; ++xx) {
          t.data[(ch * tile_size + yy) * tile_size + xx] =
              static_cast<float>(s.pixels[(ch * h + o.y + yy) * w + o.x + xx]);
        }
    tiles.push_back(std::move(t));
  }
  return tiles;
}

Tensor background_subtract(const Tensor& tile) {
  if (tile.rank() != 3 || tile.dim(0) < 2) throw ShapeError("background_subtract needs biomarker and AF channels");
  const std::size_t c = tile.dim(0) - 1, plane = tile.dim(1) * tile.dim(2);
  Tensor out(Shape{c, tile.dim(1), tile.dim(2)});
  const double* af = tile.data() + c * plane;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < plane; ++i) out[ch * plane + i] = std::max(tile[ch * plane + i] - af[i], 0.0);
  return out;
}

double clip_rescale(double v) { return std::min(v, 200.0) * 255.0 / 200.0; }

void clip_rescale(std::span<double> values) {
  for (auto& v : values) v = clip_rescale(v);
}

TileImage preprocess_tile(const TileImage& raw) {
  Tensor t = background_subtract(raw.to_tensor());
  clip_rescale(t.values());
  return TileImage::from_tensor(raw.slide_id, raw.x, raw.y, t);
}

NormAccumulator::NormAccumulator(std::size_t channels) : count_(channels), mean_(channels), m2_(channels) {}

void NormAccumulator::add_value(std::size_t c, double v) {
  count_[c] += 1.0;
  const double d = v - mean_[c];
  mean_[c] += d / count_[c];
  m2_[c] += d * (v - mean_[c]);
}

void NormAccumulator::add(const TileImage& tile) { add(tile.to_tensor()); }

void NormAccumulator::add(const Tensor& tile) {
  if (tile.rank() != 3) throw ShapeError("expected a [C, H, W] tile");
  if (count_.empty()) *this = NormAccumulator(tile.dim(0));
  if (tile.dim(0) != count_.size()) throw ShapeError("channel count changed within the tile stream");
  const std::size_t plane = tile.dim(1) * tile.dim(2);
  for (std::size_t c = 0; c < count_.size(); ++c)
    for (std::size_t i = 0; i < plane; ++i) add_value(c, tile[c * plane + i]);
}

void NormAccumulator::merge(const NormAccumulator& o) {
  if (o.count_.empty()) return;
  if (count_.empty()) {
    *this = o;
    return;
  }
  if (o.count_.size() != count_.size()) throw ShapeError("cannot merge statistics of different channel counts");
  for (std::size_t c = 0; c < count_.size(); ++c) {
    const double n = count_[c] + o.count_[c];
    if (n == 0.0) continue;
    const double d = o.mean_[c] - mean_[c];
    mean_[c] += d * o.count_[c] / n;
    m2_[c] += o.m2_[c] + d * d * count_[c] * o.count_[c] / n;
    count_[c] = n;
  }
}

NormStats NormAccumulator::finish() const {
  if (count_.empty() || count_[0] == 0.0) throw Error("fit_norm_stats needs at least one tile");
  NormStats s;
  for (std::size_t c = 0; c < count_.size(); ++c) {
    s.mean.push_back(mean_[c]);
    double sd = std::sqrt(m2_[c] / count_[c]);
    if (!(sd > 1e-12)) {
      spdlog::warn("channel {} has zero variance; using std 1", c);
      sd = 1.0;
    }
    s.std.push_back(sd);
  }
  return s;
}

NormStats fit_norm_stats(std::span<const TileImage> tiles) {
  NormAccumulator acc;
  for (const auto& t : tiles) acc.add(t);
  return acc.finish();
}

Tensor apply_norm(const Tensor& tile, const NormStats& s) {
  if (tile.rank() != 3 || tile.dim(0) != s.mean.size()) throw ShapeError("apply_norm channel mismatch");
  Tensor out = tile;
  const std::size_t plane = tile.dim(1) * tile.dim(2);
  for (std::size_t c = 0; c < s.mean.size(); ++c)
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = (tile[c * plane + i] - s.mean[c]) / s.std[c];
  return out;
}

void write_slide(const std::string& sidecar_path, const SlideImage& s, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) throw Error("bit depth must be 8 or 16");
  namespace fs = std::filesystem;
  const fs::path side(sidecar_path);
  const std::string stem = side.stem().string();
  json j;
  j["slide_id"] = s.id;
  j["height"] = s.height();
  j["width"] = s.width();
  j["bit_depth"] = bit_depth;
  j["channels"] = json::array();
  const std::size_t plane = s.height() * s.width();
  const double scale = bit_depth == 8 ? 1.0 : 65535.0 / 255.0;
  const double maxv = bit_depth == 8 ? 255.0 : 65535.0;
  for (std::size_t c = 0; c < s.channels(); ++c) {
    const std::string file = stem + "." + std::to_string(c) + ".raw";
    std::ostringstream os;
    for (std::size_t i = 0; i < plane; ++i) {
      const double v = std::clamp(std::round(s.pixels[c * plane + i] * scale), 0.0, maxv);
      if (bit_depth == 8) {
        io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(v));
      } else {
        io::write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(v));
      }
    }
    io::write_file((side.parent_path() / file).string(), os.str());
    j["channels"].push_back({{"name", c < s.channel_names.size() ? s.channel_names[c] : "ch" + std::to_string(c)},
                             {"file", file}});
  }
  io::write_file(sidecar_path, j.dump(2) + "\n");
}

SlideImage read_slide(const std::string& sidecar_path) {
  namespace fs = std::filesystem;
  json j;
  try {
    j = json::parse(io::read_file(sidecar_path));
  } catch (const json::exception& e) {
    throw io::FormatError("slide sidecar " + sidecar_path + ": " + e.what());
  }
  SlideImage s;
  try {
    s.id = j.at("slide_id").get<std::string>();
    const auto h = j.at("height").get<std::size_t>(), w = j.at("width").get<std::size_t>();
    const int depth = j.at("bit_depth").get<int>();
    if (depth != 8 && depth != 16) throw io::FormatError("unsupported bit depth");
    const auto& chans = j.at("channels");
    if (chans.empty()) throw io::FormatError("slide has no channels");
    s.pixels = Tensor(Shape{chans.size(), h, w});
    const std::size_t plane = h * w;
    const double scale = depth == 8 ? 1.0 : 255.0 / 65535.0;
    for (std::size_t c = 0; c < chans.size(); ++c) {
      s.channel_names.push_back(chans[c].at("name").get<std::string>());
      const std::string bytes =
          io::read_file((fs::path(sidecar_path).parent_path() / chans[c].at("file").get<std::string>()).string());
      if (bytes.size() != plane * static_cast<std::size_t>(depth / 8)) {
        throw io::FormatError("plane size mismatch for channel " + std::to_string(c));
      }
      for (std::size_t i = 0; i < plane; ++i) {
        double v;
        if (depth == 8) {
          v = static_cast<unsigned char>(bytes[i]);
        } else {
          std::uint16_t u;
          std::memcpy(&u, bytes.data() + 2 * i, 2);
          v = u;
        }
        s.pixels[c * plane + i] = v * scale;
      }
    }
  } catch (const json::exception& e) {
    throw io::FormatError("slide sidecar " + sidecar_path + ": " + e.what());
  }
  return s;
}

void write_tile_store(std::ostream& os, std::span<const TileImage> tiles) {
  io::write_magic(os, "ADVT", kTileStoreVersion);
  io::write_pod<std::uint64_t>(os, tiles.size());
  const std::uint32_t c = tiles.empty() ? 0 : tiles[0].channels, s = tiles.empty() ? 0 : tiles[0].size;
  io::write_pod<std::uint32_t>(os, c);
  io::write_pod<std::uint32_t>(os, s);
  for (const auto& t : tiles) {
    if (t.channels != c || t.size != s || t.data.size() != std::size_t{c} * s * s) {
      throw ShapeError("tile store requires uniform tile geometry");
    }
    io::write_string(os, t.slide_id);
    io::write_pod<std::uint32_t>(os, t.x);
    io::write_pod<std::uint32_t>(os, t.y);
    os.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  if (!os) throw io::FormatError("tile store write failed");
}

std::vector<TileImage> read_tile_store(std::istream& is) {
  const auto version = io::read_magic(is, "ADVT");
  if (version != kTileStoreVersion) throw io::FormatError("unsupported tile store version " + std::to_string(version));
  const auto n = io::read_pod<std::uint64_t>(is);
  const auto c = io::read_pod<std::uint32_t>(is);
  const auto s = io::read_pod<std::uint32_t>(is);
  std::vector<TileImage> tiles;
  tiles.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(n, 1u << 20)));
  for (std::uint64_t i = 0; i < n; ++i) {
    TileImage t;
    t.slide_id = io::read_string(is);
    t.x = io::read_pod<std::uint32_t>(is);
    t.y = io::read_pod<std::uint32_t>(is);
    t.channels = c;
    t.size = s;
    t.data.resize(std::size_t{c} * s * s);
    const auto bytes = static_cast<std::streamsize>(t.data.size() * sizeof(float));
    if (!is.read(reinterpret_cast<char*>(t.data.data()), bytes)) throw io::FormatError("truncated tile record");
    tiles.push_back(std::move(t));
  }
  return tiles;
}

void save_tile_store(const std::string& path, std::span<const TileImage> tiles) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io::FormatError("cannot open " + path);
  write_tile_store(os, tiles);
}

std::vector<TileImage> load_tile_store(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io::FormatError("cannot open " + path);
  return read_tile_store(is);
}

std::string norm_stats_json(const NormStats& s) {
  json j{{"mean", s.mean}, {"std", s.std}};
  return j.dump(2) + "\n";
}

NormStats norm_stats_from_json(const std::string& text) {
  try {
    json j = json::parse(text);
    NormStats s{j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()};
    if (s.mean.size() != s.std.size()) throw io::FormatError("norm stats length mismatch");
    return s;
  } catch (const json::exception& e) {
    throw io::FormatError(std::string("norm stats: ") + e.what());
  }
}

}  // namespace advdino::slide
