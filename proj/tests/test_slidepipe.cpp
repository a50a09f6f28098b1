#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "advdino/binary_io.hpp"
#include "advdino/slidepipe.hpp"

using namespace advdino;
using namespace advdino::slide;

namespace {

// Exhaustive Otsu: direct between-class variance per threshold, lowest argmax.
int otsu_oracle(const std::array<double, 256>& h) {
  double best = -1;
  std::array<double, 256> score{};
  for (int t = 1; t < 256; ++t) {
    double w0 = 0, w1 = 0, s0 = 0, s1 = 0;
    for (int i = 0; i < t; ++i) w0 += h[i], s0 += i * h[i];
    for (int i = t; i < 256; ++i) w1 += h[i], s1 += i * h[i];
    if (w0 == 0 || w1 == 0) continue;
    double n = w0 + w1;
    score[t] = (w0 / n) * (w1 / n) * std::pow(s0 / w0 - s1 / w1, 2);
    best = std::max(best, score[t]);
  }
  for (int t = 1; t < 256; ++t)
    if (score[t] >= best * (1 - 1e-12)) return t;
  return -1;
}

SlideImage blank_slide(std::size_t c, std::size_t h, std::size_t w) {
  SlideImage s;
  s.id = "s";
  s.pixels = Tensor(Shape{c, h, w}, 0.0);
  return s;
}

}  // namespace

TEST_CASE("Otsu on spikes, bimodal and degenerate histograms") {
  std::array<double, 256> h{};
  h[10] = 100;
  h[200] = 50;
  auto r = otsu_threshold(h);
  CHECK_FALSE(r.degenerate);
  CHECK(r.threshold > 10);
  CHECK(r.threshold <= 200);
  CHECK(r.threshold == otsu_oracle(h));
  CHECK(r.threshold == 11);

  std::array<double, 256> b{};
  for (int i = 0; i < 256; ++i) b[i] = std::exp(-0.5 * std::pow((i - 60) / 10.0, 2)) + std::exp(-0.5 * std::pow((i - 190) / 10.0, 2));
  auto rb = otsu_threshold(b);
  CHECK(rb.threshold == otsu_oracle(b));
  CHECK(std::abs(rb.threshold - 125.5) <= 0.5);

  std::array<double, 256> one{};
  one[77] = 5;
  auto rd = otsu_threshold(one);
  CHECK(rd.degenerate);
  CHECK(rd.threshold == 77);
  std::array<double, 256> empty{};
  CHECK_THROWS_AS(otsu_threshold(empty), Error);
}

TEST_CASE("Otsu matches exhaustive search on random histograms") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> cnt(0, 50);
  std::uniform_int_distribution<int> support(1, 255);
  int mismatches = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    std::array<double, 256> h{};
    int k = support(rng);
    for (int i = 0; i < k; ++i) h[support(rng)] += cnt(rng) + 1;
    auto r = otsu_threshold(h);
    if (r.degenerate) continue;
    mismatches += r.threshold != otsu_oracle(h);
  }
  CHECK(mismatches == 0);
}

TEST_CASE("box downsample and foreground mask") {
  SlideImage zero = blank_slide(7, 64, 64);
  ForegroundMask m0 = foreground_mask(zero, 16);
  CHECK(m0.height == 4);
  CHECK(m0.width == 4);
  CHECK(m0.count() == 0);

  // Signal in exactly one channel: mask equals that channel's own mask.
  SlideImage one = blank_slide(7, 64, 64);
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 64; ++x) one.pixels[(3 * 64 + y) * 64 + x] = 150.0;
  ForegroundMask m1 = foreground_mask(one, 16);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) CHECK(m1.at(y, x) == (y < 2));

  // Two channels with different regions: union of independent per-channel thresholds.
  SlideImage two = blank_slide(7, 64, 64);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> noise(0, 5);
  for (auto& v : two.pixels.values()) v = noise(rng);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      if (x < 16) two.pixels[(0 * 64 + y) * 64 + x] += 120;
      if (y >= 48) two.pixels[(5 * 64 + y) * 64 + x] += 90;
    }
  ForegroundMask m2 = foreground_mask(two, 8);
  // Oracle: per channel, recompute the downsampled plane, threshold it
  // independently (single-intensity channels give no foreground), then union.
  std::vector<bool> expect(64, false);
  for (std::size_t c = 0; c < 7; ++c) {
    std::vector<double> small(64, 0.0);
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 64; ++x) small[(y / 8) * 8 + x / 8] += two.pixels[(c * 64 + y) * 64 + x] / 64.0;
    std::array<double, 256> h{};
    for (double v : small) h[std::clamp(static_cast<int>(v), 0, 255)] += 1;
    int used = 0;
    for (double v : h) used += v > 0;
    if (used < 2) {
      CHECK(m2.per_channel[c].degenerate);
      continue;
    }
    const int t = otsu_oracle(h);
    CHECK(m2.per_channel[c].threshold == t);
    for (std::size_t i = 0; i < 64; ++i)
      if (static_cast<int>(small[i]) >= t) expect[i] = true;
  }
  CHECK(m2.on == expect);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      if (x < 2 || y >= 6) CHECK(m2.at(y, x));
  CHECK_THROWS_AS(foreground_mask(blank_slide(7, 10, 10), 16), Error);
  CHECK_THROWS_AS(foreground_mask(blank_slide(7, 10, 10), 0), Error);
}

TEST_CASE("tile extraction grid and coverage") {
  ForegroundMask full;
  full.factor = 16;
  full.height = full.width = 32;
  full.on.assign(32 * 32, true);
  CHECK(select_tiles(full, 512, 512, 256).size() == 4);
  ForegroundMask none = full;
  none.on.assign(32 * 32, false);
  CHECK(select_tiles(none, 512, 512, 256).empty());

  // Checkerboard mask at mask resolution versus a brute-force pixel scan.
  ForegroundMask cb;
  cb.factor = 4;
  cb.height = cb.width = 24;
  cb.on.resize(24 * 24);
  std::mt19937_64 rng(3);
  for (std::size_t y = 0; y < 24; ++y)
    for (std::size_t x = 0; x < 24; ++x) cb.on[y * 24 + x] = ((y / 3 + x / 5) % 2) == 0 || (rng() % 7 == 0);
  auto tiles = select_tiles(cb, 96, 96, 16);
  std::vector<std::pair<int, int>> expect;
  for (int ty = 0; ty + 16 <= 96; ty += 16)
    for (int tx = 0; tx + 16 <= 96; tx += 16) {
      int fg = 0;
      for (int y = ty; y < ty + 16; ++y)
        for (int x = tx; x < tx + 16; ++x) fg += cb.on[(y / 4) * 24 + x / 4];
      if (fg / 256.0 > 0.25) expect.emplace_back(tx, ty);
    }
  REQUIRE(tiles.size() == expect.size());
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    CHECK(static_cast<int>(tiles[i].x) == expect[i].first);
    CHECK(static_cast<int>(tiles[i].y) == expect[i].second);
  }

  SlideImage s = blank_slide(2, 32, 32);
  for (std::size_t i = 0; i < s.pixels.numel(); ++i) s.pixels[i] = static_cast<double>(i % 251);
  ForegroundMask fm;
  fm.factor = 8;
  fm.height = fm.width = 4;
  fm.on.assign(16, true);
  auto raw = extract_tiles(s, fm, 16);
  REQUIRE(raw.size() == 4);
  CHECK(raw[1].x == 16);
  CHECK(raw[1].y == 0);
  CHECK(raw[1].data[16 + 3] == static_cast<float>(s.pixels[1 * 32 + 16 + 3]));
  CHECK(raw[3].data[256 + 0] == static_cast<float>(s.pixels[(32 + 16) * 32 + 16]));
}

TEST_CASE("background subtraction and clip/rescale") {
  Tensor t(Shape{3, 1, 3});
  // channel 0, channel 1, AF
  double vals[] = {10, 20, 50, 5, 80, 80, 0, 80, 80};
  for (int i = 0; i < 9; ++i) t[i] = vals[i];
  Tensor zero_af = t;
  for (int i = 6; i < 9; ++i) zero_af[i] = 0;
  Tensor u = background_subtract(zero_af);
  CHECK(u.shape() == Shape{2, 1, 3});
  for (int i = 0; i < 6; ++i) CHECK(u[i] == vals[i]);
  Tensor b = background_subtract(t);
  CHECK(b[0] == 10);
  CHECK(b[1] == 0);   // 20 - 80 clamped
  CHECK(b[2] == 0);   // 50 - 80 clamped
  CHECK(b[4] == 0);   // equals AF
  CHECK(clip_rescale(200.0) == 255.0);
  CHECK(clip_rescale(0.0) == 0.0);
  CHECK(clip_rescale(100.0) == 127.5);
  CHECK(clip_rescale(250.0) == 255.0);
}

TEST_CASE("Welford normalization statistics") {
  TileImage c = TileImage::from_tensor("a", 0, 0, Tensor(Shape{2, 2, 2}, 7.0));
  NormStats s = fit_norm_stats(std::vector<TileImage>{c, c});
  CHECK(s.mean[0] == 7.0);
  CHECK(s.std[1] == 1.0);

  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(30, 9);
  Tensor a(Shape{2, 4, 4}), b(Shape{2, 4, 4});
  for (auto& v : a.values()) v = std::round(n(rng));
  for (auto& v : b.values()) v = std::round(n(rng));
  std::vector<TileImage> tiles{TileImage::from_tensor("a", 0, 0, a), TileImage::from_tensor("b", 0, 0, b)};
  NormStats st = fit_norm_stats(tiles);
  for (std::size_t ch = 0; ch < 2; ++ch) {
    double sum = 0, sq = 0;
    for (std::size_t i = 0; i < 16; ++i) sum += a[ch * 16 + i] + b[ch * 16 + i];
    double mean = sum / 32;
    for (std::size_t i = 0; i < 16; ++i) sq += std::pow(a[ch * 16 + i] - mean, 2) + std::pow(b[ch * 16 + i] - mean, 2);
    CHECK(st.mean[ch] == doctest::Approx(mean).epsilon(1e-12));
    CHECK(st.std[ch] == doctest::Approx(std::sqrt(sq / 32)).epsilon(1e-12));
  }
  NormAccumulator p1, p2;
  p1.add(a);
  p2.add(b);
  p1.merge(p2);
  NormStats merged = p1.finish();
  CHECK(merged.mean[1] == doctest::Approx(st.mean[1]).epsilon(1e-12));
  CHECK(merged.std[1] == doctest::Approx(st.std[1]).epsilon(1e-12));

  Tensor na = apply_norm(a, st), nb = apply_norm(b, st);
  NormAccumulator again;
  again.add(na);
  again.add(nb);
  NormStats re = again.finish();
  for (std::size_t ch = 0; ch < 2; ++ch) {
    CHECK(std::abs(re.mean[ch]) < 1e-9);
    CHECK(std::abs(re.std[ch] - 1.0) < 1e-9);
  }
  Tensor twice = apply_norm(na, re);
  for (std::size_t i = 0; i < na.numel(); ++i) CHECK(std::abs(twice[i] - na[i]) < 1e-9);
  CHECK_THROWS_AS(fit_norm_stats(std::vector<TileImage>{}), Error);
}

TEST_CASE("tile store round trip is bit exact") {
  std::mt19937_64 rng(5);
  std::normal_distribution<float> n(0, 100);
  std::vector<TileImage> tiles;
  for (int i = 0; i < 5; ++i) {
    TileImage t;
    t.slide_id = "slide_" + std::to_string(i % 2);
    t.x = 64 * i;
    t.y = 7;
    t.channels = 6;
    t.size = 8;
    t.data.resize(6 * 64);
    for (auto& v : t.data) v = n(rng);
    tiles.push_back(t);
  }
  std::ostringstream os;
  write_tile_store(os, tiles);
  std::istringstream is(os.str());
  auto back = read_tile_store(is);
  std::ostringstream os2;
  write_tile_store(os2, back);
  CHECK(io::fnv1a(os.str()) == io::fnv1a(os2.str()));
  REQUIRE(back.size() == 5);
  CHECK(back[3].slide_id == "slide_1");
  CHECK(back[3].x == 192);
  CHECK(back[3].data == tiles[3].data);

  std::string bytes = os.str();
  std::istringstream trunc(bytes.substr(0, bytes.size() - 10));
  CHECK_THROWS_AS(read_tile_store(trunc), io::FormatError);
  bytes[0] = 'X';
  std::istringstream bad(bytes);
  CHECK_THROWS_AS(read_tile_store(bad), io::FormatError);
}

TEST_CASE("slide raw planes with JSON sidecar") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "advdino_slide_test";
  fs::create_directories(dir);
  SlideImage s = blank_slide(7, 6, 5);
  s.id = "S01";
  s.channel_names = default_channel_names();
  for (std::size_t i = 0; i < s.pixels.numel(); ++i) s.pixels[i] = static_cast<double>((i * 37) % 256);
  for (int depth : {8, 16}) {
    write_slide((dir / "S01.json").string(), s, depth);
    SlideImage r = read_slide((dir / "S01.json").string());
    CHECK(r.id == "S01");
    CHECK(r.channel_names == s.channel_names);
    REQUIRE(r.pixels.shape() == s.pixels.shape());
    for (std::size_t i = 0; i < s.pixels.numel(); ++i) CHECK(r.pixels[i] == doctest::Approx(s.pixels[i]).epsilon(1e-12));
  }
  io::write_file((dir / "S01.0.raw").string(), "xx");
  CHECK_THROWS_AS(read_slide((dir / "S01.json").string()), io::FormatError);
  fs::remove_all(dir);
}

TEST_CASE("tile preprocessing order: subtract, then clip and rescale") {
  Tensor raw(Shape{3, 1, 1});
  raw[0] = 250;
  raw[1] = 30;
  raw[2] = 20;  // AF
  TileImage t = preprocess_tile(TileImage::from_tensor("s", 0, 0, raw));
  CHECK(t.channels == 2);
  // Subtract first: min(230, 200) * 1.275 = 255; clipping first would give 229.5.
  CHECK(t.data[0] == 255.0f);
  CHECK(t.data[1] == static_cast<float>(10 * 255.0 / 200.0));
}
