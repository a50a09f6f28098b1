#include <doctest.h>

#include <cmath>
#include <random>

#include "advdino/augment.hpp"

using namespace advdino;
using namespace advdino::aug;

namespace {

Tensor random_image(std::size_t c, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 255.0);
  Tensor t(Shape{c, h, w});
  for (auto& v : t.values()) v = u(rng);
  return t;
}

}  // namespace

TEST_CASE("multi-crop view counts and geometry") {
  std::mt19937_64 rng(1);
  Tensor tile = random_image(6, 64, 64, rng);
  AugmentConfig cfg;
  CropSet set = multi_crop(tile, 3, 5, cfg, rng);
  CHECK(set.globals.size() == 2);
  CHECK(set.locals.size() == 8);
  CHECK(set.masked.size() == 2);
  CHECK(set.view_count() == 12);
  for (auto& g : set.globals) CHECK(g.image.shape() == Shape{6, 32, 32});
  for (auto& l : set.locals) CHECK(l.image.shape() == Shape{6, 16, 16});
  for (auto& m : set.masked) {
    CHECK(m.mask.size() == 16);
    CHECK(m.crop.domain == 5);
    CHECK(m.crop.source == 3);
  }
  for (auto& l : set.locals) CHECK(l.domain == 5);

  AugmentConfig paper = AugmentConfig::paper();
  std::mt19937_64 rng2(2);
  CropSet ps = multi_crop(random_image(6, 256, 256, rng2), 0, 0, paper, rng2);
  CHECK(ps.view_count() == 12);
  CHECK(ps.globals[0].image.shape() == Shape{6, 224, 224});
  CHECK(ps.locals[0].image.shape() == Shape{6, 96, 96});
  CHECK(ps.masked[0].mask.size() == 196);
}

TEST_CASE("multi-crop is seed-deterministic and crops stay in bounds") {
  std::mt19937_64 r0(3);
  Tensor tile = random_image(2, 40, 40, r0);
  AugmentConfig cfg;
  std::mt19937_64 a(9), b(9);
  CropSet s1 = multi_crop(tile, 0, 0, cfg, a), s2 = multi_crop(tile, 0, 0, cfg, b);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(s1.globals[i].image == s2.globals[i].image);
    CHECK(s1.masked[i].mask == s2.masked[i].mask);
  }
  for (std::size_t i = 0; i < 8; ++i) CHECK(s1.locals[i].image == s2.locals[i].image);

  AugmentConfig tiny = cfg;
  tiny.n_local = 8;
  Tensor small(Shape{1, 32, 32}, 1.0);
  bool ok = true;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    std::mt19937_64 r(seed);
    CropSet s = multi_crop(small, 0, 0, tiny, r);
    auto in_bounds = [&](const Crop& c) {
      return c.x0 >= 0 && c.y0 >= 0 && c.x0 + c.side <= 32.0 + 1e-12 && c.y0 + c.side <= 32.0 + 1e-12;
    };
    for (auto& c : s.globals) ok = ok && in_bounds(c);
    for (auto& c : s.locals) ok = ok && in_bounds(c);
  }
  CHECK(ok);
  CHECK_THROWS_AS(multi_crop(Tensor(Shape{1, 20, 20}, 0.0), 0, 0, cfg, a), Error);
  AugmentConfig bad = cfg;
  bad.local_size = 12;
  CHECK_THROWS_AS(multi_crop(tile, 0, 0, bad, a), Error);
}

TEST_CASE("resize of the full region at the same size is the identity") {
  std::mt19937_64 rng(4);
  Tensor img = random_image(3, 16, 16, rng);
  Tensor out = resize_region(img, 0, 0, 16, 16);
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(out[i] == doctest::Approx(img[i]).epsilon(1e-13));
  // Linear ramps are reproduced exactly in the interior by bilinear interpolation.
  Tensor ramp(Shape{1, 8, 8});
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) ramp[y * 8 + x] = 2.0 * x + 3.0 * y;
  Tensor up = resize_region(ramp, 2, 2, 4, 8);
  // Output pixel (i, j) samples source coordinate 2 + (k + 0.5) / 2 - 0.5.
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      double sx = 2 + (j + 0.5) * 0.5 - 0.5, sy = 2 + (i + 0.5) * 0.5 - 0.5;
      CHECK(up[i * 8 + j] == doctest::Approx(2 * sx + 3 * sy).epsilon(1e-13));
    }
}

TEST_CASE("flips are per-channel involutions with fair coins") {
  std::mt19937_64 rng(5);
  Tensor img = random_image(3, 5, 7, rng);
  CHECK(flip(flip(img, true, true), true, true) == img);
  CHECK(flip(flip(img, true, false), true, false) == img);
  Tensor f = flip(img, true, false);
  for (std::size_t c = 0; c < 3; ++c) CHECK(f[(c * 5 + 2) * 7 + 0] == img[(c * 5 + 2) * 7 + 6]);
  int h = 0, v = 0;
  Tensor px(Shape{1, 1, 1}, 1.0);
  for (int i = 0; i < 10000; ++i) {
    auto r = random_flip(px, rng);
    h += r.horizontal;
    v += r.vertical;
  }
  CHECK(std::abs(h / 10000.0 - 0.5) <= 0.02);
  CHECK(std::abs(v / 10000.0 - 0.5) <= 0.02);
}

TEST_CASE("channel-wise Gaussian blur") {
  Tensor constant(Shape{2, 9, 9}, 42.0);
  Tensor bc = gaussian_blur_channelwise(constant, 1.3);
  for (double v : bc.values()) CHECK(v == doctest::Approx(42.0).epsilon(1e-13));

  std::mt19937_64 rng(6);
  Tensor img = random_image(3, 12, 10, rng);
  for (double sigma : {0.3, 1.0, 2.0, 4.5}) {
    Tensor b = gaussian_blur_channelwise(img, sigma);
    for (std::size_t c = 0; c < 3; ++c) {
      double s0 = 0, s1 = 0;
      for (std::size_t i = 0; i < 120; ++i) s0 += img[c * 120 + i], s1 += b[c * 120 + i];
      CHECK(std::abs(s1 - s0) <= 1e-9 * std::abs(s0));
    }
  }

  Tensor impulse(Shape{2, 21, 21}, 0.0);
  impulse[10 * 21 + 10] = 1.0;
  const double sigma = 1.5;
  Tensor b = gaussian_blur_channelwise(impulse, sigma);
  const int r = static_cast<int>(std::ceil(3 * sigma));
  double norm = 0;
  for (int i = -r; i <= r; ++i) norm += std::exp(-0.5 * i * i / (sigma * sigma));
  for (int y = 0; y < 21; ++y)
    for (int x = 0; x < 21; ++x) {
      int dy = y - 10, dx = x - 10;
      double expect = 0;
      if (std::abs(dy) <= r && std::abs(dx) <= r)
        expect = std::exp(-0.5 * (dx * dx + dy * dy) / (sigma * sigma)) / (norm * norm);
      CHECK(b[y * 21 + x] == doctest::Approx(expect).epsilon(1e-12));
      CHECK(b[21 * 21 + y * 21 + x] == 0.0);  // other channel untouched
    }
  CHECK_THROWS_AS(gaussian_blur_channelwise(img, 0.0), Error);
}

TEST_CASE("MIM mask coverage") {
  std::mt19937_64 rng(7);
  for (bool v : sample_mim_mask(196, 0.0, rng)) CHECK_FALSE(v);
  for (bool v : sample_mim_mask(196, 1.0, rng)) CHECK(v);
  double total = 0;
  for (int i = 0; i < 10000; ++i) {
    auto m = sample_mim_mask(196, 0.3, rng);
    std::size_t c = 0;
    for (bool v : m) c += v;
    total += static_cast<double>(c) / 196.0;
  }
  const double mean = total / 10000;
  CHECK(mean >= 0.25);
  CHECK(mean <= 0.35);
  CHECK_THROWS_AS(sample_mim_mask(10, 0.5, rng), Error);
  CHECK_THROWS_AS(sample_mim_mask(4, 4, 1.5, rng), Error);
}

TEST_CASE("masks are block structured") {
  // A block mask at moderate ratio has far more masked-masked neighbour pairs
  // than an independent random mask with the same count.
  std::mt19937_64 rng(8);
  double adj = 0;
  for (int t = 0; t < 200; ++t) {
    auto m = sample_mim_mask(14, 14, 0.3, rng);
    for (std::size_t y = 0; y < 14; ++y)
      for (std::size_t x = 0; x + 1 < 14; ++x) adj += m[y * 14 + x] && m[y * 14 + x + 1];
  }
  // Independent masking gives about 0.3^2 * 182 = 16.4 pairs per mask.
  CHECK(adj / 200 > 30.0);
}

TEST_CASE("pipeline has no solarization or channel mixing") {
  auto stages = pipeline_stages();
  CHECK(stages.size() == 4);
  for (auto& s : stages) {
    CHECK(s.find("solar") == std::string::npos);
    CHECK(s.find("jitter") == std::string::npos);
    CHECK(s.find("gray") == std::string::npos);
  }
}
