#include <cmath>
#include <numeric>
#include <random>

#include "advdino/vit.hpp"
#include "doctest.h"

using namespace advdino;
using namespace advdino::vit;

namespace {

Tensor random_image(std::size_t c, std::size_t s, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(Shape{c, s, s});
  for (double& v : t.values()) v = n(rng);
  return t;
}

EncoderConfig tiny() { return {.channels = 2, .patch_size = 4, .embed_dim = 8, .depth = 2, .heads = 2, .mlp_ratio = 2, .global_size = 8, .local_size = 4}; }

using Mat = std::vector<std::vector<double>>;

void ln_rows(Mat& x, const Tensor& g, const Tensor& b) {
  for (auto& row : x) {
    double mu = std::accumulate(row.begin(), row.end(), 0.0) / row.size();
    double var = 0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= row.size();
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mu) / std::sqrt(var + 1e-6) * g[j] + b[j];
  }
}

Mat affine(const Mat& x, const Tensor& w, const Tensor& b) {
  const std::size_t out = w.dim(1);
  Mat y(x.size(), std::vector<double>(out));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t o = 0; o < out; ++o) {
      double s = b[o];
      for (std::size_t k = 0; k < x[i].size(); ++k) s += x[i][k] * w.at(k, o);
      y[i][o] = s;
    }
  return y;
}

// Straight-line transformer forward for a single global-size image.
Mat reference_forward(const Tensor& img, const ParamStore& p, const EncoderConfig& c) {
  const std::size_t P = c.patch_size, S = img.dim(1), G = S / P, D = c.embed_dim, H = c.heads, dh = D / H;
  const Tensor& pw = p.at("patch_embed.weight");
  Mat x;
  std::vector<double> cls(D);
  for (std::size_t j = 0; j < D; ++j) cls[j] = p.at("cls_token")[j] + p.at("pos_embed").at(0, j);
  x.push_back(cls);
  for (std::size_t gy = 0; gy < G; ++gy)
    for (std::size_t gx = 0; gx < G; ++gx) {
      std::vector<double> tok(D);
      for (std::size_t o = 0; o < D; ++o) {
        double s = p.at("patch_embed.bias")[o];
        for (std::size_t ch = 0; ch < c.channels; ++ch)
          for (std::size_t y = 0; y < P; ++y)
            for (std::size_t xx = 0; xx < P; ++xx)
              s += pw[((o * c.channels + ch) * P + y) * P + xx] * img[(ch * S + gy * P + y) * S + gx * P + xx];
        tok[o] = s + p.at("pos_embed").at(1 + gy * G + gx, o);
      }
      x.push_back(tok);
    }
  const std::size_t T = x.size();
  for (std::size_t b = 0; b < c.depth; ++b) {
    std::string pre = "blocks." + std::to_string(b) + ".";
    Mat y = x;
    ln_rows(y, p.at(pre + "norm1.weight"), p.at(pre + "norm1.bias"));
    Mat qkv = affine(y, p.at(pre + "attn.qkv.weight"), p.at(pre + "attn.qkv.bias"));
    Mat o(T, std::vector<double>(D, 0.0));
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < T; ++i) {
        std::vector<double> a(T);
        double m = -1e300;
        for (std::size_t j = 0; j < T; ++j) {
          double s = 0;
          for (std::size_t e = 0; e < dh; ++e) s += qkv[i][h * dh + e] * qkv[j][D + h * dh + e];
          a[j] = s / std::sqrt(double(dh));
          m = std::max(m, a[j]);
        }
        double z = 0;
        for (double& v : a) z += (v = std::exp(v - m));
        for (std::size_t j = 0; j < T; ++j)
          for (std::size_t e = 0; e < dh; ++e) o[i][h * dh + e] += a[j] / z * qkv[j][2 * D + h * dh + e];
      }
    Mat proj = affine(o, p.at(pre + "attn.proj.weight"), p.at(pre + "attn.proj.bias"));
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < D; ++j) x[i][j] += proj[i][j];
    Mat z = x;
    ln_rows(z, p.at(pre + "norm2.weight"), p.at(pre + "norm2.bias"));
    Mat f1 = affine(z, p.at(pre + "mlp.fc1.weight"), p.at(pre + "mlp.fc1.bias"));
    for (auto& r : f1)
      for (double& v : r) v = 0.5 * v * (1 + std::erf(v / std::sqrt(2.0)));
    Mat f2 = affine(f1, p.at(pre + "mlp.fc2.weight"), p.at(pre + "mlp.fc2.bias"));
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < D; ++j) x[i][j] += f2[i][j];
  }
  ln_rows(x, p.at("norm.weight"), p.at("norm.bias"));
  return x;
}

void randomize_affine(ParamStore& p, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& [name, t] : p)
    if (name.find("bias") != std::string::npos || name.find("norm") != std::string::npos || name == "cls_token")
      for (double& v : t.values()) v += n(rng);
}

}  // namespace

TEST_CASE("patchify geometry") {
  CHECK(patchify(Tensor(Shape{6, 224, 224}), 16).dim(0) == 196);
  CHECK(patchify(Tensor(Shape{6, 32, 32}), 16).dim(0) == 4);
  CHECK_THROWS_AS(patchify(Tensor(Shape{6, 30, 32}), 16), ShapeError);
}

TEST_CASE("patchify is lossless") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor img = random_image(6, 32, rng);
    CHECK(unpatchify(patchify(img, 8), 6, 32, 32, 8) == img);
  }
}

TEST_CASE("encode shape contract, determinism and grad-flag parity") {
  std::mt19937_64 rng(2);
  EncoderConfig cfg;
  auto params = init_encoder(cfg, rng);
  Tensor img = random_image(cfg.channels, cfg.global_size, rng);
  auto a = encode(img, params, cfg);
  auto b = encode(img, params, cfg);
  CHECK(a.cls.numel() == cfg.embed_dim);
  CHECK(a.patches.shape() == Shape{16, cfg.embed_dim});
  CHECK(a.cls == b.cls);
  CHECK(a.patches == b.patches);

  Graph g;
  Bound trainable(g, params, "enc/", true);
  auto tb = encode_batch(trainable, cfg, std::span<const Tensor>(&img, 1));
  CHECK(tb.cls.value().reshaped({cfg.embed_dim}) == a.cls);

  Tensor local = random_image(cfg.channels, cfg.local_size, rng);
  auto l = encode(local, params, cfg);
  CHECK(l.patches.shape() == Shape{4, cfg.embed_dim});
  CHECK(l.cls.all_finite());
  CHECK_THROWS_AS(encode(random_image(cfg.channels, 24, rng), params, cfg), ShapeError);
  CHECK_THROWS_AS(encode(random_image(3, 32, rng), params, cfg), ShapeError);
}

TEST_CASE("encode matches a straight-line forward") {
  std::mt19937_64 rng(3);
  EncoderConfig cfg = tiny();
  auto params = init_encoder(cfg, rng);
  randomize_affine(params, rng);
  SUBCASE("zero tile, zero patch kernel: bias and position pathway only") {
    params["patch_embed.weight"].fill(0.0);
    Tensor img(Shape{cfg.channels, cfg.global_size, cfg.global_size}, 0.0);
    auto out = encode(img, params, cfg);
    auto ref = reference_forward(img, params, cfg);
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) CHECK(out.cls[j] == doctest::Approx(ref[0][j]).epsilon(1e-12));
  }
  SUBCASE("random tile") {
    Tensor img = random_image(cfg.channels, cfg.global_size, rng);
    auto out = encode(img, params, cfg);
    auto ref = reference_forward(img, params, cfg);
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) CHECK(out.cls[j] == doctest::Approx(ref[0][j]).epsilon(1e-12));
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < cfg.embed_dim; ++j)
        CHECK(out.patches.at(i, j) == doctest::Approx(ref[1 + i][j]).epsilon(1e-12));
  }
}

TEST_CASE("without positional embeddings attention is permutation equivariant") {
  std::mt19937_64 rng(4);
  EncoderConfig cfg;
  auto params = init_encoder(cfg, rng);
  params["pos_embed"].fill(0.0);
  Tensor img = random_image(cfg.channels, cfg.global_size, rng);
  Tensor patches = patchify(img, cfg.patch_size);
  const std::size_t n = patches.dim(0), pd = patches.dim(1);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor permuted(patches.shape());
  for (std::size_t i = 0; i < n; ++i)
    std::copy(patches.data() + perm[i] * pd, patches.data() + (perm[i] + 1) * pd, permuted.data() + i * pd);
  Tensor img2 = unpatchify(permuted, cfg.channels, cfg.global_size, cfg.global_size, cfg.patch_size);
  auto a = encode(img, params, cfg);
  auto b = encode(img2, params, cfg);
  for (std::size_t j = 0; j < cfg.embed_dim; ++j) CHECK(b.cls[j] == doctest::Approx(a.cls[j]).epsilon(1e-10));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < cfg.embed_dim; ++j)
      CHECK(b.patches.at(i, j) == doctest::Approx(a.patches.at(perm[i], j)).epsilon(1e-10));
}

TEST_CASE("channel adaptation of the patch kernel") {
  SUBCASE("identical source channels") {
    Tensor w(Shape{2, 3, 2, 2}, 0.7);
    auto a = adapt_patch_embed_channels(w, 6);
    CHECK(a.shape() == Shape{2, 6, 2, 2});
    for (double v : a.values()) CHECK(v == doctest::Approx(0.7));
  }
  SUBCASE("arithmetic mean at a fixed index") {
    Tensor w(Shape{1, 3, 2, 2}, 0.0);
    w[0 * 4 + 3] = 1;
    w[1 * 4 + 3] = 2;
    w[2 * 4 + 3] = 3;
    auto a = adapt_patch_embed_channels(w, 6);
    for (std::size_t c = 0; c < 6; ++c) {
      CHECK(a[c * 4 + 3] == 2.0);
      CHECK(a[c * 4 + 0] == 0.0);
    }
  }
  SUBCASE("response to a channel-constant input scales by C/3") {
    std::mt19937_64 rng(5);
    Tensor w = trunc_normal({4, 3, 3, 3}, 1.0, rng);
    auto a = adapt_patch_embed_channels(w, 6);
    for (std::size_t o = 0; o < 4; ++o) {
      double r3 = 0, r6 = 0;
      for (std::size_t i = 0; i < 27; ++i) r3 += w[o * 27 + i] * 1.5;
      for (std::size_t i = 0; i < 54; ++i) r6 += a[o * 54 + i] * 1.5;
      CHECK(r6 == doctest::Approx(r3 * 6.0 / 3.0).epsilon(1e-12));
    }
  }
  SUBCASE("wrong source channel count") {
    CHECK_THROWS_AS(adapt_patch_embed_channels(Tensor(Shape{2, 4, 2, 2}), 6), ShapeError);
  }
}

TEST_CASE("bicubic grid matrix") {
  Tensor id = bicubic_grid_matrix(4, 4);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j) CHECK(id.at(i, j) == doctest::Approx(i == j ? 1.0 : 0.0));
  Tensor down = bicubic_grid_matrix(4, 2);
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 16; ++j) s += down.at(i, j);
    CHECK(s == doctest::Approx(1.0));
  }
}
