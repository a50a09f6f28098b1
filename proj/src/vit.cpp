#include "advdino/vit.hpp"

#include <algorithm>
#include <cmath>

namespace advdino::vit {

void EncoderConfig::validate() const {
  if (channels == 0 || patch_size == 0 || embed_dim == 0 || depth == 0 || heads == 0 || mlp_ratio == 0) {
    throw Error("encoder config has a zero field");
  }
  if (embed_dim % heads != 0) throw Error("embed_dim must be divisible by heads");
  if (global_size % patch_size != 0 || local_size % patch_size != 0) {
    throw Error("crop sizes must be divisible by patch_size");
  }
}

Tensor patchify(const Tensor& image, std::size_t p) {
  if (image.rank() != 3) throw ShapeError("patchify expects [C, H, W], got " + shape_str(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (p == 0 || h % p != 0 || w % p != 0) {
    throw ShapeError("image " + shape_str(image.shape()) + " not divisible by patch size " + std::to_string(p));
  }
  const std::size_t gh = h / p, gw = w / p, dim = c * p * p;
  Tensor out(Shape{gh * gw, dim});
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px) {
      double* row = out.data() + (py * gw + px) * dim;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            row[(ch * p + y) * p + x] = image[(ch * h + py * p + y) * w + px * p + x];
    }
  return out;
}

Tensor unpatchify(const Tensor& patches, std::size_t c, std::size_t h, std::size_t w, std::size_t p) {
  if (p == 0 || h % p != 0 || w % p != 0) throw ShapeError("unpatchify geometry not divisible");
  const std::size_t gh = h / p, gw = w / p, dim = c * p * p;
  if (patches.shape() != Shape{gh * gw, dim}) throw ShapeError("unpatchify shape mismatch");
  Tensor out(Shape{c, h, w});
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px) {
      const double* row = patches.data() + (py * gw + px) * dim;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            out[(ch * h + py * p + y) * w + px * p + x] = row[(ch * p + y) * p + x];
    }
  return out;
}

ParamStore init_encoder(const EncoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t d = cfg.embed_dim;
  const std::size_t ng = cfg.grid(cfg.global_size) * cfg.grid(cfg.global_size);
  ParamStore p;
  p["patch_embed.weight"] = trunc_normal({d, cfg.channels, cfg.patch_size, cfg.patch_size}, 0.02, rng);
  p["patch_embed.bias"] = Tensor(Shape{d}, 0.0);
  p["cls_token"] = trunc_normal({1, d}, 1e-6, rng);
  p["pos_embed"] = trunc_normal({1 + ng, d}, 0.02, rng);
  p["mask_token"] = Tensor(Shape{1, d}, 0.0);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string b = "blocks." + std::to_string(i) + ".";
    p[b + "norm1.weight"] = Tensor(Shape{d}, 1.0);
    p[b + "norm1.bias"] = Tensor(Shape{d}, 0.0);
    p[b + "attn.qkv.weight"] = trunc_normal({d, 3 * d}, 0.02, rng);
    p[b + "attn.qkv.bias"] = Tensor(Shape{3 * d}, 0.0);
    p[b + "attn.proj.weight"] = trunc_normal({d, d}, 0.02, rng);
    p[b + "attn.proj.bias"] = Tensor(Shape{d}, 0.0);
    p[b + "norm2.weight"] = Tensor(Shape{d}, 1.0);
    p[b + "norm2.bias"] = Tensor(Shape{d}, 0.0);
    p[b + "mlp.fc1.weight"] = trunc_normal({d, cfg.mlp_ratio * d}, 0.02, rng);
    p[b + "mlp.fc1.bias"] = Tensor(Shape{cfg.mlp_ratio * d}, 0.0);
    p[b + "mlp.fc2.weight"] = trunc_normal({cfg.mlp_ratio * d, d}, 0.02, rng);
    p[b + "mlp.fc2.bias"] = Tensor(Shape{d}, 0.0);
  }
  p["norm.weight"] = Tensor(Shape{d}, 1.0);
  p["norm.bias"] = Tensor(Shape{d}, 0.0);
  return p;
}

Tensor adapt_patch_embed_channels(const Tensor& w3, std::size_t channels) {
  if (w3.rank() != 4 || w3.dim(1) != 3) {
    throw ShapeError("expected a [D, 3, P, P] kernel, got " + shape_str(w3.shape()));
  }
  if (channels == 0) throw ShapeError("target channel count must be positive");
  const std::size_t d = w3.dim(0), ph = w3.dim(2), pw = w3.dim(3), area = ph * pw;
  Tensor out(Shape{d, channels, ph, pw});
  for (std::size_t o = 0; o < d; ++o)
    for (std::size_t s = 0; s < area; ++s) {
      const double mean = (w3[(o * 3 + 0) * area + s] + w3[(o * 3 + 1) * area + s] + w3[(o * 3 + 2) * area + s]) / 3.0;
      for (std::size_t c = 0; c < channels; ++c) out[(o * channels + c) * area + s] = mean;
    }
  return out;
}

namespace {

double cubic_weight(double x) {
  constexpr double a = -0.75;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

// [n_out, n_in] 1-D bicubic resampling weights.
std::vector<double> bicubic_1d(std::size_t n_in, std::size_t n_out) {
  std::vector<double> m(n_out * n_in, 0.0);
  const double ratio = static_cast<double>(n_in) / static_cast<double>(n_out);
  for (std::size_t o = 0; o < n_out; ++o) {
    const double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    const double base = std::floor(src);
    const double t = src - base;
    for (int k = -1; k <= 2; ++k) {
      long idx = static_cast<long>(base) + k;
      idx = std::clamp(idx, 0L, static_cast<long>(n_in) - 1);
      m[o * n_in + static_cast<std::size_t>(idx)] += cubic_weight(t - k);
    }
  }
  return m;
}

}  // namespace

Tensor bicubic_grid_matrix(std::size_t n_in, std::size_t n_out) {
  auto w = bicubic_1d(n_in, n_out);
  Tensor out(Shape{n_out * n_out, n_in * n_in});
  for (std::size_t oy = 0; oy < n_out; ++oy)
    for (std::size_t ox = 0; ox < n_out; ++ox)
      for (std::size_t iy = 0; iy < n_in; ++iy)
        for (std::size_t ix = 0; ix < n_in; ++ix)
          out.at(oy * n_out + ox, iy * n_in + ix) = w[oy * n_in + iy] * w[ox * n_in + ix];
  return out;
}

EncodedBatch encode_batch(const Bound& params, const EncoderConfig& cfg, std::span<const Tensor> images,
                          const std::vector<std::vector<bool>>* masks) {
  if (images.empty()) throw ShapeError("encode_batch needs at least one image");
  Graph& g = params.graph();
  const Shape& s0 = images[0].shape();
  if (s0.size() != 3 || s0[0] != cfg.channels || s0[1] != s0[2]) {
    throw ShapeError("unsupported tile geometry " + shape_str(s0));
  }
  const std::size_t size = s0[1];
  if (size != cfg.global_size && size != cfg.local_size) {
    throw ShapeError("tile size " + std::to_string(size) + " is neither the global nor the local crop size");
  }
  const std::size_t v = images.size();
  const std::size_t grid = cfg.grid(size), n = grid * grid, t = n + 1;
  const std::size_t d = cfg.embed_dim, h = cfg.heads, dh = d / h, pd = cfg.patch_dim();

  Tensor patch_rows(Shape{v * n, pd});
  for (std::size_t i = 0; i < v; ++i) {
    if (images[i].shape() != s0) throw ShapeError("encode_batch images differ in shape");
    Tensor pr = patchify(images[i], cfg.patch_size);
    std::copy(pr.data(), pr.data() + pr.numel(), patch_rows.data() + i * n * pd);
  }
  Var x = g.constant(std::move(patch_rows));
  Var w = ops::reshape(params["patch_embed.weight"], {d, pd});
  Var emb = ops::add(ops::matmul(x, w, true), params["patch_embed.bias"]);  // [V*N, D]

  if (masks) {
    if (masks->size() != v) throw ShapeError("one mask per view required");
    Tensor masked(Shape{v * n, 1}), keep(Shape{v * n, 1});
    for (std::size_t i = 0; i < v; ++i) {
      if ((*masks)[i].size() != n) throw ShapeError("mask length does not match patch count");
      for (std::size_t j = 0; j < n; ++j) {
        masked[i * n + j] = (*masks)[i][j] ? 1.0 : 0.0;
        keep[i * n + j] = 1.0 - masked[i * n + j];
      }
    }
    emb = ops::add(ops::mul(emb, g.constant(std::move(keep))),
                   ops::mul(g.constant(std::move(masked)), params["mask_token"]));
  }
  emb = ops::reshape(emb, {v, n, d});

  Var cls = ops::add(g.constant(Tensor(Shape{v, 1, d}, 0.0)), ops::reshape(params["cls_token"], {1, 1, d}));
  Var tokens = ops::concat({cls, emb}, 1);  // [V, T, D]

  Var pos = params["pos_embed"];
  const std::size_t global_grid = cfg.grid(cfg.global_size);
  if (grid != global_grid) {
    Var pos_cls = ops::slice(pos, 0, 0, 1);
    Var pos_patch = ops::slice(pos, 0, 1, global_grid * global_grid);
    Var resampled = ops::matmul(g.constant(bicubic_grid_matrix(global_grid, grid)), pos_patch);
    pos = ops::concat({pos_cls, resampled}, 0);
  }
  tokens = ops::add(tokens, pos);

  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    const std::string pre = "blocks." + std::to_string(b) + ".";
    Var y = ops::layer_norm(tokens, params[pre + "norm1.weight"], params[pre + "norm1.bias"]);
    Var qkv = linear(ops::reshape(y, {v * t, d}), params[pre + "attn.qkv.weight"], params[pre + "attn.qkv.bias"]);
    qkv = ops::permute(ops::reshape(qkv, {v, t, 3, h, dh}), {2, 0, 3, 1, 4});  // [3, V, H, T, dh]
    Var q = ops::reshape(ops::slice(qkv, 0, 0, 1), {v * h, t, dh});
    Var k = ops::reshape(ops::slice(qkv, 0, 1, 1), {v * h, t, dh});
    Var val = ops::reshape(ops::slice(qkv, 0, 2, 1), {v * h, t, dh});
    Var att = ops::softmax(ops::scale(ops::matmul(q, k, true), att_scale));
    Var o = ops::matmul(att, val);  // [V*H, T, dh]
    o = ops::reshape(ops::permute(ops::reshape(o, {v, h, t, dh}), {0, 2, 1, 3}), {v * t, d});
    o = linear(o, params[pre + "attn.proj.weight"], params[pre + "attn.proj.bias"]);
    tokens = ops::add(tokens, ops::reshape(o, {v, t, d}));

    Var z = ops::layer_norm(tokens, params[pre + "norm2.weight"], params[pre + "norm2.bias"]);
    z = ops::gelu(linear(ops::reshape(z, {v * t, d}), params[pre + "mlp.fc1.weight"], params[pre + "mlp.fc1.bias"]));
    z = linear(z, params[pre + "mlp.fc2.weight"], params[pre + "mlp.fc2.bias"]);
    tokens = ops::add(tokens, ops::reshape(z, {v, t, d}));
  }
  tokens = ops::layer_norm(tokens, params["norm.weight"], params["norm.bias"]);
  EncodedBatch out;
  out.cls = ops::reshape(ops::slice(tokens, 1, 0, 1), {v, d});
  out.patches = ops::slice(tokens, 1, 1, n);
  return out;
}

TokenOutput encode(const Tensor& image, const ParamStore& params, const EncoderConfig& config) {
  Graph g;
  Bound bound(g, params, "", false);
  auto batch = encode_batch(bound, config, std::span<const Tensor>(&image, 1));
  TokenOutput out;
  out.cls = batch.cls.value().reshaped({config.embed_dim});
  const std::size_t n = batch.patches.shape()[1];
  out.patches = batch.patches.value().reshaped({n, config.embed_dim});
  return out;
}

std::vector<std::vector<double>> embed_cls(std::span<const Tensor> images, const ParamStore& params,
                                           const EncoderConfig& config, std::size_t chunk) {
  std::vector<std::vector<double>> out;
  out.reserve(images.size());
  const std::size_t d = config.embed_dim;
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t len = std::min(chunk, images.size() - start);
    Graph g;
    Bound bound(g, params, "", false);
    auto batch = encode_batch(bound, config, images.subspan(start, len));
    const Tensor& cls = batch.cls.value();
    for (std::size_t i = 0; i < len; ++i) out.emplace_back(cls.data() + i * d, cls.data() + (i + 1) * d);
  }
  return out;
}

}  // namespace advdino::vit
