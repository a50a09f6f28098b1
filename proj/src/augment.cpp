#include "advdino/augment.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace advdino::aug {

namespace {

bool valid_scale(Range r) { return r.lo > 0.0 && r.lo <= r.hi && r.hi <= 1.0; }
bool valid_prob(double p) { return p >= 0.0 && p <= 1.0; }

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

bool bernoulli(std::mt19937_64& rng, double p) { return uniform(rng, 0.0, 1.0) < p; }

// Half-sample symmetric reflection: ... b a | a b c ... c | c b ...
std::ptrdiff_t reflect(std::ptrdiff_t i, std::ptrdiff_t n) {
  const std::ptrdiff_t period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

}  // namespace

AugmentConfig AugmentConfig::paper() {
  AugmentConfig c;
  c.global_size = 224;
  c.local_size = 96;
  c.patch_size = 16;
  return c;
}

void AugmentConfig::validate() const {
  if (patch_size == 0 || global_size == 0 || local_size == 0) throw Error("crop sizes must be positive");
  if (global_size % patch_size || local_size % patch_size) throw Error("crop sizes must be divisible by the patch size");
  if (!valid_scale(global_scale) || !valid_scale(local_scale)) throw Error("crop scale ranges must lie in (0, 1]");
  if (!valid_prob(hflip_prob) || !valid_prob(vflip_prob) || !valid_prob(blur_prob_global) ||
      !valid_prob(blur_prob_local)) {
    throw Error("augmentation probabilities must lie in [0, 1]");
  }
  if (!(blur_sigma.lo > 0.0 && blur_sigma.lo <= blur_sigma.hi)) throw Error("blur sigma range must be positive");
  if (!(mask_ratio.lo >= 0.0 && mask_ratio.lo <= mask_ratio.hi && mask_ratio.hi <= 1.0)) {
    throw Error("mask ratio range must lie in [0, 1]");
  }
}

std::vector<std::string> pipeline_stages() {
  return {"random_resized_crop", "random_flip", "gaussian_blur_channelwise", "mim_mask"};
}

Tensor resize_region(const Tensor& image, double x0, double y0, double side, std::size_t out) {
  if (image.rank() != 3) throw ShapeError("expected a [C, H, W] image");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor res(Shape{c, out, out});
  const double step = side / static_cast<double>(out);
  std::vector<std::size_t> ylo(out), yhi(out), xlo(out), xhi(out);
  std::vector<double> fy(out), fx(out);
  auto taps = [&](double start, std::size_t n, std::size_t k, std::size_t& lo, std::size_t& hi, double& f) {
    double p = start + (static_cast<double>(k) + 0.5) * step - 0.5;
    p = std::clamp(p, 0.0, static_cast<double>(n - 1));
    lo = static_cast<std::size_t>(std::floor(p));
    hi = std::min(lo + 1, n - 1);
    f = p - static_cast<double>(lo);
  };
  for (std::size_t k = 0; k < out; ++k) {
    taps(y0, h, k, ylo[k], yhi[k], fy[k]);
    taps(x0, w, k, xlo[k], xhi[k], fx[k]);
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = image.data() + ch * h * w;
    double* dst = res.data() + ch * out * out;
    for (std::size_t i = 0; i < out; ++i)
      for (std::size_t j = 0; j < out; ++j) {
        const double top = src[ylo[i] * w + xlo[j]] * (1 - fx[j]) + src[ylo[i] * w + xhi[j]] * fx[j];
        const double bot = src[yhi[i] * w + xlo[j]] * (1 - fx[j]) + src[yhi[i] * w + xhi[j]] * fx[j];
        dst[i * out + j] = top * (1 - fy[i]) + bot * fy[i];
      }
  }
  return res;
}

Tensor flip(const Tensor& image, bool horizontal, bool vertical) {
  if (image.rank() != 3) throw ShapeError("expected a [C, H, W] image");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t sy = vertical ? h - 1 - y : y;
        const std::size_t sx = horizontal ? w - 1 - x : x;
        out[(ch * h + y) * w + x] = image[(ch * h + sy) * w + sx];
      }
  return out;
}

FlipResult random_flip(const Tensor& image, std::mt19937_64& rng, double p_horizontal, double p_vertical) {
  const bool h = bernoulli(rng, p_horizontal);
  const bool v = bernoulli(rng, p_vertical);
  return {flip(image, h, v), h, v};
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw Error("blur sigma must be positive");
  const auto r = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double total = 0.0;
  for (std::ptrdiff_t i = -r; i <= r; ++i) {
    total += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
  }
  for (auto& v : k) v /= total;
  return k;
}

Tensor gaussian_blur_channelwise(const Tensor& image, double sigma) {
  if (image.rank() != 3) throw ShapeError("expected a [C, H, W] image");
  const std::vector<double> k = gaussian_kernel(sigma);
  const auto r = static_cast<std::ptrdiff_t>(k.size() / 2);
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const auto sh = static_cast<std::ptrdiff_t>(h), sw = static_cast<std::ptrdiff_t>(w);
  Tensor tmp(image.shape()), out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = image.data() + ch * h * w;
    double* mid = tmp.data() + ch * h * w;
    double* dst = out.data() + ch * h * w;
    for (std::ptrdiff_t y = 0; y < sh; ++y)
      for (std::ptrdiff_t x = 0; x < sw; ++x) {
        double s = 0.0;
        for (std::ptrdiff_t t = -r; t <= r; ++t) s += k[static_cast<std::size_t>(t + r)] * src[y * sw + reflect(x + t, sw)];
        mid[y * sw + x] = s;
      }
    for (std::ptrdiff_t y = 0; y < sh; ++y)
      for (std::ptrdiff_t x = 0; x < sw; ++x) {
        double s = 0.0;
        for (std::ptrdiff_t t = -r; t <= r; ++t) s += k[static_cast<std::size_t>(t + r)] * mid[reflect(y + t, sh) * sw + x];
        dst[y * sw + x] = s;
      }
  }
  return out;
}

std::vector<bool> sample_mim_mask(std::size_t gh, std::size_t gw, double ratio, std::mt19937_64& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw Error("mask ratio must lie in [0, 1]");
  const std::size_t n = gh * gw;
  const auto target = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(n)));
  std::vector<bool> mask(n, false);
  std::size_t count = 0;
  const double log_aspect = std::log(3.0);
  for (int attempt = 0; count < target && attempt < 100; ++attempt) {
    // Block area between 4 patches (or what remains) and the remaining budget.
    const double remaining = static_cast<double>(target - count);
    const double area = uniform(rng, std::min(4.0, remaining), std::max(remaining, std::min(4.0, remaining)));
    const double aspect = std::exp(uniform(rng, -log_aspect, log_aspect));
    auto bh = static_cast<std::size_t>(std::lround(std::sqrt(area * aspect)));
    auto bw = static_cast<std::size_t>(std::lround(std::sqrt(area / aspect)));
    bh = std::clamp<std::size_t>(bh, 1, gh);
    bw = std::clamp<std::size_t>(bw, 1, gw);
    const std::size_t top = std::uniform_int_distribution<std::size_t>(0, gh - bh)(rng);
    const std::size_t left = std::uniform_int_distribution<std::size_t>(0, gw - bw)(rng);
    for (std::size_t y = top; y < top + bh && count < target; ++y)
      for (std::size_t x = left; x < left + bw && count < target; ++x) {
        if (!mask[y * gw + x]) {
          mask[y * gw + x] = true;
          ++count;
        }
      }
  }
  // Fallback when blocks keep landing on covered area.
  while (count < target) {
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    if (!mask[i]) {
      mask[i] = true;
      ++count;
    }
  }
  return mask;
}

std::vector<bool> sample_mim_mask(std::size_t num_patches, double ratio, std::mt19937_64& rng) {
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(num_patches))));
  if (side * side != num_patches) throw Error("num_patches " + std::to_string(num_patches) + " is not a square grid");
  return sample_mim_mask(side, side, ratio, rng);
}

CropSet multi_crop(const Tensor& tile, std::size_t source, std::size_t domain, const AugmentConfig& cfg,
                   std::mt19937_64& rng) {
  cfg.validate();
  if (tile.rank() != 3) throw ShapeError("multi_crop expects a [C, H, W] tile");
  const double h = static_cast<double>(tile.dim(1)), w = static_cast<double>(tile.dim(2));
  if (tile.dim(1) < cfg.global_size || tile.dim(2) < cfg.global_size) {
    throw Error("tile " + shape_str(tile.shape()) + " is smaller than the global crop size " +
                std::to_string(cfg.global_size));
  }
  auto make = [&](Range scale, std::size_t out, double blur_prob) {
    Crop c;
    c.source = source;
    c.domain = domain;
    const double s = uniform(rng, scale.lo, scale.hi);
    c.side = std::min(std::sqrt(s * h * w), std::min(h, w));
    c.x0 = uniform(rng, 0.0, w - c.side);
    c.y0 = uniform(rng, 0.0, h - c.side);
    Tensor img = resize_region(tile, c.x0, c.y0, c.side, out);
    FlipResult f = random_flip(img, rng, cfg.hflip_prob, cfg.vflip_prob);
    c.hflip = f.horizontal;
    c.vflip = f.vertical;
    img = std::move(f.image);
    if (bernoulli(rng, blur_prob)) {
      c.blur_sigma = uniform(rng, cfg.blur_sigma.lo, cfg.blur_sigma.hi);
      img = gaussian_blur_channelwise(img, c.blur_sigma);
    }
    c.image = std::move(img);
    return c;
  };
  CropSet set;
  for (std::size_t i = 0; i < cfg.n_global; ++i) set.globals.push_back(make(cfg.global_scale, cfg.global_size, cfg.blur_prob_global));
  for (std::size_t i = 0; i < cfg.n_local; ++i) set.locals.push_back(make(cfg.local_scale, cfg.local_size, cfg.blur_prob_local));
  const std::size_t grid = cfg.global_size / cfg.patch_size;
  for (const Crop& g : set.globals) {
    const double ratio = uniform(rng, cfg.mask_ratio.lo, cfg.mask_ratio.hi);
    set.masked.push_back({g, sample_mim_mask(grid, grid, ratio, rng)});
  }
  return set;
}

}  // namespace advdino::aug
