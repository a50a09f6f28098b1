#include "advdino/synthcohort.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numeric>

#include "advdino/augment.hpp"
#include "advdino/binary_io.hpp"
#include "advdino/rng.hpp"

namespace advdino {

void validate(const SlideRecord& r) {
  if (!(r.time > 0.0) || !std::isfinite(r.time)) throw Error("slide " + r.slide_id + ": time must be positive");
  if (r.event != 0 && r.event != 1) throw Error("slide " + r.slide_id + ": event must be 0 or 1");
  if (r.stratum < -1) throw Error("slide " + r.slide_id + ": invalid stratum");
}

}  // namespace advdino

namespace advdino::synth {

using nlohmann::json;

namespace {

constexpr double kOffLevel = 4.0;
constexpr double kPi = 3.14159265358979323846;

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
double normal(std::mt19937_64& rng, double sd) { return std::normal_distribution<double>(0.0, sd)(rng); }

std::vector<double> dirichlet_ones(std::size_t n, std::mt19937_64& rng) {
  std::vector<double> g(n);
  std::exponential_distribution<double> e(1.0);
  double s = 0.0;
  for (auto& v : g) s += v = e(rng);
  for (auto& v : g) v /= s;
  return g;
}

// Largest-remainder rounding of proportions to integer counts summing to total.
std::vector<std::size_t> apportion(const std::vector<double>& p, std::size_t total) {
  std::vector<std::size_t> counts(p.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double exact = p[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    used += counts[i];
    rem.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < total; ++k, ++used) ++counts[rem[k % rem.size()].second];
  return counts;
}

std::vector<double> pattern_field(Pattern pattern, std::size_t s, std::mt19937_64& rng) {
  std::vector<double> f(s * s, 0.0);
  const double S = static_cast<double>(s);
  auto add_gaussians = [&](std::size_t n, double sig_lo, double sig_hi) {
    for (std::size_t k = 0; k < n; ++k) {
      const double cx = uniform(rng, 0, S), cy = uniform(rng, 0, S), sg = uniform(rng, sig_lo, sig_hi);
      const double inv = 1.0 / (2 * sg * sg);
      const auto r = static_cast<std::ptrdiff_t>(std::ceil(4 * sg));
      const auto x0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(cx) - r);
      const auto x1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(s) - 1, static_cast<std::ptrdiff_t>(cx) + r);
      const auto y0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(cy) - r);
      const auto y1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(s) - 1, static_cast<std::ptrdiff_t>(cy) + r);
      for (auto y = y0; y <= y1; ++y)
        for (auto x = x0; x <= x1; ++x) {
          const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
          f[static_cast<std::size_t>(y) * s + static_cast<std::size_t>(x)] += std::exp(-(dx * dx + dy * dy) * inv);
        }
    }
  };
  switch (pattern) {
    case Pattern::Blob: {
      const auto n = static_cast<std::size_t>(2 + rng() % 3);
      add_gaussians(n, 0.12 * S, 0.25 * S);
      for (auto& v : f) v += 0.15;
      break;
    }
    case Pattern::SparseDots: {
      const auto n = std::max<std::size_t>(3, static_cast<std::size_t>(std::lround(0.006 * S * S)));
      add_gaussians(n, 1.2, 2.0);
      for (auto& v : f) v += 0.08;
      break;
    }
    case Pattern::StromaTexture: {
      const double theta = uniform(rng, 0, kPi), lambda = uniform(rng, 0.12, 0.2) * S, phase = uniform(rng, 0, 2 * kPi);
      const double c = std::cos(theta), sn = std::sin(theta);
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
          const double u = 2 * kPi * (static_cast<double>(x) * c + static_cast<double>(y) * sn) / lambda + phase;
          f[y * s + x] = 1.0 + 0.8 * std::sin(u) + 0.15 * std::sin(2 * u + 1.0);
        }
      break;
    }
  }
  double mean = 0.0;
  for (double v : f) mean += v;
  mean /= static_cast<double>(f.size());
  for (auto& v : f) v = std::max(v / mean, 0.0);
  return f;
}

// Solves (1 - exp(-x)) / x = r for x > 0.
double censor_scale(double r) {
  double lo = 1e-12, hi = 1.0;
  auto f = [](double x) { return (1.0 - std::exp(-x)) / x; };
  while (f(hi) > r) hi *= 2.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) > r ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

json effect_json(const DomainEffect& e) {
  return {{"gain", e.gain}, {"offset", e.offset}, {"contrast", e.contrast}, {"blur_sigma", e.blur_sigma}};
}

}  // namespace

DomainEffect DomainEffect::identity(std::size_t channels) {
  DomainEffect e;
  e.gain.assign(channels, 1.0);
  e.offset.assign(channels, 0.0);
  return e;
}

const char* pattern_name(Pattern p) {
  switch (p) {
    case Pattern::Blob:
      return "blob";
    case Pattern::SparseDots:
      return "sparse-dots";
    case Pattern::StromaTexture:
      return "stroma-texture";
  }
  return "?";
}

double HazardSpec::log_rate(const std::vector<double>& a) const {
  double z = std::log(base_rate);
  for (const auto& t : terms) {
    if (t.phenotype >= a.size()) throw Error("hazard term refers to phenotype " + std::to_string(t.phenotype));
    z += t.beta * a[t.phenotype] / abundance_unit;
  }
  return z;
}

HazardSpec CohortConfig::default_hazard() {
  HazardSpec h;
  h.terms = {{1, 1.5}, {3, -1.5}};
  return h;
}

void CohortConfig::validate() const {
  if (n_phenotypes < 2) throw Error("need at least two phenotypes");
  if (n_channels < 2) throw Error("need at least two biomarker channels");
  if (n_slides == 0 || tiles_per_slide == 0) throw Error("cohort must have slides and tiles");
  if (tile_size < 8) throw Error("tile size too small");
  if (!(effect_strength >= 0.0)) throw Error("effect_strength must be non-negative");
  if (!(censor_rate >= 0.0 && censor_rate < 1.0)) throw Error("censor_rate must lie in [0, 1)");
  if (!(pair_share > 0.0 && pair_share < 1.0)) throw Error("pair_share must lie in (0, 1)");
  if (!(hazard.base_rate > 0.0) || !(hazard.abundance_unit > 0.0)) throw Error("invalid hazard rates");
  for (const auto& t : hazard.terms)
    if (t.phenotype >= n_phenotypes || !std::isfinite(t.beta)) throw Error("invalid hazard term");
}

std::vector<Phenotype> make_phenotypes(std::size_t n, std::size_t c) {
  std::vector<Phenotype> ph(n);
  if (n == 6 && c == 6) {
    // Channels: DAPI, CD8, FOXP3, PD-L1, PD-1, CK.
    const double o = kOffLevel;
    ph[0] = {0, "tumor", {60, o, o, o, o, 70}, Pattern::Blob};
    ph[1] = {1, "cd8-dots", {30, 30, o, o, 30, o}, Pattern::SparseDots};
    ph[2] = {2, "cd8-stroma", {30, 30, o, o, 30, o}, Pattern::StromaTexture};
    ph[3] = {3, "treg", {30, o, 35, o, o, o}, Pattern::SparseDots};
    ph[4] = {4, "pdl1-tumor", {60, o, o, 50, o, 55}, Pattern::Blob};
    ph[5] = {5, "stroma", {35, o, o, o, o, o}, Pattern::StromaTexture};
    return ph;
  }
  const Pattern cycle[3] = {Pattern::Blob, Pattern::SparseDots, Pattern::StromaTexture};
  for (std::size_t k = 0; k < n; ++k) {
    ph[k].id = k;
    ph[k].name = "phenotype-" + std::to_string(k);
    ph[k].signature.assign(c, kOffLevel);
    ph[k].signature[0] = 40.0 + 5.0 * static_cast<double>(k % 3);
    const std::size_t key = (k == 2 && n >= 3) ? 1 : k;  // phenotype 2 mirrors 1's channels
    ph[k].signature[1 + key % (c - 1)] = 45.0;
    if (key >= c - 1) ph[k].signature[1 + (key + 1) % (c - 1)] = 35.0;
    ph[k].pattern = cycle[k % 3];
  }
  if (n >= 3) ph[2].signature = ph[1].signature;
  return ph;
}

DomainEffect sample_domain_effect(std::size_t channels, double s, std::mt19937_64& rng) {
  DomainEffect e = DomainEffect::identity(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    e.gain[c] = std::exp(s * normal(rng, 0.45));
    e.offset[c] = s * uniform(rng, 0.0, 30.0);
  }
  e.contrast = std::exp(s * normal(rng, 0.25));
  e.blur_sigma = s * uniform(rng, 0.0, 1.2);
  if (e.blur_sigma < 0.05) e.blur_sigma = 0.0;
  return e;
}

Tensor apply_domain_effect(const Tensor& image, const DomainEffect& e) {
  if (image.rank() != 3) throw ShapeError("apply_domain_effect expects [C, H, W]");
  const std::size_t c = e.gain.size();
  if (c > image.dim(0) || e.offset.size() != c) throw ShapeError("domain effect channel count mismatch");
  for (double g : e.gain)
    if (!(g > 0.0)) throw Error("domain effect gains must be positive");
  const std::size_t plane = image.dim(1) * image.dim(2);
  Tensor out = image;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < plane; ++i) {
      double& v = out[ch * plane + i];
      const double base = e.contrast == 1.0 ? v : 255.0 * std::pow(std::max(v, 0.0) / 255.0, e.contrast);
      v = e.gain[ch] * base + e.offset[ch];
    }
  if (e.blur_sigma > 0.0) {
    Tensor head(Shape{c, image.dim(1), image.dim(2)});
    std::copy(out.data(), out.data() + c * plane, head.data());
    head = aug::gaussian_blur_channelwise(head, e.blur_sigma);
    std::copy(head.data(), head.data() + c * plane, out.data());
  }
  for (std::size_t i = 0; i < c * plane; ++i) out[i] = std::clamp(out[i], 0.0, 255.0);
  return out;
}

Tensor render_tile(const Phenotype& p, std::size_t s, std::mt19937_64& rng) {
  const std::vector<double> field = pattern_field(p.pattern, s, rng);
  const std::size_t c = p.signature.size(), plane = s * s;
  Tensor t(Shape{c, s, s});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double sig = p.signature[ch];
    const bool on = sig > kOffLevel;
    for (std::size_t i = 0; i < plane; ++i) t[ch * plane + i] = std::min(on ? sig * field[i] : sig, 255.0);
  }
  return t;
}

std::pair<double, int> sample_survival(const std::vector<double>& abundance, const HazardSpec& hazard,
                                       double censor_rate, std::mt19937_64& rng) {
  if (!(hazard.base_rate > 0.0) || !(censor_rate >= 0.0 && censor_rate < 1.0)) throw Error("invalid rates");
  const double total = std::accumulate(abundance.begin(), abundance.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-9) throw Error("abundances must sum to 1");
  const double rate = std::exp(hazard.log_rate(abundance));
  if (!(rate > 0.0) || !std::isfinite(rate)) throw Error("invalid hazard rate");
  const double t = std::exponential_distribution<double>(rate)(rng);
  const double u = uniform(rng, 0.0, 1.0);
  if (censor_rate == 0.0) return {t, 1};
  const double c = u * censor_scale(censor_rate) / rate;
  return c < t ? std::pair<double, int>{c, 0} : std::pair<double, int>{t, 1};
}

SyntheticCohort generate_cohort(const CohortConfig& cfg) {
  cfg.validate();
  SyntheticCohort co;
  co.config = cfg;
  co.phenotypes = make_phenotypes(cfg.n_phenotypes, cfg.n_channels);
  const std::size_t n_ph = cfg.n_phenotypes;
  const std::size_t cells = static_cast<std::size_t>(std::ceil(static_cast<double>(cfg.tiles_per_slide) * 1.15));
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(cells))));
  const std::size_t rows = (cells + cols - 1) / cols;

  for (std::size_t si = 0; si < cfg.n_slides; ++si) {
    std::mt19937_64 rng(derive_seed(cfg.seed, si));
    SyntheticSlide sl;
    sl.id = "S" + std::string(si < 9 ? "00" : si < 99 ? "0" : "") + std::to_string(si + 1);
    sl.height = rows * cfg.tile_size;
    sl.width = cols * cfg.tile_size;

    std::vector<double> p(n_ph);
    if (n_ph >= 3) {
      const double u = uniform(rng, 0.05, 0.95);
      p[1] = cfg.pair_share * u;
      p[2] = cfg.pair_share * (1.0 - u);
      std::vector<double> rest = dirichlet_ones(n_ph - 2, rng);
      for (std::size_t k = 0, j = 0; k < n_ph; ++k)
        if (k != 1 && k != 2) p[k] = (1.0 - cfg.pair_share) * rest[j++];
    } else {
      p = dirichlet_ones(n_ph, rng);
    }
    const auto counts = apportion(p, cfg.tiles_per_slide);
    std::vector<std::size_t> labels;
    for (std::size_t k = 0; k < n_ph; ++k) labels.insert(labels.end(), counts[k], k);
    std::shuffle(labels.begin(), labels.end(), rng);
    sl.abundance.resize(n_ph);
    for (std::size_t k = 0; k < n_ph; ++k)
      sl.abundance[k] = static_cast<double>(counts[k]) / static_cast<double>(cfg.tiles_per_slide);

    std::vector<std::size_t> cell_ids(rows * cols);
    std::iota(cell_ids.begin(), cell_ids.end(), 0);
    std::shuffle(cell_ids.begin(), cell_ids.end(), rng);
    cell_ids.resize(cfg.tiles_per_slide);
    std::sort(cell_ids.begin(), cell_ids.end());
    for (std::size_t t = 0; t < cfg.tiles_per_slide; ++t) {
      sl.tiles.push_back({static_cast<std::uint32_t>((cell_ids[t] % cols) * cfg.tile_size),
                          static_cast<std::uint32_t>((cell_ids[t] / cols) * cfg.tile_size), labels[t]});
    }

    sl.effect = sample_domain_effect(cfg.n_channels, cfg.effect_strength, rng);
    sl.af_level = uniform(rng, 8.0, 20.0);
    auto [time, event] = sample_survival(sl.abundance, cfg.hazard, cfg.censor_rate, rng);
    sl.record.slide_id = sl.id;
    sl.record.time = time;
    sl.record.event = event;
    sl.record.covariates.assign(cfg.n_channels, 0.0);
    for (std::size_t k = 0; k < n_ph; ++k)
      for (std::size_t c = 0; c < cfg.n_channels; ++c)
        sl.record.covariates[c] += sl.abundance[k] * co.phenotypes[k].signature[c];
    sl.render_seed = derive_seed(cfg.seed ^ 0x5EEDull, si);
    co.slides.push_back(std::move(sl));
  }

  // Stage: high when the stage-defining phenotype (3, else the last) is below the cohort median.
  const std::size_t stage_ph = n_ph > 3 ? 3 : n_ph - 1;
  std::vector<double> a;
  for (auto& s : co.slides) a.push_back(s.abundance[stage_ph]);
  std::vector<double> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted[sorted.size() / 2];
  for (std::size_t i = 0; i < co.slides.size(); ++i) co.slides[i].record.stratum = a[i] < median ? 1 : 0;
  return co;
}

slide::SlideImage render_slide(const SyntheticCohort& co, std::size_t index) {
  const SyntheticSlide& sl = co.slides.at(index);
  const std::size_t c = co.config.n_channels, s = co.config.tile_size, h = sl.height, w = sl.width;
  slide::SlideImage img;
  img.id = sl.id;
  if (c == 6) {
    img.channel_names = slide::default_channel_names();
  } else {
    for (std::size_t k = 0; k < c; ++k) img.channel_names.push_back("ch" + std::to_string(k));
    img.channel_names.push_back("AF");
  }
  img.pixels = Tensor(Shape{c + 1, h, w}, 0.0);
  const std::size_t plane = h * w;
  std::mt19937_64 noise_rng(sl.render_seed);
  for (std::size_t t = 0; t < sl.tiles.size(); ++t) {
    const TileTruth& tt = sl.tiles[t];
    std::mt19937_64 rng(derive_seed(sl.render_seed, t + 1));
    Tensor tile = apply_domain_effect(render_tile(co.phenotypes[tt.phenotype], s, rng), sl.effect);
    // Smooth autofluorescence field over the tissue tile.
    const double fx = uniform(rng, 0.5, 1.5), fy = uniform(rng, 0.5, 1.5), ph = uniform(rng, 0, 2 * kPi);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const double af =
            sl.af_level * (1.0 + 0.25 * std::sin(2 * kPi * (fx * static_cast<double>(x) + fy * static_cast<double>(y)) /
                                                     static_cast<double>(s) + ph));
        const std::size_t pix = (tt.y + y) * w + tt.x + x;
        for (std::size_t ch = 0; ch < c; ++ch) img.pixels[ch * plane + pix] = tile[(ch * s + y) * s + x] + af;
        img.pixels[c * plane + pix] = af;
      }
  }
  std::normal_distribution<double> noise(0.0, 2.0);
  for (auto& v : img.pixels.values()) v = std::clamp(v + 1.0 + noise(noise_rng), 0.0, 255.0);
  return img;
}

std::string ground_truth_json(const SyntheticCohort& co) {
  json j;
  j["seed"] = co.config.seed;
  j["effect_strength"] = co.config.effect_strength;
  json hz;
  hz["base_rate"] = co.config.hazard.base_rate;
  hz["abundance_unit"] = co.config.hazard.abundance_unit;
  hz["terms"] = json::array();
  for (auto& t : co.config.hazard.terms) hz["terms"].push_back({{"phenotype", t.phenotype}, {"beta", t.beta}});
  j["hazard"] = hz;
  j["phenotypes"] = json::array();
  for (auto& p : co.phenotypes)
    j["phenotypes"].push_back(
        {{"id", p.id}, {"name", p.name}, {"signature", p.signature}, {"pattern", pattern_name(p.pattern)}});
  j["slides"] = json::array();
  for (auto& s : co.slides) {
    json tiles = json::array();
    for (auto& t : s.tiles) tiles.push_back({t.x, t.y, t.phenotype});
    j["slides"].push_back({{"slide_id", s.id},
                           {"effect", effect_json(s.effect)},
                           {"af_level", s.af_level},
                           {"abundance", s.abundance},
                           {"tiles", tiles}});
  }
  return j.dump(1) + "\n";
}

std::vector<TileLabel> labels_from_ground_truth(const std::string& text) {
  std::vector<TileLabel> out;
  try {
    json j = json::parse(text);
    for (auto& s : j.at("slides")) {
      const std::string id = s.at("slide_id").get<std::string>();
      for (auto& t : s.at("tiles")) out.push_back({id, t.at(0).get<std::uint32_t>(), t.at(1).get<std::uint32_t>(), t.at(2).get<std::size_t>()});
    }
  } catch (const json::exception& e) {
    throw io::FormatError(std::string("ground truth: ") + e.what());
  }
  return out;
}

std::string records_json(const std::vector<SlideRecord>& records) {
  json j = json::array();
  for (auto& r : records)
    j.push_back({{"slide_id", r.slide_id}, {"time", r.time}, {"event", r.event}, {"stratum", r.stratum},
                 {"covariates", r.covariates}});
  return j.dump(1) + "\n";
}

std::vector<SlideRecord> records_from_json(const std::string& text) {
  std::vector<SlideRecord> out;
  try {
    for (auto& e : json::parse(text)) {
      SlideRecord r;
      r.slide_id = e.at("slide_id").get<std::string>();
      r.time = e.at("time").get<double>();
      r.event = e.at("event").get<int>();
      r.stratum = e.value("stratum", -1);
      r.covariates = e.value("covariates", std::vector<double>{});
      validate(r);
      out.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw io::FormatError(std::string("records: ") + e.what());
  }
  return out;
}

}  // namespace advdino::synth
