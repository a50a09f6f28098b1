#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "advdino/records.hpp"
#include "advdino/slidepipe.hpp"
#include "advdino/tensor.hpp"

namespace advdino::synth {

// Per-slide staining variation applied to the biomarker channels.
struct DomainEffect {
  std::vector<double> gain;    // > 0, per channel
  std::vector<double> offset;  // per channel
  double contrast = 1.0;       // exponent on the [0, 1]-scaled intensity
  double blur_sigma = 0.0;     // 0 disables blur

  static DomainEffect identity(std::size_t channels);
};

enum class Pattern { Blob, SparseDots, StromaTexture };
const char* pattern_name(Pattern p);

struct Phenotype {
  std::size_t id = 0;
  std::string name;
  std::vector<double> signature;  // mean intensity per biomarker channel, [0, 255]
  Pattern pattern = Pattern::Blob;
};

struct HazardTerm {
  std::size_t phenotype;
  double beta;  // log hazard ratio per `abundance_unit` of abundance
};

struct HazardSpec {
  double base_rate = 1.0 / 1000.0;  // per day
  double abundance_unit = 0.1;
  std::vector<HazardTerm> terms;

  double log_rate(const std::vector<double>& abundance) const;
};

struct CohortConfig {
  std::size_t n_slides = 24;
  std::size_t tiles_per_slide = 200;
  std::size_t n_phenotypes = 6;
  std::size_t n_channels = 6;  // biomarkers; an autofluorescence channel is added
  std::size_t tile_size = 64;
  double effect_strength = 1.0;
  double censor_rate = 0.3;
  // Phenotypes 1 and 2 share their channel signature and a fixed joint share of
  // every slide; only their spatial pattern differs.
  double pair_share = 0.35;
  HazardSpec hazard = default_hazard();
  std::uint64_t seed = 7;

  static HazardSpec default_hazard();
  void validate() const;
};

struct TileTruth {
  std::uint32_t x, y;
  std::size_t phenotype;
};

struct SyntheticSlide {
  std::string id;
  std::size_t height = 0, width = 0;
  std::vector<TileTruth> tiles;  // tissue tiles in row-major order
  std::vector<double> abundance;  // realized per-phenotype proportions
  DomainEffect effect;
  double af_level = 0.0;
  SlideRecord record;
  std::uint64_t render_seed = 0;
};

struct SyntheticCohort {
  CohortConfig config;
  std::vector<Phenotype> phenotypes;
  std::vector<SyntheticSlide> slides;
};

std::vector<Phenotype> make_phenotypes(std::size_t n_phenotypes, std::size_t n_channels);

// Layout, phenotype labels, domain effects and outcomes; pixels are rendered on
// demand by render_slide.
SyntheticCohort generate_cohort(const CohortConfig& config);

// Draws a slide's domain effect; strength 0 gives the identity effect.
DomainEffect sample_domain_effect(std::size_t channels, double strength, std::mt19937_64& rng);

// v <- gain * 255 * (v / 255)^contrast + offset per channel, then channel-wise
// blur, then clip to [0, 255]. Applies to the first effect.gain.size() channels.
Tensor apply_domain_effect(const Tensor& image, const DomainEffect& effect);

// Clean (effect-free) pattern of one tile: [channels, S, S].
Tensor render_tile(const Phenotype& p, std::size_t size, std::mt19937_64& rng);

// Full slide, biomarker channels plus autofluorescence last.
slide::SlideImage render_slide(const SyntheticCohort& cohort, std::size_t index);

// Exponential event time with rate exp(hazard.log_rate(a)); uniform censoring
// on [0, tau] with tau chosen so the censoring probability equals censor_rate.
std::pair<double, int> sample_survival(const std::vector<double>& abundance, const HazardSpec& hazard,
                                       double censor_rate, std::mt19937_64& rng);

// Ground truth (labels, effects, hazard spec) for oracle checks only.
std::string ground_truth_json(const SyntheticCohort& cohort);
// Clinical records consumed by the pipeline.
std::string records_json(const std::vector<SlideRecord>& records);
std::vector<SlideRecord> records_from_json(const std::string& text);

struct TileLabel {
  std::string slide_id;
  std::uint32_t x, y;
  std::size_t phenotype;
};
std::vector<TileLabel> labels_from_ground_truth(const std::string& text);

}  // namespace advdino::synth
