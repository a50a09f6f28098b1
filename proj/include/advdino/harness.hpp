#pragma once

#include <cstdint>
#include <json.hpp>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "advdino/phenocluster.hpp"
#include "advdino/pretrain.hpp"
#include "advdino/records.hpp"
#include "advdino/survival.hpp"
#include "advdino/synthcohort.hpp"

namespace advdino::harness {

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Raised when a stage touches an artifact it must not read.
class AccessError : public Error {
 public:
  using Error::Error;
};

// Errors from a pipeline stage, tagged with the stage name.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what) : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct PrepConfig {
  std::size_t tile_size = 64;
  std::size_t mask_factor = 16;
  double min_coverage = 0.25;

  void validate() const;
};

// Report gates; a run exits nonzero when any gate fails.
struct GateConfig {
  double baseline_ari_slide_min = 0.4;
  double adversarial_ari_slide_max = 0.15;
  double adversarial_ari_phenotype_min = 0.5;
  double adversarial_probe_margin_max = 0.10;
  double baseline_probe_margin_min = 0.30;
  double abmil_c_index_min = 0.65;
  double abmil_permuted_c_index_max = 0.55;
};

struct RunConfig {
  std::string profile = "desk";
  std::uint64_t seed = 7;
  std::string out = "advdino-run";
  synth::CohortConfig synth;
  PrepConfig preprocess;
  train::PretrainConfig pretrain;  // weights.adv is the adversarial run's lambda
  bool run_baseline = true;        // also train the lambda_adv = 0 control
  cluster::ClusterConfig cluster;
  surv::AbmilConfig abmil;
  std::size_t folds = 5;
  std::size_t probe_folds = 5;
  GateConfig gates;

  static RunConfig desk();
  // Recorded full-scale settings; not runnable on a desk machine.
  static RunConfig paper();
  static RunConfig for_profile(const std::string& profile);
  void validate() const;
};

nlohmann::json config_to_json(const RunConfig& config);
// Overlays `j` on the defaults of its "profile" (desk when absent). The
// document is first checked against config_schema(); unknown keys and wrong
// types are rejected with the offending path.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::string& path);

// JSON Schema (draft 2020-12 subset) describing RunConfig documents.
nlohmann::json config_schema();
// Checks type, properties, additionalProperties, items, enum and minimum.
// Returns the list of violations ("path: message"), empty when valid.
std::vector<std::string> schema_violations(const nlohmann::json& doc, const nlohmann::json& schema);

std::string config_digest(const RunConfig& config);

struct FoldPlan {
  std::size_t k = 0;
  std::vector<std::size_t> fold_of;  // per slide, in record order
  std::string stratification = "event";
  bool degraded = false;  // a stratum had fewer than k members

  std::vector<std::size_t> members(std::size_t fold) const;
};

// Stratified by event indicator: each stratum is shuffled with the seed and
// dealt round-robin; the censored stratum continues where the events stopped
// so fold sizes differ by at most one.
FoldPlan make_folds(std::span<const SlideRecord> records, std::size_t k, std::uint64_t seed);

// Records which stage opened which artifact. Ground-truth files are off limits
// to pretrain, embed and cluster.
class AccessAudit {
 public:
  struct Entry {
    std::string stage;
    std::string path;
    bool ground_truth = false;
  };

  void open(const std::string& stage, const std::string& path);
  const std::vector<Entry>& entries() const { return entries_; }
  bool ground_truth_opened_by(const std::string& stage) const;
  nlohmann::json to_json(const std::string& root) const;

  static bool is_ground_truth(const std::string& path);
  static const std::set<std::string>& blind_stages();

 private:
  std::vector<Entry> entries_;
};

// Artifact layout under RunConfig::out.
struct RunPaths {
  std::string root;

  std::string slides_dir() const { return root + "/slides"; }
  std::string records() const { return root + "/records.json"; }
  std::string ground_truth() const { return root + "/truth/ground_truth.json"; }
  std::string tiles() const { return root + "/tiles.advt"; }
  std::string norm_stats() const { return root + "/norm_stats.json"; }
  std::string arm(const std::string& tag) const { return root + "/" + tag; }
  std::string checkpoint(const std::string& tag) const { return arm(tag) + "/checkpoint.ckpt"; }
  std::string curve(const std::string& tag) const { return arm(tag) + "/loss_curve.csv"; }
  std::string embeddings(const std::string& tag) const { return arm(tag) + "/embeddings.adve"; }
  std::string clusters(const std::string& tag) const { return arm(tag) + "/clusters.json"; }
  std::string analysis(const std::string& tag) const { return arm(tag) + "/analysis.json"; }
  std::string survival(const std::string& tag) const { return arm(tag) + "/survival.json"; }
  std::string report() const { return root + "/report.json"; }
};

// Arm tags: "baseline" (lambda_adv = 0) and "adversarial".
std::vector<std::string> arm_tags(const RunConfig& config);
double arm_lambda(const RunConfig& config, const std::string& tag);

// Individual stages; each reads and writes artifacts under config.out.
void stage_synth(const RunConfig& config, AccessAudit& audit);
void stage_preprocess(const RunConfig& config, AccessAudit& audit);
void stage_pretrain(const RunConfig& config, const std::string& tag, AccessAudit& audit);
void stage_embed(const RunConfig& config, const std::string& tag, AccessAudit& audit);
void stage_cluster(const RunConfig& config, const std::string& tag, AccessAudit& audit);
void stage_analyze(const RunConfig& config, const std::string& tag, AccessAudit& audit);
void stage_survival(const RunConfig& config, const std::string& tag, AccessAudit& audit);
// Evaluates every arm against the ground truth and writes report.json.
nlohmann::json stage_report(const RunConfig& config, AccessAudit& audit);

struct RunResult {
  nlohmann::json report;
  std::string report_text;  // exactly the bytes written to report.json
  bool passed = false;
};

// synth -> preprocess -> per arm (pretrain, embed, cluster, analyze, survival) -> report.
RunResult run_pipeline(const RunConfig& config);

// Bags of tile embeddings per record, in record order.
std::vector<Tensor> slide_bags(std::span<const cluster::EmbeddingRecord> embeddings,
                               std::span<const SlideRecord> records);

std::string read_text(const std::string& path);
void write_text(const std::string& path, const std::string& text);

}  // namespace advdino::harness
