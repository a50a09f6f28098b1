#include "advdino/harness.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "advdino/binary_io.hpp"
#include "advdino/evalkit.hpp"
#include "advdino/rng.hpp"
#include "advdino/slidepipe.hpp"

namespace advdino::harness {

using nlohmann::json;
namespace fs = std::filesystem;

// Seed streams derived from RunConfig::seed.
namespace stream {
constexpr std::uint64_t kCohort = 1;
constexpr std::uint64_t kPretrain = 10;
constexpr std::uint64_t kSubsample = 20;
constexpr std::uint64_t kLeiden = 21;
constexpr std::uint64_t kProfile = 22;
constexpr std::uint64_t kFolds = 30;
constexpr std::uint64_t kAbmil = 31;
constexpr std::uint64_t kPermute = 32;
constexpr std::uint64_t kProbe = 40;
}  // namespace stream

void PrepConfig::validate() const {
  if (tile_size == 0) throw ConfigError("preprocess.tile_size must be positive");
  if (mask_factor == 0) throw ConfigError("preprocess.mask_factor must be positive");
  if (!(min_coverage >= 0.0 && min_coverage <= 1.0)) throw ConfigError("preprocess.min_coverage must lie in [0, 1]");
}

RunConfig RunConfig::desk() {
  RunConfig c;
  c.profile = "desk";
  // Desk-scale encoders collapse under the full-scale lambda of 50; 1 keeps the
  // adversarial term comparable to the SSL losses (see the adv/ssl ratio curve).
  c.pretrain.weights.adv = 1.0;
  c.pretrain.steps = 1200;
  c.pretrain.warmup_steps = 120;
  c.cluster.resolution = 0.5;
  // The full-scale grid barely moves a 64-dimensional ABMIL in 80 epochs over
  // a few dozen bags; shift it up two decades.
  c.abmil.learning_rates = {1e-4, 1e-3, 1e-2};
  return c;
}

RunConfig RunConfig::paper() {
  RunConfig c;
  c.profile = "paper";
  c.synth.tile_size = 256;
  c.preprocess.tile_size = 256;
  c.pretrain = train::PretrainConfig::paper();
  c.cluster = cluster::ClusterConfig::paper();
  c.abmil.input_dim = c.pretrain.encoder.embed_dim;
  return c;
}

RunConfig RunConfig::for_profile(const std::string& profile) {
  if (profile == "desk") return desk();
  if (profile == "paper") return paper();
  throw ConfigError("unknown profile '" + profile + "' (expected desk or paper)");
}

void RunConfig::validate() const {
  if (profile != "desk" && profile != "paper") throw ConfigError("profile must be desk or paper");
  if (out.empty()) throw ConfigError("out must name a directory");
  try {
    synth.validate();
    pretrain.validate();
    cluster.validate();
    abmil.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  preprocess.validate();
  if (preprocess.tile_size != synth.tile_size) throw ConfigError("preprocess.tile_size must equal synth.tile_size");
  if (pretrain.encoder.channels != synth.n_channels) {
    throw ConfigError("pretrain.encoder.channels must equal synth.n_channels");
  }
  if (preprocess.tile_size < pretrain.augment.global_size) {
    throw ConfigError("tiles are smaller than the global crop");
  }
  if (abmil.input_dim != pretrain.encoder.embed_dim) {
    throw ConfigError("survival.input_dim must equal pretrain.encoder.embed_dim");
  }
  if (folds < 3) throw ConfigError("folds must be at least 3 (train, validation and test)");
  if (probe_folds < 2) throw ConfigError("probe_folds must be at least 2");
}

// ---------------------------------------------------------------------------
// Config JSON

namespace {

json range_json(const aug::Range& r) { return json::array({r.lo, r.hi}); }
aug::Range range_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

json encoder_json(const vit::EncoderConfig& e) {
  return {{"channels", e.channels},   {"patch_size", e.patch_size}, {"embed_dim", e.embed_dim},
          {"depth", e.depth},         {"heads", e.heads},           {"mlp_ratio", e.mlp_ratio},
          {"global_size", e.global_size}, {"local_size", e.local_size}};
}

vit::EncoderConfig encoder_from(const json& j) {
  vit::EncoderConfig e;
  e.channels = j.at("channels").get<std::size_t>();
  e.patch_size = j.at("patch_size").get<std::size_t>();
  e.embed_dim = j.at("embed_dim").get<std::size_t>();
  e.depth = j.at("depth").get<std::size_t>();
  e.heads = j.at("heads").get<std::size_t>();
  e.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  e.global_size = j.at("global_size").get<std::size_t>();
  e.local_size = j.at("local_size").get<std::size_t>();
  return e;
}

json head_json(const ssl::HeadConfig& h) {
  return {{"prototypes", h.prototypes},     {"hidden_dim", h.hidden_dim},
          {"bottleneck_dim", h.bottleneck_dim}, {"student_temp", h.student_temp},
          {"teacher_temp", h.teacher_temp}, {"center_momentum", h.center_momentum}};
}

ssl::HeadConfig head_from(const json& j) {
  ssl::HeadConfig h;
  h.prototypes = j.at("prototypes").get<std::size_t>();
  h.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  h.bottleneck_dim = j.at("bottleneck_dim").get<std::size_t>();
  h.student_temp = j.at("student_temp").get<double>();
  h.teacher_temp = j.at("teacher_temp").get<double>();
  h.center_momentum = j.at("center_momentum").get<double>();
  return h;
}

json augment_json(const aug::AugmentConfig& a) {
  return {{"global_size", a.global_size},
          {"local_size", a.local_size},
          {"patch_size", a.patch_size},
          {"n_global", a.n_global},
          {"n_local", a.n_local},
          {"global_scale", range_json(a.global_scale)},
          {"local_scale", range_json(a.local_scale)},
          {"hflip_prob", a.hflip_prob},
          {"vflip_prob", a.vflip_prob},
          {"blur_sigma", range_json(a.blur_sigma)},
          {"blur_prob_global", a.blur_prob_global},
          {"blur_prob_local", a.blur_prob_local},
          {"mask_ratio", range_json(a.mask_ratio)}};
}

aug::AugmentConfig augment_from(const json& j) {
  aug::AugmentConfig a;
  a.global_size = j.at("global_size").get<std::size_t>();
  a.local_size = j.at("local_size").get<std::size_t>();
  a.patch_size = j.at("patch_size").get<std::size_t>();
  a.n_global = j.at("n_global").get<std::size_t>();
  a.n_local = j.at("n_local").get<std::size_t>();
  a.global_scale = range_from(j.at("global_scale"));
  a.local_scale = range_from(j.at("local_scale"));
  a.hflip_prob = j.at("hflip_prob").get<double>();
  a.vflip_prob = j.at("vflip_prob").get<double>();
  a.blur_sigma = range_from(j.at("blur_sigma"));
  a.blur_prob_global = j.at("blur_prob_global").get<double>();
  a.blur_prob_local = j.at("blur_prob_local").get<double>();
  a.mask_ratio = range_from(j.at("mask_ratio"));
  return a;
}

json pretrain_json(const train::PretrainConfig& p) {
  return {{"encoder", encoder_json(p.encoder)},
          {"head", head_json(p.head)},
          {"augment", augment_json(p.augment)},
          {"weights", {{"distill", p.weights.distill}, {"mim", p.weights.mim}, {"adv", p.weights.adv}}},
          {"disc_hidden", p.disc_hidden},
          {"disc_lr_scale", p.disc_lr_scale},
          {"disc_extra_steps", p.disc_extra_steps},
          {"disc_queue_batches", p.disc_queue_batches},
          {"koleo_weight", p.koleo_weight},
          {"koleo_eps", p.koleo_eps},
          {"batch_size", p.batch_size},
          {"steps", p.steps},
          {"warmup_steps", p.warmup_steps},
          {"lr", p.lr},
          {"min_lr", p.min_lr},
          {"weight_decay", p.weight_decay},
          {"ema_start", p.ema_start},
          {"ema_end", p.ema_end},
          {"adapt_patch_embed", p.adapt_patch_embed},
          {"log_every", p.log_every}};
}

train::PretrainConfig pretrain_from(const json& j) {
  train::PretrainConfig p;
  p.encoder = encoder_from(j.at("encoder"));
  p.head = head_from(j.at("head"));
  p.augment = augment_from(j.at("augment"));
  const json& w = j.at("weights");
  p.weights.distill = w.at("distill").get<double>();
  p.weights.mim = w.at("mim").get<double>();
  p.weights.adv = w.at("adv").get<double>();
  p.disc_hidden = j.at("disc_hidden").get<std::vector<std::size_t>>();
  p.disc_lr_scale = j.at("disc_lr_scale").get<double>();
  p.disc_extra_steps = j.at("disc_extra_steps").get<std::size_t>();
  p.disc_queue_batches = j.at("disc_queue_batches").get<std::size_t>();
  p.koleo_weight = j.at("koleo_weight").get<double>();
  p.koleo_eps = j.at("koleo_eps").get<double>();
  p.batch_size = j.at("batch_size").get<std::size_t>();
  p.steps = j.at("steps").get<std::size_t>();
  p.warmup_steps = j.at("warmup_steps").get<std::size_t>();
  p.lr = j.at("lr").get<double>();
  p.min_lr = j.at("min_lr").get<double>();
  p.weight_decay = j.at("weight_decay").get<double>();
  p.ema_start = j.at("ema_start").get<double>();
  p.ema_end = j.at("ema_end").get<double>();
  p.adapt_patch_embed = j.at("adapt_patch_embed").get<bool>();
  p.log_every = j.at("log_every").get<std::size_t>();
  return p;
}

json synth_json(const synth::CohortConfig& s) {
  json terms = json::array();
  for (const auto& t : s.hazard.terms) terms.push_back({{"phenotype", t.phenotype}, {"beta", t.beta}});
  return {{"n_slides", s.n_slides},
          {"tiles_per_slide", s.tiles_per_slide},
          {"n_phenotypes", s.n_phenotypes},
          {"n_channels", s.n_channels},
          {"tile_size", s.tile_size},
          {"effect_strength", s.effect_strength},
          {"censor_rate", s.censor_rate},
          {"pair_share", s.pair_share},
          {"hazard", {{"base_rate", s.hazard.base_rate}, {"abundance_unit", s.hazard.abundance_unit}, {"terms", terms}}}};
}

synth::CohortConfig synth_from(const json& j) {
  synth::CohortConfig s;
  s.n_slides = j.at("n_slides").get<std::size_t>();
  s.tiles_per_slide = j.at("tiles_per_slide").get<std::size_t>();
  s.n_phenotypes = j.at("n_phenotypes").get<std::size_t>();
  s.n_channels = j.at("n_channels").get<std::size_t>();
  s.tile_size = j.at("tile_size").get<std::size_t>();
  s.effect_strength = j.at("effect_strength").get<double>();
  s.censor_rate = j.at("censor_rate").get<double>();
  s.pair_share = j.at("pair_share").get<double>();
  const json& h = j.at("hazard");
  s.hazard.base_rate = h.at("base_rate").get<double>();
  s.hazard.abundance_unit = h.at("abundance_unit").get<double>();
  s.hazard.terms.clear();
  for (const auto& t : h.at("terms")) {
    s.hazard.terms.push_back({t.at("phenotype").get<std::size_t>(), t.at("beta").get<double>()});
  }
  return s;
}

json cluster_json(const cluster::ClusterConfig& c) {
  return {{"pca_dim", c.pca_dim},
          {"knn_k", c.knn_k},
          {"resolution", c.resolution},
          {"reference_fraction", c.reference_fraction},
          {"max_iterations", c.max_iterations},
          {"leiden_restarts", c.leiden_restarts},
          {"sample_per_cluster", c.sample_per_cluster}};
}

cluster::ClusterConfig cluster_from(const json& j) {
  cluster::ClusterConfig c;
  c.pca_dim = j.at("pca_dim").get<std::size_t>();
  c.knn_k = j.at("knn_k").get<std::size_t>();
  c.resolution = j.at("resolution").get<double>();
  c.reference_fraction = j.at("reference_fraction").get<double>();
  c.max_iterations = j.at("max_iterations").get<std::size_t>();
  c.leiden_restarts = j.at("leiden_restarts").get<std::size_t>();
  c.sample_per_cluster = j.at("sample_per_cluster").get<std::size_t>();
  return c;
}

json abmil_json(const surv::AbmilConfig& a) {
  return {{"input_dim", a.input_dim},       {"attention_dim", a.attention_dim}, {"n_bins", a.n_bins},
          {"epochs", a.epochs},             {"learning_rates", a.learning_rates}, {"weight_decay", a.weight_decay}};
}

surv::AbmilConfig abmil_from(const json& j) {
  surv::AbmilConfig a;
  a.input_dim = j.at("input_dim").get<std::size_t>();
  a.attention_dim = j.at("attention_dim").get<std::size_t>();
  a.n_bins = j.at("n_bins").get<std::size_t>();
  a.epochs = j.at("epochs").get<std::size_t>();
  a.learning_rates = j.at("learning_rates").get<std::vector<double>>();
  a.weight_decay = j.at("weight_decay").get<double>();
  return a;
}

json gates_json(const GateConfig& g) {
  return {{"baseline_ari_slide_min", g.baseline_ari_slide_min},
          {"adversarial_ari_slide_max", g.adversarial_ari_slide_max},
          {"adversarial_ari_phenotype_min", g.adversarial_ari_phenotype_min},
          {"adversarial_probe_margin_max", g.adversarial_probe_margin_max},
          {"baseline_probe_margin_min", g.baseline_probe_margin_min},
          {"abmil_c_index_min", g.abmil_c_index_min},
          {"abmil_permuted_c_index_max", g.abmil_permuted_c_index_max}};
}

GateConfig gates_from(const json& j) {
  GateConfig g;
  g.baseline_ari_slide_min = j.at("baseline_ari_slide_min").get<double>();
  g.adversarial_ari_slide_max = j.at("adversarial_ari_slide_max").get<double>();
  g.adversarial_ari_phenotype_min = j.at("adversarial_ari_phenotype_min").get<double>();
  g.adversarial_probe_margin_max = j.at("adversarial_probe_margin_max").get<double>();
  g.baseline_probe_margin_min = j.at("baseline_probe_margin_min").get<double>();
  g.abmil_c_index_min = j.at("abmil_c_index_min").get<double>();
  g.abmil_permuted_c_index_max = j.at("abmil_permuted_c_index_max").get<double>();
  return g;
}

// Schema node inferred from an example value.
json schema_of(const json& v) {
  if (v.is_object()) {
    json props = json::object();
    for (const auto& [k, child] : v.items()) props[k] = schema_of(child);
    return {{"type", "object"}, {"properties", props}, {"additionalProperties", false}};
  }
  if (v.is_array()) {
    json s{{"type", "array"}};
    if (!v.empty()) s["items"] = schema_of(v.front());
    return s;
  }
  if (v.is_boolean()) return {{"type", "boolean"}};
  if (v.is_number_unsigned() || v.is_number_integer()) return {{"type", "integer"}, {"minimum", 0}};
  if (v.is_number()) return {{"type", "number"}};
  return {{"type", "string"}};
}

void merge_into(json& base, const json& overlay) {
  for (const auto& [k, v] : overlay.items()) {
    if (v.is_object() && base.contains(k) && base[k].is_object()) {
      merge_into(base[k], v);
    } else {
      base[k] = v;
    }
  }
}

bool type_matches(const json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "boolean") return v.is_boolean();
  if (type == "integer") return v.is_number_integer() || v.is_number_unsigned();
  if (type == "number") return v.is_number();
  if (type == "string") return v.is_string();
  return false;
}

void check_node(const json& v, const json& s, const std::string& path, std::vector<std::string>& out) {
  const std::string where = path.empty() ? "(root)" : path;
  if (s.contains("type") && !type_matches(v, s["type"].get<std::string>())) {
    out.push_back(where + ": expected " + s["type"].get<std::string>());
    return;
  }
  if (s.contains("enum")) {
    bool hit = false;
    for (const auto& e : s["enum"]) hit = hit || e == v;
    if (!hit) out.push_back(where + ": value not in " + s["enum"].dump());
  }
  if (s.contains("minimum") && v.is_number() && v.get<double>() < s["minimum"].get<double>()) {
    out.push_back(where + ": below minimum " + s["minimum"].dump());
  }
  if (v.is_object()) {
    const json props = s.value("properties", json::object());
    const bool closed = s.contains("additionalProperties") && s["additionalProperties"] == false;
    for (const auto& [k, child] : v.items()) {
      const std::string sub = path.empty() ? k : path + "." + k;
      if (props.contains(k)) {
        check_node(child, props[k], sub, out);
      } else if (closed) {
        out.push_back(sub + ": unknown key");
      }
    }
  }
  if (v.is_array() && s.contains("items")) {
    for (std::size_t i = 0; i < v.size(); ++i) check_node(v[i], s["items"], path + "[" + std::to_string(i) + "]", out);
  }
}

}  // namespace

json config_to_json(const RunConfig& c) {
  return {{"profile", c.profile},
          {"seed", c.seed},
          {"out", c.out},
          {"synth", synth_json(c.synth)},
          {"preprocess",
           {{"tile_size", c.preprocess.tile_size},
            {"mask_factor", c.preprocess.mask_factor},
            {"min_coverage", c.preprocess.min_coverage}}},
          {"pretrain", pretrain_json(c.pretrain)},
          {"run_baseline", c.run_baseline},
          {"cluster", cluster_json(c.cluster)},
          {"survival", abmil_json(c.abmil)},
          {"folds", c.folds},
          {"probe_folds", c.probe_folds},
          {"gates", gates_json(c.gates)}};
}

json config_schema() {
  json s = schema_of(config_to_json(RunConfig::desk()));
  s["properties"]["profile"]["enum"] = json::array({"desk", "paper"});
  json out{{"$schema", "https://json-schema.org/draft/2020-12/schema"},
           {"title", "advdino run configuration"},
           {"description", "Every key is optional; omitted keys take the defaults of the selected profile."}};
  merge_into(out, s);
  return out;
}

std::vector<std::string> schema_violations(const json& doc, const json& schema) {
  std::vector<std::string> out;
  check_node(doc, schema, "", out);
  return out;
}

RunConfig config_from_json(const json& j) {
  const auto problems = schema_violations(j, config_schema());
  if (!problems.empty()) {
    std::string msg = "config does not match the schema:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  const std::string profile = j.value("profile", std::string("desk"));
  json merged = config_to_json(RunConfig::for_profile(profile));
  merge_into(merged, j);
  RunConfig c;
  try {
    c.profile = merged.at("profile").get<std::string>();
    c.seed = merged.at("seed").get<std::uint64_t>();
    c.out = merged.at("out").get<std::string>();
    c.synth = synth_from(merged.at("synth"));
    const json& pp = merged.at("preprocess");
    c.preprocess.tile_size = pp.at("tile_size").get<std::size_t>();
    c.preprocess.mask_factor = pp.at("mask_factor").get<std::size_t>();
    c.preprocess.min_coverage = pp.at("min_coverage").get<double>();
    c.pretrain = pretrain_from(merged.at("pretrain"));
    c.run_baseline = merged.at("run_baseline").get<bool>();
    c.cluster = cluster_from(merged.at("cluster"));
    c.abmil = abmil_from(merged.at("survival"));
    c.folds = merged.at("folds").get<std::size_t>();
    c.probe_folds = merged.at("probe_folds").get<std::size_t>();
    c.gates = gates_from(merged.at("gates"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

std::string config_digest(const RunConfig& config) {
  json j = config_to_json(config);
  j.erase("out");  // where artifacts land does not change any result
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(io::fnv1a(j.dump())));
  return buf;
}

// ---------------------------------------------------------------------------
// Folds

std::vector<std::size_t> FoldPlan::members(std::size_t fold) const {
  std::vector<std::size_t> m;
  for (std::size_t i = 0; i < fold_of.size(); ++i) {
    if (fold_of[i] == fold) m.push_back(i);
  }
  return m;
}

FoldPlan make_folds(std::span<const SlideRecord> records, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw Error("fold count must be at least 2");
  if (k > records.size()) {
    throw Error("fold count " + std::to_string(k) + " exceeds the " + std::to_string(records.size()) + " slides");
  }
  FoldPlan plan;
  plan.k = k;
  plan.fold_of.assign(records.size(), 0);
  std::vector<std::size_t> events, censored;
  for (std::size_t i = 0; i < records.size(); ++i) (records[i].event ? events : censored).push_back(i);
  std::mt19937_64 rng(seed);
  std::size_t next = 0;
  for (auto* stratum : {&events, &censored}) {
    if (!stratum->empty() && stratum->size() < k) {
      spdlog::warn("fold plan: a survival-status stratum has {} slides, fewer than {} folds", stratum->size(), k);
      plan.degraded = true;
    }
    std::shuffle(stratum->begin(), stratum->end(), rng);
    for (std::size_t i : *stratum) {
      plan.fold_of[i] = next;
      next = (next + 1) % k;
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Access audit

const std::set<std::string>& AccessAudit::blind_stages() {
  static const std::set<std::string> s{"pretrain", "embed", "cluster"};
  return s;
}

bool AccessAudit::is_ground_truth(const std::string& path) {
  const fs::path p(path);
  if (p.filename() == "ground_truth.json") return true;
  for (const auto& part : p) {
    if (part == "truth") return true;
  }
  return false;
}

void AccessAudit::open(const std::string& stage, const std::string& path) {
  const bool truth = is_ground_truth(path);
  if (truth && blind_stages().count(stage)) {
    throw AccessError("stage '" + stage + "' may not open ground-truth file " + path);
  }
  entries_.push_back({stage, path, truth});
}

bool AccessAudit::ground_truth_opened_by(const std::string& stage) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.stage == stage && e.ground_truth; });
}

json AccessAudit::to_json(const std::string& root) const {
  json opened = json::array();
  for (const auto& e : entries_) {
    std::string p = e.path;
    if (!root.empty() && p.rfind(root + "/", 0) == 0) p = p.substr(root.size() + 1);
    opened.push_back({{"stage", e.stage}, {"path", p}, {"ground_truth", e.ground_truth}});
  }
  bool clean = true;
  for (const auto& s : blind_stages()) clean = clean && !ground_truth_opened_by(s);
  return {{"opened", opened}, {"blind_stages_clean", clean}};
}

// ---------------------------------------------------------------------------
// Stage helpers

std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  os << text;
  if (!os) throw Error("write failed for " + path);
}

std::vector<std::string> arm_tags(const RunConfig& config) {
  std::vector<std::string> tags;
  if (config.run_baseline) tags.push_back("baseline");
  tags.push_back("adversarial");
  return tags;
}

double arm_lambda(const RunConfig& config, const std::string& tag) {
  if (tag == "baseline") return 0.0;
  if (tag == "adversarial") return config.pretrain.weights.adv;
  throw Error("unknown arm '" + tag + "'");
}

namespace {

std::string tile_id(const std::string& slide, std::uint32_t x, std::uint32_t y) {
  return slide + ":" + std::to_string(x) + ":" + std::to_string(y);
}

std::vector<SlideRecord> load_records(const RunPaths& paths, const std::string& stage, AccessAudit& audit) {
  audit.open(stage, paths.records());
  return synth::records_from_json(read_text(paths.records()));
}

std::map<std::string, std::size_t> slide_index(std::span<const SlideRecord> records) {
  std::map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < records.size(); ++i) idx[records[i].slide_id] = i;
  return idx;
}

struct LoadedTiles {
  std::vector<slide::TileImage> raw;
  std::vector<Tensor> normalized;
};

LoadedTiles load_tiles(const RunPaths& paths, const std::string& stage, AccessAudit& audit, bool normalize) {
  LoadedTiles t;
  audit.open(stage, paths.tiles());
  t.raw = slide::load_tile_store(paths.tiles());
  if (normalize) {
    audit.open(stage, paths.norm_stats());
    const auto stats = slide::norm_stats_from_json(read_text(paths.norm_stats()));
    t.normalized.reserve(t.raw.size());
    for (const auto& tile : t.raw) t.normalized.push_back(slide::apply_norm(tile.to_tensor(), stats));
  }
  return t;
}

std::vector<std::size_t> tile_domains(std::span<const slide::TileImage> tiles, std::span<const SlideRecord> records) {
  const auto idx = slide_index(records);
  std::vector<std::size_t> d;
  d.reserve(tiles.size());
  for (const auto& t : tiles) {
    auto it = idx.find(t.slide_id);
    if (it == idx.end()) throw Error("tile from slide '" + t.slide_id + "' has no clinical record");
    d.push_back(it->second);
  }
  return d;
}

double mean_of(const std::vector<train::StepLog>& curve, std::size_t from, std::size_t to,
               double train::StepLog::*field) {
  to = std::min(to, curve.size());
  if (from >= to) return 0.0;
  double s = 0.0;
  for (std::size_t i = from; i < to; ++i) s += curve[i].*field;
  return s / static_cast<double>(to - from);
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::vector<std::size_t> cluster_labels(const json& clusters, std::span<const cluster::EmbeddingRecord> emb) {
  const json& m = clusters.at("clusters");
  std::vector<std::size_t> labels;
  labels.reserve(emb.size());
  for (const auto& e : emb) labels.push_back(m.at(e.tile_id).get<std::size_t>());
  return labels;
}

}  // namespace

std::vector<Tensor> slide_bags(std::span<const cluster::EmbeddingRecord> embeddings,
                               std::span<const SlideRecord> records) {
  const auto idx = slide_index(records);
  std::vector<std::vector<const cluster::EmbeddingRecord*>> per(records.size());
  for (const auto& e : embeddings) {
    auto it = idx.find(e.slide_id);
    if (it == idx.end()) throw Error("embedding from slide '" + e.slide_id + "' has no clinical record");
    per[it->second].push_back(&e);
  }
  std::vector<Tensor> bags;
  bags.reserve(records.size());
  for (std::size_t s = 0; s < records.size(); ++s) {
    if (per[s].empty()) throw Error("slide '" + records[s].slide_id + "' has no tiles");
    const std::size_t d = per[s].front()->values.size();
    Tensor bag(Shape{per[s].size(), d});
    for (std::size_t i = 0; i < per[s].size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) bag.at(i, j) = per[s][i]->values[j];
    }
    bags.push_back(std::move(bag));
  }
  return bags;
}

// ---------------------------------------------------------------------------
// Stages

void stage_synth(const RunConfig& config, AccessAudit&) {
  const RunPaths paths{config.out};
  synth::CohortConfig cc = config.synth;
  cc.seed = derive_seed(config.seed, stream::kCohort);
  const auto cohort = synth::generate_cohort(cc);
  fs::create_directories(paths.slides_dir());
  std::vector<SlideRecord> records;
  for (std::size_t i = 0; i < cohort.slides.size(); ++i) {
    const auto image = synth::render_slide(cohort, i);
    slide::write_slide(paths.slides_dir() + "/" + image.id + ".json", image);
    records.push_back(cohort.slides[i].record);
  }
  write_text(paths.records(), synth::records_json(records));
  write_text(paths.ground_truth(), synth::ground_truth_json(cohort));
  spdlog::info("synth: {} slides written to {}", records.size(), paths.slides_dir());
}

void stage_preprocess(const RunConfig& config, AccessAudit& audit) {
  const RunPaths paths{config.out};
  const auto records = load_records(paths, "preprocess", audit);
  std::vector<slide::TileImage> tiles;
  for (const auto& r : records) {
    const std::string path = paths.slides_dir() + "/" + r.slide_id + ".json";
    audit.open("preprocess", path);
    const auto image = slide::read_slide(path);
    const auto mask = slide::foreground_mask(image, config.preprocess.mask_factor);
    const auto raw = slide::extract_tiles(image, mask, config.preprocess.tile_size, config.preprocess.min_coverage);
    if (raw.empty()) throw Error("slide '" + r.slide_id + "' has no tissue tiles");
    for (const auto& t : raw) tiles.push_back(slide::preprocess_tile(t));
  }
  const auto stats = slide::fit_norm_stats(tiles);
  slide::save_tile_store(paths.tiles(), tiles);
  write_text(paths.norm_stats(), slide::norm_stats_json(stats));
  spdlog::info("preprocess: {} tiles from {} slides", tiles.size(), records.size());
}

void stage_pretrain(const RunConfig& config, const std::string& tag, AccessAudit& audit) {
  if (config.profile == "paper") {
    throw ConfigError("profile 'paper' records the full-scale settings and is not runnable on a desk machine");
  }
  const RunPaths paths{config.out};
  const auto records = load_records(paths, "pretrain", audit);
  const auto tiles = load_tiles(paths, "pretrain", audit, true);
  const auto domains = tile_domains(tiles.raw, records);
  train::PretrainConfig pc = config.pretrain;
  pc.weights.adv = arm_lambda(config, tag);
  spdlog::info("pretrain[{}]: {} tiles, {} domains, lambda_adv {}", tag, tiles.normalized.size(), records.size(),
               pc.weights.adv);
  const auto state =
      train::pretrain(tiles.normalized, domains, records.size(), pc, derive_seed(config.seed, stream::kPretrain));
  fs::create_directories(paths.arm(tag));
  save_checkpoint(paths.checkpoint(tag), state.checkpoint());
  write_text(paths.curve(tag), train::curve_csv(state.curve));
}

void stage_embed(const RunConfig& config, const std::string& tag, AccessAudit& audit) {
  const RunPaths paths{config.out};
  audit.open("embed", paths.checkpoint(tag));
  const auto state = train::PretrainState::from_checkpoint(load_checkpoint(paths.checkpoint(tag)));
  const auto tiles = load_tiles(paths, "embed", audit, true);
  const auto emb = train::embed_tiles(tiles.normalized, state.teacher_encoder, config.pretrain.encoder);
  std::vector<cluster::EmbeddingRecord> out;
  out.reserve(emb.size());
  for (std::size_t i = 0; i < emb.size(); ++i) {
    const auto& t = tiles.raw[i];
    out.push_back({tile_id(t.slide_id, t.x, t.y), t.slide_id, std::vector<float>(emb[i].begin(), emb[i].end())});
  }
  cluster::save_embedding_store(paths.embeddings(tag), out);
  spdlog::info("embed[{}]: {} embeddings of dimension {}", tag, out.size(), config.pretrain.encoder.embed_dim);
}

void stage_cluster(const RunConfig& config, const std::string& tag, AccessAudit& audit) {
  const RunPaths paths{config.out};
  audit.open("cluster", paths.embeddings(tag));
  const auto emb = cluster::load_embedding_store(paths.embeddings(tag));
  const Tensor x = cluster::embedding_matrix(emb);
  const auto& cc = config.cluster;
  const auto split = cluster::subsample_reference(x.dim(0), cc.reference_fraction,
                                                  derive_seed(config.seed, stream::kSubsample));
  const Tensor ref = cluster::gather_rows(x, split.reference);
  const std::size_t k = std::min(cc.pca_dim, x.dim(1));
  const auto pca = cluster::pca_fit_transform(ref, k);
  const auto graph = cluster::knn_graph(pca.reduced, std::min(cc.knn_k, ref.dim(0) - 1));
  cluster::Partition part = cluster::leiden_partition(graph, cc.resolution, derive_seed(config.seed, stream::kLeiden),
                                                      cc.max_iterations, cc.leiden_restarts);
  part.labels = cluster::propagate_labels(pca.reduced, part.labels, pca.model.transform(x));
  std::vector<std::string> ids;
  ids.reserve(emb.size());
  for (const auto& e : emb) ids.push_back(e.tile_id);
  json j = json::parse(cluster::partition_json(part, ids));
  j["n_reference"] = split.reference.size();
  j["pca_dim"] = k;
  j["knn_k"] = graph.k;
  write_text(paths.clusters(tag), j.dump(2) + "\n");
  spdlog::info("cluster[{}]: {} clusters, modularity {:.4f}", tag, part.n_clusters, part.quality);
}

void stage_analyze(const RunConfig& config, const std::string& tag, AccessAudit& audit) {
  const RunPaths paths{config.out};
  const auto records = load_records(paths, "analyze", audit);
  audit.open("analyze", paths.embeddings(tag));
  const auto emb = cluster::load_embedding_store(paths.embeddings(tag));
  audit.open("analyze", paths.clusters(tag));
  const json clusters = json::parse(read_text(paths.clusters(tag)));
  const auto labels = cluster_labels(clusters, emb);
  const std::size_t n_clusters = clusters.at("n_clusters").get<std::size_t>();
  const auto tiles = load_tiles(paths, "analyze", audit, false);

  // Per-tile channel means of the preprocessed intensities, in embedding order.
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < tiles.raw.size(); ++i) {
    by_id[tile_id(tiles.raw[i].slide_id, tiles.raw[i].x, tiles.raw[i].y)] = i;
  }
  const std::size_t channels = tiles.raw.front().channels;
  Tensor means(Shape{emb.size(), channels});
  std::vector<std::string> tile_slides;
  tile_slides.reserve(emb.size());
  for (std::size_t i = 0; i < emb.size(); ++i) {
    const auto& t = tiles.raw.at(by_id.at(emb[i].tile_id));
    const std::size_t plane = static_cast<std::size_t>(t.size) * t.size;
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::size_t p = 0; p < plane; ++p) s += t.data[c * plane + p];
      means.at(i, c) = s / static_cast<double>(plane);
    }
    tile_slides.push_back(emb[i].slide_id);
  }

  json out;
  out["n_clusters"] = n_clusters;
  if (n_clusters >= 2) {
    const Tensor profile = cluster::cluster_profile(means, labels, config.cluster.sample_per_cluster,
                                                    derive_seed(config.seed, stream::kProfile));
    json rows = json::array();
    for (std::size_t k = 0; k < profile.dim(0); ++k) {
      json row = json::array();
      for (std::size_t c = 0; c < profile.dim(1); ++c) row.push_back(profile.at(k, c));
      rows.push_back(row);
    }
    out["profile_zscores"] = rows;
  } else {
    out["profile_zscores"] = nullptr;
  }
  std::vector<std::string> order;
  for (const auto& r : records) order.push_back(r.slide_id);
  const auto ab = cluster::cluster_abundance(labels, tile_slides, n_clusters, order);
  json abundance = json::object();
  for (std::size_t s = 0; s < ab.slide_ids.size(); ++s) {
    std::vector<double> row(n_clusters);
    for (std::size_t k = 0; k < n_clusters; ++k) row[k] = ab.proportions.at(s, k);
    abundance[ab.slide_ids[s]] = row;
  }
  out["abundance"] = abundance;

  json assoc = json::array();
  for (std::size_t k = 0; k < n_clusters; ++k) {
    std::vector<double> feature(records.size());
    for (std::size_t s = 0; s < records.size(); ++s) feature[s] = ab.proportions.at(s, k);
    json a{{"cluster", k}};
    try {
      const auto r = surv::association_analysis(feature, records, n_clusters);
      a["c_index"] = finite_or_null(r.c_index);
      a["beta"] = finite_or_null(r.beta);
      a["se"] = finite_or_null(r.se);
      a["p"] = r.p;
      a["p_adjusted"] = r.p_adjusted;
      a["p_stratified"] = r.p_stratified ? json(*r.p_stratified) : json(nullptr);
    } catch (const Error& e) {
      a["error"] = e.what();
    }
    assoc.push_back(a);
  }
  out["associations"] = assoc;
  write_text(paths.analysis(tag), out.dump(2) + "\n");
  spdlog::info("analyze[{}]: profiles, abundance and {} association tests", tag, n_clusters);
}

namespace {

// Covariate-only Cox model per fold: fit on training plus validation folds,
// score the test fold. Covariates that are constant or linearly dependent on
// earlier ones within the training rows are dropped.
json coxph_covariate_cv(std::span<const SlideRecord> records, const FoldPlan& plan) {
  json folds = json::array();
  double sum = 0.0;
  std::size_t used = 0;
  const std::size_t p = records.front().covariates.size();
  for (std::size_t f = 0; f < plan.k; ++f) {
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < records.size(); ++i) (plan.fold_of[i] == f ? test : train).push_back(i);
    // Greedy Gram-Schmidt on the centered training columns: a column is kept
    // only if it is not (numerically) in the span of the columns already kept.
    std::vector<std::size_t> keep;
    std::vector<std::vector<double>> basis;
    for (std::size_t c = 0; c < p; ++c) {
      std::vector<double> v;
      double mean = 0.0;
      for (std::size_t i : train) mean += records[i].covariates[c];
      mean /= static_cast<double>(train.size());
      double scale = 0.0;
      for (std::size_t i : train) {
        v.push_back(records[i].covariates[c] - mean);
        scale = std::max(scale, std::abs(records[i].covariates[c]));
      }
      for (const auto& q : basis) {
        double dot = 0.0;
        for (std::size_t r = 0; r < v.size(); ++r) dot += q[r] * v[r];
        for (std::size_t r = 0; r < v.size(); ++r) v[r] -= dot * q[r];
      }
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm <= 1e-9 * std::max(1.0, scale) * std::sqrt(static_cast<double>(v.size()))) continue;
      for (double& x : v) x /= norm;
      basis.push_back(std::move(v));
      keep.push_back(c);
    }
    json fj{{"fold", f}};
    double c_index = std::numeric_limits<double>::quiet_NaN();
    if (!keep.empty()) {
      Tensor x(Shape{train.size(), keep.size()});
      std::vector<double> times;
      std::vector<int> events;
      for (std::size_t r = 0; r < train.size(); ++r) {
        for (std::size_t c = 0; c < keep.size(); ++c) x.at(r, c) = records[train[r]].covariates[keep[c]];
        times.push_back(records[train[r]].time);
        events.push_back(records[train[r]].event);
      }
      try {
        const auto fit = surv::coxph_fit(x, times, events);
        std::vector<double> risk, t_test;
        std::vector<int> e_test;
        for (std::size_t i : test) {
          double s = 0.0;
          for (std::size_t c = 0; c < keep.size(); ++c) s += fit.beta[c] * records[i].covariates[keep[c]];
          risk.push_back(s);
          t_test.push_back(records[i].time);
          e_test.push_back(records[i].event);
        }
        c_index = eval::concordance_index(risk, t_test, e_test);
        fj["separation"] = fit.separation;
        json slides = json::array();
        for (std::size_t k = 0; k < test.size(); ++k) {
          slides.push_back({{"slide_id", records[test[k]].slide_id}, {"risk", risk[k]}});
        }
        fj["slides"] = slides;
      } catch (const Error& e) {
        fj["error"] = e.what();
      }
    }
    fj["c_index"] = finite_or_null(c_index);
    fj["covariates_used"] = keep;
    if (std::isfinite(c_index)) {
      sum += c_index;
      ++used;
    }
    folds.push_back(fj);
  }
  return {{"folds", folds},
          {"mean_c_index", used ? json(sum / static_cast<double>(used)) : json(nullptr)}};
}

}  // namespace

void stage_survival(const RunConfig& config, const std::string& tag, AccessAudit& audit) {
  const RunPaths paths{config.out};
  const auto records = load_records(paths, "survival", audit);
  audit.open("survival", paths.embeddings(tag));
  const auto emb = cluster::load_embedding_store(paths.embeddings(tag));
  audit.open("survival", paths.clusters(tag));
  const json clusters = json::parse(read_text(paths.clusters(tag)));
  const auto labels = cluster_labels(clusters, emb);
  const std::size_t n_clusters = clusters.at("n_clusters").get<std::size_t>();
  const auto bags = slide_bags(emb, records);
  const auto plan = make_folds(records, config.folds, derive_seed(config.seed, stream::kFolds));

  const auto cv = surv::abmil_cross_validation(bags, records, plan.fold_of, plan.k, config.abmil,
                                               derive_seed(config.seed, stream::kAbmil));

  // Outcome permutation control: (time, event, stratum) shuffled across slides.
  std::vector<SlideRecord> permuted(records.begin(), records.end());
  {
    std::vector<std::size_t> perm(records.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(derive_seed(config.seed, stream::kPermute));
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t i = 0; i < records.size(); ++i) {
      permuted[i].time = records[perm[i]].time;
      permuted[i].event = records[perm[i]].event;
      permuted[i].stratum = records[perm[i]].stratum;
    }
  }
  const auto permuted_plan = make_folds(permuted, config.folds, derive_seed(config.seed, stream::kFolds));
  const auto cv_perm = surv::abmil_cross_validation(bags, permuted, permuted_plan.fold_of, permuted_plan.k,
                                                    config.abmil, derive_seed(config.seed, stream::kAbmil));

  // Attention shift: cluster mix among top-attended tiles, high vs low risk.
  std::vector<std::vector<std::size_t>> slide_clusters(records.size());
  {
    const auto idx = slide_index(records);
    for (std::size_t i = 0; i < emb.size(); ++i) slide_clusters[idx.at(emb[i].slide_id)].push_back(labels[i]);
  }
  std::vector<std::vector<double>> attention(records.size());
  std::vector<double> risk(records.size(), 0.0);
  for (const auto& f : cv.folds) {
    for (std::size_t k = 0; k < f.slides.size(); ++k) {
      attention[f.slides[k]] = f.attention[k];
      risk[f.slides[k]] = f.risks[k];
    }
  }
  const auto delta = eval::attention_cluster_delta(attention, slide_clusters, risk, n_clusters);

  json folds_json = json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    folds_json.push_back({{"slide_id", records[i].slide_id}, {"fold", plan.fold_of[i]}});
  }
  json out{{"fold_plan", {{"k", plan.k}, {"stratification", plan.stratification}, {"degraded", plan.degraded},
                          {"assignment", folds_json}}},
           {"abmil", json::parse(surv::cv_json(cv, records))},
           {"abmil_permuted", json::parse(surv::cv_json(cv_perm, permuted))},
           {"coxph_covariates", coxph_covariate_cv(records, plan)},
           {"attention_delta", delta}};
  write_text(paths.survival(tag), out.dump(2) + "\n");
  spdlog::info("survival[{}]: ABMIL C {:.3f} (permuted {:.3f})", tag, cv.mean_c_index, cv_perm.mean_c_index);
}

json stage_report(const RunConfig& config, AccessAudit& audit) {
  const RunPaths paths{config.out};
  const auto records = load_records(paths, "report", audit);
  audit.open("report", paths.ground_truth());
  const auto truth = synth::labels_from_ground_truth(read_text(paths.ground_truth()));
  std::map<std::string, std::size_t> phenotype;
  for (const auto& t : truth) phenotype[tile_id(t.slide_id, t.x, t.y)] = t.phenotype;
  const auto sidx = slide_index(records);

  json report;
  report["profile"] = config.profile;
  report["seed"] = config.seed;
  report["config_digest"] = config_digest(config);
  json arms = json::object();
  std::map<std::string, json> metrics;
  for (const auto& tag : arm_tags(config)) {
    json arm;
    arm["lambda_adv"] = arm_lambda(config, tag);
    audit.open("report", paths.curve(tag));
    {
      // Loss-curve summary: means over the first and last tenth of training.
      std::istringstream csv(read_text(paths.curve(tag)));
      std::string line;
      std::getline(csv, line);
      std::vector<train::StepLog> curve;
      while (std::getline(csv, line)) {
        std::istringstream ls(line);
        train::StepLog s;
        char comma;
        ls >> s.step >> comma >> s.lr >> comma >> s.ema_momentum >> comma >> s.distill >> comma >> s.mim >> comma >>
            s.adv >> comma >> s.koleo >> comma >> s.total >> comma >> s.disc_accuracy >> comma >> s.adv_ssl_ratio;
        curve.push_back(s);
      }
      const std::size_t n = curve.size(), tenth = std::max<std::size_t>(1, n / 10);
      json summary;
      for (auto [name, field] : std::vector<std::pair<const char*, double train::StepLog::*>>{
               {"distill", &train::StepLog::distill},
               {"mim", &train::StepLog::mim},
               {"adv", &train::StepLog::adv},
               {"koleo", &train::StepLog::koleo},
               {"total", &train::StepLog::total},
               {"disc_accuracy", &train::StepLog::disc_accuracy},
               {"adv_ssl_ratio", &train::StepLog::adv_ssl_ratio}}) {
        summary[name] = {{"first", mean_of(curve, 0, tenth, field)}, {"last", mean_of(curve, n - tenth, n, field)}};
      }
      summary["steps"] = n;
      arm["pretrain"] = summary;
    }
    audit.open("report", paths.embeddings(tag));
    const auto emb = cluster::load_embedding_store(paths.embeddings(tag));
    audit.open("report", paths.clusters(tag));
    const json clusters = json::parse(read_text(paths.clusters(tag)));
    const auto labels = cluster_labels(clusters, emb);
    std::vector<std::size_t> slide_of, pheno_of;
    for (const auto& e : emb) {
      slide_of.push_back(sidx.at(e.slide_id));
      auto it = phenotype.find(e.tile_id);
      if (it == phenotype.end()) throw Error("tile " + e.tile_id + " has no ground-truth phenotype");
      pheno_of.push_back(it->second);
    }
    const Tensor x = cluster::embedding_matrix(emb);
    const auto probe = eval::domain_probe(x, slide_of, config.probe_folds, derive_seed(config.seed, stream::kProbe));
    arm["cluster"] = {{"n_clusters", clusters.at("n_clusters")},
                      {"modularity", clusters.at("quality")},
                      {"ari_slide", eval::adjusted_rand_index(labels, slide_of)},
                      {"ari_phenotype", eval::adjusted_rand_index(labels, pheno_of)}};
    arm["domain_probe"] = {{"accuracy", probe.accuracy}, {"chance", probe.chance}, {"n", probe.n},
                           {"margin", probe.accuracy - probe.chance}};
    arm["embeddings"] = {{"n", emb.size()}, {"dim", x.dim(1)}};

    audit.open("report", paths.analysis(tag));
    const json analysis = json::parse(read_text(paths.analysis(tag)));
    json ranking = analysis.at("associations");
    std::stable_sort(ranking.begin(), ranking.end(), [](const json& a, const json& b) {
      const double ca = a.contains("c_index") && a["c_index"].is_number() ? a["c_index"].get<double>() : -1.0;
      const double cb = b.contains("c_index") && b["c_index"].is_number() ? b["c_index"].get<double>() : -1.0;
      return ca > cb;
    });
    arm["analysis"] = {{"profile_zscores", analysis.at("profile_zscores")}, {"association_ranking", ranking}};

    audit.open("report", paths.survival(tag));
    const json survival = json::parse(read_text(paths.survival(tag)));
    json fold_c = json::array();
    for (const auto& f : survival.at("abmil").at("folds")) fold_c.push_back(f.at("c_index"));
    arm["survival"] = {{"abmil_c_index", survival.at("abmil").at("mean_c_index")},
                       {"abmil_learning_rate", survival.at("abmil").at("learning_rate")},
                       {"abmil_fold_c_index", fold_c},
                       {"abmil_permuted_c_index", survival.at("abmil_permuted").at("mean_c_index")},
                       {"coxph_covariates_c_index", survival.at("coxph_covariates").at("mean_c_index")},
                       {"attention_delta", survival.at("attention_delta")},
                       {"risk_file", fs::path(paths.survival(tag)).lexically_relative(paths.root).generic_string()}};
    metrics[tag] = arm;
    arms[tag] = arm;
  }
  report["arms"] = arms;

  // Gates.
  json gates = json::array();
  bool passed = true;
  auto gate = [&](const std::string& name, const json& value, const std::string& op, double threshold) {
    bool ok = value.is_number();
    if (ok) {
      const double v = value.get<double>();
      ok = op == ">=" ? v >= threshold : v <= threshold;
    }
    passed = passed && ok;
    gates.push_back({{"name", name}, {"value", value}, {"op", op}, {"threshold", threshold}, {"passed", ok}});
  };
  const auto& g = config.gates;
  if (metrics.count("baseline")) {
    const json& b = metrics["baseline"];
    gate("baseline.ari_slide", b["cluster"]["ari_slide"], ">=", g.baseline_ari_slide_min);
    gate("baseline.probe_margin", b["domain_probe"]["margin"], ">=", g.baseline_probe_margin_min);
  }
  const json& a = metrics["adversarial"];
  gate("adversarial.ari_slide", a["cluster"]["ari_slide"], "<=", g.adversarial_ari_slide_max);
  gate("adversarial.ari_phenotype", a["cluster"]["ari_phenotype"], ">=", g.adversarial_ari_phenotype_min);
  gate("adversarial.probe_margin", a["domain_probe"]["margin"], "<=", g.adversarial_probe_margin_max);
  gate("adversarial.abmil_c_index", a["survival"]["abmil_c_index"], ">=", g.abmil_c_index_min);
  gate("adversarial.abmil_permuted_c_index", a["survival"]["abmil_permuted_c_index"], "<=",
       g.abmil_permuted_c_index_max);
  report["gates"] = gates;
  report["audit"] = audit.to_json(paths.root);
  report["passed"] = passed && report["audit"]["blind_stages_clean"].get<bool>();
  return report;
}

RunResult run_pipeline(const RunConfig& config) {
  config.validate();
  fs::create_directories(config.out);
  AccessAudit audit;
  json timing = json::object();
  auto run = [&](const std::string& stage, const std::string& label, const std::function<void()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      fn();
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(stage, e.what());
    }
    timing[label] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  run("synth", "synth", [&] { stage_synth(config, audit); });
  run("preprocess", "preprocess", [&] { stage_preprocess(config, audit); });
  for (const auto& tag : arm_tags(config)) {
    run("pretrain", "pretrain." + tag, [&] { stage_pretrain(config, tag, audit); });
    run("embed", "embed." + tag, [&] { stage_embed(config, tag, audit); });
    run("cluster", "cluster." + tag, [&] { stage_cluster(config, tag, audit); });
    run("analyze", "analyze." + tag, [&] { stage_analyze(config, tag, audit); });
    run("survival", "survival." + tag, [&] { stage_survival(config, tag, audit); });
  }
  RunResult result;
  run("report", "report", [&] { result.report = stage_report(config, audit); });
  result.report_text = result.report.dump(2) + "\n";
  result.passed = result.report["passed"].get<bool>();
  const RunPaths paths{config.out};
  write_text(paths.report(), result.report_text);
  // Wall-clock timings live outside the report so the report stays reproducible.
  write_text(config.out + "/timing.json", timing.dump(2) + "\n");
  return result;
}

}  // namespace advdino::harness
