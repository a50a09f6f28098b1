#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <optional>

#include "advdino/harness.hpp"
#include "advdino/selftest.hpp"

using namespace advdino;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string profile;
  std::string out;
};

harness::RunConfig resolve(const Globals& g) {
  json doc = json::object();
  if (!g.config_path.empty()) doc = json::parse(harness::read_text(g.config_path));
  if (!g.profile.empty()) doc["profile"] = g.profile;
  if (g.seed) doc["seed"] = *g.seed;
  if (!g.out.empty()) doc["out"] = g.out;
  return harness::config_from_json(doc);
}

// Stage subcommands run in separate processes; the audit log persists between them.
std::string audit_path(const harness::RunConfig& c) { return c.out + "/audit.json"; }

harness::AccessAudit load_audit(const harness::RunConfig& c) {
  harness::AccessAudit audit;
  if (fs::exists(audit_path(c))) {
    const json j = json::parse(harness::read_text(audit_path(c)));
    for (const auto& e : j.at("opened")) audit.open(e.at("stage").get<std::string>(), e.at("path").get<std::string>());
  }
  return audit;
}

void save_audit(const harness::RunConfig& c, const harness::AccessAudit& audit) {
  harness::write_text(audit_path(c), audit.to_json("").dump(2) + "\n");
}

std::vector<std::string> arms_for(const harness::RunConfig& c, const std::string& arm) {
  if (arm == "all") return harness::arm_tags(c);
  if (arm != "baseline" && arm != "adversarial") throw harness::ConfigError("--arm must be baseline, adversarial or all");
  return {arm};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-adversarial self-supervised tile embeddings and the downstream survival pipeline"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON run configuration (see docs/config.md)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Master seed for every stage");
  app.add_option("--profile", g.profile, "Configuration profile")->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--out", g.out, "Artifact directory");
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  std::string arm = "all";
  auto add_arm = [&](CLI::App* sub) {
    sub->add_option("--arm", arm, "baseline, adversarial or all")->check(CLI::IsMember({"baseline", "adversarial", "all"}));
  };

  auto* synth = app.add_subcommand("synth", "Generate the synthetic cohort (slides, records, ground truth)");
  auto* preprocess = app.add_subcommand("preprocess", "Foreground detection, tiling, preprocessing, norm statistics");
  auto* pretrain = app.add_subcommand("pretrain", "Train the student/teacher encoder per arm");
  auto* embed = app.add_subcommand("embed", "Teacher CLS embedding of every tile");
  auto* cluster = app.add_subcommand("cluster", "PCA, KNN graph, Leiden, label propagation");
  auto* analyze = app.add_subcommand("analyze", "Cluster profiles, abundance and survival association");
  auto* survival = app.add_subcommand("survival", "ABMIL cross-validation and the covariate CoxPH baseline");
  auto* report = app.add_subcommand("report", "Evaluate all arms and write report.json");
  auto* run = app.add_subcommand("run", "All stages end to end");
  auto* schema = app.add_subcommand("schema", "Print the configuration JSON schema");
  auto* selftest = app.add_subcommand("selftest", "Fast in-process checks of the core contracts");
  bool print_config = false;
  schema->add_flag("--defaults", print_config, "Print the resolved configuration instead");
  for (auto* s : {pretrain, embed, cluster, analyze, survival}) add_arm(s);

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (selftest->parsed()) {
      const auto results = selftest::run_all(std::cout);
      return selftest::all_passed(results) ? 0 : 1;
    }
    const auto config = resolve(g);
    if (schema->parsed()) {
      std::cout << (print_config ? harness::config_to_json(config) : harness::config_schema()).dump(2) << "\n";
      return 0;
    }
    if (run->parsed()) {
      const auto result = harness::run_pipeline(config);
      std::cout << config.out << "/report.json: " << (result.passed ? "all gates passed" : "gate failure") << "\n";
      return result.passed ? 0 : 1;
    }
    fs::create_directories(config.out);
    auto audit = load_audit(config);
    int status = 0;
    if (synth->parsed()) harness::stage_synth(config, audit);
    if (preprocess->parsed()) harness::stage_preprocess(config, audit);
    for (const auto& [sub, fn] : std::vector<std::pair<CLI::App*, void (*)(const harness::RunConfig&, const std::string&,
                                                                          harness::AccessAudit&)>>{
             {pretrain, harness::stage_pretrain},
             {embed, harness::stage_embed},
             {cluster, harness::stage_cluster},
             {analyze, harness::stage_analyze},
             {survival, harness::stage_survival}}) {
      if (!sub->parsed()) continue;
      for (const auto& tag : arms_for(config, arm)) fn(config, tag, audit);
    }
    if (report->parsed()) {
      const json r = harness::stage_report(config, audit);
      harness::write_text(config.out + "/report.json", r.dump(2) + "\n");
      status = r.at("passed").get<bool>() ? 0 : 1;
      std::cout << config.out << "/report.json: " << (status == 0 ? "all gates passed" : "gate failure") << "\n";
    }
    save_audit(config, audit);
    return status;
  } catch (const harness::ConfigError& e) {
    spdlog::error("configuration: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 3;
  }
}
