#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <json.hpp>
#include <map>
#include <set>

#include "advdino/harness.hpp"
#include "advdino/selftest.hpp"

using namespace advdino;
using namespace advdino::harness;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::vector<SlideRecord> records_with(const std::vector<int>& events) {
  std::vector<SlideRecord> r;
  for (std::size_t i = 0; i < events.size(); ++i) {
    r.push_back({"s" + std::to_string(i), 100.0 + static_cast<double>(i), events[i], -1, {}});
  }
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("advdino-test-harness-" + name);
  fs::remove_all(p);
  return p;
}

// Pair enumeration over comparable (event, strictly earlier) pairs.
double c_index_oracle(const std::vector<double>& risk, const std::vector<double>& t, const std::vector<int>& e) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < risk.size(); ++i)
    for (std::size_t j = 0; j < risk.size(); ++j) {
      if (!e[i] || !(t[i] < t[j])) continue;
      den += 1.0;
      num += risk[i] > risk[j] ? 1.0 : risk[i] == risk[j] ? 0.5 : 0.0;
    }
  return num / den;
}

struct MicroRun {
  fs::path root;
  RunResult result;
};

const MicroRun& micro_run() {
  static const MicroRun run = [] {
    MicroRun m;
    m.root = scratch("micro");
    m.result = run_pipeline(selftest::micro_config(m.root.string()));
    return m;
  }();
  return run;
}

}  // namespace

TEST_CASE("folds stratify by event and balance sizes") {
  const auto records = records_with({1, 0, 1, 0, 1, 0, 1, 0, 1, 0});
  const auto plan = make_folds(records, 5, 4);
  CHECK(plan.k == 5);
  CHECK_FALSE(plan.degraded);
  CHECK(plan.stratification == "event");
  for (std::size_t f = 0; f < 5; ++f) {
    const auto m = plan.members(f);
    REQUIRE(m.size() == 2);
    CHECK(records[m[0]].event + records[m[1]].event == 1);
  }

  // 7 events and 4 censored over 3 folds: sizes 4/4/3, events 3/2/2 in some order.
  const auto uneven = records_with({1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0});
  const auto p2 = make_folds(uneven, 3, 9);
  std::multiset<std::size_t> sizes, events;
  for (std::size_t f = 0; f < 3; ++f) {
    const auto m = p2.members(f);
    sizes.insert(m.size());
    std::size_t ev = 0;
    for (auto i : m) ev += static_cast<std::size_t>(uneven[i].event);
    events.insert(ev);
  }
  CHECK(sizes == std::multiset<std::size_t>{3, 4, 4});
  CHECK(events == std::multiset<std::size_t>{2, 2, 3});

  CHECK(make_folds(uneven, 3, 9).fold_of == p2.fold_of);
  CHECK(make_folds(uneven, 3, 10).fold_of != p2.fold_of);
}

TEST_CASE("fold plans degrade with a warning or refuse impossible requests") {
  const auto few_events = records_with({1, 1, 0, 0, 0, 0, 0, 0});
  const auto plan = make_folds(few_events, 3, 1);
  CHECK(plan.degraded);
  std::size_t total = 0;
  for (std::size_t f = 0; f < 3; ++f) total += plan.members(f).size();
  CHECK(total == few_events.size());
  CHECK_THROWS_AS(make_folds(few_events, 1, 1), Error);
  CHECK_THROWS_AS(make_folds(few_events, 9, 1), Error);
}

TEST_CASE("configurations round trip through JSON and overlay onto profile defaults") {
  const RunConfig desk = RunConfig::desk();
  CHECK_NOTHROW(desk.validate());
  CHECK(config_to_json(config_from_json(config_to_json(desk))) == config_to_json(desk));
  CHECK(config_to_json(config_from_json(json::object())) == config_to_json(desk));

  const auto c = config_from_json(json{{"seed", 99}, {"cluster", {{"resolution", 0.25}}}});
  CHECK(c.seed == 99);
  CHECK(c.cluster.resolution == 0.25);
  CHECK(c.cluster.knn_k == desk.cluster.knn_k);
  CHECK(c.pretrain.steps == desk.pretrain.steps);

  const auto paper = config_from_json(json{{"profile", "paper"}});
  CHECK(paper.pretrain.encoder.embed_dim == 1024);
  CHECK(paper.synth.tile_size == 256);
  CHECK_NOTHROW(RunConfig::paper().validate());
}

TEST_CASE("unknown keys, wrong types and inconsistent settings are rejected") {
  auto message = [](const json& doc) {
    try {
      config_from_json(doc);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message(json{{"sed", 1}}).find("sed") != std::string::npos);
  CHECK(message(json{{"pretrain", {{"encoder", {{"depht", 3}}}}}}).find("pretrain.encoder.depht: unknown key") != std::string::npos);
  CHECK(message(json{{"seed", "seven"}}).find("seed: expected integer") != std::string::npos);
  CHECK(message(json{{"folds", -2}}).find("folds: ") != std::string::npos);
  CHECK(message(json{{"profile", "laptop"}}).find("profile: value not in") != std::string::npos);
  CHECK(message(json{{"pretrain", {{"augment", {{"blur_sigma", {0.1, "x"}}}}}}}).find("blur_sigma") !=
        std::string::npos);
  CHECK_FALSE(message(json{{"preprocess", {{"tile_size", 96}}}}).empty());
  CHECK_FALSE(message(json{{"folds", 2}}).empty());
  CHECK_FALSE(message(json{{"survival", {{"input_dim", 7}}}}).empty());
  CHECK_FALSE(message(json{{"out", ""}}).empty());
}

TEST_CASE("the documented schema matches the one enforced by the loader") {
  const json on_disk = json::parse(read_text(std::string(ADVDINO_SOURCE_DIR) + "/docs/config.schema.json"));
  CHECK(on_disk == config_schema());
  CHECK(schema_violations(config_to_json(RunConfig::desk()), on_disk).empty());
  CHECK(schema_violations(config_to_json(RunConfig::paper()), on_disk).empty());
  const json bad{{"cluster", {{"knn_k", 1.5}}}, {"extra", true}};
  CHECK(schema_violations(bad, on_disk).size() == 2);
}

TEST_CASE("the config digest ignores the output directory only") {
  RunConfig a = RunConfig::desk(), b = RunConfig::desk();
  b.out = "/elsewhere";
  CHECK(config_digest(a) == config_digest(b));
  CHECK(config_digest(a).size() == 16);
  b.seed = a.seed + 1;
  CHECK(config_digest(a) != config_digest(b));
}

TEST_CASE("the access audit keeps ground truth away from the blind stages") {
  CHECK(AccessAudit::is_ground_truth("run/truth/ground_truth.json"));
  CHECK(AccessAudit::is_ground_truth("/x/truth/anything.json"));
  CHECK_FALSE(AccessAudit::is_ground_truth("run/records.json"));
  CHECK_FALSE(AccessAudit::is_ground_truth("run/untruthful/tiles.advt"));

  AccessAudit audit;
  audit.open("pretrain", "/r/tiles.advt");
  for (const std::string stage : {"pretrain", "embed", "cluster"}) {
    CHECK_THROWS_AS(audit.open(stage, "/r/truth/ground_truth.json"), AccessError);
  }
  audit.open("report", "/r/truth/ground_truth.json");
  CHECK(audit.entries().size() == 2);
  CHECK(audit.ground_truth_opened_by("report"));
  CHECK_FALSE(audit.ground_truth_opened_by("pretrain"));
  const json j = audit.to_json("/r");
  CHECK(j["blind_stages_clean"] == true);
  CHECK(j["opened"][0]["path"] == "tiles.advt");
  CHECK(j["opened"][1]["ground_truth"] == true);
}

TEST_CASE("arms and their adversarial weights") {
  RunConfig c = RunConfig::desk();
  CHECK(arm_tags(c) == std::vector<std::string>{"baseline", "adversarial"});
  CHECK(arm_lambda(c, "baseline") == 0.0);
  CHECK(arm_lambda(c, "adversarial") == c.pretrain.weights.adv);
  CHECK_THROWS_AS(arm_lambda(c, "other"), Error);
  c.run_baseline = false;
  CHECK(arm_tags(c) == std::vector<std::string>{"adversarial"});
}

TEST_CASE("the micro pipeline writes every artifact and a complete report") {
  const auto& m = micro_run();
  const RunPaths paths{m.root.string()};
  for (const auto& f : {paths.records(), paths.ground_truth(), paths.tiles(), paths.norm_stats(), paths.report()})
    CHECK_MESSAGE(fs::exists(f), f);
  for (const auto& tag : {"baseline", "adversarial"}) {
    for (const auto& f : {paths.checkpoint(tag), paths.curve(tag), paths.embeddings(tag), paths.clusters(tag),
                          paths.analysis(tag), paths.survival(tag)})
      CHECK_MESSAGE(fs::exists(f), f);
  }
  const json& r = m.result.report;
  CHECK(read_text(paths.report()) == m.result.report_text);
  CHECK(r["audit"]["blind_stages_clean"] == true);
  CHECK(r["arms"]["baseline"]["lambda_adv"] == 0.0);
  CHECK(r["arms"]["adversarial"]["lambda_adv"].get<double>() > 0.0);
  CHECK(r["gates"].size() == 7);
  bool all = true;
  for (const auto& g : r["gates"]) all = all && g["passed"].get<bool>();
  CHECK(r["passed"].get<bool>() == all);
  for (const auto& e : r["audit"]["opened"]) {
    if (e["ground_truth"].get<bool>()) CHECK(e["stage"] == "report");
  }
}

TEST_CASE("persisted fold risks reproduce the reported C-indices") {
  const auto& m = micro_run();
  const RunPaths paths{m.root.string()};
  std::map<std::string, SlideRecord> by_id;
  for (const auto& rec : synth::records_from_json(read_text(paths.records()))) by_id[rec.slide_id] = rec;
  const json s = json::parse(read_text(paths.survival("adversarial")));
  std::size_t checked = 0;
  for (const char* section : {"abmil", "coxph_covariates"}) {
    for (const auto& fold : s[section]["folds"]) {
      if (fold["c_index"].is_null()) continue;
      std::vector<double> risk, t;
      std::vector<int> e;
      for (const auto& sl : fold["slides"]) {
        const auto& rec = by_id.at(sl["slide_id"].get<std::string>());
        risk.push_back(sl["risk"].get<double>());
        t.push_back(rec.time);
        e.push_back(rec.event);
      }
      CHECK(fold["c_index"].get<double>() == doctest::Approx(c_index_oracle(risk, t, e)).epsilon(1e-12));
      ++checked;
    }
  }
  CHECK(checked > 0);

  // Every slide is tested exactly once across the folds.
  std::map<std::string, int> seen;
  for (const auto& fold : s["abmil"]["folds"])
    for (const auto& sl : fold["slides"]) ++seen[sl["slide_id"].get<std::string>()];
  CHECK(seen.size() == by_id.size());
  for (const auto& [id, n] : seen) CHECK(n == 1);
}

TEST_CASE("stages run one at a time reproduce the end-to-end report") {
  const auto& m = micro_run();
  const fs::path root = scratch("staged");
  const RunConfig c = selftest::micro_config(root.string());
  AccessAudit audit;
  stage_synth(c, audit);
  stage_preprocess(c, audit);
  for (const auto& tag : arm_tags(c)) {
    stage_pretrain(c, tag, audit);
    stage_embed(c, tag, audit);
    stage_cluster(c, tag, audit);
    stage_analyze(c, tag, audit);
    stage_survival(c, tag, audit);
  }
  const json r = stage_report(c, audit);
  CHECK(r.dump(2) + "\n" == m.result.report_text);
  fs::remove_all(root);
}

TEST_CASE("the recorded full-scale profile refuses to train") {
  const fs::path root = scratch("paper");
  RunConfig c = RunConfig::paper();
  c.out = root.string();
  AccessAudit audit;
  CHECK_THROWS_AS(stage_pretrain(c, "adversarial", audit), ConfigError);
  CHECK_THROWS_AS(run_pipeline([&] {
                    RunConfig bad = selftest::micro_config(root.string());
                    bad.folds = 2;
                    return bad;
                  }()),
                  ConfigError);
}
