#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "advdino/harness.hpp"

namespace advdino::selftest {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Fast checks of the core contracts: gradient reversal, gradients of the
// combined loss, metric oracles, Cox recovery, fold stratification, format
// round trips and a deterministic micro pipeline. One line per check on `log`.
std::vector<CheckResult> run_all(std::ostream& log);
bool all_passed(const std::vector<CheckResult>& results);

// Tiny end-to-end configuration (12 slides of 12 tiles, 3 pretraining steps):
// seconds on one core. Artifacts go to `out`.
harness::RunConfig micro_config(const std::string& out);

}  // namespace advdino::selftest
