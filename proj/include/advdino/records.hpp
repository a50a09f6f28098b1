#pragma once

#include <string>
#include <vector>

namespace advdino {

// Slide-level outcome: follow-up time (days), event flag, optional binary stage
// stratum (-1 when absent) and optional baseline covariates.
struct SlideRecord {
  std::string slide_id;
  double time = 0.0;
  int event = 0;
  int stratum = -1;
  std::vector<double> covariates;
};

void validate(const SlideRecord& r);

}  // namespace advdino
