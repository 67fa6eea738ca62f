#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crfuse/grad_check.hpp"

namespace crfuse {

struct GradCheckCase {
  std::string name;
  GradCheckReport report;
};

struct GradCheckSuiteOptions {
  double h = 1e-5;
  double tol = 1e-4;
  // sampled coordinates per parameter for the composite-graph check; per-op
  // checks always probe every coordinate
  int composite_probes = 6;
  uint64_t seed = 17;
};

// Finite-difference certification of every differentiable op in isolation,
// of the loss heads, and of the complete two-modality training graph on a
// small batch.
std::vector<GradCheckCase> run_gradcheck_suite(const GradCheckSuiteOptions& opt = {});

bool gradcheck_suite_passed(const std::vector<GradCheckCase>& cases);

}  // namespace crfuse
