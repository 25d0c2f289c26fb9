#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "capsworld/model.hpp"

namespace capsworld::ad {

struct SuiteCase {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

struct SuiteReport {
  std::vector<SuiteCase> cases;
  double max_rel_error = 0.0;

  bool passed(double tolerance) const { return max_rel_error <= tolerance && !cases.empty(); }
};

/// k=2, d=3, d_v=2, W=16 with narrow encoder and decoder stacks.
model::ModelConfig gradcheck_model_config();

/// Central-difference checks (64-bit) of every differentiable op on random
/// inputs in [-1, 1] and of one predict-and-loss step over all parameters.
SuiteReport run_gradcheck_suite(std::uint64_t seed);

}  // namespace capsworld::ad
