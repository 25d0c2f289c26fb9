#pragma once

#include <cstdint>
#include <string>

#include "capsworld/model.hpp"
#include "capsworld/sim.hpp"

namespace capsworld {

struct TrainSettings {
  std::uint64_t seed = 0;
  std::size_t batch_size = 8;
  std::size_t window_length = 20;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t steps = 20000;
  /// Steps between checkpoint writes; 0 writes only the final one.
  std::size_t checkpoint_interval = 1000;
  /// Global-norm clipping threshold; <= 0 disables clipping.
  double clip_norm = 5.0;

  bool operator==(const TrainSettings&) const = default;
};

struct AnalysisSettings {
  double tau_active = 0.3;
  double tau_assign = 0.2;
  std::uint64_t split_seed = 0;
  std::size_t min_samples = 50;
  std::size_t max_occlusion_gap = 7;

  bool operator==(const AnalysisSettings&) const = default;
};

/// Everything a run needs; one file describes simulator, model, training
/// and analysis. `width` is shared by the simulator and the model.
struct RunConfig {
  std::string dataset;
  sim::SimConfig sim;
  model::ModelConfig model;
  TrainSettings train;
  AnalysisSettings analysis;

  /// Throws ConfigError on inconsistent values.
  void validate() const;
};

bool operator==(const RunConfig& a, const RunConfig& b);

/// Parses `key = value` lines. `#` starts a comment. Unknown keys, malformed
/// values and (when `require_dataset`) a missing dataset key are errors that
/// name the offending line.
RunConfig config_parse(const std::string& text, bool require_dataset = true);
RunConfig config_load(const std::string& path, bool require_dataset = true);

/// Canonical text form; config_parse(config_to_text(c)) == c.
std::string config_to_text(const RunConfig& config);

}  // namespace capsworld
