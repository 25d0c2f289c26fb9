#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "capsworld/config.hpp"
#include "capsworld/model.hpp"
#include "capsworld/sim.hpp"

namespace capsworld::analysis {

using model::CapsuleSet;

/// Model outputs for one transition t -> t+1.
struct StepRecord {
  CapsuleSet<float> c;       // encoded x_t
  CapsuleSet<float> r;       // after the recurrent cell
  CapsuleSet<float> h_next;  // after the transformation cell
  std::vector<float> prediction;              // W x 3, predicts x_{t+1}
  std::vector<std::vector<float>> rgb;        // per capsule, W x 3
  std::vector<std::vector<float>> occ;        // per capsule, W occupancy logits
  std::vector<std::vector<float>> solo_mass;  // per capsule, W: weight against the background alone
  std::vector<std::vector<float>> solo;       // per capsule, W x 3: composited with the background alone
};

struct Records {
  std::size_t k = 0;
  std::size_t d = 0;
  std::size_t d_v = 0;
  std::size_t width = 0;
  std::vector<StepRecord> steps;  // length T - 1
};

/// Forward pass from the initial state over the whole trajectory.
Records run_model(model::ModelParameters<float>& params, const model::ModelConfig& config,
                  const sim::Trajectory& trajectory);

// ---------------------------------------------------------------- strips

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<unsigned char> rgb;  // row-major, 3 bytes per pixel
};

inline constexpr std::size_t kPanelHeight = 16;
inline constexpr std::size_t kGutter = 2;

unsigned char quantize(float v);

/// One row per selected step: real x_{t+1}, prediction, then each capsule's
/// solo reconstruction. Panels are separated by white gutters.
Image render_strip(const Records& records, const sim::Trajectory& trajectory, const std::vector<std::size_t>& steps);
std::vector<unsigned char> encode_ppm(const Image& image);
void write_ppm(const std::string& path, const Image& image);

// ---------------------------------------------------------------- assignment

struct AssignmentReport {
  std::size_t k = 0;
  std::size_t n_objects = 0;
  std::vector<double> scores;   // k x n_objects
  std::vector<int> assignment;  // per capsule: object index or -1
  double purity = 0.0;

  double score(std::size_t capsule, std::size_t object) const { return scores[capsule * n_objects + object]; }
};

/// Per object, 1 where its solo rendering (object alone in the arena) is hit
/// at frame t+1, for every recorded step; n_objects x (steps * W).
std::vector<std::vector<float>> object_solo_masks(const sim::Trajectory& trajectory, const sim::SimConfig& sim);

/// Soft IoU sum(min) / sum(max) pooled over steps and pixels, greedy
/// injective assignment above `tau_assign`. Purity is the sum of assigned
/// scores over min(k, n_objects), so unassigned capsules count as zero.
AssignmentReport assign_from_masses(const std::vector<std::vector<float>>& capsule_mass,
                                    const std::vector<std::vector<float>>& object_mask, double tau_assign);

AssignmentReport capsule_object_assignment(const Records& records, const sim::Trajectory& trajectory,
                                           const sim::SimConfig& sim, double tau_assign);

// ---------------------------------------------------------------- regression

struct OlsFit {
  bool degenerate = true;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::vector<std::array<double, 2>> coefficients;  // intercept first, then one row per feature
  double r2_x = std::numeric_limits<double>::quiet_NaN();
  double r2_y = std::numeric_limits<double>::quiet_NaN();
};

/// Least squares with intercept on a seeded 70/30 split; R^2 on the 30%.
OlsFit fit_heldout(const std::vector<std::vector<double>>& features, const std::vector<std::array<double, 2>>& targets,
                   std::uint64_t split_seed);

/// Samples for one capsule: variable or fixed parameters of r_t against the
/// assigned object's relative position at t, where r_t^a > tau_active.
struct RegressionSamples {
  std::vector<std::vector<double>> vv;
  std::vector<std::vector<double>> vf;
  std::vector<std::array<double, 2>> position;
  std::vector<std::size_t> color;  // class index of the assigned object's color
};

/// Appends the gated samples of one episode to `per_capsule` (size k).
void collect_samples(const Records& records, const sim::Trajectory& trajectory, const AssignmentReport& assignment,
                     double tau_active, std::vector<RegressionSamples>& per_capsule);

struct CapsuleRegression {
  std::size_t capsule = 0;
  std::size_t samples = 0;
  OlsFit vv;
  OlsFit vf;
};

struct RegressionReport {
  std::vector<CapsuleRegression> capsules;  // only capsules with enough samples
  double r2_x = std::numeric_limits<double>::quiet_NaN();  // mean over non-degenerate vv fits
  double r2_y = std::numeric_limits<double>::quiet_NaN();
  double vf_r2_x = std::numeric_limits<double>::quiet_NaN();
  double vf_r2_y = std::numeric_limits<double>::quiet_NaN();
};

RegressionReport representation_regression(const std::vector<RegressionSamples>& per_capsule,
                                           std::size_t min_samples, std::uint64_t split_seed);

// ---------------------------------------------------------------- separability

/// Mean silhouette coefficient (Euclidean). NaN when fewer than two classes
/// are present. At most `max_points` evenly strided samples are used.
double silhouette(const std::vector<std::vector<double>>& points, const std::vector<std::size_t>& labels,
                  std::size_t max_points = 3000);

double fixed_param_separability(const std::vector<RegressionSamples>& per_capsule, std::size_t max_points = 3000);

// ---------------------------------------------------------------- occlusion

/// Per object and frame, whether any pixel shows exactly the object's color.
std::vector<std::vector<bool>> visibility_from_observations(const sim::Trajectory& trajectory);
/// Same, recomputed by ray casting from the stored poses.
std::vector<std::vector<bool>> visibility_from_poses(const sim::Trajectory& trajectory, const sim::SimConfig& sim);

struct Gap {
  std::size_t object = 0;
  std::size_t begin = 0;  // first unseen frame
  std::size_t end = 0;    // first frame seen again
  std::size_t length() const { return end - begin; }
};

/// Maximal unseen runs with visible frames on both sides.
std::vector<Gap> occlusion_gaps(const std::vector<std::vector<bool>>& visibility);

struct OcclusionInterval {
  std::size_t episode = 0;  // set by evaluate()
  Gap gap;
  int capsule = -1;
  double mean_activation = 0.0;  // r^a of the assigned capsule over the gap
  double reappear_error_px = 0.0;
};

struct OcclusionReport {
  std::vector<OcclusionInterval> intervals;
};

/// Pixel centroid of pixels within `tolerance` (RGB distance) of `color`;
/// NaN when none match.
double color_centroid(std::span<const float> observation, const sim::Rgb& color, double tolerance);

OcclusionReport occlusion_persistence(const Records& records, const sim::Trajectory& trajectory,
                                      const AssignmentReport& assignment);

struct OcclusionSummary {
  std::size_t intervals = 0;  // with length <= max_gap
  double median_activation = std::numeric_limits<double>::quiet_NaN();
  double median_error_px = std::numeric_limits<double>::quiet_NaN();
};

OcclusionSummary summarize_occlusion(const std::vector<OcclusionInterval>& intervals, std::size_t max_gap);

// ---------------------------------------------------------------- reports

struct EpisodeMetrics {
  std::string episode;
  double mse = 0.0;
  double mse_mean_baseline = 0.0;
  double mse_copy_baseline = 0.0;
  double purity = 0.0;
  double r2_x = 0.0;
  double r2_y = 0.0;
  double silhouette = 0.0;
  std::size_t occl_intervals = 0;
  double occl_mean_act = 0.0;
  double occl_reappear_err_px = 0.0;
};

struct Evaluation {
  std::vector<EpisodeMetrics> episodes;
  EpisodeMetrics all;
  RegressionReport regression;  // pooled over episodes
  std::vector<AssignmentReport> assignments;
  std::vector<OcclusionInterval> occlusions;
  double silhouette = std::numeric_limits<double>::quiet_NaN();
};

/// Per-channel mean over every observation of the dataset.
std::array<double, 3> channel_means(const std::vector<sim::Trajectory>& dataset);
double copy_baseline_mse(const sim::Trajectory& trajectory);
double mean_baseline_mse(const sim::Trajectory& trajectory, const std::array<double, 3>& means);

/// Evaluates a trained model on held-out episodes. `threads > 1` analyzes
/// episodes concurrently; results are merged in episode order.
Evaluation evaluate(model::ModelParameters<float>& params, const RunConfig& config,
                    const std::vector<sim::Trajectory>& dataset, std::size_t threads = 1);

inline constexpr const char* kReportHeader =
    "episode,mse,mse_mean_baseline,mse_copy_baseline,purity,r2_x,r2_y,silhouette,occl_intervals,occl_mean_act,"
    "occl_reappear_err_px";

/// Header plus one row per episode and an "all" row. Undefined statistics
/// are written as 0.
std::string report_csv(const Evaluation& evaluation);

}  // namespace capsworld::analysis
