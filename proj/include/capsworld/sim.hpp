#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "capsworld/rng.hpp"

namespace capsworld::sim {

using Rgb = std::array<float, 3>;

inline constexpr Rgb kPurple{0.5f, 0.2f, 0.7f};
inline constexpr Rgb kOrange{1.0f, 0.55f, 0.1f};
inline constexpr Rgb kGreen{0.2f, 0.8f, 0.3f};

struct Object {
  double x = 0.0;
  double y = 0.0;
  double radius = 0.0;
  Rgb color{};
};

/// Agent pose; theta in radians, wrapped to (-pi, pi].
struct Pose {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;
};

struct WorldState {
  double arena_size = 10.0;
  std::vector<Object> objects;
  Pose agent;
};

/// Longitudinal and lateral displacement in world units, rotation in radians.
struct MotorCommand {
  double d_long = 0.0;
  double d_lat = 0.0;
  double d_rot = 0.0;

  bool operator==(const MotorCommand&) const = default;
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

struct SimConfig {
  double arena_size = 10.0;
  std::size_t n_objects = 3;
  std::size_t width = 64;
  double fov = std::numbers::pi / 2.0;
  double max_range = 12.0;
  Rgb background{0.1f, 0.1f, 0.1f};
  Interval radius{0.3, 0.8};
  std::vector<Rgb> palette{kPurple, kOrange, kGreen};
  Interval d_long{-0.1, 0.3};
  Interval d_lat{-0.1, 0.1};
  Interval d_rot{-0.3, 0.3};
  std::size_t max_rejections = 10000;

  /// Throws ConfigError on inconsistent values.
  void validate() const;
};

struct Hit {
  std::size_t object = 0;
  double distance = 0.0;
};

/// One RGB triplet per ray, row-major W x 3, values in [0, 1].
using Observation = std::vector<float>;

/// Recorded episode. Stored in single precision, exactly as in the dataset
/// file, so that reading a written dataset reproduces every field.
struct Trajectory {
  std::size_t length = 0;
  std::size_t width = 0;
  std::size_t n_objects = 0;
  std::vector<float> objects;       // n_objects x (x, y, r, R, G, B)
  std::vector<float> observations;  // length x width x 3
  std::vector<float> commands;      // length x (d_long, d_lat, d_rot), executed
  std::vector<float> poses;         // length x (x, y, theta)
  std::vector<float> relative;      // length x n_objects x (x, y), agent frame

  std::span<const float> observation(std::size_t t) const {
    return std::span<const float>(observations).subspan(t * width * 3, width * 3);
  }
  MotorCommand command(std::size_t t) const {
    return {commands[3 * t], commands[3 * t + 1], commands[3 * t + 2]};
  }
  Pose pose(std::size_t t) const { return {poses[3 * t], poses[3 * t + 1], poses[3 * t + 2]}; }
  std::array<float, 2> relative_coords(std::size_t t, std::size_t j) const {
    const std::size_t o = (t * n_objects + j) * 2;
    return {relative[o], relative[o + 1]};
  }
  Object object(std::size_t j) const {
    const float* o = objects.data() + 6 * j;
    return {o[0], o[1], o[2], {o[3], o[4], o[5]}};
  }
  /// World rebuilt from the stored objects, agent at pose(t).
  WorldState world(double arena_size, std::size_t t = 0) const;

  bool operator==(const Trajectory&) const = default;
};

double wrap_angle(double theta);

/// Agent-frame coordinates R(-theta) (p_obj - p_agent).
std::array<double, 2> relative_position(const Pose& agent, double obj_x, double obj_y);

WorldState world_sample(Rng& rng, const SimConfig& config);

/// Nearest object hit by the half-line from the pose at absolute angle
/// `ray_angle`; hits farther than max_range are misses.
std::optional<Hit> ray_cast(const WorldState& world, const Pose& pose, double ray_angle, double max_range);

/// Absolute angle of ray i out of config.width.
double ray_angle(const Pose& pose, std::size_t i, const SimConfig& config);

/// Object index hit by each ray, -1 for background.
std::vector<int> ray_hits(const WorldState& world, const Pose& pose, const SimConfig& config);

/// Flat-shaded RGB strip: hit object's color, otherwise background.
Observation observe(const WorldState& world, const Pose& pose, const SimConfig& config);

struct StepResult {
  Pose pose;
  MotorCommand executed;
};

/// Rotation first, then translation along the new heading (d_lat to the
/// left). A translation that leaves the arena or enters an object is
/// dropped; the rotation always stands.
StepResult step(const WorldState& world, const MotorCommand& command);

MotorCommand sample_command(Rng& rng, const SimConfig& config);

Trajectory generate_trajectory(Rng& rng, const SimConfig& config, std::size_t length);

/// Episode i uses Rng::stream(seed, i). Episodes are generated on up to
/// `threads` workers and returned in index order.
std::vector<Trajectory> generate_dataset(std::uint64_t seed, const SimConfig& config, std::size_t episodes,
                                         std::size_t length, std::size_t threads = 1);

}  // namespace capsworld::sim
