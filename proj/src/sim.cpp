#include "capsworld/sim.hpp"

#include <cmath>
#include <string>
#include <thread>

#include "capsworld/errors.hpp"

namespace capsworld::sim {

namespace {

constexpr double kPi = std::numbers::pi;

// Round to single precision so that the recorded (float) episode describes
// exactly the world that produced it.
double to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

double quantize_angle(double theta) {
  float f = static_cast<float>(wrap_angle(theta));
  if (static_cast<double>(f) > kPi) f = std::nextafter(f, 0.0f);
  if (static_cast<double>(f) <= -kPi) f = std::nextafter(static_cast<float>(kPi), 0.0f);
  return f;
}

bool position_free(const WorldState& world, double x, double y) {
  if (x < 0.0 || y < 0.0 || x > world.arena_size || y > world.arena_size) return false;
  for (const auto& o : world.objects) {
    const double dx = x - o.x, dy = y - o.y;
    if (dx * dx + dy * dy <= o.radius * o.radius) return false;
  }
  return true;
}

void check_interval(const Interval& iv, const char* name) {
  if (!(iv.lo <= iv.hi)) throw ConfigError(std::string(name) + ": lower bound exceeds upper bound");
}

}  // namespace

void SimConfig::validate() const {
  if (!(arena_size > 0.0)) throw ConfigError("arena_size must be positive");
  if (width == 0) throw ConfigError("width must be at least 1");
  if (!(fov > 0.0 && fov <= kPi)) throw ConfigError("fov must lie in (0, pi]");
  if (!(max_range > 0.0)) throw ConfigError("max_range must be positive");
  if (!(radius.lo > 0.0 && radius.hi < arena_size / 4.0)) {
    throw ConfigError("object radii must lie in (0, arena_size / 4)");
  }
  check_interval(radius, "radius");
  check_interval(d_long, "d_long");
  check_interval(d_lat, "d_lat");
  check_interval(d_rot, "d_rot");
  if (n_objects > palette.size()) {
    throw ConfigError("n_objects = " + std::to_string(n_objects) + " exceeds the " +
                      std::to_string(palette.size()) + "-color palette");
  }
  for (std::size_t i = 0; i < palette.size(); ++i) {
    for (std::size_t j = i + 1; j < palette.size(); ++j) {
      if (palette[i] == palette[j]) throw ConfigError("palette colors must be pairwise distinct");
    }
  }
}

double wrap_angle(double theta) {
  double t = std::fmod(theta + kPi, 2.0 * kPi);
  if (t < 0.0) t += 2.0 * kPi;
  t -= kPi;
  // fmod maps +pi to -pi; the convention here is (-pi, pi].
  return t <= -kPi ? kPi : t;
}

std::array<double, 2> relative_position(const Pose& agent, double obj_x, double obj_y) {
  const double dx = obj_x - agent.x, dy = obj_y - agent.y;
  const double c = std::cos(agent.theta), s = std::sin(agent.theta);
  return {c * dx + s * dy, -s * dx + c * dy};
}

WorldState Trajectory::world(double arena_size, std::size_t t) const {
  WorldState w;
  w.arena_size = arena_size;
  for (std::size_t j = 0; j < n_objects; ++j) w.objects.push_back(object(j));
  if (length > 0) w.agent = pose(t);
  return w;
}

WorldState world_sample(Rng& rng, const SimConfig& config) {
  config.validate();
  WorldState world;
  world.arena_size = config.arena_size;
  std::size_t rejections = 0;
  auto reject = [&] {
    if (++rejections > config.max_rejections) {
      throw PlacementError("could not place the scene after " + std::to_string(config.max_rejections) +
                           " rejections");
    }
  };
  for (std::size_t j = 0; j < config.n_objects; ++j) {
    for (;;) {
      Object o;
      o.radius = to_float(rng.uniform(config.radius.lo, config.radius.hi));
      o.x = to_float(rng.uniform(o.radius, config.arena_size - o.radius));
      o.y = to_float(rng.uniform(o.radius, config.arena_size - o.radius));
      o.color = config.palette[j];
      bool ok = o.x - o.radius >= 0.0 && o.y - o.radius >= 0.0 && o.x + o.radius <= config.arena_size &&
                o.y + o.radius <= config.arena_size;
      for (const auto& p : world.objects) {
        const double dx = o.x - p.x, dy = o.y - p.y;
        ok = ok && std::sqrt(dx * dx + dy * dy) >= o.radius + p.radius;
      }
      if (ok) {
        world.objects.push_back(o);
        break;
      }
      reject();
    }
  }
  for (;;) {
    const double x = to_float(rng.uniform(0.0, config.arena_size));
    const double y = to_float(rng.uniform(0.0, config.arena_size));
    if (position_free(world, x, y)) {
      world.agent = {x, y, quantize_angle(rng.uniform(-kPi, kPi))};
      break;
    }
    reject();
  }
  return world;
}

std::optional<Hit> ray_cast(const WorldState& world, const Pose& pose, double angle, double max_range) {
  const double dx = std::cos(angle), dy = std::sin(angle);
  std::optional<Hit> best;
  for (std::size_t j = 0; j < world.objects.size(); ++j) {
    const auto& o = world.objects[j];
    // |p + t d - c|^2 = r^2  ->  t^2 - 2 b t + q = 0
    const double cx = o.x - pose.x, cy = o.y - pose.y;
    const double b = cx * dx + cy * dy;
    const double q = cx * cx + cy * cy - o.radius * o.radius;
    const double disc = b * b - q;
    if (disc < 0.0) continue;
    const double root = std::sqrt(disc);
    double t = b - root;
    if (t < 0.0) t = b + root;
    if (t < 0.0 || t > max_range) continue;
    if (!best || t < best->distance) best = Hit{j, t};
  }
  return best;
}

double ray_angle(const Pose& pose, std::size_t i, const SimConfig& config) {
  if (config.width == 1) return pose.theta;
  const double frac = static_cast<double>(i) / static_cast<double>(config.width - 1);
  return pose.theta + config.fov * (frac - 0.5);
}

std::vector<int> ray_hits(const WorldState& world, const Pose& pose, const SimConfig& config) {
  std::vector<int> hits(config.width, -1);
  for (std::size_t i = 0; i < config.width; ++i) {
    if (auto h = ray_cast(world, pose, ray_angle(pose, i, config), config.max_range)) {
      hits[i] = static_cast<int>(h->object);
    }
  }
  return hits;
}

Observation observe(const WorldState& world, const Pose& pose, const SimConfig& config) {
  const auto hits = ray_hits(world, pose, config);
  Observation obs(config.width * 3);
  for (std::size_t i = 0; i < config.width; ++i) {
    const Rgb& c = hits[i] < 0 ? config.background : world.objects[static_cast<std::size_t>(hits[i])].color;
    std::copy(c.begin(), c.end(), obs.begin() + static_cast<std::ptrdiff_t>(3 * i));
  }
  return obs;
}

StepResult step(const WorldState& world, const MotorCommand& command) {
  StepResult out;
  out.pose = world.agent;
  out.pose.theta = wrap_angle(world.agent.theta + command.d_rot);
  const double c = std::cos(out.pose.theta), s = std::sin(out.pose.theta);
  const double nx = world.agent.x + command.d_long * c - command.d_lat * s;
  const double ny = world.agent.y + command.d_long * s + command.d_lat * c;
  out.executed.d_rot = command.d_rot;
  if (position_free(world, nx, ny)) {
    out.pose.x = nx;
    out.pose.y = ny;
    out.executed.d_long = command.d_long;
    out.executed.d_lat = command.d_lat;
  }
  return out;
}

MotorCommand sample_command(Rng& rng, const SimConfig& config) {
  MotorCommand m;
  m.d_long = rng.uniform(config.d_long.lo, config.d_long.hi);
  m.d_lat = rng.uniform(config.d_lat.lo, config.d_lat.hi);
  m.d_rot = rng.uniform(config.d_rot.lo, config.d_rot.hi);
  return m;
}

Trajectory generate_trajectory(Rng& rng, const SimConfig& config, std::size_t length) {
  if (length < 2) throw ConfigError("trajectory length must be at least 2");
  WorldState world = world_sample(rng, config);

  Trajectory traj;
  traj.length = length;
  traj.width = config.width;
  traj.n_objects = world.objects.size();
  for (const auto& o : world.objects) {
    traj.objects.insert(traj.objects.end(), {static_cast<float>(o.x), static_cast<float>(o.y),
                                             static_cast<float>(o.radius), o.color[0], o.color[1], o.color[2]});
  }
  traj.observations.reserve(length * config.width * 3);
  for (std::size_t t = 0; t < length; ++t) {
    const Observation obs = observe(world, world.agent, config);
    traj.observations.insert(traj.observations.end(), obs.begin(), obs.end());
    traj.poses.insert(traj.poses.end(), {static_cast<float>(world.agent.x), static_cast<float>(world.agent.y),
                                         static_cast<float>(world.agent.theta)});
    for (const auto& o : world.objects) {
      const auto rel = relative_position(world.agent, o.x, o.y);
      traj.relative.push_back(static_cast<float>(rel[0]));
      traj.relative.push_back(static_cast<float>(rel[1]));
    }
    // Commands are quantized before execution so the recorded action is
    // exactly the one that moved the agent.
    MotorCommand m = sample_command(rng, config);
    m = {to_float(m.d_long), to_float(m.d_lat), to_float(m.d_rot)};
    StepResult next = step(world, m);
    Pose p{to_float(next.pose.x), to_float(next.pose.y), quantize_angle(next.pose.theta)};
    // Rounding may nudge the agent onto a boundary; keep the previous
    // position in that case (the rotation still applies).
    if (!position_free(world, p.x, p.y)) {
      p.x = world.agent.x;
      p.y = world.agent.y;
      next.executed.d_long = 0.0;
      next.executed.d_lat = 0.0;
    }
    traj.commands.insert(traj.commands.end(), {static_cast<float>(next.executed.d_long),
                                               static_cast<float>(next.executed.d_lat),
                                               static_cast<float>(next.executed.d_rot)});
    world.agent = p;
  }
  return traj;
}

std::vector<Trajectory> generate_dataset(std::uint64_t seed, const SimConfig& config, std::size_t episodes,
                                         std::size_t length, std::size_t threads) {
  config.validate();
  std::vector<Trajectory> out(episodes);
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < episodes; i += stride) {
      Rng rng = Rng::stream(seed, i);
      out[i] = generate_trajectory(rng, config, length);
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, episodes));
  if (threads == 1) {
    work(0, 1);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        work(w, threads);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace capsworld::sim
