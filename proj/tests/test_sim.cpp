#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "capsworld/binio.hpp"
#include "capsworld/dataset.hpp"
#include "capsworld/sim.hpp"

using namespace capsworld;
using namespace capsworld::sim;

namespace {

constexpr double kPi = std::numbers::pi;

// Walks the ray in tiny increments and reports the first point inside a disc.
std::optional<double> march(const WorldState& w, const Pose& p, double angle, double max_range) {
  const double step = 1e-4;
  for (double t = 0.0; t <= max_range; t += step) {
    const double x = p.x + t * std::cos(angle), y = p.y + t * std::sin(angle);
    for (const auto& o : w.objects) {
      if ((x - o.x) * (x - o.x) + (y - o.y) * (y - o.y) <= o.radius * o.radius) return t;
    }
  }
  return std::nullopt;
}

WorldState single(double cx, double cy, double r, Rgb color = kPurple) {
  WorldState w;
  w.arena_size = 100.0;
  w.objects.push_back({cx, cy, r, color});
  w.agent = {0.0, 0.0, 0.0};
  return w;
}

std::string temp_path(const char* name) { return (std::filesystem::temp_directory_path() / name).string(); }

}  // namespace

TEST_CASE("wrap_angle maps into (-pi, pi]") {
  CHECK(wrap_angle(kPi) == doctest::Approx(kPi));
  CHECK(wrap_angle(-kPi) == doctest::Approx(kPi));
  CHECK(wrap_angle(3 * kPi / 2) == doctest::Approx(-kPi / 2));
  CHECK(wrap_angle(0.25) == doctest::Approx(0.25));
}

TEST_CASE("world_sample") {
  SimConfig cfg;
  Rng rng(7);
  const WorldState w = world_sample(rng, cfg);
  REQUIRE(w.objects.size() == 3);
  CHECK(w.objects[0].color == kPurple);
  CHECK(w.objects[1].color == kOrange);
  CHECK(w.objects[2].color == kGreen);

  SUBCASE("scene invariants over many seeds") {
    for (std::uint64_t s = 0; s < 200; ++s) {
      Rng r(s);
      const WorldState ws = world_sample(r, cfg);
      std::set<Rgb> colors;
      for (const auto& o : ws.objects) {
        CHECK(o.x >= o.radius);
        CHECK(o.x <= cfg.arena_size - o.radius);
        CHECK(o.y >= o.radius);
        CHECK(o.y <= cfg.arena_size - o.radius);
        CHECK(o.radius >= cfg.radius.lo);
        CHECK(o.radius <= cfg.radius.hi);
        colors.insert(o.color);
        const double dx = ws.agent.x - o.x, dy = ws.agent.y - o.y;
        CHECK(dx * dx + dy * dy > o.radius * o.radius);
      }
      CHECK(colors.size() == ws.objects.size());
      CHECK(ws.agent.theta > -kPi);
      CHECK(ws.agent.theta <= kPi);
    }
  }
  SUBCASE("empty scene") {
    SimConfig empty = cfg;
    empty.n_objects = 0;
    Rng r(1);
    const WorldState we = world_sample(r, empty);
    CHECK(we.objects.empty());
    const Observation obs = observe(we, we.agent, empty);
    for (std::size_t i = 0; i < empty.width; ++i) {
      for (int c = 0; c < 3; ++c) CHECK(obs[3 * i + c] == empty.background[c]);
    }
  }
  SUBCASE("determinism") {
    Rng a(99), b(99);
    const WorldState wa = world_sample(a, cfg), wb = world_sample(b, cfg);
    REQUIRE(wa.objects.size() == wb.objects.size());
    for (std::size_t j = 0; j < wa.objects.size(); ++j) {
      CHECK(wa.objects[j].x == wb.objects[j].x);
      CHECK(wa.objects[j].y == wb.objects[j].y);
      CHECK(wa.objects[j].radius == wb.objects[j].radius);
    }
    CHECK(wa.agent.x == wb.agent.x);
    CHECK(wa.agent.theta == wb.agent.theta);
  }
  SUBCASE("infeasible placement") {
    SimConfig crowded = cfg;
    crowded.arena_size = 2.0;
    crowded.radius = {0.45, 0.49};
    crowded.palette.clear();
    for (int i = 0; i < 8; ++i) crowded.palette.push_back({0.1f * i, 0.5f, 0.5f});
    crowded.n_objects = 8;
    Rng r(3);
    CHECK_THROWS_AS(world_sample(r, crowded), PlacementError);
  }
  SUBCASE("config validation") {
    SimConfig bad = cfg;
    bad.radius = {0.3, 3.0};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.n_objects = 4;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
}

TEST_CASE("ray_cast") {
  SUBCASE("straight hit matches marching oracle") {
    const WorldState w = single(5.0, 0.0, 1.0);
    auto hit = ray_cast(w, w.agent, 0.0, 12.0);
    REQUIRE(hit);
    CHECK(hit->object == 0);
    const auto marched = march(w, w.agent, 0.0, 12.0);
    REQUIRE(marched);
    CHECK(hit->distance == doctest::Approx(4.0));
    CHECK(std::abs(hit->distance - *marched) < 2e-4);
  }
  SUBCASE("oblique rays agree with marching") {
    const WorldState w = single(4.0, 1.5, 1.2);
    for (double a = -0.2; a < 0.9; a += 0.05) {
      auto hit = ray_cast(w, w.agent, a, 12.0);
      auto marched = march(w, w.agent, a, 12.0);
      CHECK(hit.has_value() == marched.has_value());
      if (hit && marched) CHECK(std::abs(hit->distance - *marched) < 2e-4);
    }
  }
  SUBCASE("ray pointing away misses") {
    const WorldState w = single(5.0, 0.0, 1.0);
    CHECK_FALSE(ray_cast(w, w.agent, kPi, 12.0));
  }
  SUBCASE("nearer of two circles wins") {
    WorldState w = single(8.0, 0.0, 1.0, kOrange);
    w.objects.push_back({3.0, 0.0, 0.5, kGreen});
    auto hit = ray_cast(w, w.agent, 0.0, 12.0);
    REQUIRE(hit);
    CHECK(hit->object == 1);
    CHECK(hit->distance == doctest::Approx(2.5));
  }
  SUBCASE("beyond max range is a miss") {
    const WorldState w = single(20.0, 0.0, 1.0);
    CHECK_FALSE(ray_cast(w, w.agent, 0.0, 12.0));
  }
}

TEST_CASE("observe") {
  SimConfig cfg;
  cfg.width = 65;
  SUBCASE("object dead ahead fills the centre pixel") {
    const WorldState w = single(5.0, 0.0, 0.5, kOrange);
    const Observation obs = observe(w, w.agent, cfg);
    for (int c = 0; c < 3; ++c) CHECK(obs[3 * 32 + c] == kOrange[c]);
    for (int c = 0; c < 3; ++c) CHECK(obs[c] == cfg.background[c]);
  }
  SUBCASE("scale invariance: double distance and radius") {
    cfg.max_range = 100.0;
    const WorldState near = single(4.0, 1.0, 0.7);
    const WorldState far = single(8.0, 2.0, 1.4);
    const Observation a = observe(near, near.agent, cfg);
    const Observation b = observe(far, far.agent, cfg);
    CHECK(a == b);
    // Angular-extent oracle: pixel i shows the object iff its ray angle lies
    // within asin(r / D) of the bearing to the centre.
    const double bearing = std::atan2(1.0, 4.0);
    const double half = std::asin(0.7 / std::hypot(4.0, 1.0));
    for (std::size_t i = 0; i < cfg.width; ++i) {
      const double ang = ray_angle(near.agent, i, cfg);
      const double margin = std::abs(std::abs(ang - bearing) - half);
      if (margin < 1e-9) continue;
      const bool expect_hit = std::abs(ang - bearing) < half;
      CHECK((a[3 * i] == kPurple[0]) == expect_hit);
    }
  }
  SUBCASE("flat shading and occlusion") {
    SimConfig scfg;
    for (std::uint64_t s = 0; s < 100; ++s) {
      Rng r(s);
      const WorldState w = world_sample(r, scfg);
      const Observation obs = observe(w, w.agent, scfg);
      std::set<Rgb> allowed{scfg.background};
      for (const auto& o : w.objects) allowed.insert(o.color);
      for (std::size_t i = 0; i < scfg.width; ++i) {
        const Rgb px{obs[3 * i], obs[3 * i + 1], obs[3 * i + 2]};
        CHECK(allowed.count(px) == 1);
      }
    }
  }
  SUBCASE("removing a fully hidden object changes nothing") {
    WorldState w = single(3.0, 0.0, 1.0, kGreen);
    w.objects.push_back({9.0, 0.0, 0.5, kOrange});  // behind the green disc on every ray
    const Observation with = observe(w, w.agent, cfg);
    const auto hits = ray_hits(w, w.agent, cfg);
    for (int h : hits) CHECK(h != 1);
    w.objects.pop_back();
    CHECK(observe(w, w.agent, cfg) == with);
  }
}

TEST_CASE("step") {
  WorldState w = single(5.0, 5.0, 1.0);
  w.arena_size = 10.0;
  w.agent = {2.0, 2.0, 0.0};
  SUBCASE("zero command") {
    const auto r = step(w, {});
    CHECK(r.pose.x == 2.0);
    CHECK(r.pose.y == 2.0);
    CHECK(r.pose.theta == 0.0);
    CHECK(r.executed == MotorCommand{});
  }
  SUBCASE("pure rotation") {
    const auto r = step(w, {0.0, 0.0, kPi / 2});
    CHECK(r.pose.theta == doctest::Approx(kPi / 2));
    CHECK(r.pose.x == 2.0);
    CHECK(r.pose.y == 2.0);
  }
  SUBCASE("rotation applies before translation, lateral is to the left") {
    const auto r = step(w, {0.3, 0.1, kPi / 2});
    CHECK(r.pose.x == doctest::Approx(2.0 - 0.1));
    CHECK(r.pose.y == doctest::Approx(2.0 + 0.3));
  }
  SUBCASE("wall blocks translation, rotation stands") {
    w.agent = {9.9, 2.0, 0.0};
    const MotorCommand m{0.3, 0.05, 0.2};
    // Containment oracle: the proposed point is outside the 10 x 10 arena.
    const double nx = 9.9 + 0.3 * std::cos(0.2) - 0.05 * std::sin(0.2);
    REQUIRE(nx > 10.0);
    const auto r = step(w, m);
    CHECK(r.executed.d_long == 0.0);
    CHECK(r.executed.d_lat == 0.0);
    CHECK(r.executed.d_rot == 0.2);
    CHECK(r.pose.x == 9.9);
    CHECK(r.pose.theta == doctest::Approx(0.2));
  }
  SUBCASE("object blocks translation") {
    w.agent = {3.8, 5.0, 0.0};
    const auto r = step(w, {0.3, 0.0, 0.0});
    CHECK(r.executed.d_long == 0.0);
    CHECK(r.pose.x == 3.8);
  }
}

TEST_CASE("sample_command") {
  SimConfig cfg;
  SUBCASE("zero bounds") {
    SimConfig z = cfg;
    z.d_long = z.d_lat = z.d_rot = {0.0, 0.0};
    Rng r(1);
    CHECK(sample_command(r, z) == MotorCommand{});
  }
  SUBCASE("uniform statistics") {
    Rng r(5);
    const int n = 100000;
    double s[3] = {0, 0, 0};
    for (int i = 0; i < n; ++i) {
      const auto m = sample_command(r, cfg);
      CHECK(m.d_long >= cfg.d_long.lo);
      CHECK(m.d_long <= cfg.d_long.hi);
      s[0] += m.d_long;
      s[1] += m.d_lat;
      s[2] += m.d_rot;
    }
    const Interval ivs[3] = {cfg.d_long, cfg.d_lat, cfg.d_rot};
    for (int k = 0; k < 3; ++k) {
      const double mid = 0.5 * (ivs[k].lo + ivs[k].hi);
      const double sigma = (ivs[k].hi - ivs[k].lo) / std::sqrt(12.0) / std::sqrt(double(n));
      CHECK(std::abs(s[k] / n - mid) <= 3.0 * sigma);
    }
  }
  SUBCASE("determinism") {
    Rng a(8), b(8);
    for (int i = 0; i < 50; ++i) CHECK(sample_command(a, cfg) == sample_command(b, cfg));
  }
}

TEST_CASE("generate_trajectory") {
  SimConfig cfg;
  Rng rng(2024);
  const Trajectory tr = generate_trajectory(rng, cfg, 100);
  CHECK(tr.length == 100);
  CHECK(tr.observations.size() == 100 * cfg.width * 3);
  CHECK(tr.relative.size() == 100 * 3 * 2);

  SUBCASE("minimal trajectory") {
    Rng r(1);
    const Trajectory t2 = generate_trajectory(r, cfg, 2);
    CHECK(t2.length == 2);
    Rng r2(1);
    CHECK_THROWS_AS(generate_trajectory(r2, cfg, 1), ConfigError);
  }
  SUBCASE("frame consistency") {
    for (std::size_t t = 0; t < tr.length; ++t) {
      for (std::size_t j = 0; j < tr.n_objects; ++j) {
        const auto o = tr.object(j);
        const auto rel = relative_position(tr.pose(t), o.x, o.y);
        const auto stored = tr.relative_coords(t, j);
        CHECK(std::hypot(rel[0] - stored[0], rel[1] - stored[1]) <= 1e-6);
      }
    }
  }
  SUBCASE("replay: stored poses and executed commands reproduce the episode") {
    WorldState w = tr.world(cfg.arena_size, 0);
    for (std::size_t t = 0; t + 1 < tr.length; ++t) {
      w.agent = tr.pose(t);
      CHECK(observe(w, w.agent, cfg) == Observation(tr.observation(t).begin(), tr.observation(t).end()));
      const auto next = step(w, tr.command(t));
      CHECK(next.executed == tr.command(t));
      CHECK(std::abs(next.pose.x - tr.pose(t + 1).x) <= 1e-6);
      CHECK(std::abs(next.pose.y - tr.pose(t + 1).y) <= 1e-6);
    }
  }
  SUBCASE("pose validity") {
    const WorldState w = tr.world(cfg.arena_size);
    for (std::size_t t = 0; t < tr.length; ++t) {
      const auto p = tr.pose(t);
      CHECK(p.x >= 0.0);
      CHECK(p.x <= cfg.arena_size);
      CHECK(p.theta > -kPi);
      CHECK(p.theta <= kPi);
      for (const auto& o : w.objects) CHECK(std::hypot(p.x - o.x, p.y - o.y) > o.radius);
    }
  }
  SUBCASE("determinism and parallel generation") {
    const auto a = generate_dataset(5, cfg, 6, 20, 1);
    const auto b = generate_dataset(5, cfg, 6, 20, 3);
    CHECK(a == b);
    Rng r = Rng::stream(5, 4);
    CHECK(generate_trajectory(r, cfg, 20) == a[4]);
  }
}

TEST_CASE("dataset format") {
  SimConfig cfg;
  cfg.width = 16;
  const auto eps = generate_dataset(3, cfg, 3, 10);
  SUBCASE("round trip") {
    const std::string path = temp_path("capsworld_test_rt.ctrj");
    dataset_write(eps, path);
    CHECK(dataset_read(path) == eps);
    std::filesystem::remove(path);
  }
  SUBCASE("header layout") {
    const auto bytes = encode_dataset(eps);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CTRJ");
    io::ByteReader r(bytes);
    r.get_bytes(4, "magic");
    CHECK(r.get<std::uint32_t>("v") == 1);
    CHECK(r.get<std::uint32_t>("n") == 3);
    CHECK(r.get<std::uint32_t>("T") == 10);
    CHECK(r.get<std::uint32_t>("W") == 16);
    CHECK(r.get<std::uint32_t>("n_obj") == 3);
    CHECK(bytes.size() == 24 + 3 * 4 * (3 * 6 + 10 * 16 * 3 + 10 * 3 + 10 * 3 + 10 * 3 * 2));
    // First object's x right after the header.
    CHECK(r.get<float>("x") == eps[0].objects[0]);
  }
  SUBCASE("bad magic") {
    auto bytes = encode_dataset(eps);
    std::copy_n("XXXX", 4, bytes.begin());
    CHECK_THROWS_AS(decode_dataset(bytes), FormatError);
  }
  SUBCASE("bad version") {
    auto bytes = encode_dataset(eps);
    bytes[4] = 2;
    try {
      decode_dataset(bytes);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.offset() == 4);
    }
  }
  SUBCASE("truncation reports an offset") {
    auto bytes = encode_dataset(eps);
    bytes.resize(bytes.size() - 7);
    try {
      decode_dataset(bytes);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.offset() == 24);
    }
  }
  SUBCASE("empty dataset") {
    const auto bytes = encode_dataset({});
    CHECK(bytes.size() == 24);
    CHECK(decode_dataset(bytes).empty());
  }
}
