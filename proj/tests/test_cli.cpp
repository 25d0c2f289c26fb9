#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "capsworld/binio.hpp"
#include "capsworld/cli.hpp"

using namespace capsworld;
using namespace capsworld::cli;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("capsworld_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kRunConfig =
    "dataset = train.ctrj\n"
    "n_objects = 1\n"
    "width = 32\n"
    "k = 3\n"
    "encoder = 8:5:2 8:5:2\n"
    "decoder_seed_channels = 8\n"
    "action_hidden = 8\n"
    "steps = 6\n"
    "checkpoint_interval = 3\n"
    "batch_size = 2\n"
    "window_length = 5\n"
    "min_samples = 5\n";

}  // namespace

TEST_CASE("parse_args") {
  SUBCASE("gen with three flags") {
    const auto s = parse_args({"gen", "--episodes", "1000", "--seed", "7", "--out", "d.ctrj"});
    CHECK(s.name == "gen");
    CHECK(s.flags.size() == 3);
    CHECK(s.flags.at("episodes") == "1000");
    CHECK(s.flags.at("seed") == "7");
    CHECK(s.flags.at("out") == "d.ctrj");
    CHECK(s.positionals.empty());
  }
  SUBCASE("train") {
    const auto s = parse_args({"train", "--config", "c.cfg"});
    CHECK(s.name == "train");
    CHECK(s.flags.size() == 1);
    CHECK(s.flags.at("config") == "c.cfg");
  }
  SUBCASE("failures") {
    CHECK_THROWS_AS(parse_args({"bogus"}), UsageError);
    CHECK_THROWS_AS(parse_args({}), UsageError);
    CHECK_THROWS_AS(parse_args({"eval", "--data", "x"}), UsageError);
    CHECK_THROWS_AS(parse_args({"gen", "--out", "d", "--frobnicate", "1"}), UsageError);
    CHECK_THROWS_AS(parse_args({"gen", "--out", "d", "--episodes", "-3"}), UsageError);
    CHECK_THROWS_AS(parse_args({"gen", "--out", "d", "extra"}), UsageError);
    CHECK_THROWS_AS(parse_args({"train", "--config", "c", "--learning_rate", "1"}), UsageError);
    CHECK_THROWS_AS(parse_args({"gen", "--help"}), HelpRequested);
  }
}

TEST_CASE("exit codes") {
  CHECK(invoke({"bogus"}).code == kExitUsage);
  CHECK(invoke({"eval", "--data", "x.ctrj"}).code == kExitUsage);
  const auto help = invoke({"--help"});
  CHECK(help.code == kExitOk);
  CHECK(help.out.find("gradcheck") != std::string::npos);
  CHECK(invoke({"rollout", "--help"}).code == kExitOk);

  const auto dir = scratch("codes");
  const auto missing = invoke({"eval", "--model", (dir / "none.ckpt").string(), "--data", (dir / "none").string()});
  CHECK(missing.code == kExitRuntime);
  CHECK(missing.err.find("error") != std::string::npos);

  write(dir / "bad.cfg", "dataset = x\nwidht = 32\n");
  const auto bad = invoke({"train", "--config", (dir / "bad.cfg").string()});
  CHECK(bad.code == kExitRuntime);
  CHECK(bad.err.find("line 2") != std::string::npos);
}

TEST_CASE("gradcheck command") {
  const auto r = invoke({"gradcheck", "--seed", "11"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("end_to_end_loss") != std::string::npos);
  CHECK(r.out.find("max relative error") != std::string::npos);
  CHECK(r.out.find("PASS") != std::string::npos);
}

TEST_CASE("pipeline") {
  const auto dir = scratch("pipeline");
  auto p = [&](const char* name) { return (dir / name).string(); };
  write(dir / "run.cfg", kRunConfig);

  REQUIRE(invoke({"gen", "--episodes", "6", "--length", "20", "--seed", "3", "--config", p("run.cfg"), "--out",
                  p("train.ctrj")})
              .code == kExitOk);
  REQUIRE(invoke({"gen", "--episodes", "6", "--length", "20", "--seed", "3", "--config", p("run.cfg"), "--out",
                  p("again.ctrj")})
              .code == kExitOk);
  CHECK(io::read_file(p("train.ctrj")) == io::read_file(p("again.ctrj")));
  REQUIRE(invoke({"gen", "--episodes", "2", "--length", "20", "--seed", "4", "--config", p("run.cfg"), "--out",
                  p("test.ctrj")})
              .code == kExitOk);

  // The dataset path in the config resolves next to the config file.
  const auto tr = invoke({"train", "--config", p("run.cfg"), "--out", p("model.ckpt"), "--trace", p("trace.csv")});
  REQUIRE(tr.code == kExitOk);
  CHECK(tr.out.find("step 3 ") != std::string::npos);
  CHECK(tr.out.find("step 6 ") != std::string::npos);
  {
    std::ifstream f(p("trace.csv"));
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(f, line)) lines.push_back(line);
    REQUIRE(lines.size() == 7);
    CHECK(lines[0] == "step,loss,pred,sparse,slow");
    CHECK(lines[1].rfind("1,", 0) == 0);
    CHECK(lines[6].rfind("6,", 0) == 0);
  }

  const auto data_before = io::read_file(p("test.ctrj"));
  const auto ckpt_before = io::read_file(p("model.ckpt"));

  const auto ev = invoke({"eval", "--model", p("model.ckpt"), "--data", p("test.ctrj"), "--out", p("report.csv")});
  REQUIRE(ev.code == kExitOk);
  {
    std::ifstream f(p("report.csv"));
    std::string header, line;
    std::getline(f, header);
    CHECK(header ==
          "episode,mse,mse_mean_baseline,mse_copy_baseline,purity,r2_x,r2_y,silhouette,occl_intervals,occl_mean_act,"
          "occl_reappear_err_px");
    std::size_t rows = 0;
    while (std::getline(f, line)) ++rows;
    CHECK(rows == 3);
  }

  // k = 3: five panels of 32 px with four gutters; three steps of 16 rows.
  const auto ro = invoke({"rollout", "--model", p("model.ckpt"), "--data", p("test.ctrj"), "--episode", "1", "--count",
                          "3", "--out", p("strip.ppm")});
  REQUIRE(ro.code == kExitOk);
  const auto ppm = io::read_file(p("strip.ppm"));
  const std::string header = "P6\n168 48\n255\n";
  REQUIRE(ppm.size() == header.size() + 168 * 48 * 3);
  CHECK(std::string(ppm.begin(), ppm.begin() + static_cast<std::ptrdiff_t>(header.size())) == header);

  const auto full = invoke({"rollout", "--model", p("model.ckpt"), "--data", p("test.ctrj"), "--out", p("all.ppm")});
  REQUIRE(full.code == kExitOk);
  CHECK(full.out.find("168x304") != std::string::npos);

  CHECK(invoke({"rollout", "--model", p("model.ckpt"), "--data", p("test.ctrj"), "--episode", "2"}).code ==
        kExitRuntime);

  const auto an = invoke({"analyze", "--model", p("model.ckpt"), "--data", p("test.ctrj"), "--out-dir", p("an")});
  REQUIRE(an.code == kExitOk);
  for (const char* f : {"assignment.csv", "regression.csv", "separability.csv", "occlusion.csv"})
    CHECK(fs::exists(dir / "an" / f));
  {
    std::ifstream f(dir / "an" / "assignment.csv");
    std::string line;
    std::size_t rows = 0;
    std::getline(f, line);
    CHECK(line == "episode,capsule,object,score,assigned");
    while (std::getline(f, line)) ++rows;
    CHECK(rows == 2 * 3 * 1);
  }
  {
    std::ifstream f(dir / "an" / "separability.csv");
    std::stringstream ss;
    ss << f.rdbuf();
    CHECK(ss.str().find("tau_active,0.3\n") != std::string::npos);
    CHECK(ss.str().find("tau_assign,0.2\n") != std::string::npos);
  }

  CHECK(io::read_file(p("test.ctrj")) == data_before);
  CHECK(io::read_file(p("model.ckpt")) == ckpt_before);

  SUBCASE("resume continues from the stored step") {
    std::string text = kRunConfig;
    text.replace(text.find("steps = 6"), 9, "steps = 8");
    write(dir / "longer.cfg", text);
    const auto r = invoke({"train", "--config", p("longer.cfg"), "--resume", p("model.ckpt"), "--out", p("m2.ckpt"),
                           "--trace", p("t2.csv")});
    REQUIRE(r.code == kExitOk);
    std::ifstream f(p("t2.csv"));
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(f, line)) lines.push_back(line);
    REQUIRE(lines.size() == 3);
    CHECK(lines[1].rfind("7,", 0) == 0);
  }

  SUBCASE("thread count from the environment") {
    ::setenv("CAPSWORLD_THREADS", "0", 1);
    CHECK(invoke({"eval", "--model", p("model.ckpt"), "--data", p("test.ctrj"), "--out", p("r0.csv")}).code ==
          kExitUsage);
    ::setenv("CAPSWORLD_THREADS", "2", 1);
    CHECK(invoke({"eval", "--model", p("model.ckpt"), "--data", p("test.ctrj"), "--out", p("r2.csv")}).code ==
          kExitOk);
    ::unsetenv("CAPSWORLD_THREADS");
    CHECK(io::read_file(p("r2.csv")) == io::read_file(p("report.csv")));
  }
}
