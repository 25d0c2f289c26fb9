#include "capsworld/cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "capsworld/analysis.hpp"
#include "capsworld/config.hpp"
#include "capsworld/dataset.hpp"
#include "capsworld/gradcheck_suite.hpp"
#include "capsworld/trainer.hpp"

namespace capsworld::cli {

namespace {

namespace fs = std::filesystem;

constexpr double kGradcheckTolerance = 1e-4;

struct FlagDef {
  const char* name;
  const char* help;
  bool required = false;
  bool integer = false;
};

struct CommandDef {
  const char* name;
  const char* help;
  std::vector<FlagDef> flags;
};

const std::vector<CommandDef>& commands() {
  static const std::vector<CommandDef> defs = {
      {"gen",
       "Generate a dataset of random-walk episodes",
       {{"episodes", "number of episodes (default 1000)", false, true},
        {"length", "frames per episode (default 100)", false, true},
        {"seed", "dataset seed (default 0)", false, true},
        {"out", "output dataset file", true},
        {"config", "run config; only its simulator keys are used"}}},
      {"train",
       "Train a model; the config names the dataset",
       {{"config", "run config file", true},
        {"out", "checkpoint path (default model.ckpt)"},
        {"trace", "loss trace CSV (default trace.csv)"},
        {"resume", "continue from this checkpoint"}}},
      {"eval",
       "Write the per-episode metrics report",
       {{"model", "checkpoint", true}, {"data", "held-out dataset", true}, {"out", "report CSV (default report.csv)"}}},
      {"rollout",
       "Render real, predicted and per-capsule strips of one episode",
       {{"model", "checkpoint", true},
        {"data", "dataset", true},
        {"episode", "episode index (default 0)", false, true},
        {"start", "first step (default 0)", false, true},
        {"count", "number of steps (default: to the end)", false, true},
        {"out", "PPM output (default rollout.ppm)"}}},
      {"analyze",
       "Capsule-object assignment, position regression and color separability",
       {{"model", "checkpoint", true}, {"data", "held-out dataset", true}, {"out-dir", "output directory (default .)"}}},
      {"gradcheck",
       "Finite-difference check of every op and of the training loss",
       {{"seed", "input seed (default random)", false, true}}},
  };
  return defs;
}

const CLI::Validator& unsigned_integer() {
  static const CLI::Validator v(
      [](std::string& s) -> std::string {
        std::uint64_t x = 0;
        const auto r = std::from_chars(s.data(), s.data() + s.size(), x);
        if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) return "expected a non-negative integer";
        return {};
      },
      "UINT");
  return v;
}

std::uint64_t to_uint(const std::string& s) {
  std::uint64_t x = 0;
  std::from_chars(s.data(), s.data() + s.size(), x);
  return x;
}

std::string flag_or(const CommandSpec& spec, const std::string& name, const std::string& fallback) {
  const auto it = spec.flags.find(name);
  return it == spec.flags.end() ? fallback : it->second;
}

std::uint64_t uint_or(const CommandSpec& spec, const std::string& name, std::uint64_t fallback) {
  const auto it = spec.flags.find(name);
  return it == spec.flags.end() ? fallback : to_uint(it->second);
}

std::size_t env_threads() {
  const char* v = std::getenv("CAPSWORLD_THREADS");
  if (!v || !*v) return 1;
  const std::string s(v);
  std::uint64_t n = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), n);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || n == 0) {
    throw UsageError("CAPSWORLD_THREADS must be a positive integer, got '" + s + "'");
  }
  return n;
}

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  f.close();
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

// Relative dataset paths in a config are taken relative to the config file.
std::string resolve_dataset(const std::string& config_path, const std::string& dataset) {
  const fs::path p(dataset);
  if (p.is_absolute()) return dataset;
  return (fs::path(config_path).parent_path() / p).string();
}

void cmd_gen(const CommandSpec& spec, std::ostream& out) {
  sim::SimConfig sim;
  if (spec.has("config")) {
    auto cfg = config_load(spec.flags.at("config"), false);
    cfg.validate();
    sim = cfg.sim;
  }
  const auto episodes = uint_or(spec, "episodes", 1000);
  const auto length = uint_or(spec, "length", 100);
  const auto seed = uint_or(spec, "seed", 0);
  if (episodes == 0) throw UsageError("--episodes must be positive");
  if (length < 2) throw UsageError("--length must be at least 2");
  const auto data = sim::generate_dataset(seed, sim, episodes, length, env_threads());
  const auto& path = spec.flags.at("out");
  sim::dataset_write(data, path);
  out << "wrote " << episodes << " episodes of " << length << " frames (W=" << sim.width << ") to " << path << "\n";
}

void cmd_train(const CommandSpec& spec, std::ostream& out) {
  const auto& config_path = spec.flags.at("config");
  const auto config = config_load(config_path);
  config.validate();
  const auto threads = env_threads();
  const auto dataset = sim::dataset_read(resolve_dataset(config_path, config.dataset));
  const auto ckpt_path = flag_or(spec, "out", "model.ckpt");
  const auto trace_path = flag_or(spec, "trace", "trace.csv");

  train::Checkpoint start = spec.has("resume") ? train::checkpoint_load(spec.flags.at("resume"), config.model)
                                               : train::initial_checkpoint(config);
  start.config = config;

  std::ofstream trace(trace_path, std::ios::binary);
  if (!trace) throw std::runtime_error("cannot write " + trace_path);
  trace << train::trace_header(threads > 1);
  train::TraceRow last;
  train::TrainHooks hooks;
  hooks.on_step = [&](const train::TraceRow& row) {
    trace << train::trace_line(row);
    last = row;
  };
  hooks.on_checkpoint = [&](const train::Checkpoint& ckpt) {
    train::checkpoint_save(ckpt_path, ckpt);
    trace.flush();
    out << "step " << ckpt.step << " loss " << num(last.loss) << " pred " << num(last.pred) << "\n" << std::flush;
  };
  const auto t0 = std::chrono::steady_clock::now();
  train::train(config, dataset, std::move(start), threads, hooks);
  trace.close();
  if (!trace) throw std::runtime_error("cannot write " + trace_path);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << "trained to step " << config.train.steps << " in " << num(secs) << " s; checkpoint " << ckpt_path << "\n";
}

struct Loaded {
  train::Checkpoint ckpt;
  std::vector<sim::Trajectory> data;
};

Loaded load_inputs(const CommandSpec& spec) {
  Loaded l{train::checkpoint_load(spec.flags.at("model")), sim::dataset_read(spec.flags.at("data"))};
  l.ckpt.config.validate();
  return l;
}

void cmd_eval(const CommandSpec& spec, std::ostream& out) {
  auto in = load_inputs(spec);
  const auto ev = analysis::evaluate(in.ckpt.params, in.ckpt.config, in.data, env_threads());
  const auto path = flag_or(spec, "out", "report.csv");
  write_text(path, analysis::report_csv(ev));
  const auto& a = ev.all;
  out << "episodes " << ev.episodes.size() << "\n"
      << "mse " << num(a.mse) << " (mean baseline " << num(a.mse_mean_baseline) << ", copy baseline "
      << num(a.mse_copy_baseline) << ")\n"
      << "purity " << num(a.purity) << "\n"
      << "r2_x " << num(a.r2_x) << " r2_y " << num(a.r2_y) << "\n"
      << "wrote " << path << "\n";
}

void cmd_rollout(const CommandSpec& spec, std::ostream& out) {
  auto in = load_inputs(spec);
  const auto episode = uint_or(spec, "episode", 0);
  if (episode >= in.data.size()) {
    throw std::runtime_error("episode " + std::to_string(episode) + " out of range (" +
                             std::to_string(in.data.size()) + " episodes)");
  }
  const auto& traj = in.data[episode];
  const auto records = analysis::run_model(in.ckpt.params, in.ckpt.config.model, traj);
  const std::size_t n = records.steps.size();
  const auto start = uint_or(spec, "start", 0);
  if (start >= n) throw std::runtime_error("start step " + std::to_string(start) + " out of range (" +
                                           std::to_string(n) + " steps)");
  const auto count = std::min<std::uint64_t>(uint_or(spec, "count", n - start), n - start);
  if (count == 0) throw UsageError("--count must be positive");
  std::vector<std::size_t> steps;
  for (std::size_t t = start; t < start + count; ++t) steps.push_back(t);
  const auto img = analysis::render_strip(records, traj, steps);
  const auto path = flag_or(spec, "out", "rollout.ppm");
  analysis::write_ppm(path, img);
  out << "wrote " << img.width << "x" << img.height << " strip of episode " << episode << " to " << path << "\n";
}

void cmd_analyze(const CommandSpec& spec, std::ostream& out) {
  auto in = load_inputs(spec);
  const auto& cfg = in.ckpt.config;
  const auto ev = analysis::evaluate(in.ckpt.params, cfg, in.data, env_threads());
  const fs::path dir = flag_or(spec, "out-dir", ".");
  fs::create_directories(dir);

  std::string assign = "episode,capsule,object,score,assigned\n";
  for (std::size_t e = 0; e < ev.assignments.size(); ++e) {
    const auto& a = ev.assignments[e];
    for (std::size_t i = 0; i < a.k; ++i)
      for (std::size_t j = 0; j < a.n_objects; ++j)
        assign += std::to_string(e) + "," + std::to_string(i) + "," + std::to_string(j) + "," + num(a.score(i, j)) +
                  "," + (a.assignment[i] == static_cast<int>(j) ? "1" : "0") + "\n";
  }
  write_text(dir / "assignment.csv", assign);

  std::string reg = "capsule,samples,vv_degenerate,vv_r2_x,vv_r2_y,vf_degenerate,vf_r2_x,vf_r2_y\n";
  for (const auto& c : ev.regression.capsules) {
    reg += std::to_string(c.capsule) + "," + std::to_string(c.samples) + "," + (c.vv.degenerate ? "1" : "0") + "," +
           num(c.vv.r2_x) + "," + num(c.vv.r2_y) + "," + (c.vf.degenerate ? "1" : "0") + "," + num(c.vf.r2_x) + "," +
           num(c.vf.r2_y) + "\n";
  }
  write_text(dir / "regression.csv", reg);

  const auto occ = analysis::summarize_occlusion(ev.occlusions, cfg.analysis.max_occlusion_gap);
  std::string sep = "metric,value\n";
  sep += "vf_color_silhouette," + num(ev.silhouette) + "\n";
  sep += "vv_r2_x," + num(ev.regression.r2_x) + "\n";
  sep += "vv_r2_y," + num(ev.regression.r2_y) + "\n";
  sep += "vf_r2_x," + num(ev.regression.vf_r2_x) + "\n";
  sep += "vf_r2_y," + num(ev.regression.vf_r2_y) + "\n";
  sep += "purity," + num(ev.all.purity) + "\n";
  sep += "occl_intervals," + std::to_string(occ.intervals) + "\n";
  sep += "occl_median_act," + num(occ.median_activation) + "\n";
  sep += "occl_median_reappear_err_px," + num(occ.median_error_px) + "\n";
  sep += "tau_active," + num(cfg.analysis.tau_active) + "\n";
  sep += "tau_assign," + num(cfg.analysis.tau_assign) + "\n";
  sep += "split_seed," + std::to_string(cfg.analysis.split_seed) + "\n";
  sep += "min_samples," + std::to_string(cfg.analysis.min_samples) + "\n";
  write_text(dir / "separability.csv", sep);

  std::string oc = "episode,object,capsule,begin,end,length,mean_activation,reappear_error_px\n";
  for (const auto& iv : ev.occlusions) {
    oc += std::to_string(iv.episode) + "," + std::to_string(iv.gap.object) + "," + std::to_string(iv.capsule) + "," +
          std::to_string(iv.gap.begin) + "," + std::to_string(iv.gap.end) + "," + std::to_string(iv.gap.length()) +
          "," + num(iv.mean_activation) + "," + num(iv.reappear_error_px) + "\n";
  }
  write_text(dir / "occlusion.csv", oc);

  out << "purity " << num(ev.all.purity) << "\n"
      << "vv r2_x " << num(ev.regression.r2_x) << " r2_y " << num(ev.regression.r2_y) << "\n"
      << "vf r2_x " << num(ev.regression.vf_r2_x) << " r2_y " << num(ev.regression.vf_r2_y) << "\n"
      << "vf color silhouette " << num(ev.silhouette) << "\n"
      << "occlusion intervals " << occ.intervals << " median act " << num(occ.median_activation) << "\n"
      << "wrote assignment.csv regression.csv separability.csv occlusion.csv to " << dir.string() << "\n";
}

void cmd_gradcheck(const CommandSpec& spec, std::ostream& out) {
  const std::uint64_t seed =
      spec.has("seed") ? to_uint(spec.flags.at("seed"))
                       : (std::uint64_t{std::random_device{}()} << 32) ^ std::uint64_t{std::random_device{}()};
  const auto t0 = std::chrono::steady_clock::now();
  const auto report = ad::run_gradcheck_suite(seed);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& c : report.cases) {
    out << c.name << " " << num(c.max_rel_error) << " (" << c.checked << " checked";
    if (c.skipped) out << ", " << c.skipped << " skipped at kinks";
    out << ")\n";
  }
  out << "seed " << seed << "\n"
      << "max relative error " << num(report.max_rel_error) << " in " << num(secs) << " s\n";
  const bool ok = report.passed(kGradcheckTolerance);
  out << (ok ? "PASS" : "FAIL") << "\n";
  if (!ok) throw std::runtime_error("gradient check above " + num(kGradcheckTolerance));
}

}  // namespace

CommandSpec parse_args(const std::vector<std::string>& args) {
  CLI::App app{"Capsule world model: data, training and analysis", "capsworld"};
  app.require_subcommand(1, 1);
  std::map<std::string, std::vector<std::pair<std::string, CLI::Option*>>> options;
  std::map<std::string, std::map<std::string, std::string>> values;
  for (const auto& def : commands()) {
    auto* sub = app.add_subcommand(def.name, def.help);
    for (const auto& f : def.flags) {
      auto* opt = sub->add_option(std::string("--") + f.name, values[def.name][f.name], f.help);
      if (f.required) opt->required();
      if (f.integer) opt->check(unsigned_integer());
      options[def.name].emplace_back(f.name, opt);
    }
  }

  if (!args.empty() && !args.front().starts_with("-") && !app.get_subcommand_no_throw(args.front())) {
    throw UsageError("unknown command '" + args.front() + "'\n" + app.help());
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    throw HelpRequested(subs.empty() ? app.help() : subs.front()->help());
  } catch (const CLI::ParseError& e) {
    const auto subs = app.get_subcommands();
    throw UsageError(std::string(e.what()) + "\n" + (subs.empty() ? app.help() : subs.front()->help()));
  }

  CommandSpec spec;
  spec.name = app.get_subcommands().front()->get_name();
  for (const auto& [flag, opt] : options[spec.name])
    if (opt->count() > 0) spec.flags[flag] = values[spec.name][flag];
  return spec;
}

void dispatch(const CommandSpec& spec, std::ostream& out) {
  if (spec.name == "gen") return cmd_gen(spec, out);
  if (spec.name == "train") return cmd_train(spec, out);
  if (spec.name == "eval") return cmd_eval(spec, out);
  if (spec.name == "rollout") return cmd_rollout(spec, out);
  if (spec.name == "analyze") return cmd_analyze(spec, out);
  if (spec.name == "gradcheck") return cmd_gradcheck(spec, out);
  throw UsageError("unknown command '" + spec.name + "'");
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    dispatch(parse_args(args), out);
    return kExitOk;
  } catch (const HelpRequested& h) {
    out << h.what();
    return kExitOk;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace capsworld::cli
