#include "capsworld/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <string_view>
#include <vector>

namespace capsworld {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto pos = s.find(sep, start);
    const auto piece = trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (!piece.empty()) out.push_back(piece);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

struct BadValue {
  std::string message;
};

double parse_double(std::string_view s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) throw BadValue{"expected a number, got '" + std::string(s) + "'"};
  return v;
}

std::uint64_t parse_uint(std::string_view s) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw BadValue{"expected a non-negative integer, got '" + std::string(s) + "'"};
  }
  return v;
}

std::vector<double> parse_doubles(std::string_view s, std::size_t n) {
  auto parts = split(s, ' ');
  if (parts.size() != n) throw BadValue{"expected " + std::to_string(n) + " numbers, got '" + std::string(s) + "'"};
  std::vector<double> out;
  for (auto p : parts) out.push_back(parse_double(p));
  return out;
}

// Colours are floats; parsing straight to float keeps the round trip exact.
sim::Rgb parse_rgb(std::string_view s) {
  auto parts = split(s, ' ');
  if (parts.size() != 3) throw BadValue{"expected 3 numbers, got '" + std::string(s) + "'"};
  sim::Rgb out{};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto [ptr, ec] = std::from_chars(parts[i].data(), parts[i].data() + parts[i].size(), out[i]);
    if (ec != std::errc{} || ptr != parts[i].data() + parts[i].size()) {
      throw BadValue{"expected a number, got '" + std::string(parts[i]) + "'"};
    }
  }
  return out;
}

std::vector<model::ConvSpec> parse_layers(std::string_view s) {
  std::vector<model::ConvSpec> out;
  for (auto layer : split(s, ' ')) {
    auto f = split(layer, ':');
    if (f.size() != 3) throw BadValue{"expected channels:kernel:stride, got '" + std::string(layer) + "'"};
    out.push_back({parse_uint(f[0]), parse_uint(f[1]), parse_uint(f[2])});
  }
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt(float v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt(std::uint64_t v) { return std::to_string(v); }

std::string fmt_rgb(const sim::Rgb& c) { return fmt(c[0]) + " " + fmt(c[1]) + " " + fmt(c[2]); }

std::string fmt_interval(const sim::Interval& i) { return fmt(i.lo) + " " + fmt(i.hi); }

std::string fmt_layers(const std::vector<model::ConvSpec>& layers) {
  std::string out;
  for (const auto& l : layers) {
    if (!out.empty()) out += ' ';
    out += fmt(std::uint64_t{l.channels}) + ":" + fmt(std::uint64_t{l.kernel}) + ":" + fmt(std::uint64_t{l.stride});
  }
  return out;
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define CW_DOUBLE(key, member) \
  Field{key, [](RunConfig& c, std::string_view v) { c.member = parse_double(v); }, [](const RunConfig& c) { return fmt(c.member); }}
#define CW_SIZE(key, member)                                                                      \
  Field{key, [](RunConfig& c, std::string_view v) { c.member = parse_uint(v); },                   \
        [](const RunConfig& c) { return fmt(static_cast<std::uint64_t>(c.member)); }}
#define CW_INTERVAL(key, member)                                           \
  Field{key,                                                               \
        [](RunConfig& c, std::string_view v) {                             \
          auto p = parse_doubles(v, 2);                                    \
          c.member = {p[0], p[1]};                                         \
        },                                                                 \
        [](const RunConfig& c) { return fmt_interval(c.member); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      Field{"dataset", [](RunConfig& c, std::string_view v) { c.dataset = std::string(v); },
            [](const RunConfig& c) { return c.dataset; }},
      // simulator
      CW_DOUBLE("arena_size", sim.arena_size),
      CW_SIZE("n_objects", sim.n_objects),
      Field{"width",
            [](RunConfig& c, std::string_view v) {
              c.sim.width = parse_uint(v);
              c.model.width = c.sim.width;
            },
            [](const RunConfig& c) { return fmt(std::uint64_t{c.model.width}); }},
      CW_DOUBLE("fov", sim.fov),
      CW_DOUBLE("max_range", sim.max_range),
      Field{"background", [](RunConfig& c, std::string_view v) { c.sim.background = parse_rgb(v); },
            [](const RunConfig& c) { return fmt_rgb(c.sim.background); }},
      CW_INTERVAL("radius", sim.radius),
      Field{"palette",
            [](RunConfig& c, std::string_view v) {
              c.sim.palette.clear();
              for (auto color : split(v, ',')) c.sim.palette.push_back(parse_rgb(color));
            },
            [](const RunConfig& c) {
              std::string out;
              for (const auto& color : c.sim.palette) out += (out.empty() ? "" : ", ") + fmt_rgb(color);
              return out;
            }},
      CW_INTERVAL("d_long", sim.d_long),
      CW_INTERVAL("d_lat", sim.d_lat),
      CW_INTERVAL("d_rot", sim.d_rot),
      CW_SIZE("max_rejections", sim.max_rejections),
      // model
      CW_SIZE("k", model.k),
      CW_SIZE("d", model.d),
      CW_SIZE("d_v", model.d_v),
      Field{"encoder", [](RunConfig& c, std::string_view v) { c.model.encoder = parse_layers(v); },
            [](const RunConfig& c) { return fmt_layers(c.model.encoder); }},
      CW_SIZE("capsule_kernel", model.capsule_kernel),
      CW_SIZE("decoder_seed_channels", model.decoder_seed_channels),
      CW_SIZE("decoder_seed_width", model.decoder_seed_width),
      Field{"decoder", [](RunConfig& c, std::string_view v) { c.model.decoder = parse_layers(v); },
            [](const RunConfig& c) { return fmt_layers(c.model.decoder); }},
      CW_SIZE("action_hidden", model.action_hidden),
      CW_DOUBLE("lambda_sparse", model.lambda_sparse),
      CW_DOUBLE("lambda_slow", model.lambda_slow),
      CW_DOUBLE("eps_guard", model.eps_guard),
      // training
      CW_SIZE("seed", train.seed),
      CW_SIZE("batch_size", train.batch_size),
      CW_SIZE("window_length", train.window_length),
      CW_DOUBLE("learning_rate", train.learning_rate),
      CW_DOUBLE("beta1", train.beta1),
      CW_DOUBLE("beta2", train.beta2),
      CW_DOUBLE("adam_epsilon", train.adam_epsilon),
      CW_SIZE("steps", train.steps),
      CW_SIZE("checkpoint_interval", train.checkpoint_interval),
      CW_DOUBLE("clip_norm", train.clip_norm),
      // analysis
      CW_DOUBLE("tau_active", analysis.tau_active),
      CW_DOUBLE("tau_assign", analysis.tau_assign),
      CW_SIZE("split_seed", analysis.split_seed),
      CW_SIZE("min_samples", analysis.min_samples),
      CW_SIZE("max_occlusion_gap", analysis.max_occlusion_gap),
  };
  return table;
}

#undef CW_DOUBLE
#undef CW_SIZE
#undef CW_INTERVAL

}  // namespace

void RunConfig::validate() const {
  sim.validate();
  model.validate();
  if (sim.width != model.width) throw ConfigError("simulator and model widths differ");
  if (train.batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (train.window_length == 0) throw ConfigError("window_length must be at least 1");
  if (!(train.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(train.beta1 >= 0.0 && train.beta1 < 1.0) || !(train.beta2 >= 0.0 && train.beta2 < 1.0)) {
    throw ConfigError("beta1 and beta2 must lie in [0, 1)");
  }
  if (!(train.adam_epsilon > 0.0)) throw ConfigError("adam_epsilon must be positive");
  if (!(analysis.tau_active >= 0.0 && analysis.tau_active <= 1.0)) throw ConfigError("tau_active must lie in [0, 1]");
  if (!(analysis.tau_assign >= 0.0 && analysis.tau_assign <= 1.0)) throw ConfigError("tau_assign must lie in [0, 1]");
}

bool operator==(const RunConfig& a, const RunConfig& b) { return config_to_text(a) == config_to_text(b); }

RunConfig config_parse(const std::string& text, bool require_dataset) {
  RunConfig config;
  const auto& table = fields();
  bool have_dataset = false;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    const Field* field = nullptr;
    for (const auto& f : table)
      if (key == f.key) field = &f;
    if (field == nullptr) throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + std::string(key) + "'");
    if (value.empty()) throw ConfigError("line " + std::to_string(line_no) + ": missing value for '" + std::string(key) + "'");
    try {
      field->set(config, value);
    } catch (const BadValue& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + std::string(key) + ": " + e.message);
    }
    if (key == "dataset") have_dataset = true;
  }
  if (require_dataset && !have_dataset) throw ConfigError("missing required key 'dataset'");
  config.validate();
  return config;
}

RunConfig config_load(const std::string& path, bool require_dataset) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return config_parse(buf.str(), require_dataset);
}

std::string config_to_text(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) {
    const std::string value = f.get(config);
    if (value.empty()) continue;
    out += f.key;
    out += " = ";
    out += value;
    out += '\n';
  }
  return out;
}

}  // namespace capsworld
