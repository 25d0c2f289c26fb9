#pragma once

#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace capsworld::cli {

/// A parsed invocation. `flags` holds only what was given on the command
/// line; defaults are applied by dispatch.
struct CommandSpec {
  std::string name;
  std::map<std::string, std::string> flags;
  std::vector<std::string> positionals;

  bool has(const std::string& flag) const { return flags.count(flag) != 0; }
};

/// Bad invocation; the message includes usage text. Exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// `--help` was given; what() is the help text. Exit code 0.
class HelpRequested : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Arguments after the program name.
CommandSpec parse_args(const std::vector<std::string>& args);

/// Runs a parsed command. Runtime failures throw; run() maps them to exit 1.
void dispatch(const CommandSpec& spec, std::ostream& out);

/// parse + dispatch with the 0/1/2 exit code contract.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace capsworld::cli
