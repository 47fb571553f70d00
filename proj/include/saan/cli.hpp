#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace saan {

/// Exit codes: 0 ok, 1 usage, 2 data/format, 3 numerical abort.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3 };

/// Entry point for the `saan` tool. `args` excludes the program name.
/// Results go to `out` (JSON or CSV only); prose and diagnostics to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

/// `key = value` lines; blank lines and `#` comments ignored. Throws
/// UsageError on malformed lines or duplicate keys.
std::map<std::string, std::string> parse_config_text(const std::string& text, const std::string& what = "config");

}  // namespace saan
