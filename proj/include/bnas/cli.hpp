#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace bnas {
struct GradLog;
}

namespace bnas::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDivergence = 3;
inline constexpr int kExitIo = 4;

/// Runs one subcommand (args exclude the program name). Progress goes to `out`,
/// diagnostics to `err`; the return value is the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// SVG line chart of each numeric column of a CSV against its first column.
std::string csv_to_svg(const std::string& csv_text, const std::string& title);
/// SVG of per-step gradient norms from a grads.bin log, one line per top-level module.
std::string grad_log_to_svg(const GradLog& log, const std::string& title);

}  // namespace bnas::cli
