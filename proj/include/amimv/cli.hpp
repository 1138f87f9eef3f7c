#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace amimv {

enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitInput = 2,
  kExitDomain = 3,
  kExitNumeric = 4,
};

/// Runs one subcommand (analyze, pretrain, probe, report). args excludes the
/// program name. Messages go to out/err; the return value is the exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace amimv
