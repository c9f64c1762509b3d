#pragma once

#include <exception>
#include <iosfwd>
#include <string>
#include <vector>

namespace xnet::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDiverged = 2, kIo = 3 };

/// Runs the xnet command line (args excludes the program name). Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// 2 for divergence, 3 for I/O and file-format errors, 1 otherwise; nested
/// exceptions are classified by their innermost cause.
int exit_code_for(const std::exception& e);

/// Outer-to-inner messages of a nested exception chain, joined by ": ".
std::string describe(const std::exception& e);

}  // namespace xnet::cli
