#pragma once

#include "stamp/errors.hpp"

#include <iosfwd>

namespace stamp::cli {

inline constexpr const char* kToolVersion = "stamp 1.0.0";

enum ExitCode : int { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kCheckpoint = 4, kNumeric = 5 };

int exit_code(ErrorKind kind);

/// Parses arguments and runs one subcommand. Diagnostics go to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace stamp::cli
