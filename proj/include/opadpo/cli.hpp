// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "opadpo/error.hpp"

namespace opadpo::cli {

enum ExitCode : int { kOk = 0, kConfig = 1, kMissingInput = 2, kNumeric = 3 };

int exit_code_for(ErrorKind kind);

/// OPADPO_* variables of the current process.
std::map<std::string, std::string> environment_snapshot();

/// Runs one subcommand. args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
        const std::map<std::string, std::string>& env);

}  // namespace opadpo::cli
