// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include "opadpo/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return opadpo::cli::run(args, std::cout, std::cerr, opadpo::cli::environment_snapshot());
}
