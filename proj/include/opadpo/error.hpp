// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace opadpo {

/// Failure categories. The CLI maps these onto process exit codes.
enum class ErrorKind {
  length,
  numeric,
  domain,
  shape,
  config,
  usage,
  data,
  capacity,
  parse,
  validation,
  io,
  missing_input,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace opadpo
