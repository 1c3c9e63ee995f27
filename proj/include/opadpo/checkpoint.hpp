// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>

#include "opadpo/policy.hpp"

namespace opadpo {

enum class Phase : std::uint8_t { base = 0, opa = 1, dpo = 2, opa_dpo = 3 };

const char* to_string(Phase phase);
Phase phase_from_string(const std::string& s);

struct CheckpointMeta {
  Phase phase = Phase::base;
  std::uint32_t epoch = 0;
  std::uint64_t step = 0;
  std::uint64_t param_hash = 0;
  std::uint64_t config_hash = 0;

  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct Checkpoint {
  CheckpointMeta meta;
  policy::ParameterSet params;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Layout: "OPDP", u16 version, five u32 spec constants (C, L_max, K, d, h),
/// u8 role, u64 parameter count, then phase u8, epoch u32, step u64,
/// parameter hash u64, config hash u64, then the little-endian doubles.
std::string encode_checkpoint(const Checkpoint& ck);
/// Throws parse error on a bad magic, version, size or hash mismatch.
Checkpoint decode_checkpoint(const std::string& bytes);

/// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const std::string& path, const Checkpoint& ck);
/// Missing file is reported as missing_input.
Checkpoint load_checkpoint(const std::string& path);

/// Writes text atomically (temporary sibling, then rename).
void write_file_atomic(const std::string& path, const std::string& contents);
/// Throws missing_input when the file cannot be opened.
std::string read_file(const std::string& path);

}  // namespace opadpo
