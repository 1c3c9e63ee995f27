// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace opadpo {

/// Fixed 9-significant-digit rendering used by every text export.
std::string format_real(double v);

/// Rounds v to what format_real/parse_real round-trips to.
double canonical_real(double v);

std::string join_ints(std::span<const int> values);
std::string join_reals(std::span<const double> values);

std::vector<std::string_view> split(std::string_view text, char sep);
std::string_view trim(std::string_view s);

/// Strict full-string parsers; return false on any trailing garbage.
bool parse_int(std::string_view s, long long& out);
bool parse_real(std::string_view s, double& out);

/// FNV-1a over raw bytes.
std::uint64_t fnv1a64(const void* data, std::size_t n,
                      std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

}  // namespace opadpo
