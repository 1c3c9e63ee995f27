// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "opadpo/policy.hpp"
#include "opadpo/synth.hpp"
#include "opadpo/trainer.hpp"

namespace opadpo {

/// Everything one command needs. Keys are dotted ("loss.beta").
struct RunConfig {
  policy::PolicySpec spec{10, 13, 12, 16, 32};
  synth::WorldConfig world;
  policy::SamplingConfig sampling;
  train::BaseConfig base;
  train::TrainConfig train;
  int n_records = 4800;
  int eval_worlds = 500;
  int diag_records = 512;
  int diag_min_changed = 2;
  int hist_bins = 40;
  double hist_lo = -8.0;
  double hist_hi = 0.0;
  int grad_seeds = 20;
  double grad_step = 1e-5;
  double grad_tolerance = 1e-4;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  std::string name = "run";

  /// Copies `seed` into the nested configs that carry their own.
  void propagate_seed();
  void validate() const;
};

/// Every accepted key, in echo order.
const std::vector<std::string>& config_keys();

/// Throws config error for unknown keys or unparsable values.
void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value);
std::string get_config_value(const RunConfig& cfg, std::string_view key);

/// "key = value" lines with # comments and blank lines.
std::vector<std::pair<std::string, std::string>> parse_config_text(std::string_view text);

/// "key = value" per line in config_keys() order.
std::string echo_config(const RunConfig& cfg);

/// OPADPO_ + upper-cased key with '.' replaced by "__".
std::string env_name(std::string_view key);

/// defaults < file < environment < overrides. `env` maps variable names to
/// values (the caller snapshots the process environment).
RunConfig resolve_config(const std::string& file_text,
                         const std::map<std::string, std::string>& env,
                         const std::vector<std::pair<std::string, std::string>>& overrides);

}  // namespace opadpo
