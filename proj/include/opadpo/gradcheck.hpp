// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "opadpo/loss.hpp"
#include "opadpo/policy.hpp"
#include "opadpo/synth.hpp"

namespace opadpo::gradcheck {

using policy::ParameterSet;

enum class LossKind { sft, dpo, lc, image_focus, anc, combined };

const char* to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& s);
std::vector<LossKind> all_losses();

struct Settings {
  int n_seeds = 20;
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor of the relative error, so coordinates whose true
  /// derivative is ~0 are judged on absolute error instead.
  double floor = 1e-6;
  int records_per_instance = 3;
  std::uint64_t seed = 0;
  /// Negative control: drop the hidden-bias block of the analytic gradient.
  bool inject_bug = false;
};

/// Small policy and world used by every instance (C = 8, L_max = 10,
/// 320 parameters).
policy::PolicySpec suite_spec();
synth::WorldConfig suite_world();

/// Central differences of f at x, one coordinate at a time.
std::vector<double> numeric_gradient(const std::function<double(const ParameterSet&)>& f,
                                     const ParameterSet& x, double step);

struct Comparison {
  double max_rel_err = 0.0;
  std::size_t worst_coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// max_j |a_j - n_j| / max(|a_j|, |n_j|, floor).
Comparison compare_gradients(std::span<const double> analytic, std::span<const double> numeric,
                             double floor);

struct LossReport {
  LossKind loss = LossKind::sft;
  int instances = 0;
  double max_rel_err = 0.0;
  int worst_instance = 0;
  std::size_t worst_coord = 0;
  std::string worst_segment;
  bool pass = false;
};

/// Name of the parameter block that holds coordinate j.
std::string segment_of(const policy::PolicySpec& spec, std::size_t j);

LossReport check_loss(LossKind kind, const Settings& s);
std::vector<LossReport> check_all(const Settings& s);

std::string report_csv(const std::vector<LossReport>& reports);

}  // namespace opadpo::gradcheck
