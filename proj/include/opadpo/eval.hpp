// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "opadpo/parallel.hpp"
#include "opadpo/policy.hpp"
#include "opadpo/synth.hpp"

namespace opadpo::eval {

using policy::ImageFeatures;
using policy::ParameterSet;
using policy::PolicySpec;
using policy::Response;
using policy::Tokens;

/// Offset that keeps evaluation worlds disjoint from training worlds.
inline constexpr std::uint64_t kHeldOutOffset = 1'000'000'000ULL;

struct EvalReport {
  std::string name;
  double chair_i = 0.0;      // wrong assertions / assertions
  double chair_s = 0.0;      // responses with a wrong assertion / responses
  double cover = 0.0;        // true facts asserted / present facts
  double repeat_rate = 0.0;  // L_max without EOS, or a duplicated triple
  long long n_eval = 0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Scoring of one decoded response against its world. A malformed sentence
/// counts as an assertion and is always wrong.
struct ResponseScore {
  int asserted = 0;
  int wrong = 0;
  int covered = 0;  // distinct present facts asserted correctly
  int facts = 0;    // present facts
  bool repeated = false;
};

ResponseScore score_response(const synth::TokenLayout& layout, const PolicySpec& spec,
                             const synth::WorldState& world, const Response& y);

/// Empty-assertion convention: chair_i = 0 when nothing was asserted,
/// cover = 0 when no fact is present.
EvalReport aggregate(const std::string& name, const std::vector<ResponseScore>& scores);

using Responder = std::function<Response(const Tokens& prompt, const ImageFeatures& image,
                                         const synth::WorldState& world)>;

struct EvalConfig {
  int n_worlds = 500;
  synth::WorldConfig world;
  std::uint64_t seed = 0;  // training seed; worlds use seed + kHeldOutOffset
  Exec exec = Exec::parallel;

  void validate() const;
};

EvalReport evaluate_responder(const std::string& name, const PolicySpec& spec,
                              const Responder& responder, const EvalConfig& cfg);

/// Greedy decoding of `params` on held-out worlds.
EvalReport evaluate(const std::string& name, const ParameterSet& params, const EvalConfig& cfg);

std::string report_csv_header();
std::string reports_csv(const std::vector<EvalReport>& reports);

struct MetricComparison {
  std::string metric;
  std::vector<std::string> ranking;  // ascending, ties keep input order
  std::vector<double> values;        // input order
  std::vector<double> deltas;        // value - value of the first report
};

struct Comparison {
  std::vector<std::string> names;
  std::vector<MetricComparison> metrics;  // chair_i, chair_s, cover, repeat_rate
};

/// Needs at least two reports with distinct names.
Comparison compare(const std::vector<EvalReport>& reports);

/// Long format: metric, name, value, delta, rank (1 = lowest).
std::string comparison_csv(const Comparison& cmp);

}  // namespace opadpo::eval
