// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "opadpo/parallel.hpp"
#include "opadpo/policy.hpp"
#include "opadpo/record.hpp"

namespace opadpo::synth {

using policy::ImageFeatures;
using policy::ParameterSet;
using policy::PolicySpec;
using policy::Response;
using policy::Tokens;

/// Generator settings for synthetic worlds.
struct WorldConfig {
  int n_attributes = 4;  // A
  int n_values = 3;      // V
  double presence_prob = 0.75;
  double noise_std = 0.3;
  /// When set, a wrong value whose id is adjacent to the true one scores 3
  /// ("minor") instead of 2.
  bool minor_adjacent = false;

  void validate() const;
};

/// Token id assignment of the toy grammar:
/// attributes [0, A), values [A, A+V), DESCRIBE = A+V, SEP = C-2, EOS = C-1.
struct TokenLayout {
  int n_attributes = 0;
  int n_values = 0;
  int vocab_size = 0;

  /// Validates that the grammar fits the policy vocabulary, image width and
  /// maximum length; throws config error otherwise.
  static TokenLayout make(const PolicySpec& spec, const WorldConfig& cfg);

  int attr(int a) const { return a; }
  int value(int v) const { return n_attributes + v; }
  int describe() const { return n_attributes + n_values; }
  int sep() const { return vocab_size - 2; }
  int eos() const { return vocab_size - 1; }
  bool is_attr(int t) const { return t >= 0 && t < n_attributes; }
  bool is_value(int t) const { return t >= n_attributes && t < n_attributes + n_values; }
};

struct WorldState {
  std::vector<bool> present;  // per attribute
  std::vector<int> value;     // per attribute; -1 when absent

  int n_attributes() const { return static_cast<int>(present.size()); }
  int n_present() const;
  bool holds(int a, int v) const { return present[a] && value[a] == v; }

  friend bool operator==(const WorldState&, const WorldState&) = default;
};

WorldState gen_world(std::uint64_t seed, int n_attributes, int n_values, double presence_prob);

/// One-hot value block per present attribute plus Gaussian noise.
ImageFeatures render_features(const WorldState& world, int n_values, double noise_std,
                              std::uint64_t seed);

/// (ATTR_a, VAL_v, SEP) for each present attribute in ascending order, then EOS.
Response gt_response(const PolicySpec& spec, const TokenLayout& layout, const WorldState& world);

/// Recovers the world asserted by a ground-truth response.
WorldState world_from_gt(const TokenLayout& layout, const Response& y_gt);

/// A parsed sentence: well-formed iff exactly (ATTR, VAL, SEP).
struct Triple {
  bool well_formed = false;
  int attribute = -1;
  int value = -1;
};

Triple parse_sentence(const TokenLayout& layout, std::span<const int> sentence);
std::vector<Triple> parse_triples(const TokenLayout& layout, const Response& y);

struct Revision {
  Response y_rev;
  std::vector<SentenceAnnotation> annotations;
};

/// Scripted reviser: scores, labels and minimally repairs each generated
/// sentence against the world and the features.
Revision revise(const PolicySpec& spec, const TokenLayout& layout, const Response& y_gen,
                const WorldState& world, const ImageFeatures& image, const WorldConfig& cfg);

/// Checks the record invariants an external reviser must respect; throws
/// validation error naming the record id.
void validate_record(const PolicySpec& spec, const TokenLayout& layout,
                     const PreferenceRecord& rec);

struct DatasetConfig {
  int n_records = 0;
  std::uint64_t seed = 0;
  policy::SamplingConfig sampling;
  WorldConfig world;
  /// Leave y_Rev/annotations empty for an external reviser.
  bool external_reviser = false;
};

/// Per-record seed derivation shared by dataset generation and evaluation.
std::uint64_t record_seed(std::uint64_t global_seed, std::int64_t record_id,
                          std::uint64_t stream);

struct Scene {
  WorldState world;
  ImageFeatures image;  // canonicalised to 9 significant digits
};

/// World and rendered features of one record id.
Scene make_scene(std::uint64_t global_seed, std::int64_t record_id, const WorldConfig& wc);

/// Generates one record: world, features, sampled y_Gen, oracle revision.
PreferenceRecord build_record(const ParameterSet& base, const TokenLayout& layout,
                              const DatasetConfig& cfg, std::int64_t record_id);

std::vector<PreferenceRecord> build_dataset(const ParameterSet& base, const DatasetConfig& cfg,
                                            Exec exec = Exec::parallel);

/// Completes PENDING records with the oracle and validates filled ones.
std::vector<PreferenceRecord> complete_revisions(const PolicySpec& spec,
                                                 const WorldConfig& cfg,
                                                 std::vector<PreferenceRecord> records);

/// Records whose revision changed at least `min_changed` sentences.
std::vector<PreferenceRecord> significantly_revised(const std::vector<PreferenceRecord>& records,
                                                    int min_changed);

/// Language-prior corpus used to warm up the base policy: each value is
/// replaced by the attribute's popular value with probability
/// `popular_bias`, and an absent attribute is asserted with probability
/// `phantom_prob`.
struct PriorConfig {
  double popular_bias = 0.3;
  double phantom_prob = 0.7;
};

int popular_value(int attribute, int n_values);

Response prior_response(const PolicySpec& spec, const TokenLayout& layout,
                        const WorldState& world, const PriorConfig& prior, std::uint64_t seed);

/// Dataset file: one header comment line then one tab-separated record per
/// line (record_id, prompt, image, y_Gen, y_GT, y_Rev, s_hal, s_img).
inline constexpr std::string_view kPending = "PENDING";

std::string serialize_records(const std::vector<PreferenceRecord>& records);
/// Throws parse error naming line and column on malformed input.
std::vector<PreferenceRecord> deserialize_records(const PolicySpec& spec, std::string_view text);

}  // namespace opadpo::synth
