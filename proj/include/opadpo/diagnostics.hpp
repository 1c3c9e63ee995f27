// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "opadpo/parallel.hpp"
#include "opadpo/policy.hpp"
#include "opadpo/record.hpp"

namespace opadpo::diag {

using policy::ImageFeatures;
using policy::ParameterSet;
using policy::Response;
using policy::Tokens;

/// A divergence that may be infinite (support mismatch). The infinite
/// marker is distinct from every finite value, including huge ones.
struct Divergence {
  double nats = 0.0;
  bool infinite = false;

  static Divergence inf() { return {0.0, true}; }
  /// "inf" or the 9-significant-digit value.
  std::string str() const;
};

/// sum_i p_i ln(p_i / q_i) with 0 ln 0 = 0.
Divergence kl_divergence(std::span<const double> p, std::span<const double> q);

struct ScoredResponse {
  Tokens prompt;
  ImageFeatures image;
  Response y;
};

/// Revised responses of a record set, the usual diagnostics dataset.
std::vector<ScoredResponse> revised_responses(const std::vector<PreferenceRecord>& records);

struct KLReport {
  double mean_mean = 0.0;
  double max_mean = 0.0;
  std::vector<std::pair<double, double>> per_response;  // (mean, max) over positions
  bool any_infinite = false;
};

/// Next-token KL(P || Q) along each dataset response prefix.
KLReport positionwise_kl(const ParameterSet& p_params, const ParameterSet& q_params,
                         std::span<const ScoredResponse> dataset, Exec exec = Exec::parallel);

struct Histogram {
  double lo = -8.0;
  double hi = 0.0;
  std::vector<long long> counts;

  double bin_lo(std::size_t i) const;
  double bin_hi(std::size_t i) const;
  /// Values outside [lo, hi] land in the edge bins.
  static Histogram of(std::span<const double> values, int bins = 40, double lo = -8.0,
                      double hi = 0.0);
};

struct AvgLogProbs {
  std::vector<double> values;
  Histogram histogram;

  double mean() const;
};

/// (1/L) log pi(y | x, m) per response, plus a histogram.
AvgLogProbs response_avg_log_prob(const ParameterSet& params,
                                  std::span<const ScoredResponse> dataset, int bins = 40,
                                  double lo = -8.0, double hi = 0.0,
                                  Exec exec = Exec::parallel);

inline constexpr double kDefaultEpsTok = 0.01;

/// True iff the per-token geometric-mean probability of y under the
/// reference is >= eps_tok.
bool on_policy_predicate(const ParameterSet& ref, std::span<const int> prompt,
                         const ImageFeatures& image, const Response& y,
                         double eps_tok = kDefaultEpsTok);

/// Exhaustive outcome space: all EOS-terminated sequences of length
/// <= L_max plus all unterminated length-L_max sequences.
struct SequenceSpace {
  std::vector<Response> sequences;
  std::vector<double> probabilities;
  std::vector<double> log_probabilities;

  double total() const;
};

inline constexpr double kEnumerationLimit = 1e6;

/// Number of sequences for C, L_max.
double sequence_space_size(int vocab_size, int max_len);

SequenceSpace enumerate_sequence_space(const ParameterSet& params, std::span<const int> prompt,
                                       const ImageFeatures& image);

/// KL between two distributions over one enumerated space.
Divergence sequence_kl(const SequenceSpace& p, const SequenceSpace& q);

Divergence sequence_kl_exact(const ParameterSet& p_params, const ParameterSet& q_params,
                             std::span<const int> prompt, const ImageFeatures& image);

/// Chain-rule route: sum over non-terminal prefixes of P(prefix) times the
/// next-token KL. Equals sequence_kl_exact.
Divergence sequence_kl_chain_rule(const ParameterSet& p_params, const ParameterSet& q_params,
                                  std::span<const int> prompt, const ImageFeatures& image);

struct ImplicitRewardValue {
  double r_hat = 0.0;
  double z_log = 0.0;
  bool has_z = false;
};

/// beta * (log pi_theta(y) - log pi_ref(y)).
ImplicitRewardValue implicit_reward(const ParameterSet& trainee, const ParameterSet& reference,
                                    std::span<const int> prompt, const ImageFeatures& image,
                                    const Response& y, double beta);

using RewardFn = std::function<double(const Response&)>;

struct OptimalPolicy {
  SequenceSpace distribution;  // pi*
  double log_z = 0.0;
  double z = 0.0;
  /// max |beta ln(pi*/pi_ref) + beta ln Z - r| over the space.
  double max_residual = 0.0;
};

/// pi*(y) = pi_ref(y) exp(r(y)/beta) / Z.
OptimalPolicy optimal_policy_enumerate(const ParameterSet& ref, std::span<const int> prompt,
                                       const ImageFeatures& image, const RewardFn& reward,
                                       double beta);

}  // namespace opadpo::diag
