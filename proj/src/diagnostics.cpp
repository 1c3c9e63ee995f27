// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#include "opadpo/diagnostics.hpp"

#include <algorithm>
#include <cmath>

#include "opadpo/error.hpp"
#include "opadpo/format.hpp"

namespace opadpo::diag {

std::string Divergence::str() const { return infinite ? "inf" : format_real(nats); }

namespace {

void check_distribution(std::span<const double> p, const char* name) {
  double s = 0.0;
  for (double v : p) {
    require(v >= 0.0 && std::isfinite(v), ErrorKind::domain,
            std::string(name) + " has a negative or non-finite entry");
    s += v;
  }
  require(std::abs(s - 1.0) <= 1e-9, ErrorKind::domain,
          std::string(name) + " does not sum to 1 (sum = " + format_real(s) + ")");
}

/// KL on already-validated vectors.
Divergence kl_raw(std::span<const double> p, std::span<const double> q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) return Divergence::inf();
    s += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  // Rounding can leave a tiny negative value when p == q.
  return {std::max(s, 0.0), false};
}

}  // namespace

Divergence kl_divergence(std::span<const double> p, std::span<const double> q) {
  require(p.size() == q.size(), ErrorKind::domain, "distributions differ in length");
  check_distribution(p, "p");
  check_distribution(q, "q");
  return kl_raw(p, q);
}

std::vector<ScoredResponse> revised_responses(const std::vector<PreferenceRecord>& records) {
  std::vector<ScoredResponse> out;
  for (const auto& r : records)
    if (r.revised()) out.push_back({r.prompt, r.image, *r.y_rev});
  return out;
}

KLReport positionwise_kl(const ParameterSet& p_params, const ParameterSet& q_params,
                         std::span<const ScoredResponse> dataset, Exec exec) {
  require(!dataset.empty(), ErrorKind::usage, "empty dataset");
  require(p_params.spec == q_params.spec, ErrorKind::config, "policies have different specs");
  KLReport rep;
  rep.per_response.resize(dataset.size());
  std::vector<char> inf(dataset.size(), 0);
  for_each_index(dataset.size(), exec, [&](std::size_t n) {
    const auto& ex = dataset[n];
    const auto pd = policy::position_distributions(p_params, ex.prompt, ex.image, ex.y);
    const auto qd = policy::position_distributions(q_params, ex.prompt, ex.image, ex.y);
    double sum = 0.0, mx = 0.0;
    for (std::size_t i = 0; i < pd.size(); ++i) {
      const auto d = kl_raw(pd[i], qd[i]);
      if (d.infinite) {
        inf[n] = 1;
        continue;
      }
      sum += d.nats;
      mx = std::max(mx, d.nats);
    }
    rep.per_response[n] = {sum / static_cast<double>(pd.size()), mx};
  });
  for (std::size_t n = 0; n < dataset.size(); ++n) {
    rep.mean_mean += rep.per_response[n].first;
    rep.max_mean += rep.per_response[n].second;
    rep.any_infinite = rep.any_infinite || inf[n];
  }
  rep.mean_mean /= static_cast<double>(dataset.size());
  rep.max_mean /= static_cast<double>(dataset.size());
  return rep;
}

double Histogram::bin_lo(std::size_t i) const {
  return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(counts.size());
}

double Histogram::bin_hi(std::size_t i) const { return bin_lo(i + 1); }

Histogram Histogram::of(std::span<const double> values, int bins, double lo, double hi) {
  require(bins >= 1 && hi > lo, ErrorKind::config, "invalid histogram range");
  Histogram h{lo, hi, std::vector<long long>(bins, 0)};
  for (double v : values) {
    auto b = static_cast<long long>(std::floor((v - lo) / (hi - lo) * bins));
    b = std::clamp<long long>(b, 0, bins - 1);
    ++h.counts[b];
  }
  return h;
}

double AvgLogProbs::mean() const {
  if (values.empty()) return 0.0;
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

AvgLogProbs response_avg_log_prob(const ParameterSet& params,
                                  std::span<const ScoredResponse> dataset, int bins, double lo,
                                  double hi, Exec exec) {
  AvgLogProbs out;
  out.values.resize(dataset.size());
  for_each_index(dataset.size(), exec, [&](std::size_t n) {
    const auto& ex = dataset[n];
    require(ex.y.size() > 0, ErrorKind::domain, "empty response");
    out.values[n] = policy::response_log_prob(params, ex.prompt, ex.image, ex.y) / ex.y.size();
  });
  out.histogram = Histogram::of(out.values, bins, lo, hi);
  return out;
}

bool on_policy_predicate(const ParameterSet& ref, std::span<const int> prompt,
                         const ImageFeatures& image, const Response& y, double eps_tok) {
  require(eps_tok > 0.0 && eps_tok < 1.0, ErrorKind::config, "eps_tok must lie in (0, 1)");
  const double avg = policy::response_log_prob(ref, prompt, image, y) / y.size();
  return avg >= std::log(eps_tok);
}

double SequenceSpace::total() const {
  double s = 0.0;
  for (double p : probabilities) s += p;
  return s;
}

double sequence_space_size(int vocab_size, int max_len) {
  const double b = vocab_size - 1;
  double total = std::pow(b, max_len);
  for (int l = 1; l <= max_len; ++l) total += std::pow(b, l - 1);
  return total;
}

namespace {

void check_enumerable(const policy::PolicySpec& spec) {
  require(std::pow(static_cast<double>(spec.vocab_size - 1), spec.max_len) <= kEnumerationLimit,
          ErrorKind::capacity,
          "sequence space too large to enumerate ((C-1)^L_max > 1e6)");
}

/// Depth-first walk over non-terminal prefixes. visit(prefix, log P(prefix),
/// next-token distribution) is called for every prefix of length < L_max.
template <class Visit>
void walk_prefixes(const ParameterSet& params, std::span<const int> prompt,
                   const ImageFeatures& image, Tokens& prefix, double log_prob, Visit& visit) {
  const auto dist = policy::next_token_dist(params, prompt, image, prefix);
  visit(prefix, log_prob, dist);
  if (static_cast<int>(prefix.size()) + 1 >= params.spec.max_len) return;
  for (int t = 0; t < params.spec.vocab_size - 1; ++t) {
    prefix.push_back(t);
    walk_prefixes(params, prompt, image, prefix, log_prob + std::log(dist[t]), visit);
    prefix.pop_back();
  }
}

}  // namespace

SequenceSpace enumerate_sequence_space(const ParameterSet& params, std::span<const int> prompt,
                                       const ImageFeatures& image) {
  check_enumerable(params.spec);
  const auto& spec = params.spec;
  SequenceSpace space;
  auto emit = [&](Tokens tokens, double lp) {
    space.sequences.emplace_back(spec, std::move(tokens));
    space.log_probabilities.push_back(lp);
    space.probabilities.push_back(std::exp(lp));
  };
  auto visit = [&](const Tokens& prefix, double lp, const std::vector<double>& dist) {
    Tokens term = prefix;
    term.push_back(spec.eos());
    emit(std::move(term), lp + std::log(dist[spec.eos()]));
    if (static_cast<int>(prefix.size()) + 1 == spec.max_len) {
      for (int t = 0; t < spec.vocab_size - 1; ++t) {
        Tokens full = prefix;
        full.push_back(t);
        emit(std::move(full), lp + std::log(dist[t]));
      }
    }
  };
  Tokens prefix;
  walk_prefixes(params, prompt, image, prefix, 0.0, visit);
  return space;
}

Divergence sequence_kl(const SequenceSpace& p, const SequenceSpace& q) {
  require(p.sequences.size() == q.sequences.size(), ErrorKind::domain,
          "sequence spaces differ in size");
  double s = 0.0;
  for (std::size_t i = 0; i < p.sequences.size(); ++i) {
    if (p.probabilities[i] == 0.0) continue;
    if (q.probabilities[i] == 0.0 && !std::isfinite(q.log_probabilities[i]))
      return Divergence::inf();
    s += p.probabilities[i] * (p.log_probabilities[i] - q.log_probabilities[i]);
  }
  return {std::max(s, 0.0), false};
}

Divergence sequence_kl_exact(const ParameterSet& p_params, const ParameterSet& q_params,
                             std::span<const int> prompt, const ImageFeatures& image) {
  require(p_params.spec == q_params.spec, ErrorKind::config, "policies have different specs");
  return sequence_kl(enumerate_sequence_space(p_params, prompt, image),
                     enumerate_sequence_space(q_params, prompt, image));
}

Divergence sequence_kl_chain_rule(const ParameterSet& p_params, const ParameterSet& q_params,
                                  std::span<const int> prompt, const ImageFeatures& image) {
  require(p_params.spec == q_params.spec, ErrorKind::config, "policies have different specs");
  check_enumerable(p_params.spec);
  double total = 0.0;
  bool infinite = false;
  auto visit = [&](const Tokens& prefix, double lp, const std::vector<double>& pdist) {
    const double weight = std::exp(lp);
    if (weight == 0.0) return;
    const auto qdist = policy::next_token_dist(q_params, prompt, image, prefix);
    const auto d = kl_raw(pdist, qdist);
    if (d.infinite) infinite = true;
    else total += weight * d.nats;
  };
  Tokens prefix;
  walk_prefixes(p_params, prompt, image, prefix, 0.0, visit);
  if (infinite) return Divergence::inf();
  return {total, false};
}

ImplicitRewardValue implicit_reward(const ParameterSet& trainee, const ParameterSet& reference,
                                    std::span<const int> prompt, const ImageFeatures& image,
                                    const Response& y, double beta) {
  require(trainee.spec == reference.spec, ErrorKind::config, "policies have different specs");
  ImplicitRewardValue v;
  v.r_hat = beta * (policy::response_log_prob(trainee, prompt, image, y) -
                    policy::response_log_prob(reference, prompt, image, y));
  return v;
}

OptimalPolicy optimal_policy_enumerate(const ParameterSet& ref, std::span<const int> prompt,
                                       const ImageFeatures& image, const RewardFn& reward,
                                       double beta) {
  require(beta > 0.0, ErrorKind::config, "beta must be > 0");
  const auto ref_space = enumerate_sequence_space(ref, prompt, image);
  const std::size_t n = ref_space.sequences.size();
  std::vector<double> r(n), score(n);
  double mx = -INFINITY;
  for (std::size_t i = 0; i < n; ++i) {
    r[i] = reward(ref_space.sequences[i]);
    require(std::isfinite(r[i]), ErrorKind::domain, "reward must be finite");
    score[i] = ref_space.log_probabilities[i] + r[i] / beta;
    mx = std::max(mx, score[i]);
  }
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(score[i] - mx);
  OptimalPolicy out;
  out.log_z = mx + std::log(s);
  out.z = std::exp(out.log_z);
  out.distribution.sequences = ref_space.sequences;
  out.distribution.log_probabilities.resize(n);
  out.distribution.probabilities.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double lp = score[i] - out.log_z;
    out.distribution.log_probabilities[i] = lp;
    out.distribution.probabilities[i] = std::exp(lp);
    const double resid =
        beta * (lp - ref_space.log_probabilities[i]) + beta * out.log_z - r[i];
    out.max_residual = std::max(out.max_residual, std::abs(resid));
  }
  return out;
}

}  // namespace opadpo::diag
