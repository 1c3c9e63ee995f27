// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace opadpo::policy {

/// Architecture constants of the toy multimodal policy.
///
/// Token ids C-1 and C-2 are reserved for EOS and SEP.
struct PolicySpec {
  int vocab_size = 0;  // C
  int max_len = 0;     // L_max
  int image_dim = 0;   // K
  int embed_dim = 0;   // d
  int hidden_dim = 0;  // h

  int eos() const { return vocab_size - 1; }
  int sep() const { return vocab_size - 2; }

  /// Throws config error when an invariant is violated.
  void validate() const;

  friend bool operator==(const PolicySpec&, const PolicySpec&) = default;
};

/// Named contiguous slices of the flat parameter vector, in storage order.
struct Layout {
  std::size_t tok_embed = 0;    // C x d
  std::size_t image_proj = 0;   // K x d
  std::size_t pos_embed = 0;    // L_max x d
  std::size_t mix_context = 0;  // d x h
  std::size_t mix_last = 0;     // d x h
  std::size_t hidden_bias = 0;  // h
  std::size_t out_weight = 0;   // h x C
  std::size_t out_bias = 0;     // C
  std::size_t total = 0;

  static Layout of(const PolicySpec& spec);
};

enum class Role : std::uint8_t { base = 0, reference = 1, opa = 2, trainee = 3 };

const char* to_string(Role role);
Role role_from_string(const std::string& s);

/// The policy: architecture plus one flat vector of finite reals.
/// Evaluation is a pure function of these values.
struct ParameterSet {
  PolicySpec spec;
  std::vector<double> values;
  Role role = Role::base;

  static ParameterSet zeros(const PolicySpec& spec, Role role = Role::base);
  /// Uniform in [-0.08, 0.08] from a seeded generator.
  static ParameterSet random(const PolicySpec& spec, std::uint64_t seed,
                             Role role = Role::base);

  Layout layout() const { return Layout::of(spec); }
  std::size_t size() const { return values.size(); }
  bool all_finite() const;
  /// Canonical little-endian byte hash of the values.
  std::uint64_t hash() const;

  ParameterSet with_role(Role r) const {
    ParameterSet p = *this;
    p.role = r;
    return p;
  }
};

struct ImageFeatures {
  std::vector<double> features;

  friend bool operator==(const ImageFeatures&, const ImageFeatures&) = default;
};

using Tokens = std::vector<int>;
using Span = std::pair<int, int>;  // [start, end)

/// Default segmentation: consecutive three-token sentences over the non-EOS
/// tokens, with a trailing one- or two-token remainder folded into the
/// previous sentence (or forming the only sentence when shorter than three).
std::vector<Span> triple_spans(int content_len);

/// A token sequence with its sentence segmentation.
class Response {
 public:
  Response() = default;

  /// Validates against spec; throws domain/length errors.
  Response(const PolicySpec& spec, Tokens tokens, std::vector<Span> spans);
  /// Same, using triple_spans for the segmentation.
  Response(const PolicySpec& spec, Tokens tokens);

  const Tokens& tokens() const { return tokens_; }
  const std::vector<Span>& sentence_spans() const { return spans_; }
  bool terminated() const { return terminated_; }
  int size() const { return static_cast<int>(tokens_.size()); }
  /// Number of non-EOS tokens.
  int content_size() const { return terminated_ ? size() - 1 : size(); }
  int sentence_count() const { return static_cast<int>(spans_.size()); }

  /// Expands one weight per sentence into one weight per token; EOS gets
  /// `eos_weight`.
  std::vector<double> expand_sentence_weights(std::span<const double> per_sentence,
                                              double eos_weight = 1.0) const;

  friend bool operator==(const Response&, const Response&) = default;

 private:
  Tokens tokens_;
  std::vector<Span> spans_;
  bool terminated_ = false;
};

/// Softmax over the policy logits for the next token after `prefix`.
std::vector<double> next_token_dist(const ParameterSet& params,
                                    std::span<const int> prompt,
                                    const ImageFeatures& image,
                                    std::span<const int> prefix);

/// Next-token distributions at every position of y (one forward pass).
std::vector<std::vector<double>> position_distributions(const ParameterSet& params,
                                                        std::span<const int> prompt,
                                                        const ImageFeatures& image,
                                                        const Response& y);

/// log pi(y_i | x, m, y_<i) for every position of y.
std::vector<double> token_log_probs(const ParameterSet& params,
                                    std::span<const int> prompt,
                                    const ImageFeatures& image,
                                    const Response& y);

/// log pi(y | x, m), in nats.
double response_log_prob(const ParameterSet& params, std::span<const int> prompt,
                         const ImageFeatures& image, const Response& y);

/// sum_i w_i log pi(y_i | x, m, y_<i).
double weighted_log_prob(const ParameterSet& params, std::span<const int> prompt,
                         const ImageFeatures& image, const Response& y,
                         std::span<const double> weights);

/// Adds the gradient of sum_i w_i log pi(y_i | ...) into `grad` (size of
/// the parameter vector). This is the one reverse-mode kernel every loss
/// uses.
void accumulate_weighted_grad(const ParameterSet& params, std::span<const int> prompt,
                              const ImageFeatures& image, const Response& y,
                              std::span<const double> weights, std::span<double> grad);

std::vector<double> grad_weighted_log_prob(const ParameterSet& params,
                                           std::span<const int> prompt,
                                           const ImageFeatures& image, const Response& y,
                                           std::span<const double> weights);

struct SamplingConfig {
  int top_k = 30;  // clamped to C
  double top_p = 0.95;
  double temperature = 1.0;
  bool greedy = false;

  static SamplingConfig greedy_decoding() {
    SamplingConfig s;
    s.greedy = true;
    return s;
  }
  void validate() const;
};

/// Applies temperature, top-k and top-p to a distribution and returns the
/// renormalised candidate set (token id, probability), highest first.
std::vector<std::pair<int, double>> filtered_candidates(std::span<const double> dist,
                                                        const SamplingConfig& cfg);

/// Argmax with lowest-index tie-break.
int argmax_token(std::span<const double> dist);

/// Autoregressive draw; stops at EOS or L_max. Deterministic given seed.
Response sample_response(const ParameterSet& params, std::span<const int> prompt,
                         const ImageFeatures& image, const SamplingConfig& cfg,
                         std::uint64_t seed);

}  // namespace opadpo::policy
