// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "opadpo/parallel.hpp"
#include "opadpo/policy.hpp"
#include "opadpo/record.hpp"

namespace opadpo::loss {

using policy::ImageFeatures;
using policy::ParameterSet;
using policy::Response;
using policy::Tokens;

struct LossConfig {
  double beta = 0.1;
  double gamma1 = 0.2;
  double gamma2 = 1.0;
  double delta = 0.0;
  double mask_ratio = 0.3;

  void validate() const;
};

/// Sentence-score and error-label update weights.
struct WeightTables {
  std::array<double, 4> w_hal;  // index s_hal - 1
  std::array<double, 3> w_img;  // index by ImageLabel

  /// {1 -> 1.0, 2 -> 1.5, 3 -> 2.0, 4 -> 2.5} and
  /// {correct -> 1.0, language_comprehension_error -> 1.0,
  ///  image_recognition_error -> 3.0}.
  static WeightTables standard();
  /// All weights 1 (the "w/o hw&iw" ablation).
  static WeightTables flat();

  double hal(int s_hal) const;
  double img(ImageLabel label) const { return w_img[static_cast<int>(label)]; }
};

struct LossOutput {
  double value = 0.0;
  std::vector<double> gradient;
  std::map<std::string, double> diagnostics;
};

struct SftExample {
  Tokens prompt;
  ImageFeatures image;
  Response target;
};

struct PreferencePair {
  Tokens prompt;
  ImageFeatures image;
  Response chosen;
  Response rejected;
};

/// Where distorted images come from: seeded per record from `seed`.
struct Distortion {
  ImageFeatures dataset_mean;
  std::uint64_t seed = 0;
};

/// Batch mean of -log pi(y | x, m).
LossOutput sft_loss(const ParameterSet& trainee, std::span<const SftExample> batch,
                    Exec exec = Exec::parallel);

/// Batch mean of -log sigma(beta (D_w - D_l)), D = log pi_theta - log pi_ref.
/// Diagnostics: "sigma_weight" = mean sigma(r_l - r_w), the gradient weight,
/// and "reward_margin" = mean r_w - r_l.
LossOutput dpo_loss(const ParameterSet& trainee, const ParameterSet& reference,
                    std::span<const PreferencePair> batch, const LossConfig& cfg,
                    Exec exec = Exec::parallel);

struct DpoGradParts {
  double sigma_weight = 0.0;  // sigma(r_l - r_w)
  std::vector<double> pushup;   // grad log pi_theta(y_w)
  std::vector<double> pushdown; // grad log pi_theta(y_l)

  /// -grad loss = beta * sigma_weight * (pushup - pushdown).
  std::vector<double> recombine(double beta) const;
};

DpoGradParts dpo_grad_decomposition(const ParameterSet& trainee,
                                    const ParameterSet& reference,
                                    const PreferencePair& pair, const LossConfig& cfg);

/// Per-token hallucination weights of y_Gen (its own scores) and y_Rev
/// (scores of the originating sentence); EOS weight 1.
std::vector<double> hal_weights(const Response& y, const PreferenceRecord& rec,
                                const WeightTables& tables);
std::vector<double> img_weights(const Response& y, const PreferenceRecord& rec,
                                const WeightTables& tables);

/// Language-correction pairs: (y_GT over y_Gen) and hallucination-weighted
/// (y_Rev over y_Gen).
LossOutput lc_loss(const ParameterSet& trainee, const ParameterSet& opa_ref,
                   std::span<const PreferenceRecord> batch, const WeightTables& tables,
                   const LossConfig& cfg, Exec exec = Exec::parallel);

/// Replaces exactly round(mask_ratio * K) seeded coordinates with the mean.
ImageFeatures distort_image(const ImageFeatures& m, double mask_ratio,
                            const ImageFeatures& dataset_mean, std::uint64_t seed);

/// Mask seed for one record under a distortion source.
std::uint64_t record_mask_seed(const Distortion& d, std::int64_t record_id);

/// Image-focus pairs: the same response under m over m'.
LossOutput if_loss(const ParameterSet& trainee, const ParameterSet& opa_ref,
                   std::span<const PreferenceRecord> batch, const WeightTables& tables,
                   const LossConfig& cfg, const Distortion& distortion,
                   Exec exec = Exec::parallel);

/// Anchors holding beta * log-ratio of y_GT and y_Rev above delta.
LossOutput anc_loss(const ParameterSet& trainee, const ParameterSet& opa_ref,
                    std::span<const PreferenceRecord> batch, const LossConfig& cfg,
                    Exec exec = Exec::parallel);

/// lc + gamma1 * if + gamma2 * anc. Diagnostics carry "lc", "if", "anc",
/// "sigma_weight" (mean over the four pair terms) and "anchor_margin".
LossOutput opa_dpo_loss(const ParameterSet& trainee, const ParameterSet& opa_ref,
                        std::span<const PreferenceRecord> batch, const WeightTables& tables,
                        const LossConfig& cfg, const Distortion& distortion,
                        Exec exec = Exec::parallel);

/// Mean of the per-feature values across records.
ImageFeatures dataset_mean(std::span<const PreferenceRecord> records);

}  // namespace opadpo::loss
