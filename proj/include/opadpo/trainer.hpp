// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "opadpo/checkpoint.hpp"
#include "opadpo/loss.hpp"
#include "opadpo/parallel.hpp"
#include "opadpo/policy.hpp"
#include "opadpo/record.hpp"
#include "opadpo/synth.hpp"

namespace opadpo::train {

using policy::ParameterSet;

/// Half-cosine decay from lr0 at step 0 to 0 at total_steps.
double cosine_lr(long long step, long long total_steps, double lr0);

struct AdamConfig {
  double moment1_decay = 0.9;
  double moment2_decay = 0.999;
  double stabilizer = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long long t = 0;

  static AdamState zeros(std::size_t n) {
    return {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0};
  }
};

/// One bias-corrected adaptive-moment descent step, in place. A non-finite
/// gradient throws numeric error and leaves params and state untouched.
void optimizer_step(ParameterSet& params, std::span<const double> gradient, AdamState& state,
                    double lr, const AdamConfig& cfg = {});

struct Ablation {
  bool enable_if = true;
  bool enable_anc = true;
  bool enable_hw = true;
  bool enable_iw = true;
  bool enable_opa = true;
};

struct TrainConfig {
  loss::LossConfig loss;
  double eps_tok = 0.01;
  int sft_epochs = 2;
  double sft_lr0 = 2e-2;
  int sft_batch = 32;
  int dpo_epochs = 4;
  double dpo_lr0 = 5e-5;
  int dpo_batch = 32;
  AdamConfig optimizer;
  Ablation ablation;
  std::uint64_t seed = 0;
  Exec exec = Exec::parallel;

  /// Learning rates and batch sizes of the full-scale setting.
  static TrainConfig full_scale();

  void validate() const;
  /// Loss config after the ablation switches (gamma1/gamma2 zeroed).
  loss::LossConfig effective_loss() const;
  /// Weight tables after the ablation switches.
  loss::WeightTables weight_tables() const;
  /// Stable hash of every field except exec.
  std::uint64_t hash() const;
};

struct LogRow {
  long long step = 0;
  Phase phase = Phase::opa;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double loss_lc = 0.0;
  double loss_if = 0.0;
  double loss_anc = 0.0;
  double mean_sigma_weight = 0.0;
  double mean_anchor_margin = 0.0;
};

std::string log_csv_header();
std::string log_csv(const std::vector<LogRow>& rows);

struct TrainResult {
  ParameterSet params;
  std::vector<LogRow> log;
  /// End of every epoch; the last one is the final checkpoint.
  std::vector<Checkpoint> checkpoints;
  /// Reference hash, checked after every phase-2 step.
  std::uint64_t reference_hash = 0;
};

/// Phase 1: minibatch SFT on (x, m, y_GT) and (x, m, y_Rev) of every record.
TrainResult train_opa(const ParameterSet& base, const std::vector<PreferenceRecord>& dataset,
                      const TrainConfig& cfg);

/// Phase 2 from pi_OPA, used as both initialisation and frozen reference.
TrainResult train_opa_dpo(const ParameterSet& opa, const std::vector<PreferenceRecord>& dataset,
                          const TrainConfig& cfg);

/// Naive DPO from the base policy with the base as reference.
TrainResult train_dpo_baseline(const ParameterSet& base,
                               const std::vector<PreferenceRecord>& dataset,
                               const TrainConfig& cfg);

struct Pipeline {
  TrainResult opa;  // empty when OPA is disabled
  TrainResult dpo;
};

/// Algorithm 1: phase 1 then phase 2, or naive DPO when enable_opa is off.
Pipeline train_pipeline(const ParameterSet& base, const std::vector<PreferenceRecord>& dataset,
                        const TrainConfig& cfg);

/// Warm-up that turns a random initialisation into a fluent but
/// hallucination-prone starting policy.
struct BaseConfig {
  int n_prior = 4096;
  int epochs = 20;
  double lr0 = 2e-2;
  int batch = 32;
  synth::PriorConfig prior;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Prior corpus built from fresh worlds.
std::vector<loss::SftExample> prior_corpus(const policy::PolicySpec& spec,
                                           const synth::WorldConfig& world,
                                           const BaseConfig& cfg);

ParameterSet make_base_policy(const policy::PolicySpec& spec, const synth::WorldConfig& world,
                              const BaseConfig& cfg, Exec exec = Exec::parallel);

/// Mean of log pi(y_GT | x, m) over the dataset.
double mean_gt_log_prob(const ParameterSet& params, const std::vector<PreferenceRecord>& dataset,
                        Exec exec = Exec::parallel);

}  // namespace opadpo::train
