// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#include "opadpo/trainer.hpp"

#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <sstream>

#include "opadpo/error.hpp"
#include "opadpo/format.hpp"
#include "opadpo/rng.hpp"

namespace opadpo::train {

double cosine_lr(long long step, long long total_steps, double lr0) {
  require(total_steps >= 1, ErrorKind::usage, "total_steps must be >= 1");
  require(step >= 0 && step <= total_steps, ErrorKind::usage,
          "step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  return lr0 * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                         static_cast<double>(total_steps)));
}

void optimizer_step(ParameterSet& params, std::span<const double> gradient, AdamState& state,
                    double lr, const AdamConfig& cfg) {
  const std::size_t n = params.values.size();
  require(gradient.size() == n, ErrorKind::shape, "gradient size does not match parameters");
  if (state.m.empty() && state.v.empty()) state = AdamState::zeros(n);
  require(state.m.size() == n && state.v.size() == n, ErrorKind::shape,
          "optimizer state size does not match parameters");
  for (double g : gradient)
    require(std::isfinite(g), ErrorKind::numeric, "non-finite gradient; step refused");
  const double b1 = cfg.moment1_decay, b2 = cfg.moment2_decay;
  const long long t = state.t + 1;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t j = 0; j < n; ++j) {
    state.m[j] = b1 * state.m[j] + (1.0 - b1) * gradient[j];
    state.v[j] = b2 * state.v[j] + (1.0 - b2) * gradient[j] * gradient[j];
    const double mhat = state.m[j] / c1;
    const double vhat = state.v[j] / c2;
    params.values[j] -= lr * mhat / (std::sqrt(vhat) + cfg.stabilizer);
  }
  state.t = t;
}

TrainConfig TrainConfig::full_scale() {
  TrainConfig c;
  c.sft_lr0 = 2e-5;
  c.dpo_lr0 = 1e-6;
  c.sft_batch = 128;
  c.dpo_batch = 32;
  return c;
}

void TrainConfig::validate() const {
  loss.validate();
  require(eps_tok > 0.0 && eps_tok < 1.0, ErrorKind::config, "eps_tok must lie in (0, 1)");
  require(sft_epochs >= 1 && dpo_epochs >= 1, ErrorKind::config, "epochs must be >= 1");
  require(sft_batch >= 1 && dpo_batch >= 1, ErrorKind::config, "batch sizes must be >= 1");
  require(sft_lr0 > 0.0 && dpo_lr0 > 0.0, ErrorKind::config, "learning rates must be > 0");
  require(optimizer.moment1_decay >= 0.0 && optimizer.moment1_decay < 1.0 &&
              optimizer.moment2_decay >= 0.0 && optimizer.moment2_decay < 1.0 &&
              optimizer.stabilizer > 0.0,
          ErrorKind::config, "invalid optimizer constants");
}

loss::LossConfig TrainConfig::effective_loss() const {
  auto l = loss;
  if (!ablation.enable_if) l.gamma1 = 0.0;
  if (!ablation.enable_anc) l.gamma2 = 0.0;
  return l;
}

loss::WeightTables TrainConfig::weight_tables() const {
  auto t = loss::WeightTables::standard();
  const auto flat = loss::WeightTables::flat();
  if (!ablation.enable_hw) t.w_hal = flat.w_hal;
  if (!ablation.enable_iw) t.w_img = flat.w_img;
  return t;
}

std::uint64_t TrainConfig::hash() const {
  std::ostringstream os;
  os << format_real(loss.beta) << ' ' << format_real(loss.gamma1) << ' '
     << format_real(loss.gamma2) << ' ' << format_real(loss.delta) << ' '
     << format_real(loss.mask_ratio) << ' ' << format_real(eps_tok) << ' ' << sft_epochs << ' '
     << format_real(sft_lr0) << ' ' << sft_batch << ' ' << dpo_epochs << ' '
     << format_real(dpo_lr0) << ' ' << dpo_batch << ' ' << format_real(optimizer.moment1_decay)
     << ' ' << format_real(optimizer.moment2_decay) << ' ' << format_real(optimizer.stabilizer)
     << ' ' << ablation.enable_if << ablation.enable_anc << ablation.enable_hw
     << ablation.enable_iw << ablation.enable_opa << ' ' << seed;
  const auto s = os.str();
  return fnv1a64(s.data(), s.size());
}

std::string log_csv_header() {
  return "step,phase,epoch,lr,loss,loss_lc,loss_if,loss_anc,mean_sigma_weight,"
         "mean_anchor_margin\n";
}

std::string log_csv(const std::vector<LogRow>& rows) {
  std::string out = log_csv_header();
  for (const auto& r : rows) {
    out += std::to_string(r.step) + ',' + to_string(r.phase) + ',' + std::to_string(r.epoch) +
           ',' + format_real(r.lr) + ',' + format_real(r.loss) + ',' + format_real(r.loss_lc) +
           ',' + format_real(r.loss_if) + ',' + format_real(r.loss_anc) + ',' +
           format_real(r.mean_sigma_weight) + ',' + format_real(r.mean_anchor_margin) + '\n';
  }
  return out;
}

namespace {

using BatchLoss = std::function<loss::LossOutput(
    const ParameterSet& current, std::span<const std::size_t> indices, int epoch)>;

struct LoopSpec {
  Phase phase = Phase::opa;
  std::size_t n_items = 0;
  int epochs = 1;
  int batch = 1;
  double lr0 = 0.0;
  std::uint64_t seed = 0;
  /// Shuffle stream; both phase-2 modes share one so they differ only in
  /// their starting point and reference.
  std::uint64_t stream = 0;
  std::uint64_t config_hash = 0;
  AdamConfig optimizer;
  /// Called after every step; may throw.
  std::function<void()> after_step;
};

/// Seeded Fisher-Yates permutation of [0, n).
std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.index(i)]);
  return idx;
}

double diag_or_zero(const loss::LossOutput& out, const char* key) {
  const auto it = out.diagnostics.find(key);
  return it == out.diagnostics.end() ? 0.0 : it->second;
}

TrainResult run_loop(ParameterSet params, const LoopSpec& spec, const BatchLoss& batch_loss) {
  require(spec.n_items >= 1, ErrorKind::usage, "empty training set");
  require(spec.epochs >= 1 && spec.batch >= 1, ErrorKind::config,
          "epochs and batch size must be >= 1");
  const long long per_epoch =
      static_cast<long long>((spec.n_items + spec.batch - 1) / spec.batch);
  const long long total = per_epoch * spec.epochs;
  TrainResult res;
  AdamState state = AdamState::zeros(params.size());
  long long step = 0;
  for (int epoch = 1; epoch <= spec.epochs; ++epoch) {
    const auto order =
        shuffled(spec.n_items, mix_seed({spec.seed, spec.stream,
                                         static_cast<std::uint64_t>(epoch)}));
    for (std::size_t start = 0; start < order.size(); start += spec.batch) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(spec.batch));
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const auto out = batch_loss(params, idx, epoch);
      require(std::isfinite(out.value), ErrorKind::numeric,
              std::string(to_string(spec.phase)) + " step " + std::to_string(step) +
                  ": non-finite loss");
      const double lr = cosine_lr(step, total, spec.lr0);
      optimizer_step(params, out.gradient, state, lr, spec.optimizer);
      LogRow row;
      row.step = step;
      row.phase = spec.phase;
      row.epoch = epoch;
      row.lr = lr;
      row.loss = out.value;
      row.loss_lc = diag_or_zero(out, "lc");
      row.loss_if = diag_or_zero(out, "if");
      row.loss_anc = diag_or_zero(out, "anc");
      row.mean_sigma_weight = diag_or_zero(out, "sigma_weight");
      row.mean_anchor_margin = diag_or_zero(out, "anchor_margin");
      res.log.push_back(row);
      ++step;
      if (spec.after_step) spec.after_step();
    }
    CheckpointMeta meta{spec.phase, static_cast<std::uint32_t>(epoch),
                        static_cast<std::uint64_t>(step), params.hash(), spec.config_hash};
    res.checkpoints.push_back({meta, params});
  }
  res.params = std::move(params);
  return res;
}

void require_complete(const std::vector<PreferenceRecord>& dataset) {
  require(!dataset.empty(), ErrorKind::usage, "empty dataset");
  for (const auto& r : dataset)
    require(r.revised(), ErrorKind::validation,
            "record " + std::to_string(r.record_id) + " has no revision (PENDING)");
}

TrainResult run_phase2(const ParameterSet& init, const ParameterSet& reference, Phase phase,
                       const std::vector<PreferenceRecord>& dataset, const TrainConfig& cfg) {
  cfg.validate();
  require_complete(dataset);
  require(init.spec == reference.spec, ErrorKind::config, "policies have different specs");
  const auto lcfg = cfg.effective_loss();
  const auto tables = cfg.weight_tables();
  const auto mean = loss::dataset_mean(dataset);
  const std::uint64_t ref_hash = reference.hash();
  LoopSpec spec;
  spec.phase = phase;
  spec.stream = static_cast<std::uint64_t>(Phase::opa_dpo);
  spec.n_items = dataset.size();
  spec.epochs = cfg.dpo_epochs;
  spec.batch = cfg.dpo_batch;
  spec.lr0 = cfg.dpo_lr0;
  spec.seed = cfg.seed;
  spec.config_hash = cfg.hash();
  spec.optimizer = cfg.optimizer;
  spec.after_step = [&] {
    require(reference.hash() == ref_hash, ErrorKind::numeric, "reference policy changed");
  };
  std::vector<PreferenceRecord> batch;
  auto res = run_loop(init.with_role(policy::Role::trainee), spec,
                      [&](const ParameterSet& current, std::span<const std::size_t> idx,
                          int epoch) {
                        batch.clear();
                        for (auto i : idx) batch.push_back(dataset[i]);
                        const loss::Distortion distortion{
                            mean, mix_seed({cfg.seed, 0x1f, static_cast<std::uint64_t>(epoch)})};
                        return loss::opa_dpo_loss(current, reference, batch, tables, lcfg,
                                                  distortion, cfg.exec);
                      });
  res.reference_hash = ref_hash;
  return res;
}

}  // namespace

TrainResult train_opa(const ParameterSet& base, const std::vector<PreferenceRecord>& dataset,
                      const TrainConfig& cfg) {
  cfg.validate();
  require_complete(dataset);
  std::vector<loss::SftExample> examples;
  examples.reserve(2 * dataset.size());
  for (const auto& r : dataset) {
    examples.push_back({r.prompt, r.image, r.y_gt});
    examples.push_back({r.prompt, r.image, *r.y_rev});
  }
  LoopSpec spec;
  spec.phase = Phase::opa;
  spec.stream = static_cast<std::uint64_t>(Phase::opa);
  spec.n_items = dataset.size();
  spec.epochs = cfg.sft_epochs;
  spec.batch = cfg.sft_batch;
  spec.lr0 = cfg.sft_lr0;
  spec.seed = cfg.seed;
  spec.config_hash = cfg.hash();
  spec.optimizer = cfg.optimizer;
  std::vector<loss::SftExample> batch;
  auto res = run_loop(base.with_role(policy::Role::trainee), spec,
                      [&](const ParameterSet& current, std::span<const std::size_t> idx, int) {
                        batch.clear();
                        for (auto i : idx) {
                          batch.push_back(examples[2 * i]);
                          batch.push_back(examples[2 * i + 1]);
                        }
                        auto out = loss::sft_loss(current, batch, cfg.exec);
                        // Two loss terms per record.
                        out.value *= 2.0;
                        for (auto& g : out.gradient) g *= 2.0;
                        return out;
                      });
  res.params.role = policy::Role::opa;
  return res;
}

TrainResult train_opa_dpo(const ParameterSet& opa, const std::vector<PreferenceRecord>& dataset,
                          const TrainConfig& cfg) {
  const ParameterSet reference = opa.with_role(policy::Role::reference);
  return run_phase2(opa, reference, Phase::opa_dpo, dataset, cfg);
}

TrainResult train_dpo_baseline(const ParameterSet& base,
                               const std::vector<PreferenceRecord>& dataset,
                               const TrainConfig& cfg) {
  const ParameterSet reference = base.with_role(policy::Role::reference);
  return run_phase2(base, reference, Phase::dpo, dataset, cfg);
}

Pipeline train_pipeline(const ParameterSet& base, const std::vector<PreferenceRecord>& dataset,
                        const TrainConfig& cfg) {
  Pipeline p;
  if (!cfg.ablation.enable_opa) {
    p.dpo = train_dpo_baseline(base, dataset, cfg);
    return p;
  }
  p.opa = train_opa(base, dataset, cfg);
  p.dpo = train_opa_dpo(p.opa.params, dataset, cfg);
  return p;
}

void BaseConfig::validate() const {
  require(n_prior >= 1 && epochs >= 1 && batch >= 1 && lr0 > 0.0, ErrorKind::config,
          "invalid base warm-up settings");
  require(prior.popular_bias >= 0.0 && prior.popular_bias <= 1.0 && prior.phantom_prob >= 0.0 &&
              prior.phantom_prob <= 1.0,
          ErrorKind::config, "prior probabilities must lie in [0, 1]");
}

std::vector<loss::SftExample> prior_corpus(const policy::PolicySpec& spec,
                                           const synth::WorldConfig& world,
                                           const BaseConfig& cfg) {
  cfg.validate();
  const auto layout = synth::TokenLayout::make(spec, world);
  // A stream of its own so prior worlds never coincide with dataset worlds.
  const std::uint64_t seed = mix_seed({cfg.seed, 0xba5e});
  std::vector<loss::SftExample> out;
  out.reserve(cfg.n_prior);
  for (int i = 0; i < cfg.n_prior; ++i) {
    const auto scene = synth::make_scene(seed, i, world);
    out.push_back({{layout.describe()},
                   scene.image,
                   synth::prior_response(spec, layout, scene.world, cfg.prior,
                                         synth::record_seed(seed, i, 7))});
  }
  return out;
}

ParameterSet make_base_policy(const policy::PolicySpec& spec, const synth::WorldConfig& world,
                              const BaseConfig& cfg, Exec exec) {
  const auto corpus = prior_corpus(spec, world, cfg);
  LoopSpec ls;
  ls.phase = Phase::base;
  ls.stream = static_cast<std::uint64_t>(Phase::base);
  ls.n_items = corpus.size();
  ls.epochs = cfg.epochs;
  ls.batch = cfg.batch;
  ls.lr0 = cfg.lr0;
  ls.seed = cfg.seed;
  std::vector<loss::SftExample> batch;
  auto res = run_loop(ParameterSet::random(spec, cfg.seed), ls,
                      [&](const ParameterSet& current, std::span<const std::size_t> idx, int) {
                        batch.clear();
                        for (auto i : idx) batch.push_back(corpus[i]);
                        return loss::sft_loss(current, batch, exec);
                      });
  res.params.role = policy::Role::base;
  return res.params;
}

double mean_gt_log_prob(const ParameterSet& params, const std::vector<PreferenceRecord>& dataset,
                        Exec exec) {
  require(!dataset.empty(), ErrorKind::usage, "empty dataset");
  std::vector<double> lp(dataset.size());
  for_each_index(dataset.size(), exec, [&](std::size_t i) {
    const auto& r = dataset[i];
    lp[i] = policy::response_log_prob(params, r.prompt, r.image, r.y_gt);
  });
  double s = 0.0;
  for (double v : lp) s += v;
  return s / static_cast<double>(dataset.size());
}

}  // namespace opadpo::train
