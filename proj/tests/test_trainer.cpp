// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "opadpo/checkpoint.hpp"
#include "opadpo/diagnostics.hpp"
#include "opadpo/error.hpp"
#include "opadpo/parallel.hpp"
#include "opadpo/trainer.hpp"
#include "test_util.hpp"

namespace opadpo {
namespace {

using policy::ParameterSet;
using train::TrainConfig;

constexpr double kInit = 4.4 * std::numbers::ln2;

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::io;
}

/// Shared small setup: a warmed-up base and 64 records.
struct Setup {
  policy::PolicySpec spec = testing::small_spec();
  ParameterSet base;
  std::vector<PreferenceRecord> data;
  TrainConfig cfg;

  Setup() {
    train::BaseConfig bc;
    bc.n_prior = 256;
    bc.epochs = 3;
    base = train::make_base_policy(spec, testing::small_world(), bc);
    data = testing::small_records(base, 64);
    cfg.sft_batch = 16;
    cfg.dpo_batch = 16;
    cfg.sft_epochs = 2;
    cfg.dpo_epochs = 2;
    cfg.dpo_lr0 = 1e-3;
  }

  static const Setup& get() {
    static const Setup s;
    return s;
  }
};

double mean_rev_avg_lp(const ParameterSet& p, const std::vector<PreferenceRecord>& data) {
  std::vector<PreferenceRecord> sig = data;
  return diag::response_avg_log_prob(p, diag::revised_responses(sig)).mean();
}

TEST(Trainer, CosineSchedule) {
  EXPECT_EQ(train::cosine_lr(0, 10, 0.3), 0.3);
  EXPECT_NEAR(train::cosine_lr(10, 10, 0.3), 0.0, 1e-17);
  EXPECT_NEAR(train::cosine_lr(5, 10, 0.3), 0.15, 1e-16);
  EXPECT_EQ(kind_of([] { train::cosine_lr(11, 10, 0.3); }), ErrorKind::usage);
  EXPECT_EQ(kind_of([] { train::cosine_lr(-1, 10, 0.3); }), ErrorKind::usage);
  EXPECT_EQ(kind_of([] { train::cosine_lr(0, 0, 0.3); }), ErrorKind::usage);
}

TEST(Trainer, AdamZeroGradient) {
  auto p = ParameterSet::random(testing::small_spec(), 1);
  const auto before = p.values;
  auto st = train::AdamState::zeros(p.size());
  st.m.assign(p.size(), 0.5);
  st.v.assign(p.size(), 0.25);
  st.t = 3;
  const std::vector<double> g(p.size(), 0.0);
  train::optimizer_step(p, g, st, 0.0, {});
  EXPECT_EQ(p.values, before);
  EXPECT_DOUBLE_EQ(st.m[0], 0.45);
  EXPECT_DOUBLE_EQ(st.v[0], 0.25 * 0.999);
  EXPECT_EQ(st.t, 4);
}

TEST(Trainer, AdamSingleStepFormula) {
  auto p = ParameterSet::zeros(policy::PolicySpec{3, 1, 1, 1, 1});
  std::vector<double> g(p.size());
  for (std::size_t j = 0; j < g.size(); ++j) g[j] = 0.1 * (static_cast<double>(j) - 4.0);
  auto st = train::AdamState::zeros(p.size());
  train::optimizer_step(p, g, st, 0.01, {});
  for (std::size_t j = 0; j < g.size(); ++j) {
    // m_hat = g, v_hat = g^2 after bias correction.
    const double m = 0.1 * g[j] / 0.1, v = 0.001 * g[j] * g[j] / 0.001;
    EXPECT_NEAR(p.values[j], -0.01 * m / (std::sqrt(v) + 1e-8), 1e-15) << j;
  }
}

TEST(Trainer, AdamConstantGradientStepTendsToLr) {
  auto p = ParameterSet::zeros(policy::PolicySpec{3, 1, 1, 1, 1});
  const std::vector<double> g(p.size(), -0.7);
  auto st = train::AdamState::zeros(p.size());
  double prev = 0.0;
  for (int i = 0; i < 2000; ++i) {
    prev = p.values[0];
    train::optimizer_step(p, g, st, 1e-3, {});
  }
  EXPECT_NEAR(p.values[0] - prev, 1e-3, 1e-9);
}

TEST(Trainer, AdamRefusesNonFinite) {
  auto p = ParameterSet::random(testing::small_spec(), 1);
  const auto before = p;
  auto st = train::AdamState::zeros(p.size());
  std::vector<double> g(p.size(), 0.1);
  g[17] = std::numeric_limits<double>::infinity();
  EXPECT_EQ(kind_of([&] { train::optimizer_step(p, g, st, 0.1, {}); }), ErrorKind::numeric);
  EXPECT_EQ(p.values, before.values);
  EXPECT_EQ(st.t, 0);
  EXPECT_EQ(st.m, std::vector<double>(p.size(), 0.0));
}

TEST(Trainer, OpaPhase) {
  const auto& s = Setup::get();
  const auto r = train::train_opa(s.base, s.data, s.cfg);
  const long long total = 8;  // ceil(64 / 16) * 2
  ASSERT_EQ(static_cast<long long>(r.log.size()), total);
  for (const auto& row : r.log) {
    EXPECT_EQ(row.lr, train::cosine_lr(row.step, total, s.cfg.sft_lr0));
    EXPECT_EQ(row.phase, Phase::opa);
  }
  ASSERT_EQ(r.checkpoints.size(), 2u);
  EXPECT_EQ(r.checkpoints.back().params.values, r.params.values);
  EXPECT_EQ(r.checkpoints.back().meta.param_hash, r.params.hash());
  EXPECT_EQ(r.checkpoints.back().meta.step, 8u);
  EXPECT_GT(mean_rev_avg_lp(r.params, s.data), mean_rev_avg_lp(s.base, s.data));
}

TEST(Trainer, RejectsBadInputs) {
  const auto& s = Setup::get();
  auto cfg = s.cfg;
  cfg.sft_epochs = 0;
  EXPECT_EQ(kind_of([&] { train::train_opa(s.base, s.data, cfg); }), ErrorKind::config);
  auto pending = s.data;
  pending[3].y_rev.reset();
  EXPECT_EQ(kind_of([&] { train::train_opa(s.base, pending, s.cfg); }), ErrorKind::validation);
  EXPECT_EQ(kind_of([&] { train::train_opa(s.base, {}, s.cfg); }), ErrorKind::usage);
}

TEST(Trainer, SftOnOwnCertainOutputBarelyMoves) {
  // A near-deterministic policy whose greedy output is [EOS].
  const auto spec = testing::small_spec();
  std::vector<double> probs(8, 1e-9);
  probs[7] = 1.0 - 7e-9;
  const auto certain = testing::fixed_dist_policy(spec, probs);
  const auto& s = Setup::get();
  auto own = s.data;
  for (auto& r : own) r.y_gt = r.y_rev.value() = policy::Response(spec, {7});
  auto norm = [&](const std::vector<PreferenceRecord>& recs) {
    std::vector<loss::SftExample> ex;
    for (const auto& r : recs) ex.push_back({r.prompt, r.image, r.y_gt});
    double n = 0.0;
    for (double g : loss::sft_loss(certain, ex).gradient) n += g * g;
    return std::sqrt(n);
  };
  EXPECT_LT(norm(own), 1e-3 * norm(s.data));
}

TEST(Trainer, PhaseTwoContract) {
  const auto& s = Setup::get();
  const auto opa = train::train_opa(s.base, s.data, s.cfg);
  const auto r = train::train_opa_dpo(opa.params, s.data, s.cfg);
  EXPECT_NEAR(r.log.front().loss, kInit, 1e-9);
  EXPECT_EQ(r.log.front().mean_sigma_weight, 0.5);
  EXPECT_EQ(r.reference_hash, opa.params.hash());
  for (const auto& row : r.log) EXPECT_EQ(row.phase, Phase::opa_dpo);
  double last_epoch = 0.0;
  int n = 0;
  for (const auto& row : r.log)
    if (row.epoch == s.cfg.dpo_epochs) {
      last_epoch += row.loss;
      ++n;
    }
  EXPECT_LE(last_epoch / n, kInit);
}

TEST(Trainer, PipelineChainsPhases) {
  const auto& s = Setup::get();
  const auto p = train::train_pipeline(s.base, s.data, s.cfg);
  EXPECT_EQ(p.dpo.reference_hash, p.opa.params.hash());
  EXPECT_EQ(p.dpo.params.values, train::train_opa_dpo(p.opa.params, s.data, s.cfg).params.values);
  auto off = s.cfg;
  off.ablation.enable_opa = false;
  const auto naive = train::train_pipeline(s.base, s.data, off);
  EXPECT_TRUE(naive.opa.log.empty());
  EXPECT_EQ(naive.dpo.reference_hash, s.base.hash());
}

TEST(Trainer, NoIfNoAncIsPureLc) {
  const auto& s = Setup::get();
  auto a = s.cfg;
  a.ablation.enable_if = false;
  a.ablation.enable_anc = false;
  auto b = s.cfg;
  b.loss.gamma1 = 0.0;
  b.loss.gamma2 = 0.0;
  const auto ra = train::train_opa_dpo(s.base, s.data, a);
  const auto rb = train::train_opa_dpo(s.base, s.data, b);
  EXPECT_EQ(ra.params.values, rb.params.values);
  EXPECT_NEAR(ra.log.front().loss, 2 * std::numbers::ln2, 1e-12);
  for (const auto& row : ra.log) {
    EXPECT_EQ(row.loss_if, 0.0);
    EXPECT_EQ(row.loss_anc, 0.0);
    EXPECT_EQ(row.loss, row.loss_lc);
  }
}

TEST(Trainer, FlatWeightsAblation) {
  TrainConfig c;
  c.ablation.enable_hw = false;
  EXPECT_EQ(c.weight_tables().w_hal, (std::array<double, 4>{1, 1, 1, 1}));
  EXPECT_EQ(c.weight_tables().w_img, loss::WeightTables::standard().w_img);
  c.ablation.enable_iw = false;
  EXPECT_EQ(c.weight_tables().w_img, (std::array<double, 3>{1, 1, 1}));
}

TEST(Trainer, NaiveDpoEqualsPhaseTwoFromBase) {
  const auto& s = Setup::get();
  const auto a = train::train_dpo_baseline(s.base, s.data, s.cfg);
  const auto b = train::train_opa_dpo(s.base, s.data, s.cfg);
  EXPECT_EQ(a.params.values, b.params.values);
  EXPECT_EQ(a.log.back().phase, Phase::dpo);
}

TEST(Trainer, SigmaWeightDecaysUnderLargeSteps) {
  const auto& s = Setup::get();
  auto cfg = s.cfg;
  cfg.dpo_lr0 = 5e-2;
  cfg.dpo_epochs = 1;
  cfg.dpo_batch = 4;
  const auto r = train::train_dpo_baseline(s.base, s.data, cfg);
  EXPECT_EQ(r.log.front().mean_sigma_weight, 0.5);
  double tail = 0.0;
  for (std::size_t i = r.log.size() - 4; i < r.log.size(); ++i) tail += r.log[i].mean_sigma_weight;
  EXPECT_LT(tail / 4, 0.3);
}

TEST(Trainer, DeterministicAcrossExecutionWidths) {
  const auto& s = Setup::get();
  auto serial = s.cfg;
  serial.exec = Exec::serial;
  const auto a = train::train_pipeline(s.base, s.data, serial);
  set_num_threads(3);
  const auto b = train::train_pipeline(s.base, s.data, s.cfg);
  set_num_threads(1);
  const auto c = train::train_pipeline(s.base, s.data, s.cfg);
  set_num_threads(0);
  EXPECT_EQ(a.dpo.params.hash(), b.dpo.params.hash());
  EXPECT_EQ(a.dpo.params.hash(), c.dpo.params.hash());
  EXPECT_EQ(train::log_csv(a.dpo.log), train::log_csv(b.dpo.log));
  EXPECT_EQ(train::log_csv(a.opa.log), train::log_csv(c.opa.log));
  EXPECT_EQ(serial.hash(), s.cfg.hash());
  auto other = s.cfg;
  other.loss.beta = 0.2;
  EXPECT_NE(other.hash(), s.cfg.hash());
}

TEST(Trainer, LogCsv) {
  train::LogRow row;
  row.step = 3;
  row.phase = Phase::opa_dpo;
  row.epoch = 1;
  row.lr = 5e-5;
  row.loss = std::log(2.0);
  const auto csv = train::log_csv({row});
  EXPECT_EQ(csv, train::log_csv_header() + "3,opa_dpo,1,5e-05,0.693147181,0,0,0,0,0\n");
}

TEST(Checkpoint, RoundTrip) {
  const auto p = ParameterSet::random(testing::small_spec(), 4, policy::Role::opa);
  const Checkpoint ck{{Phase::opa, 2, 99, p.hash(), 0xabcdef}, p};
  const auto bytes = encode_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 4), "OPDP");
  EXPECT_EQ(bytes.size(), 4 + 2 + 20 + 1 + 8 + 1 + 4 + 8 + 8 + 8 + 8 * p.size());
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.meta, ck.meta);
  EXPECT_EQ(back.params.values, p.values);
  EXPECT_EQ(back.params.spec, p.spec);
  EXPECT_EQ(back.params.role, policy::Role::opa);
}

TEST(Checkpoint, CorruptionIsDetected) {
  const auto p = ParameterSet::random(testing::small_spec(), 4);
  const auto bytes = encode_checkpoint({{Phase::base, 0, 0, p.hash(), 0}, p});
  auto flipped = bytes;
  flipped[flipped.size() - 3] ^= 0x10;
  EXPECT_EQ(kind_of([&] { decode_checkpoint(flipped); }), ErrorKind::parse);
  EXPECT_EQ(kind_of([&] { decode_checkpoint(bytes.substr(0, bytes.size() - 8)); }),
            ErrorKind::parse);
  EXPECT_EQ(kind_of([&] { decode_checkpoint("XXXX" + bytes.substr(4)); }), ErrorKind::parse);
}

TEST(Checkpoint, Files) {
  const auto dir = std::filesystem::temp_directory_path() / "opadpo_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "a.ckpt").string();
  const auto p = ParameterSet::random(testing::small_spec(), 4);
  save_checkpoint(path, {{Phase::base, 0, 0, p.hash(), 0}, p});
  EXPECT_EQ(load_checkpoint(path).params.values, p.values);
  EXPECT_FALSE(std::filesystem::exists(path + ".tmp"));
  EXPECT_EQ(kind_of([&] { load_checkpoint((dir / "missing.ckpt").string()); }),
            ErrorKind::missing_input);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace opadpo
