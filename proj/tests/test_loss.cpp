// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "opadpo/error.hpp"
#include "opadpo/gradcheck.hpp"
#include "opadpo/loss.hpp"
#include "opadpo/rng.hpp"
#include "test_util.hpp"

namespace opadpo {
namespace {

using loss::LossConfig;
using loss::WeightTables;
using policy::ParameterSet;
using policy::PolicySpec;
using policy::Response;

constexpr double kLn2 = std::numbers::ln2;

double nls(double z) { return std::log1p(std::exp(-z)); }

ParameterSet perturbed(const ParameterSet& p, std::uint64_t seed, double scale) {
  ParameterSet q = p;
  Rng rng(seed);
  for (auto& v : q.values) v += rng.uniform(-scale, scale);
  return q;
}

struct Fixture {
  PolicySpec spec = testing::small_spec();
  ParameterSet ref = ParameterSet::random(spec, 1);
  ParameterSet trainee = perturbed(ref, 2, 0.3);
  std::vector<PreferenceRecord> records = testing::small_records(ref, 6);
  loss::Distortion distortion{loss::dataset_mean(records), 5};
  LossConfig cfg;
  WeightTables tables = WeightTables::standard();
};

/// sum_i w_i (log pi_theta - log pi_ref) computed token by token.
double ratio(const ParameterSet& t, const ParameterSet& r, const PreferenceRecord& rec,
             const policy::ImageFeatures& m, const Response& y, const std::vector<double>& w) {
  const auto a = policy::token_log_probs(t, rec.prompt, m, y);
  const auto b = policy::token_log_probs(r, rec.prompt, m, y);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += w[i] * (a[i] - b[i]);
  return s;
}

/// Per-token weights built straight from the spans and a score lookup.
template <class Score>
std::vector<double> manual_weights(const Response& y, const PreferenceRecord& rec, Score score) {
  std::vector<double> w(y.size(), 1.0);
  const auto& spans = y.sentence_spans();
  for (std::size_t s = 0; s < spans.size(); ++s)
    for (int i = spans[s].first; i < spans[s].second; ++i) w[i] = score(rec.annotations[s]);
  return w;
}

std::vector<double> ones(const Response& y) { return std::vector<double>(y.size(), 1.0); }

double hal_of(const SentenceAnnotation& a) {
  const double table[] = {1.0, 1.5, 2.0, 2.5};
  return table[a.s_hal - 1];
}

double img_of(const SentenceAnnotation& a) {
  return a.s_img == ImageLabel::image_recognition_error ? 3.0 : 1.0;
}

double lc_oracle(const Fixture& f, const ParameterSet& t) {
  double total = 0.0;
  for (const auto& r : f.records) {
    const double b = f.cfg.beta;
    const double z1 = b * ratio(t, f.ref, r, r.image, r.y_gt, ones(r.y_gt)) -
                      b * ratio(t, f.ref, r, r.image, r.y_gen, ones(r.y_gen));
    const double z2 = b * ratio(t, f.ref, r, r.image, *r.y_rev, manual_weights(*r.y_rev, r, hal_of)) -
                      b * ratio(t, f.ref, r, r.image, r.y_gen, manual_weights(r.y_gen, r, hal_of));
    total += nls(z1) + nls(z2);
  }
  return total / f.records.size();
}

double if_oracle(const Fixture& f, const ParameterSet& t) {
  double total = 0.0;
  for (const auto& r : f.records) {
    const double b = f.cfg.beta;
    const auto md = loss::distort_image(r.image, f.cfg.mask_ratio, f.distortion.dataset_mean,
                                        loss::record_mask_seed(f.distortion, r.record_id));
    const auto w = manual_weights(*r.y_rev, r, img_of);
    const double z1 = b * ratio(t, f.ref, r, r.image, r.y_gt, ones(r.y_gt)) -
                      b * ratio(t, f.ref, r, md, r.y_gt, ones(r.y_gt));
    const double z2 =
        b * ratio(t, f.ref, r, r.image, *r.y_rev, w) - b * ratio(t, f.ref, r, md, *r.y_rev, w);
    total += nls(z1) + nls(z2);
  }
  return total / f.records.size();
}

double anc_oracle(const Fixture& f, const ParameterSet& t) {
  double total = 0.0;
  for (const auto& r : f.records) {
    const double b = f.cfg.beta;
    total += nls(b * ratio(t, f.ref, r, r.image, r.y_gt, ones(r.y_gt)) - f.cfg.delta) +
             nls(b * ratio(t, f.ref, r, r.image, *r.y_rev, ones(*r.y_rev)) - f.cfg.delta);
  }
  return total / f.records.size();
}

std::vector<loss::PreferencePair> pairs_of(const std::vector<PreferenceRecord>& recs) {
  std::vector<loss::PreferencePair> out;
  for (const auto& r : recs) out.push_back({r.prompt, r.image, *r.y_rev, r.y_gen});
  return out;
}

TEST(LossStack, WeightTablesBitExact) {
  const auto t = WeightTables::standard();
  EXPECT_EQ(t.hal(1), 1.0);
  EXPECT_EQ(t.hal(2), 1.5);
  EXPECT_EQ(t.hal(3), 2.0);
  EXPECT_EQ(t.hal(4), 2.5);
  EXPECT_EQ(t.img(ImageLabel::correct), 1.0);
  EXPECT_EQ(t.img(ImageLabel::language_comprehension_error), 1.0);
  EXPECT_EQ(t.img(ImageLabel::image_recognition_error), 3.0);
  EXPECT_THROW(t.hal(0), Error);
  EXPECT_THROW(t.hal(5), Error);
}

TEST(LossStack, InitialisationIdentities) {
  Fixture f;
  const auto pairs = pairs_of(f.records);
  const auto& p = f.ref;
  const auto dpo = loss::dpo_loss(p, p, pairs, f.cfg);
  EXPECT_NEAR(dpo.value, kLn2, 1e-9);
  EXPECT_EQ(dpo.diagnostics.at("sigma_weight"), 0.5);
  EXPECT_NEAR(loss::lc_loss(p, p, f.records, f.tables, f.cfg).value, 2 * kLn2, 1e-9);
  EXPECT_NEAR(loss::if_loss(p, p, f.records, f.tables, f.cfg, f.distortion).value, 2 * kLn2, 1e-9);
  EXPECT_NEAR(loss::anc_loss(p, p, f.records, f.cfg).value, 2 * kLn2, 1e-9);
  const auto all = loss::opa_dpo_loss(p, p, f.records, f.tables, f.cfg, f.distortion);
  EXPECT_NEAR(all.value, 3.049848, 1e-6);
  EXPECT_NEAR(all.value, 4.4 * kLn2, 1e-9);
  EXPECT_EQ(all.diagnostics.at("sigma_weight"), 0.5);
}

TEST(LossStack, DpoKnownMargin) {
  // L_max = 1, chosen [0] and rejected [1]; log-ratios +5 and -5.
  const PolicySpec spec{4, 1, 2, 2, 2};
  const double q0 = 0.5 * std::exp(-5.0), q1 = 0.005 * std::exp(5.0);
  const auto t = testing::fixed_dist_policy(spec, {0.5, 0.005, 0.25, 0.245});
  const auto r = testing::fixed_dist_policy(spec, {q0, q1, 0.1, 1.0 - q0 - q1 - 0.1});
  const std::vector<loss::PreferencePair> batch{
      {{0}, {{0.0, 0.0}}, Response(spec, {0}), Response(spec, {1})}};
  const auto out = loss::dpo_loss(t, r, batch, LossConfig{});
  EXPECT_NEAR(out.value, 0.313262, 1e-6);
  EXPECT_NEAR(out.value, nls(1.0), 1e-12);
  EXPECT_LT(out.diagnostics.at("sigma_weight"), 0.5);
}

TEST(LossStack, AnchorKnownMargin) {
  const PolicySpec spec{4, 1, 2, 2, 2};
  const auto t = testing::fixed_dist_policy(spec, {0.5, 0.2, 0.2, 0.1});
  const double q0 = 0.5 * std::exp(-10.0);
  const auto r = testing::fixed_dist_policy(spec, {q0, 0.4, 0.3, 0.3 - q0});
  PreferenceRecord rec;
  rec.prompt = {0};
  rec.image = {{0.0, 0.0}};
  rec.y_gt = Response(spec, {0});
  rec.y_rev = Response(spec, {0});
  const std::vector<PreferenceRecord> batch{rec};
  const auto out = loss::anc_loss(t, r, batch, LossConfig{});
  EXPECT_NEAR(out.value, 0.626523, 1e-6);
  // Descent raises both anchored log-ratios: the gradient on the target
  // token's output bias is negative.
  EXPECT_LT(out.gradient[t.layout().out_bias + 0], 0.0);
}

TEST(LossStack, SftClosedForms) {
  const PolicySpec spec{4, 3, 2, 2, 2};
  const auto uniform = ParameterSet::zeros(spec);
  const std::vector<loss::SftExample> batch{{{0}, {{0.0, 0.0}}, Response(spec, {0, 1, 2})}};
  EXPECT_NEAR(loss::sft_loss(uniform, batch).value, 4.158883, 1e-6);

  auto sharp = ParameterSet::zeros(PolicySpec{4, 1, 2, 2, 2});
  sharp.values[sharp.layout().out_bias + 2] = 60.0;
  const std::vector<loss::SftExample> one{
      {{0}, {{0.0, 0.0}}, Response(sharp.spec, {2})}};
  EXPECT_NEAR(loss::sft_loss(sharp, one).value, 0.0, 1e-15);
}

TEST(LossStack, SftMatchesExplicitSum) {
  Fixture f;
  std::vector<loss::SftExample> batch;
  double expect = 0.0;
  for (const auto& r : f.records) {
    batch.push_back({r.prompt, r.image, r.y_gt});
    for (double lp : policy::token_log_probs(f.trainee, r.prompt, r.image, r.y_gt)) expect -= lp;
  }
  EXPECT_NEAR(loss::sft_loss(f.trainee, batch).value, expect / batch.size(), 1e-12);
}

TEST(LossStack, ComponentsMatchOracles) {
  Fixture f;
  EXPECT_NEAR(loss::lc_loss(f.trainee, f.ref, f.records, f.tables, f.cfg).value,
              lc_oracle(f, f.trainee), 1e-12);
  EXPECT_NEAR(loss::if_loss(f.trainee, f.ref, f.records, f.tables, f.cfg, f.distortion).value,
              if_oracle(f, f.trainee), 1e-12);
  EXPECT_NEAR(loss::anc_loss(f.trainee, f.ref, f.records, f.cfg).value, anc_oracle(f, f.trainee),
              1e-12);
}

TEST(LossStack, CombinedIsLinear) {
  Fixture f;
  f.cfg.gamma1 = 0.35;
  f.cfg.gamma2 = 0.7;
  f.cfg.delta = 0.05;
  const auto lc = loss::lc_loss(f.trainee, f.ref, f.records, f.tables, f.cfg);
  const auto im = loss::if_loss(f.trainee, f.ref, f.records, f.tables, f.cfg, f.distortion);
  const auto an = loss::anc_loss(f.trainee, f.ref, f.records, f.cfg);
  const auto all = loss::opa_dpo_loss(f.trainee, f.ref, f.records, f.tables, f.cfg, f.distortion);
  EXPECT_NEAR(all.value, lc.value + 0.35 * im.value + 0.7 * an.value, 1e-12);
  EXPECT_NEAR(all.diagnostics.at("lc"), lc.value, 1e-12);
  EXPECT_NEAR(all.diagnostics.at("if"), im.value, 1e-12);
  EXPECT_NEAR(all.diagnostics.at("anc"), an.value, 1e-12);
  for (std::size_t j = 0; j < all.gradient.size(); ++j)
    EXPECT_NEAR(all.gradient[j], lc.gradient[j] + 0.35 * im.gradient[j] + 0.7 * an.gradient[j],
                1e-12);
}

TEST(LossStack, DegenerateCombinationIsLc) {
  Fixture f;
  f.cfg.gamma1 = 0.0;
  f.cfg.gamma2 = 0.0;
  const auto lc = loss::lc_loss(f.trainee, f.ref, f.records, f.tables, f.cfg);
  const auto all = loss::opa_dpo_loss(f.trainee, f.ref, f.records, f.tables, f.cfg, f.distortion);
  EXPECT_EQ(all.value, lc.value);
  EXPECT_EQ(all.gradient, lc.gradient);
}

TEST(LossStack, UniformScoreScalesMargin) {
  Fixture f;
  for (int s = 1; s <= 4; ++s) {
    auto recs = f.records;
    for (auto& r : recs)
      for (auto& a : r.annotations) a.s_hal = s;
    const double w = f.tables.hal(s);
    for (const auto& r : recs) {
      const auto hw = loss::hal_weights(r.y_gen, r, f.tables);
      const auto& spans = r.y_gen.sentence_spans();
      for (int i = 0; i < r.y_gen.content_size(); ++i) EXPECT_EQ(hw[i], w);
      if (r.y_gen.terminated()) {
        EXPECT_EQ(hw.back(), 1.0);
      }
      // Inside the log sigma: weighted ratio = w * content ratio + EOS ratio.
      const auto a = policy::token_log_probs(f.trainee, r.prompt, r.image, r.y_gen);
      const auto b = policy::token_log_probs(f.ref, r.prompt, r.image, r.y_gen);
      double content = 0.0, eos = 0.0;
      for (int i = 0; i < r.y_gen.size(); ++i)
        (i < spans.back().second ? content : eos) += a[i] - b[i];
      EXPECT_NEAR(ratio(f.trainee, f.ref, r, r.image, r.y_gen, hw), w * content + eos, 1e-12);
    }
  }
}

TEST(LossStack, SingleSentenceScoreTwo) {
  const auto spec = testing::small_spec();
  PreferenceRecord r;
  r.y_gen = Response(spec, {0, 4, 6, 7});
  r.annotations = {SentenceAnnotation{2, ImageLabel::language_comprehension_error, {0, 3, 6}}};
  const auto w = loss::hal_weights(r.y_gen, r, WeightTables::standard());
  EXPECT_EQ(w, (std::vector<double>{1.5, 1.5, 1.5, 1.0}));
}

TEST(LossStack, ImageWeights) {
  const auto spec = testing::small_spec();
  PreferenceRecord r;
  r.y_gen = Response(spec, {0, 4, 6, 1, 3, 6, 7});
  r.annotations = {SentenceAnnotation{4, ImageLabel::correct, {0, 4, 6}},
                   SentenceAnnotation{2, ImageLabel::image_recognition_error, {1, 4, 6}}};
  const auto w = loss::img_weights(r.y_gen, r, WeightTables::standard());
  EXPECT_EQ(w, (std::vector<double>{1, 1, 1, 3, 3, 3, 1}));
  r.annotations[1].s_img = ImageLabel::correct;
  EXPECT_EQ(loss::img_weights(r.y_gen, r, WeightTables::standard()),
            std::vector<double>(7, 1.0));
}

TEST(LossStack, DecompositionRecombines) {
  Fixture f;
  for (const auto& pair : pairs_of(f.records)) {
    const std::vector<loss::PreferencePair> one{pair};
    const auto out = loss::dpo_loss(f.trainee, f.ref, one, f.cfg);
    const auto parts = loss::dpo_grad_decomposition(f.trainee, f.ref, pair, f.cfg);
    const auto g = parts.recombine(f.cfg.beta);
    for (std::size_t j = 0; j < g.size(); ++j) EXPECT_NEAR(g[j], -out.gradient[j], 1e-10);
    EXPECT_NEAR(parts.sigma_weight, out.diagnostics.at("sigma_weight"), 1e-15);
  }
  const auto same = loss::dpo_grad_decomposition(f.ref, f.ref, pairs_of(f.records)[0], f.cfg);
  EXPECT_EQ(same.sigma_weight, 0.5);
}

TEST(LossStack, SigmaWeightFallsWithMargin) {
  Fixture f;
  const auto pair = pairs_of(f.records)[0];
  const std::vector<loss::PreferencePair> one{pair};
  // Move the trainee along -grad: the margin grows and the weight drops.
  double last = 0.5;
  ParameterSet t = f.ref;
  for (int step = 0; step < 5; ++step) {
    const auto out = loss::dpo_loss(t, f.ref, one, f.cfg);
    for (std::size_t j = 0; j < t.size(); ++j) t.values[j] -= 5.0 * out.gradient[j];
    const double w = loss::dpo_grad_decomposition(t, f.ref, pair, f.cfg).sigma_weight;
    EXPECT_LT(w, last);
    last = w;
  }
}

TEST(LossStack, LossesFiniteAndNonNegative) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Fixture f;
    f.trainee = perturbed(f.ref, seed, 2.0);
    for (double v : {loss::lc_loss(f.trainee, f.ref, f.records, f.tables, f.cfg).value,
                     loss::if_loss(f.trainee, f.ref, f.records, f.tables, f.cfg, f.distortion).value,
                     loss::anc_loss(f.trainee, f.ref, f.records, f.cfg).value,
                     loss::dpo_loss(f.trainee, f.ref, pairs_of(f.records), f.cfg).value}) {
      EXPECT_TRUE(std::isfinite(v));
      EXPECT_GE(v, 0.0);
    }
  }
}

TEST(LossStack, GradientsMatchFiniteDifferences) {
  gradcheck::Settings s;
  s.n_seeds = 3;
  for (const auto& r : gradcheck::check_all(s)) {
    EXPECT_TRUE(r.pass) << gradcheck::to_string(r.loss) << " " << r.max_rel_err;
    EXPECT_LT(r.max_rel_err, 1e-4);
  }
}

TEST(LossStack, GradcheckCatchesInjectedBug) {
  gradcheck::Settings s;
  s.n_seeds = 1;
  s.inject_bug = true;
  const auto r = gradcheck::check_loss(gradcheck::LossKind::combined, s);
  EXPECT_FALSE(r.pass);
  EXPECT_EQ(r.worst_segment, "hidden_bias");
}

TEST(LossStack, SerialAndParallelAgreeBitwise) {
  Fixture f;
  const auto a =
      loss::opa_dpo_loss(f.trainee, f.ref, f.records, f.tables, f.cfg, f.distortion, Exec::serial);
  const auto b = loss::opa_dpo_loss(f.trainee, f.ref, f.records, f.tables, f.cfg, f.distortion,
                                    Exec::parallel);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.gradient, b.gradient);
}

TEST(LossStack, DistortImage) {
  policy::ImageFeatures m{{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}};
  policy::ImageFeatures mean{std::vector<double>(10, -1.0)};
  EXPECT_EQ(loss::distort_image(m, 0.0, mean, 3), m);
  EXPECT_EQ(loss::distort_image(m, 1.0, mean, 3), mean);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto d = loss::distort_image(m, 0.3, mean, seed);
    int changed = 0;
    for (int k = 0; k < 10; ++k) changed += d.features[k] != m.features[k];
    EXPECT_EQ(changed, 3);
    EXPECT_EQ(d, loss::distort_image(m, 0.3, mean, seed));
  }
  EXPECT_THROW(loss::distort_image(m, 1.5, mean, 0), Error);
}

TEST(LossStack, ErrorKinds) {
  Fixture f;
  auto kind = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::io;  // sentinel: nothing thrown
  };
  const auto other = ParameterSet::random(PolicySpec{8, 10, 6, 6, 9}, 0);
  EXPECT_EQ(kind([&] { loss::dpo_loss(other, f.ref, pairs_of(f.records), f.cfg); }),
            ErrorKind::config);
  EXPECT_EQ(kind([&] { loss::sft_loss(f.ref, std::vector<loss::SftExample>{}); }),
            ErrorKind::usage);
  auto bad = f.records;
  bad[0].annotations.push_back(bad[0].annotations.front());
  EXPECT_EQ(kind([&] { loss::lc_loss(f.trainee, f.ref, bad, f.tables, f.cfg); }),
            ErrorKind::data);
}

}  // namespace
}  // namespace opadpo
