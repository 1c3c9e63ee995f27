// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#include "opadpo/loss.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "opadpo/error.hpp"
#include "opadpo/rng.hpp"

namespace opadpo::loss {

void LossConfig::validate() const {
  require(beta > 0.0 && std::isfinite(beta), ErrorKind::config, "beta must be > 0");
  require(gamma1 >= 0.0 && gamma2 >= 0.0, ErrorKind::config, "gamma1/gamma2 must be >= 0");
  require(std::isfinite(delta), ErrorKind::config, "delta must be finite");
  require(mask_ratio >= 0.0 && mask_ratio <= 1.0, ErrorKind::config,
          "mask_ratio must lie in [0, 1]");
}

WeightTables WeightTables::standard() {
  return WeightTables{{1.0, 1.5, 2.0, 2.5}, {1.0, 1.0, 3.0}};
}

WeightTables WeightTables::flat() { return WeightTables{{1.0, 1.0, 1.0, 1.0}, {1.0, 1.0, 1.0}}; }

double WeightTables::hal(int s_hal) const {
  require(s_hal >= 1 && s_hal <= 4, ErrorKind::data,
          "hallucination score " + std::to_string(s_hal) + " outside 1..4");
  return w_hal[s_hal - 1];
}

namespace {

/// -log sigma(z), computed without overflow.
double neg_log_sigmoid(double z) {
  return z >= 0.0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

enum Group { g_sft = 0, g_dpo, g_lc, g_if, g_anc, g_count };

/// One scored (prompt, image, response) evaluation within a record.
struct Eval {
  const Tokens* prompt;
  const ImageFeatures* image;
  const Response* y;
};

/// coef * sum_i w_i (log pi_theta(y_i) - log pi_ref(y_i)) for one Eval.
struct Part {
  int eval;
  double coef;
  std::vector<double> weights;
};

/// scale * -log sigma(sum(parts) + offset).
struct Term {
  Group group;
  double scale;
  double offset;
  std::vector<Part> parts;
  bool pair;  // preference pair (reports a sigma weight) vs anchor
  bool rev_pair = false;
};

struct Problem {
  std::vector<Eval> evals;
  std::vector<Term> terms;
};

struct RecordResult {
  double value = 0.0;
  std::array<double, g_count> group{};
  double sigma_sum = 0.0;
  int sigma_n = 0;
  double sigma_rev_sum = 0.0;
  int sigma_rev_n = 0;
  double anchor_sum = 0.0;
  int anchor_n = 0;
  double margin_sum = 0.0;
  std::vector<double> grad;
};

RecordResult solve(const ParameterSet& trainee, const ParameterSet& ref, const Problem& pb) {
  RecordResult out;
  out.grad.assign(trainee.values.size(), 0.0);
  const std::size_t ne = pb.evals.size();
  std::vector<std::vector<double>> lp_t(ne), lp_r(ne), coeff(ne);
  for (std::size_t e = 0; e < ne; ++e) {
    const auto& ev = pb.evals[e];
    lp_t[e] = policy::token_log_probs(trainee, *ev.prompt, *ev.image, *ev.y);
    lp_r[e] = policy::token_log_probs(ref, *ev.prompt, *ev.image, *ev.y);
    coeff[e].assign(lp_t[e].size(), 0.0);
  }
  for (const auto& term : pb.terms) {
    double z = term.offset;
    for (const auto& part : term.parts) {
      double ratio = 0.0;
      for (std::size_t i = 0; i < part.weights.size(); ++i)
        ratio += part.weights[i] * (lp_t[part.eval][i] - lp_r[part.eval][i]);
      z += part.coef * ratio;
    }
    const double v = term.scale * neg_log_sigmoid(z);
    out.value += v;
    out.group[term.group] += neg_log_sigmoid(z);
    // d(-log sigma(z))/dz = -sigma(-z)
    const double dz = -term.scale * sigmoid(-z);
    for (const auto& part : term.parts)
      for (std::size_t i = 0; i < part.weights.size(); ++i)
        coeff[part.eval][i] += dz * part.coef * part.weights[i];
    if (term.pair && term.group != g_if) {
      out.sigma_sum += sigmoid(-z);
      ++out.sigma_n;
      out.margin_sum += z;
    }
    if (term.rev_pair) {
      out.sigma_rev_sum += sigmoid(-z);
      ++out.sigma_rev_n;
    }
    if (!term.pair) {
      out.anchor_sum += z;
      ++out.anchor_n;
    }
  }
  // The loss gradient is sum_e sum_i coeff * grad log pi_theta.
  for (std::size_t e = 0; e < ne; ++e) {
    const auto& ev = pb.evals[e];
    policy::accumulate_weighted_grad(trainee, *ev.prompt, *ev.image, *ev.y, coeff[e], out.grad);
  }
  return out;
}

void check_pair(const ParameterSet& trainee, const ParameterSet& ref) {
  require(trainee.spec == ref.spec, ErrorKind::config,
          "trainee and reference policies have different specs");
}

LossOutput run_batch(const ParameterSet& trainee, const ParameterSet& ref,
                     const std::vector<Problem>& problems, Exec exec) {
  require(!problems.empty(), ErrorKind::usage, "empty batch");
  std::vector<RecordResult> results(problems.size());
  for_each_index(problems.size(), exec,
                 [&](std::size_t i) { results[i] = solve(trainee, ref, problems[i]); });

  LossOutput out;
  out.gradient.assign(trainee.values.size(), 0.0);
  std::array<double, g_count> group{};
  double sigma = 0.0, sigma_rev = 0.0, anchor = 0.0, margin = 0.0;
  int sigma_n = 0, sigma_rev_n = 0, anchor_n = 0;
  for (const auto& r : results) {
    out.value += r.value;
    for (int g = 0; g < g_count; ++g) group[g] += r.group[g];
    for (std::size_t j = 0; j < out.gradient.size(); ++j) out.gradient[j] += r.grad[j];
    sigma += r.sigma_sum;
    sigma_n += r.sigma_n;
    sigma_rev += r.sigma_rev_sum;
    sigma_rev_n += r.sigma_rev_n;
    anchor += r.anchor_sum;
    anchor_n += r.anchor_n;
    margin += r.margin_sum;
  }
  const double n = static_cast<double>(problems.size());
  out.value /= n;
  for (auto& g : out.gradient) g /= n;
  static const char* names[g_count] = {"sft", "dpo", "lc", "if", "anc"};
  for (int g = 0; g < g_count; ++g) out.diagnostics[names[g]] = group[g] / n;
  out.diagnostics["sigma_weight"] = sigma_n ? sigma / sigma_n : 0.0;
  out.diagnostics["reward_margin"] = sigma_n ? margin / sigma_n : 0.0;
  out.diagnostics["sigma_weight_rev"] = sigma_rev_n ? sigma_rev / sigma_rev_n : 0.0;
  out.diagnostics["anchor_margin"] = anchor_n ? anchor / anchor_n : 0.0;
  return out;
}

std::vector<double> ones(const Response& y) { return std::vector<double>(y.size(), 1.0); }

void check_record(const PreferenceRecord& r) {
  require(r.revised(), ErrorKind::data,
          "record " + std::to_string(r.record_id) + " has no revision (PENDING)");
  require(static_cast<int>(r.annotations.size()) == r.y_gen.sentence_count(), ErrorKind::data,
          "record " + std::to_string(r.record_id) + ": annotation count does not match y_Gen");
  require(r.y_rev->sentence_count() == r.y_gen.sentence_count(), ErrorKind::data,
          "record " + std::to_string(r.record_id) +
              ": y_Rev and y_Gen sentence counts differ");
}

/// Builders append an Eval and return its index.
int add_eval(Problem& pb, const PreferenceRecord& r, const ImageFeatures& m,
             const Response& y) {
  pb.evals.push_back({&r.prompt, &m, &y});
  return static_cast<int>(pb.evals.size()) - 1;
}

void add_lc_terms(Problem& pb, const PreferenceRecord& r, const WeightTables& tables,
                  const LossConfig& cfg, double scale, int gt, int gen, int rev) {
  const double b = cfg.beta;
  Term t1{g_lc, scale, 0.0, {}, true};
  t1.parts.push_back({gt, b, ones(r.y_gt)});
  t1.parts.push_back({gen, -b, ones(r.y_gen)});
  pb.terms.push_back(std::move(t1));
  Term t2{g_lc, scale, 0.0, {}, true, true};
  t2.parts.push_back({rev, b, hal_weights(*r.y_rev, r, tables)});
  t2.parts.push_back({gen, -b, hal_weights(r.y_gen, r, tables)});
  pb.terms.push_back(std::move(t2));
}

void add_if_terms(Problem& pb, const PreferenceRecord& r, const WeightTables& tables,
                  const LossConfig& cfg, double scale, int gt_m, int gt_d, int rev_m,
                  int rev_d) {
  const double b = cfg.beta;
  Term t1{g_if, scale, 0.0, {}, true};
  t1.parts.push_back({gt_m, b, ones(r.y_gt)});
  t1.parts.push_back({gt_d, -b, ones(r.y_gt)});
  pb.terms.push_back(std::move(t1));
  const auto w = img_weights(*r.y_rev, r, tables);
  Term t2{g_if, scale, 0.0, {}, true};
  t2.parts.push_back({rev_m, b, w});
  t2.parts.push_back({rev_d, -b, w});
  pb.terms.push_back(std::move(t2));
}

void add_anc_terms(Problem& pb, const PreferenceRecord& r, const LossConfig& cfg, double scale,
                   int gt, int rev) {
  Term t1{g_anc, scale, -cfg.delta, {}, false};
  t1.parts.push_back({gt, cfg.beta, ones(r.y_gt)});
  pb.terms.push_back(std::move(t1));
  Term t2{g_anc, scale, -cfg.delta, {}, false};
  t2.parts.push_back({rev, cfg.beta, ones(*r.y_rev)});
  pb.terms.push_back(std::move(t2));
}

/// Distorted images must outlive the Problems that point at them.
std::vector<ImageFeatures> distorted_images(std::span<const PreferenceRecord> batch,
                                            const LossConfig& cfg, const Distortion& d) {
  std::vector<ImageFeatures> out;
  out.reserve(batch.size());
  for (const auto& r : batch)
    out.push_back(distort_image(r.image, cfg.mask_ratio, d.dataset_mean,
                                record_mask_seed(d, r.record_id)));
  return out;
}

}  // namespace

LossOutput sft_loss(const ParameterSet& trainee, std::span<const SftExample> batch, Exec exec) {
  require(!batch.empty(), ErrorKind::usage, "empty batch");
  std::vector<double> values(batch.size());
  std::vector<std::vector<double>> grads(batch.size());
  for_each_index(batch.size(), exec, [&](std::size_t i) {
    const auto& ex = batch[i];
    values[i] = -policy::response_log_prob(trainee, ex.prompt, ex.image, ex.target);
    grads[i].assign(trainee.values.size(), 0.0);
    const std::vector<double> w(ex.target.size(), -1.0);
    policy::accumulate_weighted_grad(trainee, ex.prompt, ex.image, ex.target, w, grads[i]);
  });
  LossOutput out;
  out.gradient.assign(trainee.values.size(), 0.0);
  for (double v : values) out.value += v;
  reduce_in_order(grads, out.gradient);
  const double n = static_cast<double>(batch.size());
  out.value /= n;
  for (auto& g : out.gradient) g /= n;
  out.diagnostics["sft"] = out.value;
  return out;
}

LossOutput dpo_loss(const ParameterSet& trainee, const ParameterSet& reference,
                    std::span<const PreferencePair> batch, const LossConfig& cfg, Exec exec) {
  cfg.validate();
  check_pair(trainee, reference);
  require(!batch.empty(), ErrorKind::usage, "empty batch");
  std::vector<Problem> problems(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& p = batch[i];
    auto& pb = problems[i];
    pb.evals.push_back({&p.prompt, &p.image, &p.chosen});
    pb.evals.push_back({&p.prompt, &p.image, &p.rejected});
    Term t{g_dpo, 1.0, 0.0, {}, true};
    t.parts.push_back({0, cfg.beta, ones(p.chosen)});
    t.parts.push_back({1, -cfg.beta, ones(p.rejected)});
    pb.terms.push_back(std::move(t));
  }
  return run_batch(trainee, reference, problems, exec);
}

std::vector<double> DpoGradParts::recombine(double beta) const {
  std::vector<double> g(pushup.size());
  for (std::size_t j = 0; j < g.size(); ++j)
    g[j] = beta * sigma_weight * (pushup[j] - pushdown[j]);
  return g;
}

DpoGradParts dpo_grad_decomposition(const ParameterSet& trainee,
                                    const ParameterSet& reference,
                                    const PreferencePair& pair, const LossConfig& cfg) {
  cfg.validate();
  check_pair(trainee, reference);
  const double r_w =
      cfg.beta * (policy::response_log_prob(trainee, pair.prompt, pair.image, pair.chosen) -
                  policy::response_log_prob(reference, pair.prompt, pair.image, pair.chosen));
  const double r_l =
      cfg.beta *
      (policy::response_log_prob(trainee, pair.prompt, pair.image, pair.rejected) -
       policy::response_log_prob(reference, pair.prompt, pair.image, pair.rejected));
  DpoGradParts parts;
  parts.sigma_weight = sigmoid(r_l - r_w);
  parts.pushup =
      policy::grad_weighted_log_prob(trainee, pair.prompt, pair.image, pair.chosen, ones(pair.chosen));
  parts.pushdown = policy::grad_weighted_log_prob(trainee, pair.prompt, pair.image,
                                                  pair.rejected, ones(pair.rejected));
  return parts;
}

std::vector<double> hal_weights(const Response& y, const PreferenceRecord& rec,
                                const WeightTables& tables) {
  require(static_cast<int>(rec.annotations.size()) == y.sentence_count(), ErrorKind::data,
          "record " + std::to_string(rec.record_id) +
              ": sentence count does not match annotations");
  std::vector<double> per_sentence;
  per_sentence.reserve(rec.annotations.size());
  for (const auto& a : rec.annotations) per_sentence.push_back(tables.hal(a.s_hal));
  return y.expand_sentence_weights(per_sentence, 1.0);
}

std::vector<double> img_weights(const Response& y, const PreferenceRecord& rec,
                                const WeightTables& tables) {
  require(static_cast<int>(rec.annotations.size()) == y.sentence_count(), ErrorKind::data,
          "record " + std::to_string(rec.record_id) +
              ": sentence count does not match annotations");
  std::vector<double> per_sentence;
  per_sentence.reserve(rec.annotations.size());
  for (const auto& a : rec.annotations) per_sentence.push_back(tables.img(a.s_img));
  return y.expand_sentence_weights(per_sentence, 1.0);
}

LossOutput lc_loss(const ParameterSet& trainee, const ParameterSet& opa_ref,
                   std::span<const PreferenceRecord> batch, const WeightTables& tables,
                   const LossConfig& cfg, Exec exec) {
  cfg.validate();
  check_pair(trainee, opa_ref);
  require(!batch.empty(), ErrorKind::usage, "empty batch");
  std::vector<Problem> problems(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& r = batch[i];
    check_record(r);
    auto& pb = problems[i];
    const int gt = add_eval(pb, r, r.image, r.y_gt);
    const int gen = add_eval(pb, r, r.image, r.y_gen);
    const int rev = add_eval(pb, r, r.image, *r.y_rev);
    add_lc_terms(pb, r, tables, cfg, 1.0, gt, gen, rev);
  }
  return run_batch(trainee, opa_ref, problems, exec);
}

ImageFeatures distort_image(const ImageFeatures& m, double mask_ratio,
                            const ImageFeatures& dataset_mean, std::uint64_t seed) {
  require(mask_ratio >= 0.0 && mask_ratio <= 1.0, ErrorKind::config,
          "mask_ratio must lie in [0, 1]");
  require(m.features.size() == dataset_mean.features.size(), ErrorKind::shape,
          "dataset mean length does not match image");
  const std::size_t K = m.features.size();
  const auto count = static_cast<std::size_t>(std::lround(mask_ratio * static_cast<double>(K)));
  std::vector<std::size_t> idx(K);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  // Partial Fisher-Yates: the first `count` slots are a uniform draw
  // without replacement.
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.index(K - i));
    std::swap(idx[i], idx[j]);
  }
  ImageFeatures out = m;
  for (std::size_t i = 0; i < count; ++i) out.features[idx[i]] = dataset_mean.features[idx[i]];
  return out;
}

std::uint64_t record_mask_seed(const Distortion& d, std::int64_t record_id) {
  return mix_seed({d.seed, static_cast<std::uint64_t>(record_id), 0x6d61736bULL});
}

LossOutput if_loss(const ParameterSet& trainee, const ParameterSet& opa_ref,
                   std::span<const PreferenceRecord> batch, const WeightTables& tables,
                   const LossConfig& cfg, const Distortion& distortion, Exec exec) {
  cfg.validate();
  check_pair(trainee, opa_ref);
  require(!batch.empty(), ErrorKind::usage, "empty batch");
  const auto distorted = distorted_images(batch, cfg, distortion);
  std::vector<Problem> problems(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& r = batch[i];
    check_record(r);
    auto& pb = problems[i];
    const int gt_m = add_eval(pb, r, r.image, r.y_gt);
    const int gt_d = add_eval(pb, r, distorted[i], r.y_gt);
    const int rev_m = add_eval(pb, r, r.image, *r.y_rev);
    const int rev_d = add_eval(pb, r, distorted[i], *r.y_rev);
    add_if_terms(pb, r, tables, cfg, 1.0, gt_m, gt_d, rev_m, rev_d);
  }
  return run_batch(trainee, opa_ref, problems, exec);
}

LossOutput anc_loss(const ParameterSet& trainee, const ParameterSet& opa_ref,
                    std::span<const PreferenceRecord> batch, const LossConfig& cfg,
                    Exec exec) {
  cfg.validate();
  check_pair(trainee, opa_ref);
  require(!batch.empty(), ErrorKind::usage, "empty batch");
  std::vector<Problem> problems(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& r = batch[i];
    require(r.revised(), ErrorKind::data,
            "record " + std::to_string(r.record_id) + " has no revision (PENDING)");
    auto& pb = problems[i];
    const int gt = add_eval(pb, r, r.image, r.y_gt);
    const int rev = add_eval(pb, r, r.image, *r.y_rev);
    add_anc_terms(pb, r, cfg, 1.0, gt, rev);
  }
  return run_batch(trainee, opa_ref, problems, exec);
}

LossOutput opa_dpo_loss(const ParameterSet& trainee, const ParameterSet& opa_ref,
                        std::span<const PreferenceRecord> batch, const WeightTables& tables,
                        const LossConfig& cfg, const Distortion& distortion, Exec exec) {
  cfg.validate();
  check_pair(trainee, opa_ref);
  require(!batch.empty(), ErrorKind::usage, "empty batch");
  const bool use_if = cfg.gamma1 != 0.0;
  const bool use_anc = cfg.gamma2 != 0.0;
  std::vector<ImageFeatures> distorted;
  if (use_if) distorted = distorted_images(batch, cfg, distortion);
  std::vector<Problem> problems(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& r = batch[i];
    check_record(r);
    auto& pb = problems[i];
    const int gt = add_eval(pb, r, r.image, r.y_gt);
    const int gen = add_eval(pb, r, r.image, r.y_gen);
    const int rev = add_eval(pb, r, r.image, *r.y_rev);
    add_lc_terms(pb, r, tables, cfg, 1.0, gt, gen, rev);
    if (use_if) {
      const int gt_d = add_eval(pb, r, distorted[i], r.y_gt);
      const int rev_d = add_eval(pb, r, distorted[i], *r.y_rev);
      add_if_terms(pb, r, tables, cfg, cfg.gamma1, gt, gt_d, rev, rev_d);
    }
    if (use_anc) add_anc_terms(pb, r, cfg, cfg.gamma2, gt, rev);
  }
  auto out = run_batch(trainee, opa_ref, problems, exec);
  // Disabled components are not evaluated and log as 0.
  if (!use_if) out.diagnostics["if"] = 0.0;
  if (!use_anc) out.diagnostics["anc"] = 0.0;
  return out;
}

ImageFeatures dataset_mean(std::span<const PreferenceRecord> records) {
  require(!records.empty(), ErrorKind::usage, "dataset mean of an empty dataset");
  ImageFeatures mean;
  mean.features.assign(records.front().image.features.size(), 0.0);
  for (const auto& r : records)
    for (std::size_t k = 0; k < mean.features.size(); ++k) mean.features[k] += r.image.features[k];
  for (auto& v : mean.features) v /= static_cast<double>(records.size());
  return mean;
}

}  // namespace opadpo::loss
