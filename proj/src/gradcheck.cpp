// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#include "opadpo/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "opadpo/error.hpp"
#include "opadpo/format.hpp"
#include "opadpo/rng.hpp"

namespace opadpo::gradcheck {

const char* to_string(LossKind kind) {
  switch (kind) {
    case LossKind::sft: return "sft";
    case LossKind::dpo: return "dpo";
    case LossKind::lc: return "lc";
    case LossKind::image_focus: return "if";
    case LossKind::anc: return "anc";
    case LossKind::combined: return "combined";
  }
  return "?";
}

LossKind loss_kind_from_string(const std::string& s) {
  for (auto k : all_losses())
    if (s == to_string(k)) return k;
  fail(ErrorKind::config, "unknown loss '" + s + "'");
}

std::vector<LossKind> all_losses() {
  return {LossKind::sft, LossKind::dpo, LossKind::lc,
          LossKind::image_focus, LossKind::anc, LossKind::combined};
}

policy::PolicySpec suite_spec() { return {8, 10, 6, 6, 8}; }

synth::WorldConfig suite_world() {
  synth::WorldConfig w;
  w.n_attributes = 3;
  w.n_values = 2;
  return w;
}

std::vector<double> numeric_gradient(const std::function<double(const ParameterSet&)>& f,
                                     const ParameterSet& x, double step) {
  require(step > 0.0, ErrorKind::config, "finite-difference step must be > 0");
  ParameterSet probe = x;
  std::vector<double> g(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double orig = probe.values[j];
    probe.values[j] = orig + step;
    const double up = f(probe);
    probe.values[j] = orig - step;
    const double down = f(probe);
    probe.values[j] = orig;
    g[j] = (up - down) / (2.0 * step);
  }
  return g;
}

Comparison compare_gradients(std::span<const double> analytic, std::span<const double> numeric,
                             double floor) {
  require(analytic.size() == numeric.size(), ErrorKind::shape, "gradient sizes differ");
  Comparison c;
  for (std::size_t j = 0; j < analytic.size(); ++j) {
    const double a = analytic[j], n = numeric[j];
    const double err = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
    if (j == 0 || err > c.max_rel_err) {
      c.max_rel_err = err;
      c.worst_coord = j;
      c.analytic = a;
      c.numeric = n;
    }
  }
  return c;
}

std::string segment_of(const policy::PolicySpec& spec, std::size_t j) {
  const auto l = policy::Layout::of(spec);
  if (j < l.image_proj) return "tok_embed";
  if (j < l.pos_embed) return "image_proj";
  if (j < l.mix_context) return "pos_embed";
  if (j < l.mix_last) return "mix_context";
  if (j < l.hidden_bias) return "mix_last";
  if (j < l.out_weight) return "hidden_bias";
  if (j < l.out_bias) return "out_weight";
  return "out_bias";
}

namespace {

struct Instance {
  ParameterSet trainee;
  ParameterSet reference;
  std::vector<PreferenceRecord> records;
  loss::Distortion distortion;
};

/// Parameters large enough that the network is far from its linear regime.
ParameterSet wide_random(const policy::PolicySpec& spec, std::uint64_t seed) {
  auto p = ParameterSet::zeros(spec);
  Rng rng(seed);
  for (auto& v : p.values) v = rng.uniform(-0.6, 0.6);
  return p;
}

Instance make_instance(const Settings& s, int i) {
  const auto spec = suite_spec();
  Instance inst;
  const std::uint64_t seed = mix_seed({s.seed, 0x9c, static_cast<std::uint64_t>(i)});
  inst.trainee = wide_random(spec, mix_seed({seed, 1}));
  inst.reference = wide_random(spec, mix_seed({seed, 2}));
  synth::DatasetConfig dc;
  dc.seed = seed;
  dc.world = suite_world();
  const auto layout = synth::TokenLayout::make(spec, dc.world);
  for (int r = 0; r < s.records_per_instance; ++r)
    inst.records.push_back(synth::build_record(inst.trainee, layout, dc, r));
  inst.distortion = {loss::dataset_mean(inst.records), mix_seed({seed, 3})};
  return inst;
}

loss::LossOutput evaluate(LossKind kind, const ParameterSet& trainee, const Instance& inst) {
  const loss::LossConfig cfg;
  const auto tables = loss::WeightTables::standard();
  switch (kind) {
    case LossKind::sft: {
      std::vector<loss::SftExample> batch;
      for (const auto& r : inst.records) {
        batch.push_back({r.prompt, r.image, r.y_gt});
        batch.push_back({r.prompt, r.image, *r.y_rev});
      }
      return loss::sft_loss(trainee, batch, Exec::serial);
    }
    case LossKind::dpo: {
      std::vector<loss::PreferencePair> batch;
      for (const auto& r : inst.records) batch.push_back({r.prompt, r.image, *r.y_rev, r.y_gen});
      return loss::dpo_loss(trainee, inst.reference, batch, cfg, Exec::serial);
    }
    case LossKind::lc:
      return loss::lc_loss(trainee, inst.reference, inst.records, tables, cfg, Exec::serial);
    case LossKind::image_focus:
      return loss::if_loss(trainee, inst.reference, inst.records, tables, cfg, inst.distortion,
                           Exec::serial);
    case LossKind::anc:
      return loss::anc_loss(trainee, inst.reference, inst.records, cfg, Exec::serial);
    case LossKind::combined:
      return loss::opa_dpo_loss(trainee, inst.reference, inst.records, tables, cfg,
                                inst.distortion, Exec::serial);
  }
  fail(ErrorKind::config, "unknown loss");
}

}  // namespace

LossReport check_loss(LossKind kind, const Settings& s) {
  require(s.n_seeds >= 1, ErrorKind::config, "n_seeds must be >= 1");
  LossReport rep;
  rep.loss = kind;
  rep.instances = s.n_seeds;
  for (int i = 0; i < s.n_seeds; ++i) {
    const auto inst = make_instance(s, i);
    auto analytic = evaluate(kind, inst.trainee, inst).gradient;
    if (s.inject_bug) {
      const auto l = inst.trainee.layout();
      std::fill(analytic.begin() + static_cast<std::ptrdiff_t>(l.hidden_bias),
                analytic.begin() + static_cast<std::ptrdiff_t>(l.out_weight), 0.0);
    }
    const auto numeric = numeric_gradient(
        [&](const ParameterSet& p) { return evaluate(kind, p, inst).value; }, inst.trainee,
        s.step);
    const auto c = compare_gradients(analytic, numeric, s.floor);
    if (i == 0 || c.max_rel_err > rep.max_rel_err) {
      rep.max_rel_err = c.max_rel_err;
      rep.worst_instance = i;
      rep.worst_coord = c.worst_coord;
    }
  }
  rep.worst_segment = segment_of(suite_spec(), rep.worst_coord);
  rep.pass = rep.max_rel_err < s.tolerance;
  return rep;
}

std::vector<LossReport> check_all(const Settings& s) {
  std::vector<LossReport> out;
  for (auto k : all_losses()) out.push_back(check_loss(k, s));
  return out;
}

std::string report_csv(const std::vector<LossReport>& reports) {
  std::string out = "loss,instances,max_rel_err,worst_instance,worst_coord,worst_segment,pass\n";
  for (const auto& r : reports)
    out += std::string(to_string(r.loss)) + ',' + std::to_string(r.instances) + ',' +
           format_real(r.max_rel_err) + ',' + std::to_string(r.worst_instance) + ',' +
           std::to_string(r.worst_coord) + ',' + r.worst_segment + ',' +
           (r.pass ? "pass" : "fail") + '\n';
  return out;
}

}  // namespace opadpo::gradcheck
