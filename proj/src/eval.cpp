// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#include "opadpo/eval.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <utility>

#include "opadpo/error.hpp"
#include "opadpo/format.hpp"

namespace opadpo::eval {

ResponseScore score_response(const synth::TokenLayout& layout, const PolicySpec& spec,
                             const synth::WorldState& world, const Response& y) {
  ResponseScore s;
  s.facts = world.n_present();
  std::set<int> covered;
  std::set<std::pair<int, int>> seen;
  for (const auto& t : synth::parse_triples(layout, y)) {
    ++s.asserted;
    if (!t.well_formed) {
      ++s.wrong;
      continue;
    }
    if (!seen.insert({t.attribute, t.value}).second) s.repeated = true;
    if (world.holds(t.attribute, t.value)) covered.insert(t.attribute);
    else ++s.wrong;
  }
  s.covered = static_cast<int>(covered.size());
  if (!y.terminated() && y.size() == spec.max_len) s.repeated = true;
  return s;
}

EvalReport aggregate(const std::string& name, const std::vector<ResponseScore>& scores) {
  EvalReport r;
  r.name = name;
  r.n_eval = static_cast<long long>(scores.size());
  long long asserted = 0, wrong = 0, covered = 0, facts = 0, bad = 0, rep = 0;
  for (const auto& s : scores) {
    asserted += s.asserted;
    wrong += s.wrong;
    covered += s.covered;
    facts += s.facts;
    bad += s.wrong > 0;
    rep += s.repeated;
  }
  const auto ratio = [](long long a, long long b) {
    return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
  };
  r.chair_i = ratio(wrong, asserted);
  r.chair_s = ratio(bad, r.n_eval);
  r.cover = ratio(covered, facts);
  r.repeat_rate = ratio(rep, r.n_eval);
  return r;
}

void EvalConfig::validate() const {
  require(n_worlds >= 1, ErrorKind::config, "n_worlds must be >= 1");
  world.validate();
}

EvalReport evaluate_responder(const std::string& name, const PolicySpec& spec,
                              const Responder& responder, const EvalConfig& cfg) {
  cfg.validate();
  const auto layout = synth::TokenLayout::make(spec, cfg.world);
  const std::uint64_t seed = cfg.seed + kHeldOutOffset;
  std::vector<ResponseScore> scores(cfg.n_worlds);
  for_each_index(scores.size(), cfg.exec, [&](std::size_t i) {
    const auto scene = synth::make_scene(seed, static_cast<std::int64_t>(i), cfg.world);
    const Tokens prompt{layout.describe()};
    scores[i] = score_response(layout, spec, scene.world, responder(prompt, scene.image, scene.world));
  });
  return aggregate(name, scores);
}

EvalReport evaluate(const std::string& name, const ParameterSet& params, const EvalConfig& cfg) {
  const auto greedy = policy::SamplingConfig::greedy_decoding();
  return evaluate_responder(
      name, params.spec,
      [&](const Tokens& prompt, const ImageFeatures& image, const synth::WorldState&) {
        return policy::sample_response(params, prompt, image, greedy, 0);
      },
      cfg);
}

std::string report_csv_header() { return "name,chair_i,chair_s,cover,repeat_rate,n_eval\n"; }

std::string reports_csv(const std::vector<EvalReport>& reports) {
  std::string out = report_csv_header();
  for (const auto& r : reports)
    out += r.name + ',' + format_real(r.chair_i) + ',' + format_real(r.chair_s) + ',' +
           format_real(r.cover) + ',' + format_real(r.repeat_rate) + ',' +
           std::to_string(r.n_eval) + '\n';
  return out;
}

Comparison compare(const std::vector<EvalReport>& reports) {
  require(reports.size() >= 2, ErrorKind::usage, "compare needs at least two reports");
  Comparison cmp;
  std::set<std::string> names;
  for (const auto& r : reports) {
    require(names.insert(r.name).second, ErrorKind::usage, "duplicate report name '" + r.name + "'");
    cmp.names.push_back(r.name);
  }
  const std::pair<const char*, double EvalReport::*> fields[] = {
      {"chair_i", &EvalReport::chair_i},
      {"chair_s", &EvalReport::chair_s},
      {"cover", &EvalReport::cover},
      {"repeat_rate", &EvalReport::repeat_rate}};
  for (const auto& [metric, field] : fields) {
    MetricComparison m;
    m.metric = metric;
    for (const auto& r : reports) {
      m.values.push_back(r.*field);
      m.deltas.push_back(r.*field - reports.front().*field);
    }
    std::vector<std::size_t> order(reports.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return m.values[a] < m.values[b]; });
    for (auto i : order) m.ranking.push_back(reports[i].name);
    cmp.metrics.push_back(std::move(m));
  }
  return cmp;
}

std::string comparison_csv(const Comparison& cmp) {
  std::string out = "metric,name,value,delta,rank\n";
  for (const auto& m : cmp.metrics) {
    for (std::size_t i = 0; i < cmp.names.size(); ++i) {
      const auto rank =
          std::find(m.ranking.begin(), m.ranking.end(), cmp.names[i]) - m.ranking.begin() + 1;
      out += m.metric + ',' + cmp.names[i] + ',' + format_real(m.values[i]) + ',' +
             format_real(m.deltas[i]) + ',' + std::to_string(rank) + '\n';
    }
  }
  return out;
}

}  // namespace opadpo::eval
