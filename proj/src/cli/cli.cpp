// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#include "opadpo/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <sstream>

#include "opadpo/checkpoint.hpp"
#include "opadpo/diagnostics.hpp"
#include "opadpo/eval.hpp"
#include "opadpo/format.hpp"
#include "opadpo/gradcheck.hpp"
#include "opadpo/parallel.hpp"
#include "opadpo/run_config.hpp"
#include "opadpo/synth.hpp"
#include "opadpo/trainer.hpp"

extern char** environ;

namespace opadpo::cli {

namespace fs = std::filesystem;
using policy::ParameterSet;

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::missing_input: return kMissingInput;
    case ErrorKind::numeric: return kNumeric;
    default: return kConfig;
  }
}

std::map<std::string, std::string> environment_snapshot() {
  std::map<std::string, std::string> env;
  for (char** e = environ; e && *e; ++e) {
    const std::string_view kv(*e);
    if (kv.rfind("OPADPO_", 0) != 0) continue;
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos) continue;
    env.emplace(std::string(kv.substr(0, eq)), std::string(kv.substr(eq + 1)));
  }
  return env;
}

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  int threads = 0;
};

struct Context {
  RunConfig cfg;
  std::ostream& out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "key = value config file");
  cmd->add_option("--set", c.sets, "override, key=value (repeatable)");
  cmd->add_option("--out-dir", c.out_dir, "output directory");
  cmd->add_option("--threads", c.threads, "worker threads (0 = runtime default)")
      ->check(CLI::NonNegativeNumber);
}

std::vector<std::pair<std::string, std::string>> overrides_of(const Common& c) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    require(eq != std::string::npos, ErrorKind::config, "--set expects key=value, got '" + s + "'");
    out.emplace_back(std::string(trim(std::string_view(s).substr(0, eq))),
                     std::string(trim(std::string_view(s).substr(eq + 1))));
  }
  if (!c.out_dir.empty()) out.emplace_back("output_dir", c.out_dir);
  return out;
}

RunConfig load_config(const Common& c, const std::map<std::string, std::string>& env,
                      std::vector<std::pair<std::string, std::string>> extra = {}) {
  std::string text;
  if (!c.config_path.empty()) text = read_file(c.config_path);
  auto ov = overrides_of(c);
  ov.insert(ov.end(), extra.begin(), extra.end());
  return resolve_config(text, env, ov);
}

std::string out_path(const RunConfig& cfg, const std::string& name) {
  return (fs::path(cfg.output_dir) / name).string();
}

void prepare_output(const RunConfig& cfg) {
  std::error_code ec;
  fs::create_directories(cfg.output_dir, ec);
  require(!ec && fs::is_directory(cfg.output_dir), ErrorKind::io,
          "cannot create output directory " + cfg.output_dir);
  write_file_atomic(out_path(cfg, "config.txt"), echo_config(cfg));
}

std::vector<PreferenceRecord> load_dataset(const RunConfig& cfg, const std::string& path) {
  require(!path.empty(), ErrorKind::usage, "a dataset path is required (--data)");
  const auto text = read_file(path);
  try {
    return synth::deserialize_records(cfg.spec, text);
  } catch (const Error& e) {
    fail(e.kind(), path + ": " + e.what());
  }
}

/// The configured base policy, or the checkpoint at `path` when given.
ParameterSet obtain_base(const RunConfig& cfg, const std::string& path) {
  if (!path.empty()) {
    auto ck = load_checkpoint(path);
    require(ck.params.spec == cfg.spec, ErrorKind::config,
            path + ": checkpoint spec does not match the config");
    return ck.params;
  }
  auto base = train::make_base_policy(cfg.spec, cfg.world, cfg.base);
  Checkpoint ck{{Phase::base, 0, 0, base.hash(), cfg.train.hash()}, base};
  save_checkpoint(out_path(cfg, "base.ckpt"), ck);
  return base;
}

synth::DatasetConfig dataset_config(const RunConfig& cfg, int n, bool external) {
  synth::DatasetConfig dc;
  dc.n_records = n;
  dc.seed = cfg.seed;
  dc.sampling = cfg.sampling;
  dc.world = cfg.world;
  dc.external_reviser = external;
  return dc;
}

void save_result(const RunConfig& cfg, const train::TrainResult& r, const std::string& label,
                 std::ostream& out) {
  for (const auto& ck : r.checkpoints)
    save_checkpoint(out_path(cfg, label + "_epoch" + std::to_string(ck.meta.epoch) + ".ckpt"), ck);
  const auto& last = r.checkpoints.back();
  save_checkpoint(out_path(cfg, label + ".ckpt"), last);
  out << label << ".ckpt hash " << hex64(last.meta.param_hash) << '\n';
}

// ---- subcommands ----

int cmd_gen_data(const RunConfig& cfg, const std::string& base_path, const std::string& out_file,
                 bool external, std::ostream& out) {
  prepare_output(cfg);
  const auto base = obtain_base(cfg, base_path);
  const auto records =
      synth::build_dataset(base, dataset_config(cfg, cfg.n_records, external));
  const auto path = out_file.empty() ? out_path(cfg, "dataset.tsv") : out_file;
  write_file_atomic(path, synth::serialize_records(records));
  long long changed = 0, significant = 0;
  for (const auto& r : records) {
    changed += r.changed_sentences();
    significant += r.changed_sentences() >= cfg.diag_min_changed;
  }
  out << "records " << records.size() << '\n';
  out << "significantly_revised " << (external ? 0 : significant) << '\n';
  out << "mean_changed_sentences "
      << format_real(records.empty() ? 0.0 : static_cast<double>(changed) / records.size())
      << '\n';
  out << "wrote " << path << '\n';
  return kOk;
}

int cmd_revise(const RunConfig& cfg, const std::string& in, const std::string& out_file,
               std::ostream& out) {
  prepare_output(cfg);
  auto records = load_dataset(cfg, in);
  long long pending = 0;
  for (const auto& r : records) pending += !r.revised();
  records = synth::complete_revisions(cfg.spec, cfg.world, std::move(records));
  const auto path = out_file.empty() ? out_path(cfg, "dataset.tsv") : out_file;
  write_file_atomic(path, synth::serialize_records(records));
  out << "records " << records.size() << " filled " << pending << '\n';
  out << "wrote " << path << '\n';
  return kOk;
}

int cmd_train(const RunConfig& cfg, const std::string& mode, const std::string& data,
              const std::string& base_path, const std::string& opa_path, std::ostream& out) {
  prepare_output(cfg);
  const auto dataset = load_dataset(cfg, data);
  std::vector<train::LogRow> log;
  auto append = [&](const train::TrainResult& r) {
    log.insert(log.end(), r.log.begin(), r.log.end());
  };
  if (mode == "opa" || mode == "opa-then-dpo") {
    const auto base = obtain_base(cfg, base_path);
    const auto opa = train::train_opa(base, dataset, cfg.train);
    append(opa);
    save_result(cfg, opa, "opa", out);
    if (mode == "opa-then-dpo") {
      const auto od = train::train_opa_dpo(opa.params, dataset, cfg.train);
      append(od);
      save_result(cfg, od, "opa_dpo", out);
    }
  } else if (mode == "dpo") {
    const auto base = obtain_base(cfg, base_path);
    const auto d = train::train_dpo_baseline(base, dataset, cfg.train);
    append(d);
    save_result(cfg, d, "dpo", out);
  } else {
    require(!opa_path.empty(), ErrorKind::usage, "mode opa-dpo needs --opa CHECKPOINT");
    const auto opa = load_checkpoint(opa_path);
    require(opa.params.spec == cfg.spec, ErrorKind::config,
            opa_path + ": checkpoint spec does not match the config");
    const auto od = train::train_opa_dpo(opa.params, dataset, cfg.train);
    append(od);
    save_result(cfg, od, "opa_dpo", out);
  }
  write_file_atomic(out_path(cfg, "train_log.csv"), train::log_csv(log));
  out << "wrote " << out_path(cfg, "train_log.csv") << '\n';
  return kOk;
}

std::string stem_of(const std::string& path) { return fs::path(path).stem().string(); }

eval::EvalConfig eval_config(const RunConfig& cfg) {
  eval::EvalConfig ec;
  ec.n_worlds = cfg.eval_worlds;
  ec.world = cfg.world;
  ec.seed = cfg.seed;
  return ec;
}

void emit_reports(const RunConfig& cfg, const std::vector<eval::EvalReport>& reports,
                  std::ostream& out) {
  const auto csv = eval::reports_csv(reports);
  write_file_atomic(out_path(cfg, "eval_report.csv"), csv);
  out << csv;
  if (reports.size() >= 2)
    write_file_atomic(out_path(cfg, "comparison.csv"),
                      eval::comparison_csv(eval::compare(reports)));
}

int cmd_eval(const RunConfig& cfg, const std::vector<std::string>& checkpoints,
             std::vector<std::string> names, std::ostream& out) {
  require(!checkpoints.empty(), ErrorKind::usage, "eval needs at least one checkpoint");
  require(names.empty() || names.size() == checkpoints.size(), ErrorKind::usage,
          "--name must be given once per checkpoint");
  // Load everything first so a missing file fails before any work.
  std::vector<Checkpoint> cks;
  for (const auto& p : checkpoints) cks.push_back(load_checkpoint(p));
  prepare_output(cfg);
  if (names.empty())
    for (const auto& p : checkpoints) names.push_back(stem_of(p));
  std::vector<eval::EvalReport> reports;
  for (std::size_t i = 0; i < cks.size(); ++i) {
    require(cks[i].params.spec == cfg.spec, ErrorKind::config,
            checkpoints[i] + ": checkpoint spec does not match the config");
    reports.push_back(eval::evaluate(names[i], cks[i].params, eval_config(cfg)));
  }
  emit_reports(cfg, reports, out);
  return kOk;
}

/// Revised responses of the first diag.n_records records with at least
/// diag.min_changed changed sentences.
std::vector<diag::ScoredResponse> diagnostic_set(const RunConfig& cfg,
                                                 const std::vector<PreferenceRecord>& dataset) {
  auto kept = synth::significantly_revised(dataset, cfg.diag_min_changed);
  if (kept.size() > static_cast<std::size_t>(cfg.diag_records)) kept.resize(cfg.diag_records);
  return diag::revised_responses(kept);
}

struct NamedPolicy {
  std::string name;
  ParameterSet params;
};

std::string kl_csv(const std::vector<std::pair<std::string, std::string>>& pairs,
                   const std::vector<diag::KLReport>& reps, std::size_t n) {
  std::string out = "p,q,mean_mean,max_mean,any_infinite,n\n";
  for (std::size_t i = 0; i < pairs.size(); ++i)
    out += pairs[i].first + ',' + pairs[i].second + ',' + format_real(reps[i].mean_mean) + ',' +
           format_real(reps[i].max_mean) + ',' + (reps[i].any_infinite ? "true" : "false") + ',' +
           std::to_string(n) + '\n';
  return out;
}

std::string hist_csv(const std::vector<NamedPolicy>& policies,
                     const std::vector<diag::AvgLogProbs>& stats) {
  std::string out = "checkpoint,bin_lo,bin_hi,count\n";
  for (std::size_t i = 0; i < policies.size(); ++i) {
    const auto& h = stats[i].histogram;
    for (std::size_t b = 0; b < h.counts.size(); ++b)
      out += policies[i].name + ',' + format_real(h.bin_lo(b)) + ',' + format_real(h.bin_hi(b)) +
             ',' + std::to_string(h.counts[b]) + '\n';
  }
  return out;
}

std::string logprob_summary_csv(const std::vector<NamedPolicy>& policies,
                                const std::vector<diag::AvgLogProbs>& stats) {
  std::string out = "checkpoint,mean_avg_log_prob,n\n";
  for (std::size_t i = 0; i < policies.size(); ++i)
    out += policies[i].name + ',' + format_real(stats[i].mean()) + ',' +
           std::to_string(stats[i].values.size()) + '\n';
  return out;
}

void run_diagnostics(const RunConfig& cfg, const std::vector<NamedPolicy>& policies,
                     const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                     const std::vector<diag::ScoredResponse>& set, std::ostream& out) {
  require(!set.empty(), ErrorKind::data, "diagnostics subset is empty");
  std::vector<std::pair<std::string, std::string>> names;
  std::vector<diag::KLReport> reps;
  for (const auto& [a, b] : pairs) {
    names.emplace_back(policies[a].name, policies[b].name);
    reps.push_back(diag::positionwise_kl(policies[a].params, policies[b].params, set));
  }
  std::vector<diag::AvgLogProbs> stats;
  for (const auto& p : policies)
    stats.push_back(diag::response_avg_log_prob(p.params, set, cfg.hist_bins, cfg.hist_lo,
                                                cfg.hist_hi));
  const auto kl = kl_csv(names, reps, set.size());
  write_file_atomic(out_path(cfg, "kl_table.csv"), kl);
  write_file_atomic(out_path(cfg, "logprob_hist.csv"), hist_csv(policies, stats));
  const auto summary = logprob_summary_csv(policies, stats);
  write_file_atomic(out_path(cfg, "logprob_summary.csv"), summary);
  out << kl << summary;
}

int cmd_diagnose(const RunConfig& cfg, const std::vector<std::string>& pair_args,
                 const std::string& data, std::ostream& out) {
  require(!pair_args.empty(), ErrorKind::usage, "diagnose needs at least one --pair P:Q");
  std::vector<std::pair<std::string, std::string>> paths;
  for (const auto& s : pair_args) {
    const auto colon = s.find(':');
    require(colon != std::string::npos && colon > 0 && colon + 1 < s.size(), ErrorKind::usage,
            "--pair expects P.ckpt:Q.ckpt, got '" + s + "'");
    paths.emplace_back(s.substr(0, colon), s.substr(colon + 1));
  }
  std::vector<NamedPolicy> policies;
  std::map<std::string, std::size_t> index;
  auto intern = [&](const std::string& path) {
    const auto it = index.find(path);
    if (it != index.end()) return it->second;
    auto ck = load_checkpoint(path);
    require(ck.params.spec == cfg.spec, ErrorKind::config,
            path + ": checkpoint spec does not match the config");
    policies.push_back({stem_of(path), std::move(ck.params)});
    index.emplace(path, policies.size() - 1);
    return policies.size() - 1;
  };
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& [p, q] : paths) {
    const auto a = intern(p);
    pairs.emplace_back(a, intern(q));
  }
  const auto dataset = load_dataset(cfg, data);
  prepare_output(cfg);
  run_diagnostics(cfg, policies, pairs, diagnostic_set(cfg, dataset), out);
  return kOk;
}

int cmd_grad_check(const RunConfig& cfg, bool inject_bug, std::ostream& out) {
  prepare_output(cfg);
  gradcheck::Settings s;
  s.n_seeds = cfg.grad_seeds;
  s.step = cfg.grad_step;
  s.tolerance = cfg.grad_tolerance;
  s.seed = cfg.seed;
  s.inject_bug = inject_bug;
  const auto reports = gradcheck::check_all(s);
  const auto csv = gradcheck::report_csv(reports);
  write_file_atomic(out_path(cfg, "grad_check.csv"), csv);
  out << csv;
  const bool ok = std::all_of(reports.begin(), reports.end(), [](const auto& r) { return r.pass; });
  return ok ? kOk : kNumeric;
}

struct Variant {
  std::string name;
  train::Ablation ablation;
  int n_records;
};

int cmd_ablate(RunConfig cfg, const std::string& preset, std::ostream& out) {
  cfg.output_dir = (fs::path(cfg.output_dir) / preset).string();
  prepare_output(cfg);
  const std::vector<int> sizes = {600, 1200, 2400, 4800};
  std::vector<Variant> variants;
  const train::Ablation full;
  if (preset == "table4") {
    auto v = [&](std::string n, auto tweak) {
      train::Ablation a = full;
      tweak(a);
      variants.push_back({std::move(n), a, cfg.n_records});
    };
    v("full", [](train::Ablation&) {});
    v("wo_if", [](train::Ablation& a) { a.enable_if = false; });
    v("wo_anc", [](train::Ablation& a) { a.enable_anc = false; });
    v("wo_if_anc", [](train::Ablation& a) { a.enable_if = a.enable_anc = false; });
    v("wo_hw_iw", [](train::Ablation& a) { a.enable_hw = a.enable_iw = false; });
  } else if (preset == "table3") {
    for (int n : sizes) {
      train::Ablation without = full;
      without.enable_opa = false;
      variants.push_back({"w_opa_" + std::to_string(n), full, n});
      variants.push_back({"wo_opa_" + std::to_string(n), without, n});
    }
  } else {
    for (int n : sizes) variants.push_back({"opa_dpo_" + std::to_string(n), full, n});
  }
  int largest = 0;
  for (const auto& v : variants) largest = std::max(largest, v.n_records);
  const auto base = obtain_base(cfg, "");
  // Record ids seed every record, so each smaller set is a prefix of this one.
  const auto all = synth::build_dataset(base, dataset_config(cfg, largest, false));
  write_file_atomic(out_path(cfg, "dataset.tsv"), synth::serialize_records(all));
  std::vector<eval::EvalReport> reports;
  reports.push_back(eval::evaluate("base", base, eval_config(cfg)));
  for (const auto& v : variants) {
    const std::vector<PreferenceRecord> data(all.begin(), all.begin() + v.n_records);
    auto tc = cfg.train;
    tc.ablation = v.ablation;
    const auto p = train::train_pipeline(base, data, tc);
    std::vector<train::LogRow> log = p.opa.log;
    log.insert(log.end(), p.dpo.log.begin(), p.dpo.log.end());
    write_file_atomic(out_path(cfg, v.name + "_train_log.csv"), train::log_csv(log));
    save_checkpoint(out_path(cfg, v.name + ".ckpt"), p.dpo.checkpoints.back());
    reports.push_back(eval::evaluate(v.name, p.dpo.params, eval_config(cfg)));
  }
  emit_reports(cfg, reports, out);
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
        const std::map<std::string, std::string>& env) {
  CLI::App app{"Toy on-policy alignment + preference optimisation toolkit", "opadpo"};
  app.require_subcommand(1);

  Common common;
  std::string base_path, out_file, data, opa_path, mode, in_path, preset;
  std::vector<std::string> checkpoints, names, pairs;
  int n_override = -1;
  bool external = false, inject_bug = false;

  auto* gen = app.add_subcommand("gen-data", "sample y_Gen from the base policy and revise it");
  add_common(gen, common);
  gen->add_option("--n", n_override, "number of records")->check(CLI::NonNegativeNumber);
  gen->add_option("--base", base_path, "base checkpoint (default: build from config)");
  gen->add_option("--out", out_file, "dataset path (default: <out-dir>/dataset.tsv)");
  gen->add_flag("--external-reviser", external, "leave revision columns PENDING");

  auto* rev = app.add_subcommand("revise", "fill PENDING revisions and validate the rest");
  add_common(rev, common);
  rev->add_option("--in", in_path, "input dataset")->required();
  rev->add_option("--out", out_file, "output dataset (default: <out-dir>/dataset.tsv)");

  auto* trn = app.add_subcommand("train", "run a training mode");
  add_common(trn, common);
  trn->add_option("--mode", mode, "training mode")
      ->required()
      ->check(CLI::IsMember({"opa", "dpo", "opa-dpo", "opa-then-dpo"}));
  trn->add_option("--data", data, "dataset")->required();
  trn->add_option("--base", base_path, "base checkpoint (default: build from config)");
  trn->add_option("--opa", opa_path, "phase-1 checkpoint for mode opa-dpo");

  auto* evl = app.add_subcommand("eval", "greedy evaluation on held-out worlds");
  add_common(evl, common);
  evl->add_option("checkpoints", checkpoints, "checkpoint files")->required();
  evl->add_option("--name", names, "report name per checkpoint");

  auto* dia = app.add_subcommand("diagnose", "KL table and log-prob histograms");
  add_common(dia, common);
  dia->add_option("--pair", pairs, "P.ckpt:Q.ckpt for KL(P || Q) (repeatable)")->required();
  dia->add_option("--data", data, "dataset")->required();

  auto* grd = app.add_subcommand("grad-check", "finite-difference check of every loss");
  add_common(grd, common);
  int n_seeds = -1;
  grd->add_option("--n-seeds", n_seeds, "instances per loss")->check(CLI::PositiveNumber);
  grd->add_flag("--inject-bug", inject_bug, "negative control: corrupt the analytic gradient");

  auto* abl = app.add_subcommand("ablate", "run an ablation preset end to end");
  add_common(abl, common);
  abl->add_option("--preset", preset, "preset")
      ->required()
      ->check(CLI::IsMember({"table3", "table4", "scale-sweep"}));

  try {
    std::vector<std::string> rev_args(args.rbegin(), args.rend());
    app.parse(rev_args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfig;
  }

  try {
    set_num_threads(common.threads);
    std::vector<std::pair<std::string, std::string>> extra;
    if (n_override >= 0) extra.emplace_back("data.n_records", std::to_string(n_override));
    if (n_seeds > 0) extra.emplace_back("gradcheck.n_seeds", std::to_string(n_seeds));
    const auto cfg = load_config(common, env, extra);
    if (gen->parsed()) return cmd_gen_data(cfg, base_path, out_file, external, out);
    if (rev->parsed()) return cmd_revise(cfg, in_path, out_file, out);
    if (trn->parsed()) return cmd_train(cfg, mode, data, base_path, opa_path, out);
    if (evl->parsed()) return cmd_eval(cfg, checkpoints, names, out);
    if (dia->parsed()) return cmd_diagnose(cfg, pairs, data, out);
    if (grd->parsed()) return cmd_grad_check(cfg, inject_bug, out);
    return cmd_ablate(cfg, preset, out);
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kConfig;
  }
}

}  // namespace opadpo::cli
