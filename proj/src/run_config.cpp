// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#include "opadpo/run_config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <limits>

#include "opadpo/error.hpp"
#include "opadpo/format.hpp"

namespace opadpo {

namespace {

struct Entry {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

std::string bad_value(std::string_view key, std::string_view value, const char* want) {
  return "config key '" + std::string(key) + "': expected " + want + ", got '" +
         std::string(value) + "'";
}

// Getters read through the same accessor as setters; they never write.
template <class Field>
auto& read(Field field, const RunConfig& c) {
  return field(const_cast<RunConfig&>(c));
}

template <class Field>
Entry int_entry(std::string key, Field field) {
  return {key, [field](const RunConfig& c) { return std::to_string(read(field, c)); },
          [key, field](RunConfig& c, std::string_view v) {
            using T = std::remove_reference_t<decltype(field(c))>;
            long long x;
            require(parse_int(v, x), ErrorKind::config, bad_value(key, v, "an integer"));
            if constexpr (std::is_same_v<T, std::uint64_t>) {
              require(x >= 0, ErrorKind::config, bad_value(key, v, "a non-negative integer"));
            } else {
              require(x >= std::numeric_limits<T>::min() && x <= std::numeric_limits<T>::max(),
                      ErrorKind::config, bad_value(key, v, "a 32-bit integer"));
            }
            field(c) = static_cast<T>(x);
          }};
}

template <class Field>
Entry real_entry(std::string key, Field field) {
  return {key, [field](const RunConfig& c) { return format_real(read(field, c)); },
          [key, field](RunConfig& c, std::string_view v) {
            double x;
            require(parse_real(v, x) && std::isfinite(x), ErrorKind::config,
                    bad_value(key, v, "a finite real"));
            field(c) = x;
          }};
}

template <class Field>
Entry bool_entry(std::string key, Field field) {
  return {key,
          [field](const RunConfig& c) {
            return std::string(read(field, c) ? "true" : "false");
          },
          [key, field](RunConfig& c, std::string_view v) {
            if (v == "true" || v == "1") field(c) = true;
            else if (v == "false" || v == "0") field(c) = false;
            else fail(ErrorKind::config, bad_value(key, v, "true or false"));
          }};
}

template <class Field>
Entry string_entry(std::string key, Field field) {
  return {key, [field](const RunConfig& c) { return read(field, c); },
          [key, field](RunConfig& c, std::string_view v) {
            require(!v.empty(), ErrorKind::config, bad_value(key, v, "a non-empty string"));
            field(c) = std::string(v);
          }};
}

#define FIELD(expr) [](RunConfig& c) -> auto& { return c.expr; }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      int_entry("policy.vocab_size", FIELD(spec.vocab_size)),
      int_entry("policy.max_len", FIELD(spec.max_len)),
      int_entry("policy.image_dim", FIELD(spec.image_dim)),
      int_entry("policy.embed_dim", FIELD(spec.embed_dim)),
      int_entry("policy.hidden_dim", FIELD(spec.hidden_dim)),
      int_entry("world.n_attributes", FIELD(world.n_attributes)),
      int_entry("world.n_values", FIELD(world.n_values)),
      real_entry("world.presence_prob", FIELD(world.presence_prob)),
      real_entry("world.noise_std", FIELD(world.noise_std)),
      bool_entry("world.minor_adjacent", FIELD(world.minor_adjacent)),
      int_entry("sampling.top_k", FIELD(sampling.top_k)),
      real_entry("sampling.top_p", FIELD(sampling.top_p)),
      real_entry("sampling.temperature", FIELD(sampling.temperature)),
      int_entry("base.n_prior", FIELD(base.n_prior)),
      int_entry("base.epochs", FIELD(base.epochs)),
      real_entry("base.lr0", FIELD(base.lr0)),
      int_entry("base.batch", FIELD(base.batch)),
      real_entry("base.popular_bias", FIELD(base.prior.popular_bias)),
      real_entry("base.phantom_prob", FIELD(base.prior.phantom_prob)),
      int_entry("data.n_records", FIELD(n_records)),
      real_entry("loss.beta", FIELD(train.loss.beta)),
      real_entry("loss.gamma1", FIELD(train.loss.gamma1)),
      real_entry("loss.gamma2", FIELD(train.loss.gamma2)),
      real_entry("loss.delta", FIELD(train.loss.delta)),
      real_entry("loss.mask_ratio", FIELD(train.loss.mask_ratio)),
      real_entry("train.eps_tok", FIELD(train.eps_tok)),
      int_entry("train.sft_epochs", FIELD(train.sft_epochs)),
      real_entry("train.sft_lr0", FIELD(train.sft_lr0)),
      int_entry("train.sft_batch", FIELD(train.sft_batch)),
      int_entry("train.dpo_epochs", FIELD(train.dpo_epochs)),
      real_entry("train.dpo_lr0", FIELD(train.dpo_lr0)),
      int_entry("train.dpo_batch", FIELD(train.dpo_batch)),
      real_entry("train.moment1_decay", FIELD(train.optimizer.moment1_decay)),
      real_entry("train.moment2_decay", FIELD(train.optimizer.moment2_decay)),
      real_entry("train.stabilizer", FIELD(train.optimizer.stabilizer)),
      bool_entry("train.enable_if", FIELD(train.ablation.enable_if)),
      bool_entry("train.enable_anc", FIELD(train.ablation.enable_anc)),
      bool_entry("train.enable_hw", FIELD(train.ablation.enable_hw)),
      bool_entry("train.enable_iw", FIELD(train.ablation.enable_iw)),
      bool_entry("train.enable_opa", FIELD(train.ablation.enable_opa)),
      int_entry("eval.n_worlds", FIELD(eval_worlds)),
      int_entry("diag.n_records", FIELD(diag_records)),
      int_entry("diag.min_changed", FIELD(diag_min_changed)),
      int_entry("diag.bins", FIELD(hist_bins)),
      real_entry("diag.lo", FIELD(hist_lo)),
      real_entry("diag.hi", FIELD(hist_hi)),
      int_entry("gradcheck.n_seeds", FIELD(grad_seeds)),
      real_entry("gradcheck.step", FIELD(grad_step)),
      real_entry("gradcheck.tolerance", FIELD(grad_tolerance)),
      int_entry("seed", FIELD(seed)),
      string_entry("output_dir", FIELD(output_dir)),
      string_entry("name", FIELD(name)),
  };
  return table;
}

#undef FIELD

const Entry& find_entry(std::string_view key) {
  for (const auto& e : entries())
    if (e.key == key) return e;
  fail(ErrorKind::config, "unknown config key '" + std::string(key) + "'");
}

}  // namespace

void RunConfig::propagate_seed() {
  base.seed = seed;
  train.seed = seed;
}

void RunConfig::validate() const {
  spec.validate();
  world.validate();
  sampling.validate();
  base.validate();
  train.validate();
  synth::TokenLayout::make(spec, world);
  require(n_records >= 0, ErrorKind::config, "data.n_records must be >= 0");
  require(eval_worlds >= 1, ErrorKind::config, "eval.n_worlds must be >= 1");
  require(diag_records >= 1 && diag_min_changed >= 0, ErrorKind::config,
          "invalid diagnostics subset settings");
  require(hist_bins >= 1 && hist_hi > hist_lo, ErrorKind::config, "invalid histogram range");
  require(grad_seeds >= 1 && grad_step > 0.0 && grad_tolerance > 0.0, ErrorKind::config,
          "invalid gradient-check settings");
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& e : entries()) k.push_back(e.key);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value) {
  find_entry(key).set(cfg, trim(value));
}

std::string get_config_value(const RunConfig& cfg, std::string_view key) {
  return find_entry(key).get(cfg);
}

std::vector<std::pair<std::string, std::string>> parse_config_text(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  int line_no = 0;
  for (auto line : split(text, '\n')) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string_view::npos, ErrorKind::config,
            "config line " + std::to_string(line_no) + ": expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    require(!key.empty(), ErrorKind::config,
            "config line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::string(key), std::string(value));
  }
  return out;
}

std::string echo_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& e : entries()) out += e.key + " = " + e.get(cfg) + '\n';
  return out;
}

std::string env_name(std::string_view key) {
  std::string out = "OPADPO_";
  for (char c : key) {
    if (c == '.') out += "__";
    else out += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  }
  return out;
}

RunConfig resolve_config(const std::string& file_text,
                         const std::map<std::string, std::string>& env,
                         const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig cfg;
  for (const auto& [k, v] : parse_config_text(file_text)) set_config_value(cfg, k, v);
  for (const auto& e : entries()) {
    const auto it = env.find(env_name(e.key));
    if (it != env.end()) e.set(cfg, trim(it->second));
  }
  for (const auto& [k, v] : overrides) set_config_value(cfg, k, v);
  cfg.propagate_seed();
  cfg.validate();
  return cfg;
}

}  // namespace opadpo
