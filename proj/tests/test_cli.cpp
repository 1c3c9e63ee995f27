// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "opadpo/checkpoint.hpp"
#include "opadpo/cli.hpp"
#include "opadpo/error.hpp"
#include "opadpo/format.hpp"
#include "opadpo/run_config.hpp"
#include "opadpo/synth.hpp"

namespace opadpo {
namespace {

namespace fs = std::filesystem;

const char* kSmallConfig =
    "# tiny grammar\n"
    "policy.vocab_size = 8\n"
    "policy.max_len = 10\n"
    "policy.image_dim = 6\n"
    "policy.embed_dim = 6\n"
    "policy.hidden_dim = 8\n"
    "world.n_attributes = 3\n"
    "world.n_values = 2\n"
    "base.n_prior = 256\n"
    "base.epochs = 2\n"
    "data.n_records = 48\n"
    "train.sft_epochs = 1\n"
    "train.dpo_epochs = 1\n"
    "train.sft_batch = 16\n"
    "train.dpo_batch = 16\n"
    "eval.n_worlds = 40\n"
    "diag.n_records = 48\n"
    "gradcheck.n_seeds = 1\n";

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

class CliTest : public ::testing::Test {
 protected:
  fs::path dir;
  std::string config;

  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("opadpo_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    config = (dir / "small.cfg").string();
    write_file_atomic(config, kSmallConfig);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  Outcome run(std::vector<std::string> args, const std::map<std::string, std::string>& env = {}) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err, env);
    return {code, out.str(), err.str()};
  }

  /// Common flags for a command writing into `sub`.
  std::vector<std::string> with(std::vector<std::string> args, const std::string& sub) {
    args.insert(args.end(), {"--config", config, "--out-dir", path(sub)});
    return args;
  }
};

TEST(RunConfig, Precedence) {
  const std::string file = "loss.beta = 0.2\nloss.gamma1 = 0.3\nloss.gamma2 = 0.4\n";
  const std::map<std::string, std::string> env{{"OPADPO_LOSS__GAMMA1", "0.5"},
                                               {"OPADPO_LOSS__GAMMA2", "0.6"}};
  const auto cfg = resolve_config(file, env, {{"loss.gamma2", "0.7"}});
  EXPECT_EQ(cfg.train.loss.beta, 0.2);
  EXPECT_EQ(cfg.train.loss.gamma1, 0.5);
  EXPECT_EQ(cfg.train.loss.gamma2, 0.7);
  EXPECT_EQ(cfg.train.loss.delta, 0.0);
  EXPECT_EQ(env_name("loss.gamma1"), "OPADPO_LOSS__GAMMA1");
}

TEST(RunConfig, SeedPropagates) {
  const auto cfg = resolve_config("seed = 17\n", {}, {});
  EXPECT_EQ(cfg.base.seed, 17u);
  EXPECT_EQ(cfg.train.seed, 17u);
}

TEST(RunConfig, RejectsBadInput) {
  auto kind = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::io;
  };
  EXPECT_EQ(kind([] { resolve_config("loss.bogus = 1\n", {}, {}); }), ErrorKind::config);
  EXPECT_EQ(kind([] { resolve_config("loss.beta = abc\n", {}, {}); }), ErrorKind::config);
  EXPECT_EQ(kind([] { resolve_config("no equals sign\n", {}, {}); }), ErrorKind::config);
  EXPECT_EQ(kind([] { resolve_config("loss.beta = -1\n", {}, {}); }), ErrorKind::config);
  EXPECT_EQ(kind([] { resolve_config("policy.vocab_size = 6\n", {}, {}); }), ErrorKind::config);
  try {
    parse_config_text("a = 1\n\nbroken\n");
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
}

TEST(RunConfig, EchoRoundTrips) {
  const auto cfg = resolve_config("loss.beta = 0.25\nname = x\n", {}, {});
  const auto echo = echo_config(cfg);
  EXPECT_EQ(echo_config(resolve_config(echo, {}, {})), echo);
  EXPECT_NE(echo.find("loss.beta = 0.25\n"), std::string::npos);
  EXPECT_EQ(split(echo, '\n').size(), config_keys().size() + 1);
  EXPECT_EQ(get_config_value(cfg, "policy.vocab_size"), "10");
}

TEST(RunConfig, DefaultsMatchPreset) {
  const RunConfig cfg;
  EXPECT_EQ(cfg.n_records, 4800);
  EXPECT_EQ(cfg.eval_worlds, 500);
  EXPECT_EQ(cfg.sampling.top_k, 30);
  EXPECT_EQ(cfg.sampling.top_p, 0.95);
  EXPECT_EQ(cfg.train.loss.beta, 0.1);
  EXPECT_EQ(cfg.train.loss.mask_ratio, 0.3);
}

TEST(CliExitCodes, Mapping) {
  EXPECT_EQ(cli::exit_code_for(ErrorKind::missing_input), 2);
  EXPECT_EQ(cli::exit_code_for(ErrorKind::numeric), 3);
  EXPECT_EQ(cli::exit_code_for(ErrorKind::config), 1);
  EXPECT_EQ(cli::exit_code_for(ErrorKind::validation), 1);
  EXPECT_EQ(cli::exit_code_for(ErrorKind::io), 1);
}

TEST_F(CliTest, UsageErrors) {
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  EXPECT_EQ(run({"train", "--mode", "sideways", "--data", "x"}).code, 1);
  EXPECT_EQ(run(with({"eval", "a.ckpt", "--set", "loss.nope=1"}, "o")).code, 1);
  EXPECT_EQ(run({"gen-data", "--help"}).code, 0);
}

TEST_F(CliTest, GenDataEmptyAndDeterministic) {
  const auto r0 = run(with({"gen-data", "--n", "0"}, "empty"));
  ASSERT_EQ(r0.code, 0) << r0.err;
  const auto empty = read_file(path("empty/dataset.tsv"));
  EXPECT_EQ(std::count(empty.begin(), empty.end(), '\n'), 1);
  EXPECT_EQ(empty.front(), '#');
  EXPECT_TRUE(fs::exists(path("empty/config.txt")));

  ASSERT_EQ(run(with({"gen-data"}, "a")).code, 0);
  ASSERT_EQ(run(with({"gen-data"}, "b")).code, 0);
  EXPECT_EQ(read_file(path("a/dataset.tsv")), read_file(path("b/dataset.tsv")));
  EXPECT_EQ(read_file(path("a/base.ckpt")), read_file(path("b/base.ckpt")));
  const auto ca = read_file(path("a/config.txt")), cb = read_file(path("b/config.txt"));
  EXPECT_EQ(ca.substr(0, ca.find("output_dir")), cb.substr(0, cb.find("output_dir")));
}

TEST_F(CliTest, ConfigEchoReflectsPrecedence) {
  const auto r = run(with({"gen-data", "--n", "0", "--set", "loss.beta=0.3"}, "o"),
                     {{"OPADPO_LOSS__BETA", "0.2"}, {"OPADPO_LOSS__DELTA", "0.1"}});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto echo = read_file(path("o/config.txt"));
  EXPECT_NE(echo.find("loss.beta = 0.3\n"), std::string::npos);
  EXPECT_NE(echo.find("loss.delta = 0.1\n"), std::string::npos);
  EXPECT_NE(echo.find("policy.vocab_size = 8\n"), std::string::npos);
  EXPECT_NE(echo.find("data.n_records = 0\n"), std::string::npos);
}

TEST_F(CliTest, ReviseRoundTrip) {
  ASSERT_EQ(run(with({"gen-data"}, "a")).code, 0);
  ASSERT_EQ(run(with({"gen-data", "--external-reviser", "--base", path("a/base.ckpt")}, "ext")).code,
            0);
  const auto pending = read_file(path("ext/dataset.tsv"));
  EXPECT_NE(pending.find("PENDING"), std::string::npos);
  ASSERT_EQ(run(with({"revise", "--in", path("ext/dataset.tsv"), "--out", path("filled.tsv")}, "r"))
                .code,
            0);
  EXPECT_EQ(read_file(path("filled.tsv")), read_file(path("a/dataset.tsv")));
  ASSERT_EQ(
      run(with({"revise", "--in", path("a/dataset.tsv"), "--out", path("again.tsv")}, "r")).code,
      0);
  EXPECT_EQ(read_file(path("again.tsv")), read_file(path("a/dataset.tsv")));
}

TEST_F(CliTest, ReviseRejectsBrokenRecord) {
  const std::string text =
      "# record_id\tprompt\timage\ty_gen\ty_gt\ty_rev\ts_hal\ts_img\n"
      "41\t5\t1,0,0,1,0,0\t0,3,6,1,4,6,7\t0,3,6,1,3,6,7\t0,3,6,7\t4\tcorrect\n";
  write_file_atomic(path("broken.tsv"), text);
  const auto r = run(with({"revise", "--in", path("broken.tsv")}, "r"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("41"), std::string::npos) << r.err;
}

TEST_F(CliTest, MissingInputsExitTwo) {
  const auto r = run(with({"eval", path("nope.ckpt")}, "o"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("nope.ckpt"), std::string::npos);
  EXPECT_EQ(run(with({"train", "--mode", "opa", "--data", path("none.tsv")}, "o")).code, 2);
  EXPECT_EQ(run({"gen-data", "--config", path("absent.cfg")}).code, 2);
}

TEST_F(CliTest, TrainEvalDiagnose) {
  ASSERT_EQ(run(with({"gen-data"}, "d")).code, 0);
  const auto data = path("d/dataset.tsv");
  const auto base = path("d/base.ckpt");
  const auto t = run(with({"train", "--mode", "opa-then-dpo", "--data", data, "--base", base}, "t"));
  ASSERT_EQ(t.code, 0) << t.err;
  for (const char* f : {"opa.ckpt", "opa_dpo.ckpt", "opa_epoch1.ckpt", "opa_dpo_epoch1.ckpt",
                        "train_log.csv", "config.txt"})
    EXPECT_TRUE(fs::exists(path(std::string("t/") + f))) << f;
  EXPECT_EQ(load_checkpoint(path("t/opa_dpo.ckpt")).meta.phase, Phase::opa_dpo);

  // Phase 2 alone from the saved phase-1 checkpoint reproduces the chain.
  ASSERT_EQ(run(with({"train", "--mode", "opa-dpo", "--data", data, "--opa", path("t/opa.ckpt")},
                     "t2"))
                .code,
            0);
  EXPECT_EQ(read_file(path("t2/opa_dpo.ckpt")), read_file(path("t/opa_dpo.ckpt")));
  EXPECT_EQ(run(with({"train", "--mode", "opa-dpo", "--data", data}, "t3")).code, 1);

  const auto one = run(with({"eval", base}, "e1"));
  ASSERT_EQ(one.code, 0) << one.err;
  const auto report = read_file(path("e1/eval_report.csv"));
  EXPECT_EQ(split(report, '\n').size(), 3u);
  EXPECT_FALSE(fs::exists(path("e1/comparison.csv")));

  const auto many = run(with({"eval", base, path("t/opa.ckpt"), path("t/opa_dpo.ckpt")}, "e"));
  ASSERT_EQ(many.code, 0) << many.err;
  const auto cmp = read_file(path("e/comparison.csv"));
  EXPECT_EQ(split(cmp, '\n').size(), 1 + 12 + 1u);
  EXPECT_NE(cmp.find("chair_s,opa_dpo,"), std::string::npos);

  const auto d = run(with({"diagnose", "--pair", base + ":" + base, "--pair",
                           path("t/opa_dpo.ckpt") + ":" + base, "--data", data},
                          "g"));
  ASSERT_EQ(d.code, 0) << d.err;
  const auto kl_text = read_file(path("g/kl_table.csv"));
  const auto kl = split(kl_text, '\n');
  EXPECT_EQ(kl[0], "p,q,mean_mean,max_mean,any_infinite,n");
  EXPECT_EQ(kl[1].substr(0, 17), "base,base,0,0,fal");
  const auto hist = read_file(path("g/logprob_hist.csv"));
  long long base_total = 0;
  std::string n_field;
  for (auto line : split(hist, '\n')) {
    const auto f = split(line, ',');
    if (f.size() == 4 && f[0] == "base") base_total += std::stoll(std::string(f[3]));
  }
  n_field = std::string(split(kl[1], ',').back());
  EXPECT_EQ(base_total, std::stoll(n_field));
}

TEST_F(CliTest, ThreadCountDoesNotChangeOutputs) {
  ASSERT_EQ(run(with({"gen-data", "--threads", "1"}, "a")).code, 0);
  ASSERT_EQ(run(with({"gen-data", "--threads", "3"}, "b")).code, 0);
  EXPECT_EQ(read_file(path("a/dataset.tsv")), read_file(path("b/dataset.tsv")));
  for (const char* sub : {"a", "b"}) {
    const std::string d = path(sub);
    ASSERT_EQ(run(with({"train", "--mode", "opa-then-dpo", "--data", d + "/dataset.tsv", "--base",
                        d + "/base.ckpt", "--threads", sub[0] == 'a' ? "1" : "3"},
                       std::string(sub) + "/t"))
                  .code,
              0);
  }
  EXPECT_EQ(read_file(path("a/t/opa_dpo.ckpt")), read_file(path("b/t/opa_dpo.ckpt")));
  EXPECT_EQ(read_file(path("a/t/train_log.csv")), read_file(path("b/t/train_log.csv")));
}

TEST_F(CliTest, GradCheck) {
  const auto ok = run(with({"grad-check"}, "g"));
  ASSERT_EQ(ok.code, 0) << ok.err;
  const auto csv = read_file(path("g/grad_check.csv"));
  const auto rows = split(csv, '\n');
  ASSERT_EQ(rows.size(), 8u);
  const char* losses[] = {"sft", "dpo", "lc", "if", "anc", "combined"};
  for (int i = 0; i < 6; ++i) {
    EXPECT_EQ(split(rows[i + 1], ',')[0], losses[i]);
    EXPECT_EQ(split(rows[i + 1], ',').back(), "pass");
  }
  const auto bad = run(with({"grad-check", "--inject-bug"}, "gb"));
  EXPECT_EQ(bad.code, 3);
  EXPECT_NE(bad.out.find("hidden_bias,fail"), std::string::npos);
}

}  // namespace
}  // namespace opadpo
