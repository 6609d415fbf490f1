#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "aleth/runner.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code;
  std::string out;
  std::string err;
};

RunResult run_cli(const std::string& args) {
  std::string dir = fs::temp_directory_path() / "aleth_cli_io";
  fs::create_directories(dir);
  std::string out_path = dir + "/stdout.txt", err_path = dir + "/stderr.txt";
  std::string cmd =
      std::string(ALETH_CLI_PATH) + " " + args + " >" + out_path + " 2>" + err_path;
  int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  auto slurp = [](const std::string& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  r.out = slurp(out_path);
  r.err = slurp(err_path);
  return r;
}

std::string fresh_dir(const char* tag) {
  auto p = fs::temp_directory_path() / (std::string("aleth_cli_") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string slurp_file(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// a small dataset shared by the pipeline tests
const std::string& shared_dataset() {
  static std::string dir = [] {
    std::string d = fresh_dir("data");
    auto r = run_cli("synth --out " + d +
                     " --darken-mode field_conceal --omega 0.9 --conceal-samples 16");
    if (r.exit_code != 0) std::abort();
    return d;
  }();
  return dir;
}

}  // namespace

TEST(Cli, help_exits_zero) {
  EXPECT_EQ(run_cli("--help").exit_code, 0);
  EXPECT_EQ(run_cli("train --help").exit_code, 0);
}

TEST(Cli, unknown_flag_is_config_error_with_prefix) {
  auto r = run_cli("train --no-such-flag");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_EQ(r.err.rfind("error[config]:", 0), 0u) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST(Cli, missing_dataset_is_data_error) {
  auto r = run_cli("train --data /nonexistent/place --iters 1");
  EXPECT_EQ(r.exit_code, 3);
  EXPECT_EQ(r.err.rfind("error[data]:", 0), 0u) << r.err;
}

TEST(Cli, bad_checkpoint_is_data_error) {
  std::string dir = fresh_dir("badckpt");
  std::ofstream(dir + "/fake.aleth") << "not a checkpoint";
  auto r = run_cli("render --checkpoint " + dir + "/fake.aleth --poses " + shared_dataset() +
                   " --out " + dir + "/renders");
  EXPECT_EQ(r.exit_code, 3);
  EXPECT_EQ(r.err.rfind("error[data]:", 0), 0u) << r.err;
}

TEST(Cli, synth_writes_expected_layout) {
  const std::string& d = shared_dataset();
  for (const char* rel :
       {"transforms_train.json", "transforms_test.json", "scene_spec.json",
        "train_low/r_001.png", "test_low/r_000.png", "train_normal/r_001.png",
        "test_normal/r_000.png"})
    EXPECT_TRUE(fs::exists(d + "/" + rel)) << rel;
}

TEST(Cli, full_pipeline_runs_and_reports) {
  std::string run = fresh_dir("pipeline");
  auto t = run_cli("train --data " + shared_dataset() + " --out " + run +
                   " --iters 12 --patch 8x8 --samples 16 --seed 3 --threads 1");
  ASSERT_EQ(t.exit_code, 0) << t.err;
  EXPECT_TRUE(fs::exists(run + "/loss_log.csv"));
  EXPECT_TRUE(fs::exists(run + "/config.json"));
  EXPECT_TRUE(fs::exists(run + "/ckpt_final.aleth"));

  auto rr = run_cli("render --checkpoint " + run + "/ckpt_final.aleth --poses " +
                    shared_dataset() + " --split test --mode normal --out " + run + "/renders");
  ASSERT_EQ(rr.exit_code, 0) << rr.err;
  EXPECT_TRUE(fs::exists(run + "/renders/r_000.png"));

  auto ev = run_cli("eval --renders " + run + "/renders --gt " + shared_dataset() +
                    "/test_normal --label aleth --report " + run + "/report.csv");
  ASSERT_EQ(ev.exit_code, 0) << ev.err;
  EXPECT_TRUE(fs::exists(run + "/report.csv"));
  EXPECT_NE(ev.out.find("aleth,mean,"), std::string::npos);
}

TEST(Cli, seeded_runs_are_bit_identical) {
  std::string a = fresh_dir("det_a"), b = fresh_dir("det_b");
  std::string args = " --iters 10 --patch 8x8 --samples 16 --seed 7 --threads 1";
  ASSERT_EQ(run_cli("train --data " + shared_dataset() + " --out " + a + args).exit_code, 0);
  ASSERT_EQ(run_cli("train --data " + shared_dataset() + " --out " + b + args).exit_code, 0);
  EXPECT_EQ(slurp_file(a + "/loss_log.csv"), slurp_file(b + "/loss_log.csv"));
  EXPECT_EQ(slurp_file(a + "/ckpt_final.aleth"), slurp_file(b + "/ckpt_final.aleth"));
}

TEST(Cli, render_twice_is_identical) {
  std::string run = fresh_dir("render_det");
  ASSERT_EQ(run_cli("train --data " + shared_dataset() + " --out " + run +
                    " --iters 4 --patch 8x8 --samples 16 --threads 1")
                .exit_code,
            0);
  for (const char* sub : {"/ra", "/rb"})
    ASSERT_EQ(run_cli("render --checkpoint " + run + "/ckpt_final.aleth --poses " +
                      shared_dataset() + " --split test --mode lowlight --out " + run + sub)
                  .exit_code,
              0);
  EXPECT_EQ(slurp_file(run + "/ra/r_000.png"), slurp_file(run + "/rb/r_000.png"));
}

TEST(Cli, config_file_with_flag_override_precedence) {
  std::string dir = fresh_dir("config");
  std::ofstream(dir + "/config.json") << R"({
    "data": ")" << shared_dataset() << R"(",
    "out": ")" << dir << R"(/run",
    "field": {"n_samples": 16},
    "train": {"iters": 3, "patch": [8, 8], "eta": 0.05, "seed": 11, "threads": 1}
  })";
  auto r = run_cli("train --config " + dir + "/config.json --iters 5");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  // flag wins over file: 5 iterations, not 3; file wins over default: eta 0.05
  auto echoed = slurp_file(dir + "/run/config.json");
  EXPECT_NE(echoed.find("\"iters\": 5"), std::string::npos) << echoed;
  EXPECT_NE(echoed.find("\"eta\": 0.05"), std::string::npos) << echoed;
  std::string log = slurp_file(dir + "/run/loss_log.csv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 5);
}

TEST(Cli, train_iters_zero_emits_initialization_checkpoint) {
  std::string run = fresh_dir("zeroiters");
  auto r = run_cli("train --data " + shared_dataset() + " --out " + run +
                   " --iters 0 --patch 8x8 --samples 16 --seed 2 --threads 1");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  auto ck = aleth::load_checkpoint<float>(run + "/ckpt_final.aleth");
  EXPECT_EQ(ck.iteration, 0);
  auto init = aleth::init_field_params<float>(ck.field, 2);
  for (std::size_t e = 0; e < init.entries.size(); ++e)
    EXPECT_EQ(ck.params.entries[e].v, init.entries[e].v);
}

TEST(Cli, checkgrad_passes_and_reports_worst_param) {
  auto r = run_cli("checkgrad --patch 2x2 --samples 3 --width 8 --eps 1e-4 --tol 1e-5");
  EXPECT_EQ(r.exit_code, 0) << r.err;
  EXPECT_NE(r.out.find("max_rel_err="), std::string::npos);
  EXPECT_NE(r.out.find("worst="), std::string::npos);
}

TEST(Cli, checkgrad_with_zero_lambda_config_still_passes) {
  auto r = run_cli("checkgrad --patch 3x2 --samples 2 --width 8 --eta 0.2 --tol 1e-5");
  EXPECT_EQ(r.exit_code, 0) << r.err;
}

TEST(Cli, checkgrad_impossible_tolerance_exits_numeric) {
  auto r = run_cli("checkgrad --patch 2x2 --samples 2 --width 8 --tol 1e-30");
  EXPECT_EQ(r.exit_code, 4);
  EXPECT_EQ(r.err.rfind("error[numeric]:", 0), 0u) << r.err;
}

TEST(Cli, gamma_darkening_warns_on_clip) {
  std::string d = fresh_dir("gammaclip");
  auto r = run_cli("synth --out " + d + " --darken-mode image_gamma --gamma 1.0 --gain 3.0");
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_NE(r.err.find("warning"), std::string::npos);
}
