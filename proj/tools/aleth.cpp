// aleth: unsupervised low-light radiance-field trainer and renderer.
// Subcommands: synth, train, render, eval, checkgrad.
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric abort.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <optional>

#include "aleth/runner.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<double> eta;
  std::optional<int> iters;
  std::optional<std::string> patch;
  std::optional<int> samples;
  std::optional<int> threads;
  bool f64 = false;
};

std::pair<int, int> parse_patch(const std::string& s) {
  int w = 0, h = 0;
  if (std::sscanf(s.c_str(), "%dx%d", &w, &h) == 2) return {w, h};
  if (std::sscanf(s.c_str(), "%d", &w) == 1) return {w, w};
  throw aleth::ConfigError("cannot parse patch size (expected WxH or N): " + s);
}

void apply_overrides(aleth::RunConfig& cfg, const CommonFlags& f) {
  if (f.seed) cfg.train.seed = *f.seed;
  if (f.eta) cfg.train.weights.eta = *f.eta;
  if (f.iters) cfg.train.iters = *f.iters;
  if (f.patch) std::tie(cfg.train.patch_w, cfg.train.patch_h) = parse_patch(*f.patch);
  if (f.samples) cfg.field.n_samples = *f.samples;
  if (f.threads) cfg.train.threads = *f.threads;
  if (f.f64) cfg.f64 = true;
}

void add_common_flags(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON config file");
  cmd->add_option("--seed", f.seed, "random seed");
  cmd->add_option("--eta", f.eta, "concealing degree");
  cmd->add_option("--iters", f.iters, "training iterations");
  cmd->add_option("--patch", f.patch, "patch size, WxH or N");
  cmd->add_option("--samples", f.samples, "depth samples per ray");
  cmd->add_option("--threads", f.threads, "worker threads (1 = bit-deterministic)");
  cmd->add_flag("--f64", f.f64, "run in 64-bit floats (verification)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"aleth: low-light radiance field training and unconcealed rendering"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic paired dataset");
  std::string synth_spec, synth_out = "data/synth", darken_mode = "field_conceal";
  double omega = 0.88, theta = 1.0, gamma = 1.0, gain = 0.2;
  int conceal_samples = 64;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--spec", synth_spec, "scene spec JSON (defaults to the built-in scene)");
  synth->add_option("--out", synth_out, "output dataset directory");
  synth->add_option("--darken-mode", darken_mode, "field_conceal|image_gamma")
      ->check(CLI::IsMember({"field_conceal", "image_gamma"}));
  synth->add_option("--omega", omega, "per-sample local concealing (field_conceal)");
  synth->add_option("--theta", theta, "per-sample global concealing (field_conceal)");
  synth->add_option("--gamma", gamma, "gamma (image_gamma)");
  synth->add_option("--gain", gain, "gain (image_gamma)");
  synth->add_option("--conceal-samples", conceal_samples, "samples the concealing compounds over");
  synth->add_option("--seed", synth_seed, "scene seed");

  // train
  auto* train_cmd = app.add_subcommand("train", "train on a posed low-light dataset");
  CommonFlags train_flags;
  std::string train_data, train_out, resume_path;
  bool freeze_conceal = false;
  std::optional<int> conv_kernel;
  std::optional<double> l1, l2, l3;
  add_common_flags(train_cmd, train_flags);
  train_cmd->add_option("--data", train_data, "dataset directory");
  train_cmd->add_option("--out", train_out, "run directory");
  train_cmd->add_option("--resume", resume_path, "checkpoint to resume from");
  train_cmd->add_flag("--freeze-conceal", freeze_conceal,
                      "pin concealing at 1 (vanilla photometric fit)");
  train_cmd->add_option("--kernel", conv_kernel, "concealing conv kernel size (odd)");
  train_cmd->add_option("--lambda1", l1, "control loss weight");
  train_cmd->add_option("--lambda2", l2, "structure loss weight");
  train_cmd->add_option("--lambda3", l3, "color constancy loss weight");

  // render
  auto* render_cmd = app.add_subcommand("render", "render views from a checkpoint");
  std::string render_ckpt, render_poses, render_mode = "normal", render_out = "renders",
              render_split = "all";
  std::optional<int> render_threads;
  render_cmd->add_option("--checkpoint", render_ckpt, "checkpoint file")->required();
  render_cmd->add_option("--poses", render_poses, "dataset directory with pose manifests")
      ->required();
  render_cmd->add_option("--mode", render_mode, "normal|lowlight")
      ->check(CLI::IsMember({"normal", "lowlight"}));
  render_cmd->add_option("--split", render_split, "train|val|test|all")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));
  render_cmd->add_option("--out", render_out, "output directory");
  render_cmd->add_option("--threads", render_threads, "worker threads");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM of renders against ground truth");
  std::string eval_renders, eval_gt, eval_label = "aleth", eval_report;
  eval_cmd->add_option("--renders", eval_renders, "rendered images directory")->required();
  eval_cmd->add_option("--gt", eval_gt, "ground truth directory")->required();
  eval_cmd->add_option("--label", eval_label, "pipeline label for the report");
  eval_cmd->add_option("--report", eval_report, "CSV report path");

  // checkgrad
  auto* check_cmd = app.add_subcommand(
      "checkgrad", "finite-difference check of the full pipeline gradient (64-bit)");
  std::string check_patch = "2x2";
  int check_samples = 3, check_width = 8;
  double check_eps = 1e-4, check_tol = 1e-5, check_eta = 0.1;
  std::uint64_t check_seed = 1;
  check_cmd->add_option("--patch", check_patch, "patch size, WxH or N");
  check_cmd->add_option("--samples", check_samples, "depth samples per ray");
  check_cmd->add_option("--width", check_width, "trunk width");
  check_cmd->add_option("--eps", check_eps, "central difference step");
  check_cmd->add_option("--tol", check_tol, "max relative error to accept");
  check_cmd->add_option("--eta", check_eta, "concealing degree");
  check_cmd->add_option("--seed", check_seed, "init seed");

  try {
    app.parse(argc, argv);

    if (*synth) {
      aleth::SyntheticSceneSpec spec = aleth::SyntheticSceneSpec::default_spec();
      aleth::DarkenMode mode = aleth::DarkenMode::field_conceal;
      aleth::DarkenParams dp;
      if (!synth_spec.empty()) {
        auto [s, md] = aleth::load_scene_spec(synth_spec);
        spec = s;
        mode = md.first;
        dp = md.second;
      }
      if (synth->count("--darken-mode"))
        mode = darken_mode == "image_gamma" ? aleth::DarkenMode::image_gamma
                                            : aleth::DarkenMode::field_conceal;
      if (synth->count("--omega")) dp.omega = omega;
      if (synth->count("--theta")) dp.theta = theta;
      if (synth->count("--gamma")) dp.gamma = gamma;
      if (synth->count("--gain")) dp.gain = gain;
      if (synth->count("--conceal-samples")) dp.conceal_samples = conceal_samples;
      if (synth_seed) spec.seed = *synth_seed;
      auto result = aleth::do_synth(spec, synth_out, mode, dp);
      if (result.gamma_clipped)
        std::cerr << "warning: gamma darkening clipped values above 1\n";
      std::cout << "synth: wrote " << spec.n_cameras << " paired views to " << result.out_dir
                << "\n";
    } else if (*train_cmd) {
      aleth::RunConfig cfg = aleth::load_run_config(train_flags.config_path);
      apply_overrides(cfg, train_flags);
      if (!train_data.empty()) cfg.data_dir = train_data;
      if (!train_out.empty()) cfg.out_dir = train_out;
      if (freeze_conceal) cfg.train.freeze_conceal = true;
      if (conv_kernel) cfg.field.conv_kernel = *conv_kernel;
      if (l1) cfg.train.weights.lambda1 = *l1;
      if (l2) cfg.train.weights.lambda2 = *l2;
      if (l3) cfg.train.weights.lambda3 = *l3;
      if (cfg.f64) {
        std::optional<aleth::Checkpoint<double>> resume;
        if (!resume_path.empty()) resume = aleth::load_checkpoint<double>(resume_path);
        auto result = aleth::do_train<double>(cfg, resume ? &*resume : nullptr, &std::cout);
        std::cout << "train: finished at iteration " << result.checkpoint.iteration << "\n";
      } else {
        std::optional<aleth::Checkpoint<float>> resume;
        if (!resume_path.empty()) resume = aleth::load_checkpoint<float>(resume_path);
        auto result = aleth::do_train<float>(cfg, resume ? &*resume : nullptr, &std::cout);
        std::cout << "train: finished at iteration " << result.checkpoint.iteration << "\n";
      }
    } else if (*render_cmd) {
      auto ckpt = aleth::load_checkpoint<float>(render_ckpt);
      aleth::Dataset poses = aleth::load_dataset(render_poses);
      std::optional<aleth::Split> split;
      if (render_split == "train") split = aleth::Split::train;
      if (render_split == "val") split = aleth::Split::val;
      if (render_split == "test") split = aleth::Split::test;
      auto mode =
          render_mode == "lowlight" ? aleth::RenderMode::lowlight : aleth::RenderMode::normal;
      auto written = aleth::do_render(ckpt, poses, split, mode, render_out,
                                      render_threads.value_or(0));
      std::cout << "render: wrote " << written.size() << " images to " << render_out << "\n";
    } else if (*eval_cmd) {
      auto report = aleth::do_eval(eval_renders, eval_gt, eval_label, eval_report);
      std::cout << report.to_csv();
      std::cout << report.summary() << "\n";
    } else if (*check_cmd) {
      aleth::CheckgradConfig cfg;
      std::tie(cfg.patch_w, cfg.patch_h) = parse_patch(check_patch);
      cfg.n_samples = check_samples;
      cfg.width = check_width;
      cfg.epsilon = check_eps;
      cfg.seed = check_seed;
      cfg.weights.eta = check_eta;
      auto result = aleth::do_checkgrad(cfg);
      std::printf("checkgrad: max_rel_err=%.6e worst=%s[%d] analytic=%.9e central=%.9e params=%zu\n",
                  result.report.max_rel_error, result.report.worst_param.c_str(),
                  result.report.worst_index, result.report.worst_analytic,
                  result.report.worst_numeric, result.parameter_count);
      if (!(result.report.max_rel_error < check_tol)) {
        std::cerr << "error[numeric]: gradient check failed tolerance " << check_tol << "\n";
        return 4;
      }
    }
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error[config]: " << e.what() << "\n";
    return 2;
  } catch (const aleth::Error& e) {
    std::cerr << "error[" << e.kind_name() << "]: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << "\n";
    return 1;
  }
}
