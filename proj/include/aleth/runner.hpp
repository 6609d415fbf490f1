#pragma once

// Everything the CLI subcommands do, callable in-process: config file
// resolution with flag overrides, dataset synthesis, training runs with
// on-disk logs/checkpoints, view rendering, evaluation, and the
// finite-difference gate over the full render-plus-loss pipeline.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aleth/eval.hpp"
#include "aleth/train.hpp"

namespace aleth {

struct RunConfig {
  FieldConfig field;
  TrainConfig train;
  std::string data_dir;
  std::string out_dir;
  bool f64 = false;

  void validate() const {
    field.validate();
    train.validate();
  }
};

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["data"] = cfg.data_dir;
  j["out"] = cfg.out_dir;
  j["f64"] = cfg.f64;
  j["field"] = {{"pos_levels", cfg.field.pos_levels},
                {"dir_levels", cfg.field.dir_levels},
                {"trunk_layers", cfg.field.trunk_layers},
                {"trunk_width", cfg.field.trunk_width},
                {"conv_kernel", cfg.field.conv_kernel},
                {"n_samples", cfg.field.n_samples}};
  j["train"] = {{"lr0", cfg.train.lr0},
                {"lr_min", cfg.train.lr_min},
                {"lr_plateau", cfg.train.lr_plateau},
                {"iters", cfg.train.iters},
                {"patch", {cfg.train.patch_w, cfg.train.patch_h}},
                {"eta", cfg.train.weights.eta},
                {"lambda1", cfg.train.weights.lambda1},
                {"lambda2", cfg.train.weights.lambda2},
                {"lambda3", cfg.train.weights.lambda3},
                {"cc_per_pixel", cfg.train.weights.cc_per_pixel},
                {"stratified", cfg.train.stratified},
                {"seed", cfg.train.seed},
                {"freeze_conceal", cfg.train.freeze_conceal},
                {"checkpoint_every", cfg.train.checkpoint_every},
                {"threads", cfg.train.threads}};
  return j;
}

inline RunConfig load_run_config(const std::string& path) {
  RunConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config file " + path + ": " + e.what());
  }
  try {
    cfg.data_dir = j.value("data", cfg.data_dir);
    cfg.out_dir = j.value("out", cfg.out_dir);
    cfg.f64 = j.value("f64", cfg.f64);
    if (j.contains("field")) {
      const auto& f = j["field"];
      cfg.field.pos_levels = f.value("pos_levels", cfg.field.pos_levels);
      cfg.field.dir_levels = f.value("dir_levels", cfg.field.dir_levels);
      cfg.field.trunk_layers = f.value("trunk_layers", cfg.field.trunk_layers);
      cfg.field.trunk_width = f.value("trunk_width", cfg.field.trunk_width);
      cfg.field.conv_kernel = f.value("conv_kernel", cfg.field.conv_kernel);
      cfg.field.n_samples = f.value("n_samples", cfg.field.n_samples);
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      cfg.train.lr0 = t.value("lr0", cfg.train.lr0);
      cfg.train.lr_min = t.value("lr_min", cfg.train.lr_min);
      cfg.train.lr_plateau = t.value("lr_plateau", cfg.train.lr_plateau);
      cfg.train.iters = t.value("iters", cfg.train.iters);
      if (t.contains("patch")) {
        cfg.train.patch_w = t["patch"][0].get<int>();
        cfg.train.patch_h = t["patch"][1].get<int>();
      }
      cfg.train.weights.eta = t.value("eta", cfg.train.weights.eta);
      cfg.train.weights.lambda1 = t.value("lambda1", cfg.train.weights.lambda1);
      cfg.train.weights.lambda2 = t.value("lambda2", cfg.train.weights.lambda2);
      cfg.train.weights.lambda3 = t.value("lambda3", cfg.train.weights.lambda3);
      cfg.train.weights.cc_per_pixel = t.value("cc_per_pixel", cfg.train.weights.cc_per_pixel);
      cfg.train.stratified = t.value("stratified", cfg.train.stratified);
      cfg.train.seed = t.value("seed", cfg.train.seed);
      cfg.train.freeze_conceal = t.value("freeze_conceal", cfg.train.freeze_conceal);
      cfg.train.checkpoint_every = t.value("checkpoint_every", cfg.train.checkpoint_every);
      cfg.train.threads = t.value("threads", cfg.train.threads);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad value in config file " + path + ": " + e.what());
  }
  return cfg;
}

// ---- synth -----------------------------------------------------------------

struct SynthOutput {
  std::string out_dir;
  bool gamma_clipped = false;
};

inline nlohmann::json scene_spec_to_json(const SyntheticSceneSpec& spec, DarkenMode mode,
                                         const DarkenParams& dp) {
  nlohmann::json j;
  j["blobs"] = nlohmann::json::array();
  for (const auto& b : spec.blobs)
    j["blobs"].push_back({{"center", {b.center[0], b.center[1], b.center[2]}},
                          {"radius", b.radius},
                          {"peak_density", b.peak_density},
                          {"color", {b.color[0], b.color[1], b.color[2]}}});
  j["n_cameras"] = spec.n_cameras;
  j["image_w"] = spec.image_w;
  j["image_h"] = spec.image_h;
  j["ring_radius"] = spec.ring_radius;
  j["ring_height"] = spec.ring_height;
  j["camera_angle_x"] = spec.camera_angle_x;
  j["near"] = spec.t_near;
  j["far"] = spec.t_far;
  j["gt_samples"] = spec.gt_samples;
  j["seed"] = spec.seed;
  j["darken"] = {{"mode", mode == DarkenMode::field_conceal ? "field_conceal" : "image_gamma"},
                 {"omega", dp.omega},
                 {"theta", dp.theta},
                 {"gamma", dp.gamma},
                 {"gain", dp.gain},
                 {"conceal_samples", dp.conceal_samples}};
  return j;
}

inline std::pair<SyntheticSceneSpec, std::pair<DarkenMode, DarkenParams>> scene_spec_from_json(
    const nlohmann::json& j) {
  SyntheticSceneSpec spec;
  spec.blobs.clear();
  if (j.contains("blobs"))
    for (const auto& b : j["blobs"]) {
      GaussianBlob blob;
      for (int k = 0; k < 3; ++k) blob.center[k] = b["center"][k].get<double>();
      blob.radius = b["radius"].get<double>();
      blob.peak_density = b["peak_density"].get<double>();
      for (int k = 0; k < 3; ++k) blob.color[k] = b["color"][k].get<double>();
      spec.blobs.push_back(blob);
    }
  spec.n_cameras = j.value("n_cameras", spec.n_cameras);
  spec.image_w = j.value("image_w", spec.image_w);
  spec.image_h = j.value("image_h", spec.image_h);
  spec.ring_radius = j.value("ring_radius", spec.ring_radius);
  spec.ring_height = j.value("ring_height", spec.ring_height);
  spec.camera_angle_x = j.value("camera_angle_x", spec.camera_angle_x);
  spec.t_near = j.value("near", spec.t_near);
  spec.t_far = j.value("far", spec.t_far);
  spec.gt_samples = j.value("gt_samples", spec.gt_samples);
  spec.seed = j.value("seed", spec.seed);
  DarkenMode mode = DarkenMode::field_conceal;
  DarkenParams dp;
  if (j.contains("darken")) {
    const auto& d = j["darken"];
    std::string m = d.value("mode", "field_conceal");
    if (m == "image_gamma")
      mode = DarkenMode::image_gamma;
    else if (m != "field_conceal")
      throw ConfigError("unknown darken mode: " + m);
    dp.omega = d.value("omega", dp.omega);
    dp.theta = d.value("theta", dp.theta);
    dp.gamma = d.value("gamma", dp.gamma);
    dp.gain = d.value("gain", dp.gain);
    dp.conceal_samples = d.value("conceal_samples", dp.conceal_samples);
  }
  return {spec, {mode, dp}};
}

inline std::pair<SyntheticSceneSpec, std::pair<DarkenMode, DarkenParams>> load_scene_spec(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open scene spec: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed scene spec " + path + ": " + e.what());
  }
  return scene_spec_from_json(j);
}

// Emits the paired dataset: low-light train/test manifests plus normal-light
// ground truth directories, and the scene_spec.json recording the truth.
inline SynthOutput do_synth(const SyntheticSceneSpec& spec, const std::string& out_dir,
                            DarkenMode mode, const DarkenParams& dp) {
  namespace fs = std::filesystem;
  spec.validate();
  if (mode == DarkenMode::field_conceal &&
      (!(dp.omega > 0) || dp.omega >= 1.0 || !(dp.theta > 0) || dp.theta > 1.0))
    throw ConfigError("field_conceal darkening needs omega in (0,1), theta in (0,1]");

  SynthScene scene = synth_scene(spec);
  std::error_code ec;
  fs::create_directories(fs::path(out_dir), ec);
  for (const char* sub : {"train_low", "test_low", "train_normal", "test_normal"})
    fs::create_directories(fs::path(out_dir) / sub, ec);
  if (!fs::is_directory(out_dir)) throw DataError("cannot create output directory: " + out_dir);

  SynthOutput result;
  result.out_dir = out_dir;
  std::vector<std::pair<std::string, Mat4>> train_frames, test_frames;
  char name[32];
  for (int k = 0; k < spec.n_cameras; ++k) {
    std::snprintf(name, sizeof(name), "r_%03d", k);
    bool is_test = k % 8 == 0;
    std::string split = is_test ? "test" : "train";

    Image normal = render_synth_view(scene, k, spec.gt_samples, RenderMode::normal);
    Image low;
    if (mode == DarkenMode::field_conceal) {
      low = render_synth_view(scene, k, dp.conceal_samples, RenderMode::lowlight, dp.omega,
                              dp.theta);
    } else {
      result.gamma_clipped |= darken_image_gamma(normal, dp.gamma, dp.gain, low);
    }
    write_image((fs::path(out_dir) / (split + "_normal") / (std::string(name) + ".png")).string(),
                normal);
    write_image((fs::path(out_dir) / (split + "_low") / (std::string(name) + ".png")).string(),
                low);
    auto& frames = is_test ? test_frames : train_frames;
    frames.push_back({"./" + split + "_low/" + name, scene.cameras[k].pose});
  }
  write_transforms((fs::path(out_dir) / "transforms_train.json").string(), spec.camera_angle_x,
                   spec.t_near, spec.t_far, train_frames);
  write_transforms((fs::path(out_dir) / "transforms_test.json").string(), spec.camera_angle_x,
                   spec.t_near, spec.t_far, test_frames);
  std::ofstream spec_out(fs::path(out_dir) / "scene_spec.json");
  spec_out << scene_spec_to_json(spec, mode, dp).dump(2) << "\n";
  if (!spec_out) throw DataError("cannot write scene_spec.json in " + out_dir);
  return result;
}

// ---- train -----------------------------------------------------------------

template <class Real>
TrainResult<Real> do_train(const RunConfig& cfg, const Checkpoint<Real>* resume = nullptr,
                           std::ostream* progress = nullptr) {
  namespace fs = std::filesystem;
  cfg.validate();
  if (cfg.data_dir.empty()) throw ConfigError("train: no dataset directory configured");
  Dataset ds = load_dataset(cfg.data_dir);

  std::ofstream log_file;
  if (!cfg.out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (!fs::is_directory(cfg.out_dir))
      throw DataError("cannot create run directory: " + cfg.out_dir);
    std::ofstream echo(fs::path(cfg.out_dir) / "config.json");
    echo << run_config_to_json(cfg).dump(2) << "\n";
    log_file.open(fs::path(cfg.out_dir) / "loss_log.csv",
                  resume ? std::ios::app : std::ios::out);
    if (!log_file) throw DataError("cannot write loss log in " + cfg.out_dir);
  }

  TrainHooks<Real> hooks;
  hooks.on_iteration = [&](const LogRow<Real>& row) {
    if (log_file.is_open()) log_file << format_log_row(row) << "\n";
    if (progress && (row.iter % 100 == 0 || row.iter + 1 == cfg.train.iters)) {
      (*progress) << "iter " << row.iter << " lr " << row.lr << " nerf " << double(row.loss.nerf)
                  << " con " << double(row.loss.con) << " st " << double(row.loss.st) << " cc "
                  << double(row.loss.cc) << " total " << double(row.loss.total) << "\n";
    }
  };
  hooks.on_checkpoint = [&](const Checkpoint<Real>& ck) {
    if (cfg.out_dir.empty()) return;
    char name[48];
    if (ck.iteration == cfg.train.iters)
      std::snprintf(name, sizeof(name), "ckpt_final.aleth");
    else
      std::snprintf(name, sizeof(name), "ckpt_%06lld.aleth", (long long)ck.iteration);
    save_checkpoint((fs::path(cfg.out_dir) / name).string(), ck);
  };
  return train(ds, cfg.field, cfg.train, resume, &hooks);
}

// ---- render ----------------------------------------------------------------

template <class Real>
std::vector<std::string> do_render(const Checkpoint<Real>& ckpt, const Dataset& poses,
                                   std::optional<Split> split, RenderMode mode,
                                   const std::string& out_dir, int threads = 0) {
  namespace fs = std::filesystem;
  set_threads(threads);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::is_directory(out_dir)) throw DataError("cannot create render directory: " + out_dir);
  SampleConfig scfg;
  scfg.n_samples = ckpt.field.n_samples;
  scfg.stratified = false;
  std::vector<std::string> written;
  for (const auto& frame : poses.frames) {
    if (split && frame.split != *split) continue;
    auto render = render_image(ckpt.params, ckpt.field, frame.camera, scfg, poses.t_near,
                               poses.t_far, mode);
    Image img(render.width, render.height);
    for (std::size_t i = 0; i < img.px.size(); ++i)
      img.px[i] = float(std::clamp(double(render.rgb[i]), 0.0, 1.0));
    std::string path = (fs::path(out_dir) / (frame.name + ".png")).string();
    write_image(path, img);
    written.push_back(path);
  }
  if (written.empty()) throw DataError("render: no poses matched the requested split");
  return written;
}

// ---- eval ------------------------------------------------------------------

inline EvalReport do_eval(const std::string& render_dir, const std::string& gt_dir,
                          const std::string& label, const std::string& report_path = "") {
  EvalReport report = evaluate(render_dir, gt_dir, label);
  if (!report_path.empty()) {
    std::ofstream out(report_path);
    if (!out) throw DataError("cannot write report: " + report_path);
    out << report.to_csv();
  }
  return report;
}

// ---- checkgrad ---------------------------------------------------------------

struct CheckgradConfig {
  int patch_w = 2, patch_h = 2;
  int n_samples = 3;
  int width = 8;
  int layers = 4;
  int conv_kernel = 3;
  double epsilon = 1e-4;
  std::uint64_t seed = 1;
  LossWeights weights;
  // pre-activations are pushed at least this far from the ReLU kink before
  // differencing; central differences step across the kink otherwise
  double kink_guard = 5e-3;
};

struct CheckgradContext {
  FieldConfig field;
  Camera camera;
  PatchCoords patch;
  SampleConfig scfg;
  double t_near = 1.7, t_far = 3.5;
  Tensor<double> gt;
  LossWeights weights;
};

inline CheckgradContext make_checkgrad_context(const CheckgradConfig& cfg) {
  CheckgradContext ctx;
  ctx.field.trunk_width = cfg.width;
  ctx.field.trunk_layers = cfg.layers;
  ctx.field.conv_kernel = cfg.conv_kernel;
  ctx.field.n_samples = cfg.n_samples;
  ctx.field.validate();
  int img_w = std::max(4, cfg.patch_w), img_h = std::max(4, cfg.patch_h);
  ctx.camera = look_at_camera({0.3, 0.4, 2.6}, {0, 0, 0}, img_w, img_h, 0.9);
  ctx.patch = PatchCoords{0, 0, cfg.patch_w, cfg.patch_h};
  ctx.scfg.n_samples = cfg.n_samples;
  ctx.scfg.stratified = false;
  ctx.weights = cfg.weights;
  RngState rng(cfg.seed + 7919);
  ctx.gt = Tensor<double>(cfg.patch_w * cfg.patch_h, 3);
  for (auto& v : ctx.gt.v) v = rng.uniform();
  return ctx;
}

// The full render-plus-loss pipeline as a differentiable closure. The
// structure loss needs horizontal neighbors, so it joins only when the patch
// is at least 3 wide; it introduces no parameter group of its own.
inline PipelineFn<double> make_checkgrad_pipeline(const CheckgradContext& ctx) {
  return [ctx](Graph<double>& g, const ParamIds& ids) {
    RngState rng(0);  // unused: sampling is non-stratified
    auto rp = render_patch(g, ids, ctx.field, ctx.camera, ctx.patch, ctx.scfg, ctx.t_near,
                           ctx.t_far, RenderMode::lowlight, rng);
    int gt_id = g.constant(ctx.gt);
    int nerf = build_loss_nerf(g, rp.rgb(), gt_id);
    int con = build_loss_control(g, rp.omega, ctx.patch.ph, ctx.patch.pw, ctx.weights.eta);
    int st = ctx.patch.pw >= 3
                 ? build_loss_structure(g, rp.rgb_normal, ctx.gt, ctx.patch.ph, ctx.patch.pw,
                                        ctx.weights.eta)
                 : g.constant(Tensor<double>::scalar(0));
    int cc = build_loss_color(g, rp.rgb_normal, ctx.weights.cc_per_pixel);
    return build_loss_total(g, nerf, con, st, cc, ctx.weights);
  };
}

// Deterministically bumps biases until every ReLU pre-activation clears the
// guard band. Returns the number of bumps applied.
inline int nudge_relu_preactivations(ParamStore<double>& params, const CheckgradContext& ctx,
                                     double guard) {
  int bumps = 0;
  for (int attempt = 0; attempt < 256; ++attempt) {
    Graph<double> g;
    g.set_no_grad(true);
    g.set_fused(false);  // the probe needs pre-activation values on the tape
    auto ids = make_param_leaves(g, params, false);
    RngState rng(0);
    auto rp = render_patch(g, ids, ctx.field, ctx.camera, ctx.patch, ctx.scfg, ctx.t_near,
                           ctx.t_far, RenderMode::lowlight, rng);
    bool clean = true;
    for (const auto& [node, bias_name] : rp.relu_preacts) {
      const auto& z = g.value(node);
      auto& bias = params.at(bias_name);
      for (int c = 0; c < z.cols; ++c) {
        double closest = 1e30;
        for (int r = 0; r < z.rows; ++r) closest = std::min(closest, std::abs(z(r, c)));
        if (closest < guard) {
          bias.v[c] += 4.0 * guard;
          ++bumps;
          clean = false;
        }
      }
    }
    if (clean) return bumps;
  }
  throw NumericError("checkgrad: could not move ReLU pre-activations off the kink");
}

struct CheckgradResult {
  FdReport<double> report;
  std::size_t parameter_count = 0;
  int kink_bumps = 0;
};

inline CheckgradResult do_checkgrad(const CheckgradConfig& cfg) {
  CheckgradContext ctx = make_checkgrad_context(cfg);
  ParamStore<double> params = init_field_params<double>(ctx.field, cfg.seed);
  CheckgradResult result;
  result.kink_bumps = nudge_relu_preactivations(params, ctx, cfg.kink_guard);
  result.parameter_count = params.total_scalars();
  result.report = finite_difference_check(make_checkgrad_pipeline(ctx), params, cfg.epsilon);
  return result;
}

// ---- analysis helpers ---------------------------------------------------------

// Depth-mean of the local concealing field over a full view.
template <class Real>
Tensor<Real> omega_map(const ParamStore<Real>& params, const FieldConfig& cfg, const Camera& cam,
                       double t_near, double t_far) {
  SampleConfig scfg;
  scfg.n_samples = cfg.n_samples;
  scfg.stratified = false;
  auto render = render_image(params, cfg, cam, scfg, t_near, t_far, RenderMode::lowlight);
  Tensor<Real> map(cam.height, cam.width);
  for (int pix = 0; pix < cam.width * cam.height; ++pix) {
    Real s = 0;
    for (int i = 0; i < cfg.n_samples; ++i)
      s += render.buffers.omegas[std::size_t(pix) * cfg.n_samples + i];
    map.v[pix] = s / Real(cfg.n_samples);
  }
  return map;
}

template <class Real>
double total_variation(const Tensor<Real>& map) {
  double tv = 0;
  for (int y = 0; y < map.rows; ++y)
    for (int x = 0; x < map.cols; ++x) {
      if (x + 1 < map.cols) tv += std::abs(double(map(y, x + 1)) - double(map(y, x)));
      if (y + 1 < map.rows) tv += std::abs(double(map(y + 1, x)) - double(map(y, x)));
    }
  return tv;
}

}  // namespace aleth
