#pragma once

// The optimization loop: one view + one contiguous pixel patch per iteration,
// lowlight-mode render, the four losses, Adam with a plateaued cosine decay,
// and bit-exact checkpointing (text manifest + little-endian f32 payload).

#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "aleth/data.hpp"
#include "aleth/losses.hpp"
#include "aleth/render.hpp"

namespace aleth {

struct TrainConfig {
  double lr0 = 5e-4;
  double lr_min = 5e-6;
  int lr_plateau = 2500;  // schedule steps once per plateau
  int iters = 5000;
  int patch_w = 32, patch_h = 32;  // batch_rays = patch_w * patch_h
  LossWeights weights;             // lambdas + eta
  bool stratified = true;
  std::uint64_t seed = 0;
  bool freeze_conceal = false;  // concealing pinned at 1: vanilla photometric fit
  int checkpoint_every = 1000;
  int threads = 0;

  int batch_rays() const { return patch_w * patch_h; }

  void validate() const {
    if (!(lr0 > 0) || !(lr_min > 0) || lr_min > lr0) throw ConfigError("train: bad lr range");
    if (lr_plateau < 1) throw ConfigError("train: lr plateau must be >= 1");
    if (iters < 0) throw ConfigError("train: iters must be >= 0");
    if (patch_w < 3 || patch_h < 2)
      throw ConfigError("train: patch must be at least 3x2 (losses need neighbors)");
    weights.validate();
  }
};

// cosine decay evaluated on lr_plateau-sized plateaus (no restarts)
inline double lr_at(int iter, const TrainConfig& cfg) {
  if (iter < 0 || iter > cfg.iters) throw DomainError("lr_at: iteration out of range");
  int plateau_start = (iter / cfg.lr_plateau) * cfg.lr_plateau;
  double phase = cfg.iters > 0 ? double(plateau_start) / double(cfg.iters) : 0.0;
  return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + std::cos(M_PI * phase));
}

template <class Real>
struct AdamState {
  GradStore<Real> m, v;
  std::int64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static AdamState zeros_like(const ParamStore<Real>& params) {
    AdamState s;
    for (const auto& e : params.entries) {
      s.m.add(e.name, e.rows, e.cols);
      s.v.add(e.name, e.rows, e.cols);
    }
    return s;
  }
};

template <class Real>
void adam_step(ParamStore<Real>& params, const GradStore<Real>& grads, AdamState<Real>& state,
               double lr) {
  if (!params.same_keys(grads) || !params.same_keys(state.m))
    throw DomainError("adam_step: parameter/gradient key sets differ");
  if (!grads.all_finite()) throw NumericError("adam_step: non-finite gradient");
  state.step += 1;
  double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
  double bc2 = 1.0 - std::pow(state.beta2, double(state.step));
  for (std::size_t e = 0; e < params.entries.size(); ++e) {
    auto& p = params.entries[e].v;
    const auto& g = grads.entries[e].v;
    auto& m = state.m.entries[e].v;
    auto& v = state.v.entries[e].v;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = Real(state.beta1) * m[i] + Real(1.0 - state.beta1) * g[i];
      v[i] = Real(state.beta2) * v[i] + Real(1.0 - state.beta2) * g[i] * g[i];
      Real mhat = m[i] / Real(bc1);
      Real vhat = v[i] / Real(bc2);
      p[i] -= Real(lr) * mhat / (std::sqrt(vhat) + Real(state.eps));
    }
  }
  if (!params.all_finite()) throw NumericError("adam_step: non-finite parameter after update");
}

// ---- checkpoints --------------------------------------------------------------

template <class Real>
struct Checkpoint {
  int version = 1;
  FieldConfig field;
  ParamStore<Real> params;
  AdamState<Real> adam;
  std::int64_t iteration = 0;
  std::string rng_state;

  bool operator==(const Checkpoint& o) const {
    auto same_store = [](const ParamStore<Real>& a, const ParamStore<Real>& b) {
      if (!a.same_keys(b)) return false;
      for (std::size_t i = 0; i < a.entries.size(); ++i)
        if (std::memcmp(a.entries[i].v.data(), b.entries[i].v.data(),
                        a.entries[i].v.size() * sizeof(Real)) != 0)
          return false;
      return true;
    };
    return version == o.version && iteration == o.iteration && rng_state == o.rng_state &&
           adam.step == o.adam.step && same_store(params, o.params) &&
           same_store(adam.m, o.adam.m) && same_store(adam.v, o.adam.v) && field == o.field;
  }
};

namespace detail {

inline void write_f32_le(std::ofstream& out, const float* data, std::size_t n) {
  static_assert(sizeof(float) == 4);
  // serialize explicitly so the file is little-endian regardless of host
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &data[i], 4);
    unsigned char b[4] = {(unsigned char)(bits), (unsigned char)(bits >> 8),
                          (unsigned char)(bits >> 16), (unsigned char)(bits >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  }
}

inline bool read_f32_le(std::ifstream& in, float* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4) return false;
    std::uint32_t bits = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
                         (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
    std::memcpy(&data[i], &bits, 4);
  }
  return true;
}

}  // namespace detail

constexpr const char* kCheckpointMagic = "ALETHCKPT";

template <class Real>
void save_checkpoint(const std::string& path, const Checkpoint<Real>& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (ckpt.rng_state.empty()) throw DomainError("save_checkpoint: empty rng state");
  if (!out) throw DataError("cannot write checkpoint: " + path);
  const FieldConfig& f = ckpt.field;
  out << kCheckpointMagic << " " << ckpt.version << "\n";
  out << "field " << f.pos_levels << " " << f.dir_levels << " " << f.trunk_layers << " "
      << f.trunk_width << " " << f.conv_kernel << " " << f.n_samples << " "
      << (f.conv_learnable ? 1 : 0) << "\n";
  out << "iteration " << ckpt.iteration << "\n";
  out << "adam_step " << ckpt.adam.step << "\n";
  out << "rng " << ckpt.rng_state << "\n";
  out << "arrays " << ckpt.params.entries.size() << "\n";
  for (const auto& e : ckpt.params.entries)
    out << e.name << " " << e.rows << " " << e.cols << "\n";
  out << "payload\n";
  // payload: params, then adam.m, then adam.v, each array f32 LE
  auto write_store = [&](const ParamStore<Real>& s) {
    for (const auto& e : s.entries) {
      std::vector<float> tmp(e.v.size());
      for (std::size_t i = 0; i < e.v.size(); ++i) tmp[i] = float(e.v[i]);
      detail::write_f32_le(out, tmp.data(), tmp.size());
    }
  };
  write_store(ckpt.params);
  write_store(ckpt.adam.m);
  write_store(ckpt.adam.v);
  if (!out) throw DataError("write failed: " + path);
}

template <class Real>
Checkpoint<Real> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  std::string line;
  auto next_line = [&](const char* what) {
    if (!std::getline(in, line))
      throw CheckpointError(CheckpointError::Reason::truncated,
                            std::string("checkpoint truncated before ") + what);
    return std::istringstream(line);
  };

  Checkpoint<Real> ckpt;
  {
    auto is = next_line("magic");
    std::string magic;
    int version = 0;
    is >> magic >> version;
    if (magic != kCheckpointMagic || version != 1)
      throw CheckpointError(CheckpointError::Reason::version_mismatch,
                            "not a checkpoint or unsupported version: " + path);
    ckpt.version = version;
  }
  {
    auto is = next_line("field config");
    std::string key;
    int learnable = 1;
    is >> key >> ckpt.field.pos_levels >> ckpt.field.dir_levels >> ckpt.field.trunk_layers >>
        ckpt.field.trunk_width >> ckpt.field.conv_kernel >> ckpt.field.n_samples >> learnable;
    if (key != "field" || is.fail())
      throw CheckpointError(CheckpointError::Reason::truncated, "bad field line");
    ckpt.field.conv_learnable = learnable != 0;
  }
  {
    auto is = next_line("iteration");
    std::string key;
    is >> key >> ckpt.iteration;
    if (key != "iteration" || is.fail())
      throw CheckpointError(CheckpointError::Reason::truncated, "bad iteration line");
  }
  {
    auto is = next_line("adam step");
    std::string key;
    is >> key >> ckpt.adam.step;
    if (key != "adam_step" || is.fail())
      throw CheckpointError(CheckpointError::Reason::truncated, "bad adam_step line");
  }
  {
    if (!std::getline(in, line) || line.rfind("rng ", 0) != 0)
      throw CheckpointError(CheckpointError::Reason::truncated, "bad rng line");
    ckpt.rng_state = line.substr(4);
  }
  std::size_t n_arrays = 0;
  {
    auto is = next_line("array count");
    std::string key;
    is >> key >> n_arrays;
    if (key != "arrays" || is.fail())
      throw CheckpointError(CheckpointError::Reason::truncated, "bad arrays line");
  }
  for (std::size_t i = 0; i < n_arrays; ++i) {
    auto is = next_line("array manifest");
    std::string name;
    int rows = 0, cols = 0;
    is >> name >> rows >> cols;
    if (is.fail() || rows < 0 || cols < 0)
      throw CheckpointError(CheckpointError::Reason::truncated, "bad array manifest line");
    ckpt.params.add(name, rows, cols);
  }
  {
    auto is = next_line("payload marker");
    std::string key;
    is >> key;
    if (key != "payload")
      throw CheckpointError(CheckpointError::Reason::truncated, "missing payload marker");
  }

  // shapes must be exactly the ones the field config implies
  {
    ParamStore<Real> expect = init_field_params<Real>(ckpt.field, 0);
    if (!ckpt.params.same_keys(expect))
      throw CheckpointError(CheckpointError::Reason::shape_mismatch,
                            "array shapes do not match the checkpoint's field config");
  }

  std::int64_t adam_step_count = ckpt.adam.step;
  ckpt.adam = AdamState<Real>::zeros_like(ckpt.params);
  ckpt.adam.step = adam_step_count;
  auto read_store = [&](ParamStore<Real>& s) {
    for (auto& e : s.entries) {
      std::vector<float> tmp(e.v.size());
      if (!detail::read_f32_le(in, tmp.data(), tmp.size()))
        throw CheckpointError(CheckpointError::Reason::truncated, "checkpoint payload truncated");
      for (std::size_t i = 0; i < e.v.size(); ++i) e.v[i] = Real(tmp[i]);
    }
  };
  read_store(ckpt.params);
  read_store(ckpt.adam.m);
  read_store(ckpt.adam.v);
  return ckpt;
}

// ---- training -------------------------------------------------------------------

template <class Real>
struct LogRow {
  int iter = 0;
  double lr = 0;
  LossBreakdown<Real> loss;
};

template <class Real>
std::string format_log_row(const LogRow<Real>& row) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g", row.iter, row.lr,
                double(row.loss.nerf), double(row.loss.con), double(row.loss.st),
                double(row.loss.cc), double(row.loss.total));
  return buf;
}

template <class Real>
struct TrainResult {
  Checkpoint<Real> checkpoint;
  std::vector<LogRow<Real>> log;
};

template <class Real>
struct TrainHooks {
  // called after each iteration with the fresh log row
  std::function<void(const LogRow<Real>&)> on_iteration;
  // called for each periodic/final checkpoint
  std::function<void(const Checkpoint<Real>&)> on_checkpoint;
};

// One iteration = one view, one contiguous patch. Lowlight mode retains the
// local concealing and the unconcealed rgb from the same field evaluations.
template <class Real>
TrainResult<Real> train(const Dataset& dataset, const FieldConfig& field_cfg,
                        const TrainConfig& cfg, const Checkpoint<Real>* resume = nullptr,
                        const TrainHooks<Real>* hooks = nullptr) {
  cfg.validate();
  field_cfg.validate();
  set_threads(cfg.threads);
  auto train_views = dataset.indices(Split::train);
  if (train_views.empty()) throw DataError("train: dataset has no training frames");
  for (int vi : train_views) {
    const auto& f = dataset.frames[vi];
    if (f.image.w < cfg.patch_w || f.image.h < cfg.patch_h)
      throw ConfigError("train: patch larger than training images");
  }

  TrainResult<Real> out;
  RngState rng(cfg.seed);
  ParamStore<Real> params;
  AdamState<Real> adam;
  int start_iter = 0;
  if (resume) {
    params = resume->params;
    adam = resume->adam;
    adam.step = resume->adam.step;
    start_iter = int(resume->iteration);
    rng.deserialize(resume->rng_state);
  } else {
    params = init_field_params<Real>(field_cfg, cfg.seed);
    adam = AdamState<Real>::zeros_like(params);
  }

  SampleConfig scfg;
  scfg.n_samples = field_cfg.n_samples;
  scfg.stratified = cfg.stratified;

  auto make_checkpoint = [&](int iter) {
    Checkpoint<Real> ck;
    ck.field = field_cfg;
    ck.params = params;
    ck.adam = adam;
    ck.iteration = iter;
    ck.rng_state = rng.serialize();
    return ck;
  };

  for (int iter = start_iter; iter < cfg.iters; ++iter) {
    double lr = lr_at(iter, cfg);
    int view = train_views[rng.uniform_int(int(train_views.size()))];
    const PosedImage& frame = dataset.frames[view];
    PatchCoords patch =
        sample_patch(frame.image.w, frame.image.h, cfg.patch_w, cfg.patch_h, rng);

    Graph<Real> g;
    g.set_check_finite_large(false);  // loss row and adam_step still validate
    auto ids = make_param_leaves(g, params, true);
    RenderMode mode = cfg.freeze_conceal ? RenderMode::normal : RenderMode::lowlight;
    RenderedPatch<Real> rp;
    try {
      rp = render_patch(g, ids, field_cfg, frame.camera, patch, scfg, dataset.t_near,
                        dataset.t_far, mode, rng);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (iteration " + std::to_string(iter) +
                         ", view " + frame.name + ", patch " + std::to_string(patch.x0) + "," +
                         std::to_string(patch.y0) + ")");
    }

    Tensor<Real> gt(patch.pw * patch.ph, 3);
    for (int y = 0; y < patch.ph; ++y)
      for (int x = 0; x < patch.pw; ++x)
        for (int c = 0; c < 3; ++c)
          gt(y * patch.pw + x, c) = Real(frame.image.at(patch.x0 + x, patch.y0 + y, c));
    int gt_id = g.constant(gt);

    int nerf = build_loss_nerf(g, rp.rgb(), gt_id);
    int con = -1;
    if (!cfg.freeze_conceal)
      con = build_loss_control(g, rp.omega, patch.ph, patch.pw, Real(cfg.weights.eta));
    else
      con = g.constant(Tensor<Real>::scalar(0));
    int st = build_loss_structure(g, rp.rgb_normal, gt, patch.ph, patch.pw, Real(cfg.weights.eta));
    int cc = build_loss_color(g, rp.rgb_normal, cfg.weights.cc_per_pixel);
    int total = build_loss_total(g, nerf, con, st, cc, cfg.weights);

    LogRow<Real> row;
    row.iter = iter;
    row.lr = lr;
    row.loss.nerf = g.scalar(nerf);
    row.loss.con = g.scalar(con);
    row.loss.st = g.scalar(st);
    row.loss.cc = g.scalar(cc);
    row.loss.total = g.scalar(total);
    if (!std::isfinite(double(row.loss.total)))
      throw NumericError("train: non-finite loss at iteration " + std::to_string(iter) +
                         " (view " + frame.name + ", patch " + std::to_string(patch.x0) + "," +
                         std::to_string(patch.y0) + ")");

    g.backward(total);
    GradStore<Real> grads;
    for (const auto& e : params.entries) {
      auto& ge = grads.add(e.name, e.rows, e.cols);
      int id = ids.at(e.name);
      if (g.has_grad(id)) ge.v = g.grad(id).v;
    }
    adam_step(params, grads, adam, lr);

    out.log.push_back(row);
    if (hooks && hooks->on_iteration) hooks->on_iteration(row);
    bool last = iter + 1 == cfg.iters;
    if ((cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 && !last) &&
        hooks && hooks->on_checkpoint)
      hooks->on_checkpoint(make_checkpoint(iter + 1));
  }

  out.checkpoint = make_checkpoint(cfg.iters);
  if (hooks && hooks->on_checkpoint) hooks->on_checkpoint(out.checkpoint);
  return out;
}

}  // namespace aleth
