#pragma once

// Dataset ingestion ("transforms" pose manifests + 8-bit RGB images),
// synthetic blob scenes with analytic ground truth, and low-light synthesis.

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aleth/geometry.hpp"
#include "aleth/render.hpp"

namespace aleth {

struct Image {
  int w = 0, h = 0;
  std::vector<float> px;  // h*w*3 row-major, values in [0,1]

  Image() = default;
  Image(int width, int height) : w(width), h(height), px(std::size_t(width) * height * 3, 0.f) {}

  float& at(int x, int y, int c) { return px[(std::size_t(y) * w + x) * 3 + c]; }
  float at(int x, int y, int c) const { return px[(std::size_t(y) * w + x) * 3 + c]; }

  double mean() const {
    double s = 0;
    for (float v : px) s += v;
    return px.empty() ? 0.0 : s / double(px.size());
  }
};

// round-half-up quantization to a byte
inline unsigned char quantize_byte(float v) {
  float q = std::floor(v * 255.f + 0.5f);
  return (unsigned char)std::clamp(q, 0.f, 255.f);
}

// ---- PNG ---------------------------------------------------------------

namespace detail {

struct PngReadCtx {
  std::FILE* fp = nullptr;
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadCtx() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (fp) std::fclose(fp);
  }
};

struct PngWriteCtx {
  std::FILE* fp = nullptr;
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteCtx() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    if (fp) std::fclose(fp);
  }
};

}  // namespace detail

inline Image read_png(const std::string& path) {
  detail::PngReadCtx ctx;
  ctx.fp = std::fopen(path.c_str(), "rb");
  if (!ctx.fp) throw DataError("cannot open image file: " + path);
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, ctx.fp) != 8 || png_sig_cmp(sig, 0, 8))
    throw DataError("not a png file: " + path);
  ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  ctx.info = png_create_info_struct(ctx.png);
  if (!ctx.png || !ctx.info) throw DataError("png init failed: " + path);
  if (setjmp(png_jmpbuf(ctx.png))) throw DataError("failed to decode png: " + path);
  png_init_io(ctx.png, ctx.fp);
  png_set_sig_bytes(ctx.png, 8);
  png_read_info(ctx.png, ctx.info);

  png_set_expand(ctx.png);
  if (png_get_bit_depth(ctx.png, ctx.info) == 16) png_set_strip_16(ctx.png);
  int color = png_get_color_type(ctx.png, ctx.info);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(ctx.png);
  png_set_strip_alpha(ctx.png);
  png_read_update_info(ctx.png, ctx.info);

  int w = int(png_get_image_width(ctx.png, ctx.info));
  int h = int(png_get_image_height(ctx.png, ctx.info));
  if (png_get_rowbytes(ctx.png, ctx.info) != std::size_t(w) * 3)
    throw DataError("unexpected png layout: " + path);

  std::vector<unsigned char> bytes(std::size_t(w) * h * 3);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = bytes.data() + std::size_t(y) * w * 3;
  png_read_image(ctx.png, rows.data());

  Image img(w, h);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.px[i] = float(bytes[i]) / 255.f;
  return img;
}

inline void write_png(const std::string& path, const Image& img) {
  detail::PngWriteCtx ctx;
  ctx.fp = std::fopen(path.c_str(), "wb");
  if (!ctx.fp) throw DataError("cannot write image file: " + path);
  ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  ctx.info = png_create_info_struct(ctx.png);
  if (!ctx.png || !ctx.info) throw DataError("png init failed: " + path);
  if (setjmp(png_jmpbuf(ctx.png))) throw DataError("failed to encode png: " + path);
  png_init_io(ctx.png, ctx.fp);
  png_set_IHDR(ctx.png, ctx.info, img.w, img.h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(ctx.png, ctx.info);
  std::vector<unsigned char> row(std::size_t(img.w) * 3);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c) row[std::size_t(x) * 3 + c] = quantize_byte(img.at(x, y, c));
    png_write_row(ctx.png, row.data());
  }
  png_write_end(ctx.png, nullptr);
}

// ---- PPM (P6) ------------------------------------------------------------

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image file: " + path);
  std::string magic;
  int w, h, maxval;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w < 1 || h < 1)
    throw DataError("unsupported ppm header: " + path);
  in.get();  // single whitespace after header
  std::vector<unsigned char> bytes(std::size_t(w) * h * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()));
  if (std::size_t(in.gcount()) != bytes.size()) throw DataError("truncated ppm file: " + path);
  Image img(w, h);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.px[i] = float(bytes[i]) / 255.f;
  return img;
}

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image file: " + path);
  out << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<unsigned char> bytes(img.px.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize_byte(img.px[i]);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw DataError("write failed: " + path);
}

inline std::string path_extension(const std::string& path) {
  auto ext = std::filesystem::path(path).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

inline Image read_image(const std::string& path) {
  auto ext = path_extension(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".ppm") return read_ppm(path);
  throw DataError("unsupported image format: " + path);
}

inline void write_image(const std::string& path, const Image& img) {
  auto ext = path_extension(path);
  if (ext == ".png") return write_png(path, img);
  if (ext == ".ppm") return write_ppm(path, img);
  throw DataError("unsupported image format: " + path);
}

// ---- posed datasets --------------------------------------------------------

enum class Split { train, val, test };
enum class Exposure { lowlight, normal };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

struct PosedImage {
  std::string name;  // frame basename, e.g. "r_000"
  Image image;
  Camera camera;
  Split split = Split::train;
  Exposure exposure_tag = Exposure::lowlight;
};

struct Dataset {
  std::vector<PosedImage> frames;
  double t_near = 2.0;
  double t_far = 6.0;
  double camera_angle_x = 0;

  std::vector<int> indices(Split s) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < frames.size(); ++i)
      if (frames[i].split == s) out.push_back(int(i));
    return out;
  }
};

namespace detail {

// Gram-Schmidt on the rotation columns; poses from text files carry a few
// ulps of drift that would trip the Camera invariant.
inline void reorthonormalize(Mat4& m) {
  Vec3 x{m[0][0], m[1][0], m[2][0]};
  Vec3 y{m[0][1], m[1][1], m[2][1]};
  x = vnormalize(x);
  y = vnormalize(vsub(y, vscale(x, vdot(x, y))));
  Vec3 z = vcross(x, y);
  for (int r = 0; r < 3; ++r) {
    m[r][0] = x[r];
    m[r][1] = y[r];
    m[r][2] = z[r];
  }
}

inline double rotation_orthonormal_error(const Mat4& m) {
  double worst = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double d = 0;
      for (int k = 0; k < 3; ++k) d += m[k][i] * m[k][j];
      worst = std::max(worst, std::abs(d - (i == j ? 1.0 : 0.0)));
    }
  return worst;
}

inline std::string resolve_image_path(const std::filesystem::path& dir, std::string rel) {
  if (rel.rfind("./", 0) == 0) rel = rel.substr(2);
  std::filesystem::path p = dir / rel;
  if (std::filesystem::exists(p)) return p.string();
  for (const char* ext : {".png", ".ppm"}) {
    std::filesystem::path q = p;
    q += ext;
    if (std::filesystem::exists(q)) return q.string();
  }
  throw DataError("missing image file referenced by manifest: " + p.string());
}

}  // namespace detail

inline double focal_from_angle_x(double camera_angle_x, int width) {
  return 0.5 * double(width) / std::tan(0.5 * camera_angle_x);
}

// Loads every transforms_{train,val,test}.json present in dir. If none is
// found, falls back to a single transforms.json where every 8th frame
// (indices 0, 8, 16, ...) becomes the test split.
inline Dataset load_dataset(const std::string& dir_in) {
  namespace fs = std::filesystem;
  fs::path dir(dir_in);
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir_in);

  Dataset ds;
  bool any = false;

  auto load_manifest = [&](const fs::path& manifest, Split fixed_split, bool default_split_rule) {
    std::ifstream in(manifest);
    if (!in) throw DataError("cannot open manifest: " + manifest.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed manifest " + manifest.string() + ": " + e.what());
    }
    if (!j.contains("camera_angle_x")) throw DataError("manifest missing camera_angle_x");
    double angle = j["camera_angle_x"].get<double>();
    ds.camera_angle_x = angle;
    ds.t_near = j.value("near", 2.0);
    ds.t_far = j.value("far", 6.0);
    if (!j.contains("frames") || !j["frames"].is_array() || j["frames"].empty())
      throw DataError("manifest has no frames: " + manifest.string());

    int idx = 0;
    for (const auto& f : j["frames"]) {
      if (!f.contains("file_path") || !f.contains("transform_matrix"))
        throw DataError("frame entry missing file_path/transform_matrix");
      PosedImage pi;
      std::string rel = f["file_path"].get<std::string>();
      std::string path = detail::resolve_image_path(dir, rel);
      pi.name = fs::path(path).stem().string();
      pi.image = read_image(path);

      Mat4 m{};
      const auto& tm = f["transform_matrix"];
      if (!tm.is_array() || tm.size() != 4) throw DataError("transform_matrix must be 4x4");
      for (int r = 0; r < 4; ++r) {
        if (!tm[r].is_array() || tm[r].size() != 4) throw DataError("transform_matrix must be 4x4");
        for (int c = 0; c < 4; ++c) m[r][c] = tm[r][c].get<double>();
      }
      for (int c = 0; c < 4; ++c) {
        double want = c == 3 ? 1.0 : 0.0;
        if (std::abs(m[3][c] - want) > 1e-6)
          throw DataError("malformed pose (last row) in frame " + pi.name);
      }
      if (detail::rotation_orthonormal_error(m) > 1e-3)
        throw DataError("malformed pose (rotation not orthonormal) in frame " + pi.name);
      detail::reorthonormalize(m);

      pi.camera = Camera(pi.image.w, pi.image.h, focal_from_angle_x(angle, pi.image.w), m);
      pi.split = default_split_rule ? (idx % 8 == 0 ? Split::test : Split::train) : fixed_split;
      std::string exposure = f.value("exposure", "lowlight");
      pi.exposure_tag = exposure == "normal" ? Exposure::normal : Exposure::lowlight;
      ds.frames.push_back(std::move(pi));
      ++idx;
    }
  };

  for (auto [name, split] : {std::pair{"transforms_train.json", Split::train},
                             std::pair{"transforms_val.json", Split::val},
                             std::pair{"transforms_test.json", Split::test}}) {
    fs::path p = dir / name;
    if (fs::exists(p)) {
      load_manifest(p, split, false);
      any = true;
    }
  }
  if (!any) {
    fs::path p = dir / "transforms.json";
    if (!fs::exists(p)) throw DataError("no transforms manifest in " + dir_in);
    load_manifest(p, Split::train, true);
  }
  return ds;
}

inline void write_transforms(const std::string& path, double camera_angle_x, double t_near,
                             double t_far,
                             const std::vector<std::pair<std::string, Mat4>>& frames) {
  nlohmann::json j;
  j["camera_angle_x"] = camera_angle_x;
  j["near"] = t_near;
  j["far"] = t_far;
  j["frames"] = nlohmann::json::array();
  for (const auto& [file_path, m] : frames) {
    nlohmann::json f;
    f["file_path"] = file_path;
    auto rows = nlohmann::json::array();
    for (int r = 0; r < 4; ++r) {
      auto row = nlohmann::json::array();
      for (int c = 0; c < 4; ++c) row.push_back(m[r][c]);
      rows.push_back(row);
    }
    f["transform_matrix"] = rows;
    j["frames"].push_back(f);
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest: " + path);
  out << j.dump(2) << "\n";
}

// ---- synthetic scenes -------------------------------------------------------

struct GaussianBlob {
  Vec3 center{};
  double radius = 0.2;
  double peak_density = 20.0;
  std::array<double, 3> color{1, 1, 1};
};

struct SyntheticSceneSpec {
  std::vector<GaussianBlob> blobs;
  int n_cameras = 16;
  int image_w = 64, image_h = 64;
  double ring_radius = 2.6;
  double ring_height = 0.35;
  double camera_angle_x = 0.82;
  double t_near = 1.7, t_far = 3.5;
  int gt_samples = 256;  // quadrature density for normal-light ground truth
  std::uint64_t seed = 0;

  void validate() const {
    if (n_cameras < 1 || image_w < 1 || image_h < 1) throw ConfigError("scene: bad counts");
    if (!(t_far > t_near) || !(t_near >= 0)) throw ConfigError("scene: bad t range");
    for (const auto& b : blobs) {
      if (!(b.peak_density > 0) || !(b.radius > 0)) throw ConfigError("scene: bad blob");
      for (double c : b.center)
        if (std::abs(c) > 0.5) throw ConfigError("scene: blob center outside unit cube");
    }
  }

  static SyntheticSceneSpec default_spec() {
    SyntheticSceneSpec s;
    s.blobs = {
        {{-0.22, 0.02, -0.12}, 0.21, 26.0, {0.92, 0.38, 0.22}},
        {{0.21, -0.10, 0.14}, 0.17, 30.0, {0.25, 0.80, 0.40}},
        {{0.04, 0.24, 0.10}, 0.14, 34.0, {0.30, 0.42, 0.95}},
    };
    return s;
  }
};

struct SynthScene {
  SyntheticSceneSpec spec;
  std::vector<Camera> cameras;

  double sigma_at(const Vec3& p) const {
    double s = 0;
    for (const auto& b : spec.blobs) {
      Vec3 d = vsub(p, b.center);
      s += b.peak_density * std::exp(-vdot(d, d) / (2.0 * b.radius * b.radius));
    }
    return s;
  }

  std::array<double, 3> color_at(const Vec3& p) const {
    double wsum = 0;
    std::array<double, 3> c{0, 0, 0};
    for (const auto& b : spec.blobs) {
      Vec3 d = vsub(p, b.center);
      double w = b.peak_density * std::exp(-vdot(d, d) / (2.0 * b.radius * b.radius));
      wsum += w;
      for (int k = 0; k < 3; ++k) c[k] += w * b.color[k];
    }
    if (wsum < 1e-12) return {0, 0, 0};
    for (int k = 0; k < 3; ++k) c[k] /= wsum;
    return c;
  }
};

inline Camera look_at_camera(const Vec3& position, const Vec3& target, int w, int h,
                             double camera_angle_x) {
  Vec3 z = vnormalize(vsub(position, target));  // camera looks along -z
  Vec3 up{0, 1, 0};
  Vec3 x = vnormalize(vcross(up, z));
  Vec3 y = vcross(z, x);
  Mat4 m = mat4_identity();
  for (int r = 0; r < 3; ++r) {
    m[r][0] = x[r];
    m[r][1] = y[r];
    m[r][2] = z[r];
    m[r][3] = position[r];
  }
  return Camera(w, h, focal_from_angle_x(camera_angle_x, w), m);
}

inline SynthScene synth_scene(const SyntheticSceneSpec& spec) {
  spec.validate();
  SynthScene scene;
  scene.spec = spec;
  for (int k = 0; k < spec.n_cameras; ++k) {
    double phi = 2.0 * M_PI * double(k) / double(spec.n_cameras);
    Vec3 pos{spec.ring_radius * std::sin(phi), spec.ring_height, spec.ring_radius * std::cos(phi)};
    scene.cameras.push_back(
        look_at_camera(pos, {0, 0, 0}, spec.image_w, spec.image_h, spec.camera_angle_x));
  }
  return scene;
}

// Renders one view of the analytic scene through oracle_composite. A uniform
// local concealing omega and global theta (lowlight mode) reproduce exactly
// what the model family can express at the same sample count.
inline Image render_synth_view(const SynthScene& scene, int cam_index, int n_samples,
                               RenderMode mode, double omega = 1.0, double theta = 1.0) {
  const Camera& cam = scene.cameras[cam_index];
  const auto& spec = scene.spec;
  Image img(cam.width, cam.height);
  PatchBuffers<double> buf;
  buf.ph = 1;
  buf.pw = 1;
  buf.n = n_samples;
  buf.delta = (spec.t_far - spec.t_near) / n_samples;
  buf.sigmas.resize(n_samples);
  buf.colors.resize(std::size_t(n_samples) * 3);
  buf.omegas.assign(n_samples, omega);
  buf.theta.assign(n_samples, theta);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      Ray ray = ray_for_pixel(cam, x, y, spec.t_near, spec.t_far);
      for (int i = 0; i < n_samples; ++i) {
        Vec3 p = ray.at(spec.t_near + (i + 0.5) * buf.delta);
        buf.sigmas[i] = scene.sigma_at(p);
        auto c = scene.color_at(p);
        for (int k = 0; k < 3; ++k) buf.colors[std::size_t(i) * 3 + k] = c[k];
      }
      auto rgb = oracle_composite(buf, 0, mode);
      for (int k = 0; k < 3; ++k) img.at(x, y, k) = float(std::clamp(rgb[k], 0.0, 1.0));
    }
  return img;
}

// ---- low-light synthesis ------------------------------------------------------

enum class DarkenMode { field_conceal, image_gamma };

struct DarkenParams {
  double omega = 0.88;  // per-sample local concealing (field_conceal)
  double theta = 1.0;   // per-sample global concealing (field_conceal)
  double gamma = 1.0;   // image_gamma
  double gain = 0.2;    // image_gamma
  int conceal_samples = 64;  // sample count the concealing compounds over
};

// out = clamp(gain * in^gamma, 0, 1); returns true if any value clipped
inline bool darken_image_gamma(const Image& in, double gamma, double gain, Image& out) {
  if (!(gamma > 0)) throw ConfigError("darken: gamma must be > 0");
  out = Image(in.w, in.h);
  bool clipped = false;
  for (std::size_t i = 0; i < in.px.size(); ++i) {
    double v = gain * std::pow(double(in.px[i]), gamma);
    if (v > 1.0) clipped = true;
    out.px[i] = float(std::clamp(v, 0.0, 1.0));
  }
  return clipped;
}

}  // namespace aleth
