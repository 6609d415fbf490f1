#pragma once

// Image quality metrics and the classical enhancement baselines used for
// side-by-side comparisons.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "aleth/data.hpp"

namespace aleth {

constexpr double kPsnrCap = 99.0;  // sentinel for (near-)zero MSE

inline double psnr(const Image& a, const Image& b) {
  if (a.w != b.w || a.h != b.h) throw DomainError("psnr: shape mismatch");
  double mse = 0;
  for (std::size_t i = 0; i < a.px.size(); ++i) {
    double d = double(a.px[i]) - double(b.px[i]);
    mse += d * d;
  }
  mse /= double(a.px.size());
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace detail {

inline std::vector<double> to_gray(const Image& img) {
  std::vector<double> g(std::size_t(img.w) * img.h);
  for (std::size_t i = 0; i < g.size(); ++i)
    g[i] = 0.299 * img.px[i * 3] + 0.587 * img.px[i * 3 + 1] + 0.114 * img.px[i * 3 + 2];
  return g;
}

inline std::vector<double> gaussian_kernel_11(double sigma) {
  std::vector<double> k(11);
  double sum = 0;
  for (int i = 0; i < 11; ++i) {
    double x = i - 5;
    k[i] = std::exp(-x * x / (2 * sigma * sigma));
    sum += k[i];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// valid-region separable gaussian filter; output is (h-10) x (w-10)
inline std::vector<double> gauss_valid(const std::vector<double>& img, int w, int h,
                                       const std::vector<double>& k) {
  int ow = w - 10, oh = h - 10;
  std::vector<double> tmp(std::size_t(oh + 10) * ow);  // horizontal pass keeps full height
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int i = 0; i < 11; ++i) s += k[i] * img[std::size_t(y) * w + x + i];
      tmp[std::size_t(y) * ow + x] = s;
    }
  std::vector<double> out(std::size_t(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int i = 0; i < 11; ++i) s += k[i] * tmp[std::size_t(y + i) * ow + x];
      out[std::size_t(y) * ow + x] = s;
    }
  return out;
}

}  // namespace detail

// Structural similarity on the luma channel: 11x11 gaussian window
// (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2, mean over valid windows.
inline double ssim(const Image& a, const Image& b) {
  if (a.w != b.w || a.h != b.h) throw DomainError("ssim: shape mismatch");
  if (a.w < 11 || a.h < 11) throw DomainError("ssim: image smaller than the 11x11 window");
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  auto ga = detail::to_gray(a);
  auto gb = detail::to_gray(b);
  auto k = detail::gaussian_kernel_11(1.5);
  int w = a.w, h = a.h;

  auto mul = [](const std::vector<double>& x, const std::vector<double>& y) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
    return out;
  };
  auto mu_a = detail::gauss_valid(ga, w, h, k);
  auto mu_b = detail::gauss_valid(gb, w, h, k);
  auto e_aa = detail::gauss_valid(mul(ga, ga), w, h, k);
  auto e_bb = detail::gauss_valid(mul(gb, gb), w, h, k);
  auto e_ab = detail::gauss_valid(mul(ga, gb), w, h, k);

  double acc = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    double va = e_aa[i] - mu_a[i] * mu_a[i];
    double vb = e_bb[i] - mu_b[i] * mu_b[i];
    double cov = e_ab[i] - mu_a[i] * mu_b[i];
    double num = (2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2);
    double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
    acc += num / den;
  }
  return acc / double(mu_a.size());
}

// per-channel 256-bin CDF remap
inline Image hist_equalize(const Image& img) {
  Image out(img.w, img.h);
  std::size_t npix = std::size_t(img.w) * img.h;
  for (int c = 0; c < 3; ++c) {
    std::array<std::size_t, 256> hist{};
    for (std::size_t i = 0; i < npix; ++i) hist[quantize_byte(img.px[i * 3 + c])]++;
    std::array<double, 256> cdf{};
    std::size_t run = 0;
    for (int v = 0; v < 256; ++v) {
      run += hist[v];
      cdf[v] = double(run) / double(npix);
    }
    for (std::size_t i = 0; i < npix; ++i) {
      int v = quantize_byte(img.px[i * 3 + c]);
      out.px[i * 3 + c] = float(std::floor(cdf[v] * 255.0 + 0.5) / 255.0);
    }
  }
  return out;
}

inline Image gamma_correct(const Image& img, double gamma, double gain = 1.0) {
  if (!(gamma > 0)) throw DomainError("gamma_correct: gamma must be > 0");
  Image out(img.w, img.h);
  for (std::size_t i = 0; i < img.px.size(); ++i)
    out.px[i] = float(std::clamp(gain * std::pow(double(img.px[i]), gamma), 0.0, 1.0));
  return out;
}

struct EvalReport {
  struct Row {
    std::string name;
    double psnr = 0, ssim = 0;
  };
  std::string label;
  std::vector<Row> rows;
  double mean_psnr = 0, mean_ssim = 0;

  std::string to_csv() const {
    std::string s = "label,image,psnr_db,ssim\n";
    char buf[256];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "%s,%s,%.4f,%.5f\n", label.c_str(), r.name.c_str(), r.psnr,
                    r.ssim);
      s += buf;
    }
    std::snprintf(buf, sizeof(buf), "%s,mean,%.4f,%.5f\n", label.c_str(), mean_psnr, mean_ssim);
    s += buf;
    return s;
  }

  std::string summary() const {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s: %zu images, mean PSNR %.2f dB, mean SSIM %.4f",
                  label.c_str(), rows.size(), mean_psnr, mean_ssim);
    return buf;
  }
};

// Compares images with matching filenames across two directories.
inline EvalReport evaluate(const std::string& render_dir, const std::string& gt_dir,
                           const std::string& label = "aleth") {
  namespace fs = std::filesystem;
  auto list_images = [](const std::string& dir) {
    if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir);
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) {
      auto ext = path_extension(e.path().string());
      if (ext == ".png" || ext == ".ppm") names.push_back(e.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    return names;
  };
  auto ra = list_images(render_dir);
  auto rb = list_images(gt_dir);
  std::vector<std::string> only_a, only_b, both;
  std::set_difference(ra.begin(), ra.end(), rb.begin(), rb.end(), std::back_inserter(only_a));
  std::set_difference(rb.begin(), rb.end(), ra.begin(), ra.end(), std::back_inserter(only_b));
  std::set_intersection(ra.begin(), ra.end(), rb.begin(), rb.end(), std::back_inserter(both));
  if (!only_a.empty() || !only_b.empty()) {
    std::string msg = "unmatched files between directories:";
    for (const auto& n : only_a) msg += " " + n + " (renders only)";
    for (const auto& n : only_b) msg += " " + n + " (gt only)";
    throw DataError(msg);
  }
  if (both.empty()) throw DataError("no images to compare");

  EvalReport report;
  report.label = label;
  for (const auto& name : both) {
    Image a = read_image((fs::path(render_dir) / name).string());
    Image b = read_image((fs::path(gt_dir) / name).string());
    report.rows.push_back({name, psnr(a, b), ssim(a, b)});
    report.mean_psnr += report.rows.back().psnr;
    report.mean_ssim += report.rows.back().ssim;
  }
  report.mean_psnr /= double(report.rows.size());
  report.mean_ssim /= double(report.rows.size());
  return report;
}

}  // namespace aleth
