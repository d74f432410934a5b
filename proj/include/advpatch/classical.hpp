#pragma once

// Difference-of-Gaussians detector with a 4x4x8 gradient-histogram
// descriptor, following Lowe's SIFT layout. One dominant orientation per
// keypoint and no sub-pixel refinement.

#include <advpatch/error.hpp>
#include <advpatch/features.hpp>
#include <advpatch/image.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

namespace advpatch::classical {

struct ClassicalConfig {
  int octaves = 4;
  int scales_per_octave = 3;
  double sigma0 = 1.6;
  double assumed_blur = 0.5;
  double contrast_threshold = 0.04;
  double edge_ratio_threshold = 10.0;
  int descriptor_width = 4;
  int orientations = 8;

  void validate() const {
    if (octaves < 1 || scales_per_octave < 1 || contrast_threshold <= 0 || edge_ratio_threshold <= 0 ||
        sigma0 <= 0 || descriptor_width < 1 || orientations < 1) {
      throw Error(ErrorCode::InvalidConfig, "invalid classical extractor configuration");
    }
  }
};

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  return k;
}

// Separable blur with replicated borders.
inline GrayImage gaussian_blur(const GrayImage& img, double sigma) {
  if (sigma <= 0.0) return img;
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  const int W = img.width(), H = img.height();
  GrayImage tmp(W, H, 1), out(W, H, 1);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * img.at(std::clamp(x + i, 0, W - 1), y);
      tmp.at(x, y) = s;
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * tmp.at(x, std::clamp(y + i, 0, H - 1));
      out.at(x, y) = s;
    }
  return out;
}

inline GrayImage downsample2(const GrayImage& img) {
  GrayImage out((img.width() + 1) / 2, (img.height() + 1) / 2, 1);
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x) out.at(x, y) = img.at(2 * x, 2 * y);
  return out;
}

inline GrayImage subtract(const GrayImage& a, const GrayImage& b) {
  GrayImage out(a.width(), a.height(), 1);
  auto o = out.data();
  auto pa = a.data(), pb = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] - pb[i];
  return out;
}

struct Octave {
  std::vector<GrayImage> gauss;  // scales_per_octave + 3 levels
  std::vector<GrayImage> dog;    // scales_per_octave + 2 levels
};

inline std::vector<Octave> build_pyramid(const GrayImage& img, const ClassicalConfig& cfg) {
  const int s = cfg.scales_per_octave;
  const double k = std::pow(2.0, 1.0 / s);
  std::vector<double> sig(s + 3);
  sig[0] = cfg.sigma0;
  for (int i = 1; i < s + 3; ++i) {
    const double prev = cfg.sigma0 * std::pow(k, i - 1);
    sig[i] = std::sqrt(prev * k * prev * k - prev * prev);
  }
  std::vector<Octave> pyr;
  GrayImage base = gaussian_blur(img, std::sqrt(std::max(0.01, cfg.sigma0 * cfg.sigma0 -
                                                                   cfg.assumed_blur * cfg.assumed_blur)));
  for (int o = 0; o < cfg.octaves; ++o) {
    if (base.width() < 8 || base.height() < 8) break;
    Octave oct;
    oct.gauss.push_back(base);
    for (int i = 1; i < s + 3; ++i) oct.gauss.push_back(gaussian_blur(oct.gauss.back(), sig[i]));
    for (int i = 0; i + 1 < s + 3; ++i) oct.dog.push_back(subtract(oct.gauss[i + 1], oct.gauss[i]));
    base = downsample2(oct.gauss[s]);
    pyr.push_back(std::move(oct));
  }
  return pyr;
}

inline bool is_extremum(const std::vector<GrayImage>& dog, int layer, int x, int y) {
  const double v = dog[layer].at(x, y);
  bool is_max = true, is_min = true;
  for (int l = layer - 1; l <= layer + 1; ++l)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        if (l == layer && dx == 0 && dy == 0) continue;
        const double n = dog[l].at(x + dx, y + dy);
        if (n >= v) is_max = false;
        if (n <= v) is_min = false;
        if (!is_max && !is_min) return false;
      }
  return true;
}

inline void gradient(const GrayImage& g, int x, int y, double& mag, double& ang) {
  const double dx = g.at(x + 1, y) - g.at(x - 1, y);
  const double dy = g.at(x, y + 1) - g.at(x, y - 1);
  mag = std::hypot(dx, dy);
  ang = std::atan2(dy, dx);
}

inline double dominant_orientation(const GrayImage& g, int x, int y, double sigma) {
  constexpr int kBins = 36;
  std::array<double, kBins> hist{};
  const double ws = 1.5 * sigma;
  const int r = static_cast<int>(std::round(3.0 * ws));
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      const int xx = x + dx, yy = y + dy;
      if (xx <= 0 || yy <= 0 || xx >= g.width() - 1 || yy >= g.height() - 1) continue;
      double mag, ang;
      gradient(g, xx, yy, mag, ang);
      const double w = std::exp(-(dx * dx + dy * dy) / (2.0 * ws * ws));
      int b = static_cast<int>(std::floor(kBins * (ang + std::numbers::pi) / (2 * std::numbers::pi)));
      b = ((b % kBins) + kBins) % kBins;
      hist[b] += w * mag;
    }
  const int peak = static_cast<int>(std::max_element(hist.begin(), hist.end()) - hist.begin());
  const double l = hist[(peak + kBins - 1) % kBins], c = hist[peak], rr = hist[(peak + 1) % kBins];
  const double denom = l - 2 * c + rr;
  const double off = denom != 0.0 ? 0.5 * (l - rr) / denom : 0.0;
  return (peak + 0.5 + off) * 2 * std::numbers::pi / kBins - std::numbers::pi;
}

inline std::vector<double> describe(const GrayImage& g, int x, int y, double sigma, double theta,
                                    const ClassicalConfig& cfg) {
  const int d = cfg.descriptor_width, n = cfg.orientations;
  const double hist_width = 3.0 * sigma;
  const int radius = static_cast<int>(std::round(hist_width * std::sqrt(2.0) * (d + 1) * 0.5));
  const double cos_t = std::cos(theta) / hist_width, sin_t = std::sin(theta) / hist_width;
  std::vector<double> hist(static_cast<std::size_t>((d + 2) * (d + 2) * n), 0.0);
  auto at = [&](int r, int c, int o) -> double& { return hist[(r * (d + 2) + c) * n + o]; };
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      const double cr = dx * cos_t + dy * sin_t;
      const double rr = -dx * sin_t + dy * cos_t;
      const double rbin = rr + d / 2.0 - 0.5, cbin = cr + d / 2.0 - 0.5;
      if (rbin <= -1 || rbin >= d || cbin <= -1 || cbin >= d) continue;
      const int xx = x + dx, yy = y + dy;
      if (xx <= 0 || yy <= 0 || xx >= g.width() - 1 || yy >= g.height() - 1) continue;
      double mag, ang;
      gradient(g, xx, yy, mag, ang);
      double obin = (ang - theta) * n / (2 * std::numbers::pi);
      obin = std::fmod(obin, static_cast<double>(n));
      if (obin < 0) obin += n;
      const double w = mag * std::exp(-(cr * cr + rr * rr) / (2.0 * (0.5 * d) * (0.5 * d)));
      const int r0 = static_cast<int>(std::floor(rbin)), c0 = static_cast<int>(std::floor(cbin));
      const int o0 = static_cast<int>(std::floor(obin));
      const double fr = rbin - r0, fc = cbin - c0, fo = obin - o0;
      for (int ir = 0; ir <= 1; ++ir)
        for (int ic = 0; ic <= 1; ++ic)
          for (int io = 0; io <= 1; ++io) {
            const double wr = ir ? fr : 1 - fr, wc = ic ? fc : 1 - fc, wo = io ? fo : 1 - fo;
            at(r0 + 1 + ir, c0 + 1 + ic, (o0 + io) % n) += w * wr * wc * wo;
          }
    }
  std::vector<double> desc;
  desc.reserve(static_cast<std::size_t>(d * d * n));
  for (int r = 1; r <= d; ++r)
    for (int c = 1; c <= d; ++c)
      for (int o = 0; o < n; ++o) desc.push_back(at(r, c, o));
  auto normalize = [&] {
    double s = 0.0;
    for (double v : desc) s += v * v;
    s = std::sqrt(s);
    if (s > 0) for (auto& v : desc) v /= s;
    return s;
  };
  if (normalize() == 0.0) return {};
  for (auto& v : desc) v = std::min(v, 0.2);
  normalize();
  return desc;
}

}  // namespace detail

/// Keypoints sorted by descending |DoG| response, then row-major position.
inline Features extract(const GrayImage& img, const ClassicalConfig& cfg = {}) {
  require_gray(img, "classical::extract");
  cfg.validate();
  if (img.width() < 32 || img.height() < 32) throw Error(ErrorCode::ImageTooSmall, "need at least 32x32");

  const auto pyr = detail::build_pyramid(img, cfg);
  const int s = cfg.scales_per_octave;
  const double k = std::pow(2.0, 1.0 / s);
  const double contrast = cfg.contrast_threshold / s;
  const double er = cfg.edge_ratio_threshold;
  const double edge_limit = (er + 1) * (er + 1) / er;
  const int border = 5;

  struct Found {
    Keypoint kp;
    int octave;
    int layer;
    std::vector<double> desc;
  };
  std::vector<Found> found;
  for (int o = 0; o < static_cast<int>(pyr.size()); ++o) {
    const auto& oct = pyr[o];
    const int W = oct.dog[0].width(), H = oct.dog[0].height();
    for (int l = 1; l <= s; ++l) {
      const auto& D = oct.dog[l];
      for (int y = border; y < H - border; ++y)
        for (int x = border; x < W - border; ++x) {
          const double v = D.at(x, y);
          if (std::abs(v) < contrast) continue;
          if (!detail::is_extremum(oct.dog, l, x, y)) continue;
          const double dxx = D.at(x + 1, y) + D.at(x - 1, y) - 2 * v;
          const double dyy = D.at(x, y + 1) + D.at(x, y - 1) - 2 * v;
          const double dxy = 0.25 * (D.at(x + 1, y + 1) - D.at(x - 1, y + 1) - D.at(x + 1, y - 1) +
                                     D.at(x - 1, y - 1));
          const double tr = dxx + dyy, det = dxx * dyy - dxy * dxy;
          if (det <= 0 || tr * tr / det >= edge_limit) continue;
          const double sigma = cfg.sigma0 * std::pow(k, l);
          const auto& g = oct.gauss[l];
          const double theta = detail::dominant_orientation(g, x, y, sigma);
          auto desc = detail::describe(g, x, y, sigma, theta, cfg);
          if (desc.empty()) continue;
          const double scale = std::ldexp(1.0, o);
          found.push_back({{{x * scale, y * scale}, std::abs(v)}, o, l, std::move(desc)});
        }
    }
  }
  std::sort(found.begin(), found.end(), [](const Found& a, const Found& b) {
    if (a.kp.score != b.kp.score) return a.kp.score > b.kp.score;
    if (a.kp.position.y != b.kp.position.y) return a.kp.position.y < b.kp.position.y;
    if (a.kp.position.x != b.kp.position.x) return a.kp.position.x < b.kp.position.x;
    return a.octave != b.octave ? a.octave < b.octave : a.layer < b.layer;
  });

  Features f;
  const int dim = cfg.descriptor_width * cfg.descriptor_width * cfg.orientations;
  f.descriptors.rows.resize(static_cast<Eigen::Index>(found.size()), dim);
  f.descriptors.degenerate.assign(found.size(), false);
  for (std::size_t i = 0; i < found.size(); ++i) {
    f.keypoints.push_back(found[i].kp);
    for (int j = 0; j < dim; ++j) f.descriptors.rows(static_cast<Eigen::Index>(i), j) = found[i].desc[j];
  }
  return f;
}

}  // namespace advpatch::classical
