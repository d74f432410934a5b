#pragma once

// Real-valued rasters in [0,1], binary PNM I/O, resampling, and backward-warp
// compositing. Quantization to 8 bits happens only in decode/encode.

#include <advpatch/error.hpp>
#include <advpatch/geometry.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace advpatch {

class ImageBuffer {
 public:
  ImageBuffer() = default;
  ImageBuffer(int width, int height, int channels, double fill = 0.0)
      : width_(width), height_(height), channels_(channels),
        data_(static_cast<std::size_t>(width) * height * channels, fill) {
    if (width < 0 || height < 0 || (channels != 1 && channels != 3)) {
      throw Error(ErrorCode::BadDimensions, "invalid image shape");
    }
  }
  ImageBuffer(int width, int height, int channels, std::vector<double> data)
      : ImageBuffer(width, height, channels) {
    if (data.size() != data_.size()) throw Error(ErrorCode::BadDimensions, "data length mismatch");
    data_ = std::move(data);
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  bool empty() const { return data_.empty(); }
  bool is_gray() const { return channels_ == 1; }

  double& at(int x, int y, int c = 0) {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }
  double at(int x, int y, int c = 0) const {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  void clamp01() {
    for (auto& v : data_) v = std::clamp(v, 0.0, 1.0);
  }

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  int channels_ = 1;
  std::vector<double> data_;
};

/// Single-channel ImageBuffer; the alias documents intent at API boundaries.
using GrayImage = ImageBuffer;

inline void require_gray(const ImageBuffer& img, const char* who) {
  if (!img.is_gray()) throw Error(ErrorCode::BadDimensions, std::string(who) + " expects 1 channel");
}

// ---------------------------------------------------------------------------
// PNM

namespace detail {

class PnmHeaderReader {
 public:
  explicit PnmHeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const auto ch = bytes_[pos_];
      if (ch == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(ch)) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  long read_uint() {
    skip_space_and_comments();
    const std::size_t start = pos_;
    long v = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > (1L << 30)) throw Error(ErrorCode::MalformedHeader, "header value too large");
      ++pos_;
    }
    if (pos_ == start) throw Error(ErrorCode::MalformedHeader, "expected an integer");
    return v;
  }

  std::size_t pos() const { return pos_; }
  void advance(std::size_t n) { pos_ += n; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Decodes binary P5 (gray) or P6 (RGB) with maxval <= 255.
inline ImageBuffer decode_ppm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw Error(ErrorCode::MalformedHeader, "magic must be P5 or P6");
  }
  const int channels = bytes[1] == '5' ? 1 : 3;
  detail::PnmHeaderReader rd(bytes);
  rd.advance(2);
  const long w = rd.read_uint();
  const long h = rd.read_uint();
  const long maxval = rd.read_uint();
  if (w <= 0 || h <= 0) throw Error(ErrorCode::MalformedHeader, "zero image dimension");
  if (maxval <= 0) throw Error(ErrorCode::MalformedHeader, "maxval must be positive");
  if (maxval > 255) throw Error(ErrorCode::UnsupportedMaxval, std::to_string(maxval));
  if (rd.pos() >= bytes.size() || !std::isspace(bytes[rd.pos()])) {
    throw Error(ErrorCode::MalformedHeader, "missing whitespace after maxval");
  }
  rd.advance(1);
  const std::size_t need = static_cast<std::size_t>(w) * h * channels;
  if (bytes.size() - rd.pos() < need) {
    throw Error(ErrorCode::TruncatedPayload, "expected " + std::to_string(need) + " bytes, got " +
                                                 std::to_string(bytes.size() - rd.pos()));
  }
  ImageBuffer img(static_cast<int>(w), static_cast<int>(h), channels);
  auto out = img.data();
  const double scale = static_cast<double>(maxval);
  for (std::size_t i = 0; i < need; ++i) {
    out[i] = std::min(1.0, bytes[rd.pos() + i] / scale);
  }
  return img;
}

inline std::uint8_t quantize8(double v) {
  return static_cast<std::uint8_t>(std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5));
}

/// Encodes as P5 (1 channel) or P6 (3 channels), maxval 255, round-half-up.
inline std::vector<std::uint8_t> encode_ppm(const ImageBuffer& img) {
  const std::string header = std::string(img.is_gray() ? "P5" : "P6") + "\n" +
                             std::to_string(img.width()) + " " + std::to_string(img.height()) +
                             "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.data().size());
  for (double v : img.data()) out.push_back(quantize8(v));
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline ImageBuffer load_ppm(const std::string& path) { return decode_ppm(read_file_bytes(path)); }

inline void save_ppm(const std::string& path, const ImageBuffer& img) {
  write_file_bytes(path, encode_ppm(img));
}

// ---------------------------------------------------------------------------
// Pixel operations

inline GrayImage to_grayscale(const ImageBuffer& img) {
  if (img.is_gray()) return img;
  GrayImage g(img.width(), img.height(), 1);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      g.at(x, y) = 0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);
  return g;
}

/// Four-neighbor bilinear interpolation; coordinates clamp to the border.
inline double bilinear_sample(const ImageBuffer& img, double x, double y, int channel = 0) {
  const double cx = std::clamp(x, 0.0, static_cast<double>(img.width() - 1));
  const double cy = std::clamp(y, 0.0, static_cast<double>(img.height() - 1));
  const int x0 = static_cast<int>(std::floor(cx));
  const int y0 = static_cast<int>(std::floor(cy));
  const int x1 = std::min(x0 + 1, img.width() - 1);
  const int y1 = std::min(y0 + 1, img.height() - 1);
  const double fx = cx - x0;
  const double fy = cy - y0;
  const double top = img.at(x0, y0, channel) * (1.0 - fx) + img.at(x1, y0, channel) * fx;
  const double bot = img.at(x0, y1, channel) * (1.0 - fx) + img.at(x1, y1, channel) * fx;
  return top * (1.0 - fy) + bot * fy;
}

namespace detail {

// One axis of a corner-aligned bilinear resampling: destination index i reads
// source indices lo[i], lo[i]+1 with weight frac[i] on the latter.
struct AxisMap {
  std::vector<int> lo;
  std::vector<int> hi;
  std::vector<double> frac;
};

inline AxisMap corner_aligned_axis(int src, int dst) {
  AxisMap m;
  m.lo.resize(dst);
  m.hi.resize(dst);
  m.frac.resize(dst);
  for (int i = 0; i < dst; ++i) {
    const double s = dst > 1 ? static_cast<double>(i) * (src - 1) / (dst - 1) : 0.5 * (src - 1);
    int lo = static_cast<int>(std::floor(s));
    lo = std::clamp(lo, 0, src - 1);
    m.lo[i] = lo;
    m.hi[i] = std::min(lo + 1, src - 1);
    m.frac[i] = m.hi[i] == lo ? 0.0 : s - lo;
  }
  return m;
}

}  // namespace detail

/// Bilinear resampling with corner-aligned coordinates (dst 0 -> src 0,
/// dst n-1 -> src w-1).
inline ImageBuffer resize(const ImageBuffer& img, int new_w, int new_h) {
  if (new_w < 1 || new_h < 1) throw Error(ErrorCode::BadDimensions, "resize target must be >= 1");
  if (new_w == img.width() && new_h == img.height()) return img;
  const auto mx = detail::corner_aligned_axis(img.width(), new_w);
  const auto my = detail::corner_aligned_axis(img.height(), new_h);
  ImageBuffer out(new_w, new_h, img.channels());
  for (int y = 0; y < new_h; ++y) {
    const double fy = my.frac[y];
    for (int x = 0; x < new_w; ++x) {
      const double fx = mx.frac[x];
      for (int c = 0; c < img.channels(); ++c) {
        const double top = img.at(mx.lo[x], my.lo[y], c) * (1 - fx) + img.at(mx.hi[x], my.lo[y], c) * fx;
        const double bot = img.at(mx.lo[x], my.hi[y], c) * (1 - fx) + img.at(mx.hi[x], my.hi[y], c) * fx;
        out.at(x, y, c) = std::clamp(top * (1 - fy) + bot * fy, 0.0, 1.0);
      }
    }
  }
  return out;
}

/// Adjoint of resize(src_w x src_h -> grad.width() x grad.height()): scatters
/// each destination value back onto the source pixels with the same weights.
/// Used to pull gradients through an augmentation resize.
inline ImageBuffer resize_transpose(const ImageBuffer& grad, int src_w, int src_h) {
  if (src_w == grad.width() && src_h == grad.height()) return grad;
  ImageBuffer out(src_w, src_h, grad.channels(), 0.0);
  const auto mx = detail::corner_aligned_axis(src_w, grad.width());
  const auto my = detail::corner_aligned_axis(src_h, grad.height());
  for (int y = 0; y < grad.height(); ++y) {
    const double fy = my.frac[y];
    for (int x = 0; x < grad.width(); ++x) {
      const double fx = mx.frac[x];
      for (int c = 0; c < grad.channels(); ++c) {
        const double g = grad.at(x, y, c);
        out.at(mx.lo[x], my.lo[y], c) += g * (1 - fx) * (1 - fy);
        out.at(mx.hi[x], my.lo[y], c) += g * fx * (1 - fy);
        out.at(mx.lo[x], my.hi[y], c) += g * (1 - fx) * fy;
        out.at(mx.hi[x], my.hi[y], c) += g * fx * fy;
      }
    }
  }
  return out;
}

inline ImageBuffer crop(const ImageBuffer& img, int x0, int y0, int w, int h) {
  if (x0 < 0 || y0 < 0 || w < 0 || h < 0 || x0 + w > img.width() || y0 + h > img.height()) {
    throw Error(ErrorCode::CropTooLarge, "crop window outside image");
  }
  ImageBuffer out(w, h, img.channels());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < img.channels(); ++c) out.at(x, y, c) = img.at(x0 + x, y0 + y, c);
  return out;
}

struct CropOffset {
  int x = 0;
  int y = 0;
};

inline CropOffset sample_crop_offset(int width, int height, int crop_w, int crop_h,
                                     std::mt19937_64& rng) {
  if (crop_w > width || crop_h > height || crop_w < 0 || crop_h < 0) {
    throw Error(ErrorCode::CropTooLarge, "crop larger than image");
  }
  std::uniform_int_distribution<int> dx(0, width - crop_w);
  std::uniform_int_distribution<int> dy(0, height - crop_h);
  const int x = dx(rng);
  const int y = dy(rng);
  return {x, y};
}

inline ImageBuffer random_crop(const ImageBuffer& img, int crop_w, int crop_h, std::mt19937_64& rng) {
  const auto off = sample_crop_offset(img.width(), img.height(), crop_w, crop_h, rng);
  return crop(img, off.x, off.y, crop_w, crop_h);
}

// ---------------------------------------------------------------------------
// Compositing

/// Backward-warps `patch` into `quad` on a copy of `canvas`. The patch's
/// (0,0)-(w,h) rectangle corners map onto the quad corners in order; every
/// canvas pixel whose center the quad covers receives a bilinear sample.
inline ImageBuffer warp_into_quad(const ImageBuffer& canvas, const ImageBuffer& patch, const Quad& quad) {
  if (patch.empty()) throw Error(ErrorCode::DegenerateQuad, "empty patch");
  if (quad.area() <= 0.0) throw Error(ErrorCode::DegenerateQuad, "quad has no area");
  const double pw = patch.width(), ph = patch.height();
  const Quad rect = Quad::rectangle(0, 0, pw, ph);
  Homography to_patch;
  try {
    std::vector<Correspondence> pairs;
    for (int i = 0; i < 4; ++i) pairs.emplace_back(quad.corners[i], rect.corners[i]);
    to_patch = dlt_from_correspondences(pairs);
  } catch (const Error& e) {
    throw Error(ErrorCode::DegenerateQuad, e.what());
  }

  const ImageBuffer src = (canvas.is_gray() && !patch.is_gray()) ? to_grayscale(patch) : patch;
  ImageBuffer out = canvas;
  double bx0 = quad.corners[0].x, bx1 = bx0, by0 = quad.corners[0].y, by1 = by0;
  for (auto c : quad.corners) {
    bx0 = std::min(bx0, c.x);
    bx1 = std::max(bx1, c.x);
    by0 = std::min(by0, c.y);
    by1 = std::max(by1, c.y);
  }
  const int x_begin = std::max(0, static_cast<int>(std::ceil(bx0)));
  const int x_end = std::min(canvas.width() - 1, static_cast<int>(std::floor(bx1)));
  const int y_begin = std::max(0, static_cast<int>(std::ceil(by0)));
  const int y_end = std::min(canvas.height() - 1, static_cast<int>(std::floor(by1)));

  auto snap = [](double v) {
    const double r = std::round(v);
    return std::abs(v - r) < 1e-9 ? r : v;
  };
  for (int y = y_begin; y <= y_end; ++y) {
    for (int x = x_begin; x <= x_end; ++x) {
      const Point2 p{static_cast<double>(x), static_cast<double>(y)};
      if (!quad_covers_pixel(quad, p)) continue;
      const Point2 s = apply_point(to_patch, p);
      const double sx = snap(s.x), sy = snap(s.y);
      for (int c = 0; c < out.channels(); ++c) {
        const int sc = src.is_gray() ? 0 : c;
        out.at(x, y, c) = std::clamp(bilinear_sample(src, sx, sy, sc), 0.0, 1.0);
      }
    }
  }
  return out;
}

}  // namespace advpatch
