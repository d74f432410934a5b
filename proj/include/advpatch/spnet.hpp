#pragma once

// SuperPoint-style interest point / descriptor network. Fixed architecture:
//
//   enc1a enc1b pool enc2a enc2b pool enc3a enc3b pool enc4a enc4b
//     -> detA (3x3, 256) -> detB (1x1, 65)      interest point logits
//     -> descA (3x3, 256) -> descB (1x1, 256)   coarse descriptors
//
// All 3x3 convolutions use stride 1 and zero padding 1 and are followed by a
// ReLU; the two 1x1 head layers are linear. Only the input gradient is
// implemented in the backward pass; there is no training code.

#include <advpatch/error.hpp>
#include <advpatch/features.hpp>
#include <advpatch/image.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace advpatch::spnet {

inline constexpr int kCell = 8;
inline constexpr int kDetectorClasses = 65;
inline constexpr int kDustbin = 64;
inline constexpr int kDescriptorDim = 256;

struct ConvDef {
  const char* name;
  int in;
  int out;
  int k;
  bool relu;
};

enum Layer : int {
  kEnc1a, kEnc1b, kEnc2a, kEnc2b, kEnc3a, kEnc3b, kEnc4a, kEnc4b,
  kDetA, kDetB, kDescA, kDescB, kLayerCount
};

inline constexpr std::array<ConvDef, kLayerCount> kArchitecture{{
    {"enc1a", 1, 64, 3, true},    {"enc1b", 64, 64, 3, true},
    {"enc2a", 64, 64, 3, true},   {"enc2b", 64, 64, 3, true},
    {"enc3a", 64, 128, 3, true},  {"enc3b", 128, 128, 3, true},
    {"enc4a", 128, 128, 3, true}, {"enc4b", 128, 128, 3, true},
    {"detA", 128, 256, 3, true},  {"detB", 256, 65, 1, false},
    {"descA", 128, 256, 3, true}, {"descB", 256, 256, 1, false},
}};

// 2x2 max-pool follows these encoder layers.
inline constexpr bool pool_after(int layer) {
  return layer == kEnc1b || layer == kEnc2b || layer == kEnc3b;
}

// ---------------------------------------------------------------------------
// SPWF framing

struct Tensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  std::size_t numel() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "SPWF I/O assumes a little-endian host");

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}

  template <typename T>
  T read() {
    if (b_.size() - pos_ < sizeof(T)) throw Error(ErrorCode::TruncatedPayload, "SPWF stream ends early");
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string read_string(std::size_t n) {
    if (b_.size() - pos_ < n) throw Error(ErrorCode::TruncatedPayload, "SPWF stream ends early");
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void read_floats(std::vector<float>& out, std::size_t n) {
    if ((b_.size() - pos_) / sizeof(float) < n) {
      throw Error(ErrorCode::TruncatedPayload, "SPWF tensor payload ends early");
    }
    out.resize(n);
    std::memcpy(out.data(), b_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }

  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

}  // namespace detail

inline constexpr std::uint32_t kSpwfVersion = 1;

/// Parses the SPWF container: "SPWF", u32 version, u32 count, then per tensor
/// u16 name length, name, u8 rank, rank x u32 dims, f32 payload.
inline std::vector<Tensor> read_spwf(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "SPWF", 4) != 0) {
    throw Error(ErrorCode::BadMagic, "missing SPWF magic");
  }
  detail::ByteReader rd(bytes.subspan(4));
  const auto version = rd.read<std::uint32_t>();
  if (version != kSpwfVersion) throw Error(ErrorCode::BadMagic, "unsupported version " + std::to_string(version));
  const auto count = rd.read<std::uint32_t>();
  std::vector<Tensor> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t;
    t.name = rd.read_string(rd.read<std::uint16_t>());
    const auto rank = rd.read<std::uint8_t>();
    for (int r = 0; r < rank; ++r) t.dims.push_back(rd.read<std::uint32_t>());
    rd.read_floats(t.values, t.numel());
    tensors.push_back(std::move(t));
  }
  if (rd.remaining() != 0) {
    throw Error(ErrorCode::TrailingBytes, std::to_string(rd.remaining()) + " bytes after last tensor");
  }
  return tensors;
}

inline std::vector<std::uint8_t> write_spwf(const std::vector<Tensor>& tensors) {
  std::vector<std::uint8_t> out{'S', 'P', 'W', 'F'};
  detail::put<std::uint32_t>(out, kSpwfVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) detail::put<std::uint32_t>(out, d);
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.values.data());
    out.insert(out.end(), p, p + t.values.size() * sizeof(float));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weights

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct ConvParams {
  ConvDef def{};
  Mat<double> w_double;  // out x (in*k*k), column order (in, ky, kx)
  Vec<double> b_double;
  Mat<float> w_float;
  Vec<float> b_float;

  template <typename S>
  const Mat<S>& w() const {
    if constexpr (std::is_same_v<S, float>) return w_float; else return w_double;
  }
  template <typename S>
  const Vec<S>& b() const {
    if constexpr (std::is_same_v<S, float>) return b_float; else return b_double;
  }
};

/// Immutable parameter set for the fixed architecture. Besides the 24 conv
/// tensors, an SPWF file may carry the optional scalars `input.mean` and
/// `input.std`: the network sees (pixel - mean) / std. Defaults are 0 and 1.
class WeightSet {
 public:
  static WeightSet from_tensors(const std::vector<Tensor>& tensors) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& t : tensors) {
      if (!by_name.emplace(t.name, &t).second) throw Error(ErrorCode::UnknownTensor, "duplicate tensor " + t.name);
    }
    WeightSet ws;
    std::size_t used = 0;
    for (int i = 0; i < kLayerCount; ++i) {
      const ConvDef& d = kArchitecture[i];
      const auto& wt = take(by_name, std::string(d.name) + ".w",
                            {static_cast<std::uint32_t>(d.out), static_cast<std::uint32_t>(d.in),
                             static_cast<std::uint32_t>(d.k), static_cast<std::uint32_t>(d.k)});
      const auto& bt = take(by_name, std::string(d.name) + ".b", {static_cast<std::uint32_t>(d.out)});
      used += 2;
      ConvParams p;
      p.def = d;
      p.w_float = Eigen::Map<const Mat<float>>(wt.values.data(), d.out, d.in * d.k * d.k);
      p.b_float = Eigen::Map<const Vec<float>>(bt.values.data(), d.out);
      p.w_double = p.w_float.cast<double>();
      p.b_double = p.b_float.cast<double>();
      ws.layers_[i] = std::move(p);
    }
    for (const char* opt : {"input.mean", "input.std"}) {
      auto it = by_name.find(opt);
      if (it == by_name.end()) continue;
      if (it->second->values.size() != 1) throw Error(ErrorCode::ShapeMismatch, opt);
      check_finite(*it->second);
      (std::string(opt) == "input.mean" ? ws.input_mean_ : ws.input_std_) = it->second->values[0];
      ++used;
    }
    if (ws.input_std_ == 0.0) throw Error(ErrorCode::ShapeMismatch, "input.std must be non-zero");
    if (used != by_name.size()) {
      for (const auto& [name, t] : by_name) {
        if (!is_known(name)) throw Error(ErrorCode::UnknownTensor, name);
      }
    }
    return ws;
  }

  const ConvParams& layer(int i) const { return layers_[static_cast<std::size_t>(i)]; }
  double input_mean() const { return input_mean_; }
  double input_std() const { return input_std_; }

  /// Canonical tensor list (conv weights, then input normalization scalars).
  std::vector<Tensor> to_tensors() const {
    std::vector<Tensor> out;
    for (const auto& p : layers_) {
      const ConvDef& d = p.def;
      Tensor w{std::string(d.name) + ".w",
               {static_cast<std::uint32_t>(d.out), static_cast<std::uint32_t>(d.in),
                static_cast<std::uint32_t>(d.k), static_cast<std::uint32_t>(d.k)},
               {p.w_float.data(), p.w_float.data() + p.w_float.size()}};
      Tensor b{std::string(d.name) + ".b", {static_cast<std::uint32_t>(d.out)},
               {p.b_float.data(), p.b_float.data() + p.b_float.size()}};
      out.push_back(std::move(w));
      out.push_back(std::move(b));
    }
    out.push_back({"input.mean", {1}, {static_cast<float>(input_mean_)}});
    out.push_back({"input.std", {1}, {static_cast<float>(input_std_)}});
    return out;
  }

 private:
  static bool is_known(const std::string& name) {
    if (name == "input.mean" || name == "input.std") return true;
    for (const auto& d : kArchitecture) {
      if (name == std::string(d.name) + ".w" || name == std::string(d.name) + ".b") return true;
    }
    return false;
  }

  static void check_finite(const Tensor& t) {
    for (float v : t.values) {
      if (!std::isfinite(v)) throw Error(ErrorCode::ShapeMismatch, t.name + " holds non-finite values");
    }
  }

  static const Tensor& take(const std::map<std::string, const Tensor*>& by_name, const std::string& name,
                            const std::vector<std::uint32_t>& dims) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error(ErrorCode::MissingTensor, name);
    if (it->second->dims != dims) throw Error(ErrorCode::ShapeMismatch, name);
    check_finite(*it->second);
    return *it->second;
  }

  std::array<ConvParams, kLayerCount> layers_;
  double input_mean_ = 0.0;
  double input_std_ = 1.0;
};

inline WeightSet load_weights(std::span<const std::uint8_t> bytes) {
  return WeightSet::from_tensors(read_spwf(bytes));
}

inline WeightSet load_weights_file(const std::string& path) { return load_weights(read_file_bytes(path)); }

inline std::vector<std::uint8_t> save_weights(const WeightSet& w) { return write_spwf(w.to_tensors()); }

/// Canonical tensors with every value set to `value`.
inline std::vector<Tensor> constant_tensors(float value) {
  std::vector<Tensor> out;
  for (const auto& d : kArchitecture) {
    Tensor w{std::string(d.name) + ".w",
             {static_cast<std::uint32_t>(d.out), static_cast<std::uint32_t>(d.in),
              static_cast<std::uint32_t>(d.k), static_cast<std::uint32_t>(d.k)},
             {}};
    w.values.assign(w.numel(), value);
    Tensor b{std::string(d.name) + ".b", {static_cast<std::uint32_t>(d.out)}, {}};
    b.values.assign(b.numel(), value);
    out.push_back(std::move(w));
    out.push_back(std::move(b));
  }
  return out;
}

struct RandomWeightOptions {
  double gain = 1.0;           // multiplies the He-normal standard deviation
  double bias_std = 0.01;
  double dustbin_bias = 0.0;   // added to detB's dustbin bias
};

/// He-initialized random network. A positive dustbin bias reproduces a
/// trained detector's habit of rejecting flat regions.
inline WeightSet make_random_weights(std::uint64_t seed, RandomWeightOptions opt = {}) {
  std::mt19937_64 rng(seed);
  auto tensors = constant_tensors(0.0f);
  for (std::size_t i = 0; i < tensors.size(); i += 2) {
    const ConvDef& d = kArchitecture[i / 2];
    std::normal_distribution<double> wdist(0.0, opt.gain * std::sqrt(2.0 / (d.in * d.k * d.k)));
    std::normal_distribution<double> bdist(0.0, opt.bias_std);
    for (auto& v : tensors[i].values) v = static_cast<float>(wdist(rng));
    for (auto& v : tensors[i + 1].values) v = static_cast<float>(bdist(rng));
  }
  tensors[2 * kDetB + 1].values[kDustbin] += static_cast<float>(opt.dustbin_bias);
  return WeightSet::from_tensors(tensors);
}

// ---------------------------------------------------------------------------
// Feature maps and layers

template <typename S>
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  Mat<S> v;  // channels x (height*width)

  FeatureMap() = default;
  FeatureMap(int c, int h, int w) : channels(c), height(h), width(w), v(Mat<S>::Zero(c, h * w)) {}

  S at(int c, int y, int x) const { return v(c, y * width + x); }
};

namespace detail {

// Upper bound on im2col elements per band (~32 MB in double precision).
inline constexpr std::size_t kMaxColumnElements = std::size_t{1} << 22;

inline int band_rows(int k_elems, int width, int height) {
  const std::size_t per_row = static_cast<std::size_t>(k_elems) * width;
  return std::clamp(static_cast<int>(kMaxColumnElements / std::max<std::size_t>(per_row, 1)), 1, height);
}

template <typename S>
void im2col_band(const FeatureMap<S>& in, int k, int y0, int rows, Mat<S>& col) {
  const int pad = k / 2;
  const int W = in.width;
  const int n = rows * W;
  col.resize(static_cast<Eigen::Index>(in.channels) * k * k, n);
  for (int ci = 0; ci < in.channels; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        S* dst = col.row((ci * k + ky) * k + kx).data();
        const int x_lo = std::max(0, pad - kx);
        const int x_hi = std::min(W, W + pad - kx);
        for (int r = 0; r < rows; ++r) {
          S* out_row = dst + static_cast<std::ptrdiff_t>(r) * W;
          const int iy = y0 + r + ky - pad;
          if (iy < 0 || iy >= in.height || x_lo >= x_hi) {
            std::fill(out_row, out_row + W, S(0));
            continue;
          }
          const S* src = in.v.row(ci).data() + static_cast<std::ptrdiff_t>(iy) * W;
          std::fill(out_row, out_row + x_lo, S(0));
          std::copy(src + x_lo + kx - pad, src + x_hi + kx - pad, out_row + x_lo);
          std::fill(out_row + x_hi, out_row + W, S(0));
        }
      }
    }
  }
}

template <typename S>
void col2im_band_add(const Mat<S>& col, int k, int y0, int rows, FeatureMap<S>& din) {
  const int pad = k / 2;
  const int W = din.width;
  for (int ci = 0; ci < din.channels; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const S* src = col.row((ci * k + ky) * k + kx).data();
        const int x_lo = std::max(0, pad - kx);
        const int x_hi = std::min(W, W + pad - kx);
        for (int r = 0; r < rows; ++r) {
          const int iy = y0 + r + ky - pad;
          if (iy < 0 || iy >= din.height) continue;
          S* dst = din.v.row(ci).data() + static_cast<std::ptrdiff_t>(iy) * W;
          const S* s = src + static_cast<std::ptrdiff_t>(r) * W;
          for (int x = x_lo; x < x_hi; ++x) dst[x + kx - pad] += s[x];
        }
      }
    }
  }
}

}  // namespace detail

template <typename S>
FeatureMap<S> conv2d(const FeatureMap<S>& in, const ConvParams& p) {
  const ConvDef& d = p.def;
  if (in.channels != d.in) throw Error(ErrorCode::BadDimensions, std::string("channel mismatch at ") + d.name);
  FeatureMap<S> out;
  out.channels = d.out;
  out.height = in.height;
  out.width = in.width;
  const auto& w = p.w<S>();
  if (d.k == 1) {
    out.v.noalias() = w * in.v;
  } else {
    out.v.resize(d.out, static_cast<Eigen::Index>(in.height) * in.width);
    const int band = detail::band_rows(d.in * d.k * d.k, in.width, in.height);
    Mat<S> col;
    for (int y0 = 0; y0 < in.height; y0 += band) {
      const int rows = std::min(band, in.height - y0);
      detail::im2col_band(in, d.k, y0, rows, col);
      out.v.middleCols(static_cast<Eigen::Index>(y0) * in.width, col.cols()).noalias() = w * col;
    }
  }
  out.v.colwise() += p.b<S>();
  if (d.relu) out.v = out.v.cwiseMax(S(0));
  return out;
}

/// Gradient w.r.t. the convolution input given the gradient w.r.t. its
/// pre-activation output.
template <typename S>
FeatureMap<S> conv2d_backward_input(const FeatureMap<S>& dout, const ConvParams& p) {
  const ConvDef& d = p.def;
  FeatureMap<S> din(d.in, dout.height, dout.width);
  const auto& w = p.w<S>();
  if (d.k == 1) {
    din.v.noalias() = w.transpose() * dout.v;
    return din;
  }
  const int band = detail::band_rows(d.in * d.k * d.k, dout.width, dout.height);
  Mat<S> col;
  for (int y0 = 0; y0 < dout.height; y0 += band) {
    const int rows = std::min(band, dout.height - y0);
    col.noalias() = w.transpose() * dout.v.middleCols(static_cast<Eigen::Index>(y0) * dout.width,
                                                      static_cast<Eigen::Index>(rows) * dout.width);
    detail::col2im_band_add(col, d.k, y0, rows, din);
  }
  return din;
}

template <typename S>
struct PoolResult {
  FeatureMap<S> out;
  std::vector<std::int32_t> argmax;  // flat input column per output element
};

/// 2x2 stride-2 max pool. Ties go to the first element in row-major order.
template <typename S>
PoolResult<S> maxpool2(const FeatureMap<S>& in) {
  PoolResult<S> r;
  const int oh = in.height / 2, ow = in.width / 2;
  r.out = FeatureMap<S>(in.channels, oh, ow);
  r.argmax.resize(static_cast<std::size_t>(in.channels) * oh * ow);
  for (int c = 0; c < in.channels; ++c) {
    const S* src = in.v.row(c).data();
    S* dst = r.out.v.row(c).data();
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        int best = (2 * y) * in.width + 2 * x;
        for (int idx : {best + 1, best + in.width, best + in.width + 1}) {
          if (src[idx] > src[best]) best = idx;
        }
        dst[y * ow + x] = src[best];
        r.argmax[(static_cast<std::size_t>(c) * oh + y) * ow + x] = best;
      }
    }
  }
  return r;
}

template <typename S>
FeatureMap<S> maxpool2_backward(const FeatureMap<S>& dout, const std::vector<std::int32_t>& argmax, int in_h,
                                int in_w) {
  FeatureMap<S> din(dout.channels, in_h, in_w);
  const std::size_t per_c = static_cast<std::size_t>(dout.height) * dout.width;
  for (int c = 0; c < dout.channels; ++c) {
    const S* g = dout.v.row(c).data();
    S* dst = din.v.row(c).data();
    for (std::size_t i = 0; i < per_c; ++i) dst[argmax[c * per_c + i]] += g[i];
  }
  return din;
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename S>
struct Tape {
  std::array<FeatureMap<S>, 8> encoder;        // post-ReLU encoder activations
  std::array<std::vector<std::int32_t>, 3> pools;
  FeatureMap<S> det_hidden;                    // post-ReLU detA output
  int input_height = 0;
  int input_width = 0;
  double input_std = 1.0;
};

template <typename S>
struct NetworkOutput {
  FeatureMap<S> logits;       // 65 x Hc x Wc; channel 64 is the dustbin
  FeatureMap<S> coarse_desc;  // 256 x Hc x Wc (empty if descriptors were skipped)
  Tape<S> tape;               // empty unless requested
  bool has_tape = false;

  int cells_y() const { return logits.height; }
  int cells_x() const { return logits.width; }
};

struct ForwardOptions {
  bool descriptors = true;
  bool keep_tape = false;
};

inline void check_input_dims(int w, int h) {
  if (w < 16 || h < 16 || w % kCell != 0 || h % kCell != 0) {
    throw Error(ErrorCode::BadDimensions, "input must be >= 16 and a multiple of 8 in both axes, got " +
                                              std::to_string(w) + "x" + std::to_string(h));
  }
}

template <typename S = double>
NetworkOutput<S> forward(const WeightSet& w, const GrayImage& img, ForwardOptions opt = {}) {
  require_gray(img, "spnet::forward");
  check_input_dims(img.width(), img.height());
  FeatureMap<S> x(1, img.height(), img.width());
  const double mean = w.input_mean(), sd = w.input_std();
  const auto pix = img.data();
  for (std::size_t i = 0; i < pix.size(); ++i) x.v(0, static_cast<Eigen::Index>(i)) = static_cast<S>((pix[i] - mean) / sd);

  NetworkOutput<S> out;
  Tape<S>& tape = out.tape;
  tape.input_height = img.height();
  tape.input_width = img.width();
  tape.input_std = sd;
  int pool_idx = 0;
  for (int i = kEnc1a; i <= kEnc4b; ++i) {
    x = conv2d(x, w.layer(i));
    if (pool_after(i)) {
      auto pr = maxpool2(x);
      if (opt.keep_tape) {
        tape.encoder[i] = std::move(x);
        tape.pools[pool_idx] = std::move(pr.argmax);
      }
      ++pool_idx;
      x = std::move(pr.out);
    } else if (opt.keep_tape) {
      tape.encoder[i] = x;
    }
  }
  auto det_hidden = conv2d(x, w.layer(kDetA));
  out.logits = conv2d(det_hidden, w.layer(kDetB));
  if (opt.descriptors) out.coarse_desc = conv2d(conv2d(x, w.layer(kDescA)), w.layer(kDescB));
  if (opt.keep_tape) {
    tape.det_hidden = std::move(det_hidden);
    out.has_tape = true;
  }
  return out;
}

struct AttackObjective {
  enum class Mode { Targeted, Untargeted };
  Mode mode = Mode::Untargeted;
  int target_class = 0;
  /// Sign applied to the targeted cross-entropy. +1 ascends CE to the target
  /// class (the update rule taken literally); -1 descends it.
  double targeted_sign = 1.0;
  /// Sign applied to the dustbin cross-entropy. -1 is the formula taken
  /// literally and drives cells toward the dustbin; +1 drives them away.
  double untargeted_sign = -1.0;

  static AttackObjective untargeted(double sign = -1.0) { return {Mode::Untargeted, 0, 1.0, sign}; }
  static AttackObjective targeted(int cls, double sign = 1.0) { return {Mode::Targeted, cls, sign}; }

  void validate() const {
    if (mode == Mode::Targeted && (target_class < 0 || target_class >= kDustbin)) {
      throw Error(ErrorCode::InvalidConfig, "target class must be in [0, 63]");
    }
  }
};

namespace detail {

// Numerically stable per-cell softmax over the 65 classes, in double.
template <typename S>
Mat<double> cell_softmax(const FeatureMap<S>& logits) {
  Mat<double> p = logits.v.template cast<double>();
  for (Eigen::Index j = 0; j < p.cols(); ++j) {
    const double m = p.col(j).maxCoeff();
    p.col(j) = (p.col(j).array() - m).exp();
    p.col(j) /= p.col(j).sum();
  }
  return p;
}

inline int objective_class(const AttackObjective& obj) {
  return obj.mode == AttackObjective::Mode::Targeted ? obj.target_class : kDustbin;
}

inline double objective_sign(const AttackObjective& obj) {
  return obj.mode == AttackObjective::Mode::Targeted ? obj.targeted_sign : obj.untargeted_sign;
}

}  // namespace detail

/// sign * mean cross-entropy to the objective class (the target class, or
/// the dustbin). With default signs: +CE(target) and -CE(dustbin).
template <typename S>
double detector_loss(const NetworkOutput<S>& out, const AttackObjective& obj) {
  obj.validate();
  const int cls = detail::objective_class(obj);
  const auto& z = out.logits.v;
  double total = 0.0;
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    const double m = static_cast<double>(z.col(j).maxCoeff());
    double s = 0.0;
    for (Eigen::Index k = 0; k < z.rows(); ++k) s += std::exp(static_cast<double>(z(k, j)) - m);
    total += m + std::log(s) - static_cast<double>(z(cls, j));
  }
  return detail::objective_sign(obj) * total / static_cast<double>(z.cols());
}

struct LossGradient {
  double loss = 0.0;
  GrayImage gradient;
};

/// Loss and its exact gradient w.r.t. every input pixel.
template <typename S = double>
LossGradient loss_and_input_gradient(const WeightSet& w, const GrayImage& img, const AttackObjective& obj) {
  obj.validate();
  auto out = forward<S>(w, img, {.descriptors = false, .keep_tape = true});
  LossGradient result;
  result.loss = detector_loss(out, obj);

  const int cls = detail::objective_class(obj);
  const double scale = detail::objective_sign(obj) / static_cast<double>(out.logits.v.cols());
  Mat<double> p = detail::cell_softmax(out.logits);
  p.row(cls).array() -= 1.0;
  FeatureMap<S> g(kDetectorClasses, out.logits.height, out.logits.width);
  g.v = (p * scale).template cast<S>();

  auto& tape = out.tape;
  g = conv2d_backward_input(g, w.layer(kDetB));
  g.v = g.v.cwiseProduct((tape.det_hidden.v.array() > S(0)).matrix().template cast<S>());
  g = conv2d_backward_input(g, w.layer(kDetA));

  int pool_idx = 2;
  for (int i = kEnc4b; i >= kEnc1a; --i) {
    const auto& act = tape.encoder[i];
    if (pool_after(i)) {
      g = maxpool2_backward(g, tape.pools[pool_idx], act.height, act.width);
      --pool_idx;
    }
    g.v = g.v.cwiseProduct((act.v.array() > S(0)).matrix().template cast<S>());
    g = conv2d_backward_input(g, w.layer(i));
  }

  result.gradient = GrayImage(img.width(), img.height(), 1);
  auto gd = result.gradient.data();
  for (std::size_t i = 0; i < gd.size(); ++i) gd[i] = static_cast<double>(g.v(0, static_cast<Eigen::Index>(i))) / tape.input_std;
  return result;
}

template <typename S = double>
GrayImage input_gradient(const WeightSet& w, const GrayImage& img, const AttackObjective& obj) {
  return loss_and_input_gradient<S>(w, img, obj).gradient;
}

// ---------------------------------------------------------------------------
// Decoding

struct DecodeParams {
  double threshold = 0.015;
  int nms_radius = 4;
  int max_points = 1000;
};

/// Full-resolution keypoint probability map: softmax per cell, dustbin
/// dropped, class r*8+c placed at pixel (8*cx + c, 8*cy + r).
template <typename S>
GrayImage keypoint_heatmap(const NetworkOutput<S>& out) {
  const Mat<double> p = detail::cell_softmax(out.logits);
  GrayImage heat(out.cells_x() * kCell, out.cells_y() * kCell, 1);
  for (int cy = 0; cy < out.cells_y(); ++cy)
    for (int cx = 0; cx < out.cells_x(); ++cx)
      for (int k = 0; k < kDustbin; ++k)
        heat.at(cx * kCell + k % kCell, cy * kCell + k / kCell) = p(k, cy * out.cells_x() + cx);
  return heat;
}

/// Greedy NMS over a score map: candidates >= threshold in descending score
/// (ties by row-major position); each kept point suppresses every candidate
/// within Chebyshev distance nms_radius.
inline std::vector<Keypoint> nms_keypoints(const GrayImage& heat, double threshold, int nms_radius, int max_points) {
  struct Cand {
    double s;
    int idx;
  };
  std::vector<Cand> cands;
  const int W = heat.width(), H = heat.height();
  const auto d = heat.data();
  for (int i = 0; i < W * H; ++i) {
    if (d[i] >= threshold) cands.push_back({d[i], i});
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    return a.s != b.s ? a.s > b.s : a.idx < b.idx;
  });
  std::vector<char> suppressed(static_cast<std::size_t>(W) * H, 0);
  std::vector<Keypoint> kps;
  for (const auto& c : cands) {
    if (static_cast<int>(kps.size()) >= max_points) break;
    if (suppressed[c.idx]) continue;
    const int x = c.idx % W, y = c.idx / W;
    kps.push_back({{static_cast<double>(x), static_cast<double>(y)}, c.s});
    for (int yy = std::max(0, y - nms_radius); yy <= std::min(H - 1, y + nms_radius); ++yy)
      for (int xx = std::max(0, x - nms_radius); xx <= std::min(W - 1, x + nms_radius); ++xx)
        suppressed[yy * W + xx] = 1;
  }
  return kps;
}

template <typename S>
std::vector<Keypoint> decode_keypoints(const NetworkOutput<S>& out, const DecodeParams& params = {}) {
  if (params.threshold < 0.0 || params.threshold > 1.0) throw Error(ErrorCode::InvalidConfig, "threshold outside [0,1]");
  return nms_keypoints(keypoint_heatmap(out), params.threshold, params.nms_radius, params.max_points);
}

/// Bilinear lookup in the coarse descriptor grid, then L2 normalization.
/// Cell (i, j) is centered on pixel (8j + 3.5, 8i + 3.5).
template <typename S>
DescriptorSet sample_descriptors(const NetworkOutput<S>& out, const std::vector<Keypoint>& kps) {
  const auto& cd = out.coarse_desc;
  if (cd.channels == 0) throw Error(ErrorCode::BadDimensions, "forward ran without descriptors");
  DescriptorSet ds;
  ds.rows = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(kps.size()), cd.channels);
  ds.degenerate.assign(kps.size(), false);
  for (std::size_t i = 0; i < kps.size(); ++i) {
    const double u = std::clamp((kps[i].position.x + 0.5) / kCell - 0.5, 0.0, cd.width - 1.0);
    const double v = std::clamp((kps[i].position.y + 0.5) / kCell - 0.5, 0.0, cd.height - 1.0);
    const int x0 = static_cast<int>(std::floor(u)), y0 = static_cast<int>(std::floor(v));
    const int x1 = std::min(x0 + 1, cd.width - 1), y1 = std::min(y0 + 1, cd.height - 1);
    const double fx = u - x0, fy = v - y0;
    auto row = ds.rows.row(static_cast<Eigen::Index>(i));
    for (int c = 0; c < cd.channels; ++c) {
      const double top = static_cast<double>(cd.at(c, y0, x0)) * (1 - fx) + static_cast<double>(cd.at(c, y0, x1)) * fx;
      const double bot = static_cast<double>(cd.at(c, y1, x0)) * (1 - fx) + static_cast<double>(cd.at(c, y1, x1)) * fx;
      row(c) = top * (1 - fy) + bot * fy;
    }
    const double n = row.norm();
    if (n > 0.0) {
      row /= n;
    } else {
      ds.degenerate[i] = true;
    }
  }
  return ds;
}

/// Detection + description on an arbitrary-size image. The bottom/right
/// margin that does not fill a whole 8x8 cell is discarded, which leaves
/// pixel coordinates unchanged.
inline Features extract_features(const WeightSet& w, const GrayImage& img, const DecodeParams& params = {}) {
  require_gray(img, "spnet::extract_features");
  const int cw = img.width() / kCell * kCell, ch = img.height() / kCell * kCell;
  const GrayImage view = (cw == img.width() && ch == img.height()) ? img : crop(img, 0, 0, cw, ch);
  const auto out = forward<float>(w, view, {.descriptors = true, .keep_tape = false});
  Features f;
  f.keypoints = decode_keypoints(out, params);
  f.descriptors = sample_descriptors(out, f.keypoints);
  return f;
}

// ---------------------------------------------------------------------------
// Reference activation files

/// Activation file layout, in SPWF framing: `logits` [65, Hc, Wc],
/// `coarse_desc` [256, Hc, Wc], and optionally `input` [H, W] holding the
/// grayscale image the activations were computed from.
template <typename S>
std::vector<Tensor> activation_tensors(const NetworkOutput<S>& out, const GrayImage* input = nullptr) {
  std::vector<Tensor> t;
  if (input) {
    Tensor in{"input", {static_cast<std::uint32_t>(input->height()), static_cast<std::uint32_t>(input->width())}, {}};
    for (double v : input->data()) in.values.push_back(static_cast<float>(v));
    t.push_back(std::move(in));
  }
  for (auto [name, fm] : {std::pair{"logits", &out.logits}, std::pair{"coarse_desc", &out.coarse_desc}}) {
    Tensor x{name, {static_cast<std::uint32_t>(fm->channels), static_cast<std::uint32_t>(fm->height),
                    static_cast<std::uint32_t>(fm->width)}, {}};
    for (Eigen::Index i = 0; i < fm->v.size(); ++i) x.values.push_back(static_cast<float>(fm->v.data()[i]));
    t.push_back(std::move(x));
  }
  return t;
}

struct ActivationFile {
  std::optional<GrayImage> input;
  Tensor logits;
  Tensor coarse_desc;
};

inline ActivationFile parse_activations(const std::vector<Tensor>& tensors) {
  ActivationFile f;
  bool have_logits = false, have_desc = false;
  for (const auto& t : tensors) {
    if (t.name == "input") {
      if (t.dims.size() != 2) throw Error(ErrorCode::ShapeMismatch, "input must be [H, W]");
      f.input = GrayImage(static_cast<int>(t.dims[1]), static_cast<int>(t.dims[0]), 1,
                          std::vector<double>(t.values.begin(), t.values.end()));
    } else if (t.name == "logits") {
      if (t.dims.size() != 3 || t.dims[0] != kDetectorClasses) throw Error(ErrorCode::ShapeMismatch, "logits");
      f.logits = t;
      have_logits = true;
    } else if (t.name == "coarse_desc") {
      if (t.dims.size() != 3 || t.dims[0] != kDescriptorDim) throw Error(ErrorCode::ShapeMismatch, "coarse_desc");
      f.coarse_desc = t;
      have_desc = true;
    } else {
      throw Error(ErrorCode::UnknownTensor, t.name);
    }
  }
  if (!have_logits) throw Error(ErrorCode::MissingTensor, "logits");
  if (!have_desc) throw Error(ErrorCode::MissingTensor, "coarse_desc");
  return f;
}

/// Largest absolute difference between a forward pass and recorded
/// activations, over both tensors.
template <typename S>
double max_activation_difference(const NetworkOutput<S>& out, const ActivationFile& ref) {
  double worst = 0.0;
  for (auto [fm, t] : {std::pair{&out.logits, &ref.logits}, std::pair{&out.coarse_desc, &ref.coarse_desc}}) {
    const std::vector<std::uint32_t> dims{static_cast<std::uint32_t>(fm->channels),
                                          static_cast<std::uint32_t>(fm->height), static_cast<std::uint32_t>(fm->width)};
    if (t->dims != dims) throw Error(ErrorCode::ShapeMismatch, t->name + " does not match the forward output");
    for (Eigen::Index i = 0; i < fm->v.size(); ++i) {
      worst = std::max(worst, std::abs(static_cast<double>(fm->v.data()[i]) - static_cast<double>(t->values[i])));
    }
  }
  return worst;
}

}  // namespace advpatch::spnet
