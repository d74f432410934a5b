#pragma once

// Patch patterns: the chessboard baseline and gradient-ascent patches
// optimized against the detector head.

#include <advpatch/error.hpp>
#include <advpatch/image.hpp>
#include <advpatch/spnet.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace advpatch::patchgen {

using spnet::AttackObjective;

enum class Init { Gray, Random, Chessboard };

inline const char* to_string(Init i) {
  switch (i) {
    case Init::Gray: return "gray";
    case Init::Random: return "random";
    case Init::Chessboard: return "chessboard";
  }
  return "?";
}

struct Augmentation {
  bool enabled = false;
  double scale_lo = 0.5;
  double scale_hi = 2.0;
  bool crop = true;
  /// Random transforms averaged per update; 1 is a plain per-step sample.
  int samples_per_step = 1;
};

struct PatchConfig {
  int size = 128;
  int cell = 8;
  int steps = 1000;
  double alpha = 1e-2;
  /// Ascending this objective pushes every cell away from the dustbin.
  AttackObjective objective = AttackObjective::untargeted(+1.0);
  Init init = Init::Gray;
  Augmentation augmentation;
  std::uint64_t seed = 0;

  void validate() const {
    if (size < 16 || size % 8 != 0) throw Error(ErrorCode::IncompatibleDims, "patch size must be a multiple of 8 and >= 16");
    if (cell <= 0 || size % cell != 0) throw Error(ErrorCode::BadCellSize, "cell must divide the patch size");
    if (steps < 0) throw Error(ErrorCode::InvalidConfig, "steps must be >= 0");
    if (!(alpha > 0)) throw Error(ErrorCode::InvalidConfig, "alpha must be positive");
    if (augmentation.enabled && (!(augmentation.scale_lo > 0) || augmentation.scale_hi < augmentation.scale_lo ||
                                 augmentation.samples_per_step < 1)) {
      throw Error(ErrorCode::InvalidConfig, "bad augmentation range");
    }
    objective.validate();
  }
};

struct PatchState {
  GrayImage pixels;
  int step = 0;
  std::vector<double> loss_history;  // loss before each update
  double final_loss = 0.0;           // loss of `pixels`, without augmentation
};

/// Alternating 0/1 blocks of side `cell`, top-left block black.
inline GrayImage chessboard(int size, int cell) {
  if (cell <= 0 || size <= 0 || size % cell != 0) throw Error(ErrorCode::BadCellSize, "cell must divide size");
  GrayImage img(size, size, 1);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) img.at(x, y) = static_cast<double>((x / cell + y / cell) % 2);
  return img;
}

inline GrayImage initial_pattern(const PatchConfig& cfg, std::mt19937_64& rng) {
  switch (cfg.init) {
    case Init::Gray: return GrayImage(cfg.size, cfg.size, 1, 0.5);
    case Init::Chessboard: return chessboard(cfg.size, cfg.cell);
    case Init::Random: {
      GrayImage img(cfg.size, cfg.size, 1);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (auto& v : img.data()) v = u(rng);
      return img;
    }
  }
  return {};
}

namespace detail {

// One augmented gradient sample: resize by a random scale, crop a window the
// network accepts, then pull the window gradient back through the crop and
// the resize adjoint onto patch coordinates.
inline spnet::LossGradient augmented_gradient(const spnet::WeightSet& w, const GrayImage& x, const PatchConfig& cfg,
                                              std::mt19937_64& rng) {
  const auto& aug = cfg.augmentation;
  std::uniform_real_distribution<double> scale(aug.scale_lo, aug.scale_hi);
  const int n = std::max(16, static_cast<int>(std::lround(cfg.size * scale(rng))));
  const GrayImage resized = resize(x, n, n);
  const int window = std::max(16, std::min(cfg.size, n / 8 * 8));
  CropOffset off{(n - window) / 2, (n - window) / 2};
  if (aug.crop) off = sample_crop_offset(n, n, window, window, rng);
  const GrayImage view = crop(resized, off.x, off.y, window, window);
  auto lg = spnet::loss_and_input_gradient<double>(w, view, cfg.objective);
  GrayImage full(n, n, 1, 0.0);
  for (int yy = 0; yy < window; ++yy)
    for (int xx = 0; xx < window; ++xx) full.at(off.x + xx, off.y + yy) = lg.gradient.at(xx, yy);
  lg.gradient = resize_transpose(full, cfg.size, cfg.size);
  return lg;
}

}  // namespace detail

/// Gradient ascent x <- clamp01(x + alpha * dL/dx) on the detector loss.
inline PatchState pgd_generate(const spnet::WeightSet& w, const PatchConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  PatchState st;
  st.pixels = initial_pattern(cfg, rng);
  for (int t = 0; t < cfg.steps; ++t) {
    spnet::LossGradient lg;
    if (cfg.augmentation.enabled) {
      const int k = cfg.augmentation.samples_per_step;
      lg = detail::augmented_gradient(w, st.pixels, cfg, rng);
      for (int s = 1; s < k; ++s) {
        const auto more = detail::augmented_gradient(w, st.pixels, cfg, rng);
        lg.loss += more.loss;
        for (std::size_t i = 0; i < lg.gradient.data().size(); ++i) lg.gradient.data()[i] += more.gradient.data()[i];
      }
      if (k > 1) {
        lg.loss /= k;
        for (auto& g : lg.gradient.data()) g /= k;
      }
    } else {
      lg = spnet::loss_and_input_gradient<double>(w, st.pixels, cfg.objective);
    }
    st.loss_history.push_back(lg.loss);
    auto px = st.pixels.data();
    const auto g = lg.gradient.data();
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::clamp(px[i] + cfg.alpha * g[i], 0.0, 1.0);
    st.step = t + 1;
  }
  st.final_loss = spnet::detector_loss(spnet::forward<double>(w, st.pixels, {.descriptors = false}), cfg.objective);
  return st;
}

/// Named configurations for the five patch variants: chessboard,
/// targeted, untargeted, aug, chess-init.
inline PatchConfig preset(std::string_view name, int size = 128) {
  PatchConfig cfg;
  cfg.size = size;
  if (name == "chessboard") {
    cfg.steps = 0;
    cfg.init = Init::Chessboard;
  } else if (name == "targeted" || name == "targeted-adv") {
    cfg.init = Init::Gray;
    cfg.objective = AttackObjective::targeted(0);
  } else if (name == "untargeted" || name == "untargeted-adv") {
    cfg.init = Init::Gray;
  } else if (name == "aug") {
    cfg.init = Init::Gray;
    cfg.augmentation.enabled = true;
  } else if (name == "chess-init") {
    cfg.init = Init::Chessboard;
    cfg.augmentation.enabled = true;
  } else {
    throw Error(ErrorCode::InvalidConfig, "unknown preset '" + std::string(name) + "'");
  }
  return cfg;
}

/// Sidecar text: key=value lines, a blank line, then the loss history as
/// `step,loss` CSV.
inline std::string metadata_text(const PatchConfig& cfg, const PatchState& st, std::string_view preset_name = "") {
  std::ostringstream out;
  out << std::setprecision(17);
  if (!preset_name.empty()) out << "preset=" << preset_name << '\n';
  out << "size=" << cfg.size << '\n'
      << "cell=" << cfg.cell << '\n'
      << "steps=" << cfg.steps << '\n'
      << "alpha=" << cfg.alpha << '\n'
      << "objective=" << (cfg.objective.mode == AttackObjective::Mode::Targeted ? "targeted" : "untargeted") << '\n';
  if (cfg.objective.mode == AttackObjective::Mode::Targeted) {
    out << "target_class=" << cfg.objective.target_class << '\n'
        << "targeted_sign=" << cfg.objective.targeted_sign << '\n';
  } else {
    out << "untargeted_sign=" << cfg.objective.untargeted_sign << '\n';
  }
  out << "init=" << to_string(cfg.init) << '\n'
      << "augmentation=" << (cfg.augmentation.enabled ? "on" : "off") << '\n';
  if (cfg.augmentation.enabled) {
    out << "scale_range=" << cfg.augmentation.scale_lo << ',' << cfg.augmentation.scale_hi << '\n'
        << "crop=" << (cfg.augmentation.crop ? "true" : "false") << '\n'
        << "samples_per_step=" << cfg.augmentation.samples_per_step << '\n';
  }
  out << "seed=" << cfg.seed << '\n'
      << "final_loss=" << st.final_loss << '\n'
      << '\n'
      << "step,loss\n";
  for (std::size_t i = 0; i < st.loss_history.size(); ++i) out << i << ',' << st.loss_history[i] << '\n';
  return out.str();
}

}  // namespace advpatch::patchgen
