#pragma once

// Central-difference check of the analytic input gradient. Probes whose +-h
// step flips a ReLU or changes a max-pool winner are not checked: the loss is
// only piecewise smooth and a difference across a kink measures neither side.

#include <advpatch/spnet.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace testing_support {

struct GradCheckResult {
  int checked = 0;
  int skipped = 0;
  double worst_relative = 0.0;
};

inline std::vector<std::int32_t> activation_pattern(const advpatch::spnet::WeightSet& w, const advpatch::GrayImage& img) {
  const auto out = advpatch::spnet::forward<double>(w, img, {.descriptors = false, .keep_tape = true});
  std::vector<std::int32_t> p;
  for (const auto& e : out.tape.encoder)
    for (Eigen::Index i = 0; i < e.v.size(); ++i) p.push_back(e.v.data()[i] > 0.0);
  for (const auto& a : out.tape.pools) p.insert(p.end(), a.begin(), a.end());
  const auto& d = out.tape.det_hidden.v;
  for (Eigen::Index i = 0; i < d.size(); ++i) p.push_back(d.data()[i] > 0.0);
  return p;
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-10});
}

inline GradCheckResult check_input_gradient(const advpatch::spnet::WeightSet& w, const advpatch::GrayImage& img,
                                            const advpatch::spnet::AttackObjective& obj, int pixels, double h,
                                            std::uint64_t seed) {
  using namespace advpatch;
  const auto grad = spnet::input_gradient<double>(w, img, obj);
  const auto base = activation_pattern(w, img);
  std::vector<int> order(img.data().size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  GradCheckResult r;
  for (int idx : order) {
    if (r.checked >= pixels) break;
    GrayImage up = img, down = img;
    up.data()[idx] += h;
    down.data()[idx] -= h;
    if (activation_pattern(w, up) != base || activation_pattern(w, down) != base) {
      ++r.skipped;
      continue;
    }
    const double fu = spnet::detector_loss(spnet::forward<double>(w, up, {.descriptors = false}), obj);
    const double fd = spnet::detector_loss(spnet::forward<double>(w, down, {.descriptors = false}), obj);
    r.worst_relative = std::max(r.worst_relative, relative_error((fu - fd) / (2 * h), grad.data()[idx]));
    ++r.checked;
  }
  return r;
}

/// Draws fresh 16x16 uniform images until `pixels` kink-free probes have been
/// checked, at most `max_images` of them.
inline GradCheckResult check_input_gradient_16(const advpatch::spnet::WeightSet& w,
                                               const advpatch::spnet::AttackObjective& obj, int pixels, double h,
                                               std::uint64_t seed, int max_images = 20) {
  GradCheckResult total;
  for (int k = 0; k < max_images && total.checked < pixels; ++k) {
    advpatch::GrayImage img(16, 16, 1);
    std::mt19937_64 rng(seed * 1000 + k);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : img.data()) v = u(rng);
    const auto r = check_input_gradient(w, img, obj, pixels - total.checked, h, seed + k);
    total.checked += r.checked;
    total.skipped += r.skipped;
    total.worst_relative = std::max(total.worst_relative, r.worst_relative);
  }
  return total;
}

}  // namespace testing_support
