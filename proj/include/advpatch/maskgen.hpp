#pragma once

// Placement of the source/target mask pair. The target region in the source
// view is the source square pulled back through the inverse view homography,
// then shifted so the two regions neither overlap nor leave the image.

#include <advpatch/error.hpp>
#include <advpatch/geometry.hpp>

#include <algorithm>
#include <cmath>
#include <istream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>
#include <vector>

namespace advpatch::maskgen {

using advpatch::point_in_quad;

struct MaskPair {
  Quad source;
  Quad target;
  double dx = 0.0;
  double dy = 0.0;
};

enum class Placement { Center, SeededRandom };

inline Quad place_source_mask(int img_w, int img_h, int mask_size, Placement strategy = Placement::Center,
                              std::uint64_t seed = 0) {
  if (mask_size <= 0) throw Error(ErrorCode::InvalidConfig, "mask size must be positive");
  if (mask_size > std::min(img_w, img_h)) throw Error(ErrorCode::MaskTooLarge, "mask larger than image");
  double x0, y0;
  if (strategy == Placement::Center) {
    x0 = (img_w - mask_size) / 2.0;
    y0 = (img_h - mask_size) / 2.0;
  } else {
    std::mt19937_64 rng(seed);
    x0 = std::uniform_int_distribution<int>(0, img_w - mask_size)(rng);
    y0 = std::uniform_int_distribution<int>(0, img_h - mask_size)(rng);
  }
  return Quad::rectangle(x0, y0, x0 + mask_size, y0 + mask_size);
}

inline bool quad_inside_image(const Quad& q, double w, double h) {
  return std::all_of(q.corners.begin(), q.corners.end(),
                     [&](Point2 c) { return c.x >= 0 && c.y >= 0 && c.x <= w && c.y <= h; });
}

/// Separating-axis test on convex quads. Touching boundaries count as
/// overlap: only a strictly positive gap separates.
inline bool quads_overlap(const Quad& a, const Quad& b) {
  for (const Quad* q : {&a, &b}) {
    for (int i = 0; i < 4; ++i) {
      const Point2 e = q->corners[(i + 1) % 4] - q->corners[i];
      const Point2 axis{-e.y, e.x};
      double amin = std::numeric_limits<double>::infinity(), amax = -amin;
      double bmin = amin, bmax = -amin;
      for (auto c : a.corners) {
        const double p = axis.x * c.x + axis.y * c.y;
        amin = std::min(amin, p);
        amax = std::max(amax, p);
      }
      for (auto c : b.corners) {
        const double p = axis.x * c.x + axis.y * c.y;
        bmin = std::min(bmin, p);
        bmax = std::max(bmax, p);
      }
      if (amax < bmin || bmax < amin) return false;
    }
  }
  return true;
}

inline Quad transfer_quad(const Homography& h, const Quad& q) {
  Quad out;
  for (int i = 0; i < 4; ++i) out.corners[i] = apply_point(h, q.corners[i]);
  return out;
}

struct Offset {
  int dx;
  int dy;
};

/// Integer offsets on a `step` grid with |dx|,|dy| <= radius, ordered by
/// length and then counter-clockwise angle from +x, starting at (0,0).
inline std::vector<Offset> spiral_offsets(int radius, int step) {
  std::vector<Offset> out;
  const int n = radius / step;
  for (int j = -n; j <= n; ++j)
    for (int i = -n; i <= n; ++i) out.push_back({i * step, j * step});
  auto angle = [](const Offset& o) {
    const double a = std::atan2(-static_cast<double>(o.dy), static_cast<double>(o.dx));
    return a < 0 ? a + 2 * std::numbers::pi : a;
  };
  std::stable_sort(out.begin(), out.end(), [&](const Offset& a, const Offset& b) {
    const long na = static_cast<long>(a.dx) * a.dx + static_cast<long>(a.dy) * a.dy;
    const long nb = static_cast<long>(b.dx) * b.dx + static_cast<long>(b.dy) * b.dy;
    if (na != nb) return na < nb;
    return angle(a) < angle(b);
  });
  return out;
}

inline constexpr int kTranslationStep = 8;

/// `h` maps the source view onto the target view.
inline MaskPair derive_target_mask(const Homography& h, const Quad& source, int img_w, int img_h) {
  if (!quad_inside_image(source, img_w, img_h)) throw Error(ErrorCode::InvalidConfig, "source mask outside image");
  const Quad pulled = transfer_quad(invert(h), source);
  for (const auto& o : spiral_offsets(std::max(img_w, img_h), kTranslationStep)) {
    const Quad cand = pulled.translated(o.dx, o.dy);
    if (!quad_inside_image(cand, img_w, img_h)) continue;
    if (quads_overlap(cand, source)) continue;
    return {source, cand, static_cast<double>(o.dx), static_cast<double>(o.dy)};
  }
  throw Error(ErrorCode::NoValidPlacement, "no translation separates the masks inside the image");
}

/// Text form: source corners, target corners (x y pairs), then dx dy.
inline void write_masks(std::ostream& out, const MaskPair& m) {
  out << std::setprecision(17);
  for (const Quad* q : {&m.source, &m.target}) {
    for (int i = 0; i < 4; ++i) out << (i ? " " : "") << q->corners[i].x << ' ' << q->corners[i].y;
    out << '\n';
  }
  out << m.dx << ' ' << m.dy << '\n';
}

inline MaskPair read_masks(std::istream& in) {
  MaskPair m;
  for (Quad* q : {&m.source, &m.target})
    for (auto& c : q->corners)
      if (!(in >> c.x >> c.y)) throw Error(ErrorCode::MalformedHeader, "mask file: expected 8 numbers per quad");
  if (!(in >> m.dx >> m.dy)) throw Error(ErrorCode::MalformedHeader, "mask file: missing translation line");
  return m;
}

}  // namespace advpatch::maskgen
