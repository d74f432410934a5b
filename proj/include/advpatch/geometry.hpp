#pragma once

// Planar projective geometry. Pixel convention used throughout the library:
// origin at the top-left, x to the right, y downward, pixel centers at
// integer coordinates.

#include <advpatch/error.hpp>

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <istream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace advpatch {

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

inline Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
inline Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }

inline double distance(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

inline double cross(Point2 a, Point2 b) { return a.x * b.y - a.y * b.x; }

/// Four corners in a fixed winding order. For the canonical
/// top-left, top-right, bottom-right, bottom-left order the shoelace area is
/// positive in image coordinates.
struct Quad {
  std::array<Point2, 4> corners;

  double signed_area() const {
    double a = 0.0;
    for (int i = 0; i < 4; ++i) a += cross(corners[i], corners[(i + 1) % 4]);
    return 0.5 * a;
  }
  double area() const { return std::abs(signed_area()); }

  Quad translated(double dx, double dy) const {
    Quad q = *this;
    for (auto& c : q.corners) c = {c.x + dx, c.y + dy};
    return q;
  }

  static Quad rectangle(double x0, double y0, double x1, double y1) {
    return Quad{{Point2{x0, y0}, Point2{x1, y0}, Point2{x1, y1}, Point2{x0, y1}}};
  }
};

/// Convex point-in-polygon test; points on the boundary count as inside.
inline bool point_in_quad(const Quad& q, Point2 p) {
  const double orient = q.signed_area() >= 0.0 ? 1.0 : -1.0;
  for (int i = 0; i < 4; ++i) {
    const Point2 a = q.corners[i];
    const Point2 b = q.corners[(i + 1) % 4];
    if (orient * cross(b - a, p - a) < 0.0) return false;
  }
  return true;
}

/// Rasterization rule: strictly inside, or on a top/left edge. Adjacent quads
/// sharing an edge never both claim a pixel center on it.
inline bool quad_covers_pixel(const Quad& q, Point2 p) {
  std::array<Point2, 4> c = q.corners;
  if (q.signed_area() < 0.0) std::swap(c[1], c[3]);
  for (int i = 0; i < 4; ++i) {
    const Point2 a = c[i];
    const Point2 d = c[(i + 1) % 4] - a;
    if (d.x == 0.0 && d.y == 0.0) continue;
    const double e = cross(d, p - a);
    if (e > 0.0) continue;
    if (e < 0.0) return false;
    const bool top_left = d.y < 0.0 || (d.y == 0.0 && d.x > 0.0);
    if (!top_left) return false;
  }
  return true;
}

class Homography {
 public:
  Homography() : m_(Eigen::Matrix3d::Identity()) {}

  /// Normalizes to h33 = 1 when |h33| > 1e-9, otherwise to unit Frobenius norm.
  explicit Homography(const Eigen::Matrix3d& m) : m_(m) {
    if (!m_.allFinite()) throw Error(ErrorCode::Singular, "non-finite homography");
    if (std::abs(m_(2, 2)) > 1e-9) {
      m_ /= m_(2, 2);
    } else {
      const double n = m_.norm();
      if (n == 0.0) throw Error(ErrorCode::Singular, "zero matrix");
      m_ /= n;
    }
    if (std::abs(m_.determinant()) <= 1e-12) {
      throw Error(ErrorCode::Singular, "determinant magnitude <= 1e-12");
    }
  }

  static Homography identity() { return Homography(); }

  static Homography from_rows(std::array<double, 9> h) {
    Eigen::Matrix3d m;
    m << h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8];
    return Homography(m);
  }

  const Eigen::Matrix3d& matrix() const { return m_; }
  double operator()(int r, int c) const { return m_(r, c); }

 private:
  Eigen::Matrix3d m_;
};

inline Point2 apply_point(const Homography& h, Point2 p) {
  const auto& m = h.matrix();
  const double w = m(2, 0) * p.x + m(2, 1) * p.y + m(2, 2);
  if (std::abs(w) <= 1e-12) throw Error(ErrorCode::DegeneratePoint, "point maps to infinity");
  return {(m(0, 0) * p.x + m(0, 1) * p.y + m(0, 2)) / w,
          (m(1, 0) * p.x + m(1, 1) * p.y + m(1, 2)) / w};
}

inline Homography invert(const Homography& h) {
  if (std::abs(h.matrix().determinant()) <= 1e-12) {
    throw Error(ErrorCode::Singular, "cannot invert");
  }
  return Homography(h.matrix().inverse());
}

/// compose(a, b) applies b first, then a.
inline Homography compose(const Homography& a, const Homography& b) {
  return Homography(a.matrix() * b.matrix());
}

inline Homography translation(double dx, double dy) {
  return Homography::from_rows({1, 0, dx, 0, 1, dy, 0, 0, 1});
}

namespace detail {

struct Normalizer {
  Eigen::Matrix3d t;
  std::vector<Point2> pts;
};

// Translate the centroid to the origin and scale the mean distance to sqrt(2).
inline Normalizer hartley_normalize(const std::vector<Point2>& pts) {
  double cx = 0.0, cy = 0.0;
  for (auto p : pts) {
    cx += p.x;
    cy += p.y;
  }
  cx /= static_cast<double>(pts.size());
  cy /= static_cast<double>(pts.size());
  double mean_d = 0.0;
  for (auto p : pts) mean_d += std::hypot(p.x - cx, p.y - cy);
  mean_d /= static_cast<double>(pts.size());
  if (mean_d <= 1e-15) {
    throw Error(ErrorCode::DegenerateConfiguration, "all points coincide");
  }
  const double s = std::sqrt(2.0) / mean_d;
  Normalizer n;
  n.t << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
  n.pts.reserve(pts.size());
  for (auto p : pts) n.pts.push_back({s * (p.x - cx), s * (p.y - cy)});
  return n;
}

inline bool has_collinear_triple(const std::vector<Point2>& p, double tol) {
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = i + 1; j < p.size(); ++j)
      for (std::size_t k = j + 1; k < p.size(); ++k)
        if (std::abs(cross(p[j] - p[i], p[k] - p[i])) <= tol) return true;
  return false;
}

}  // namespace detail

using Correspondence = std::pair<Point2, Point2>;

/// Normalized DLT least-squares fit mapping first -> second of every pair.
inline Homography dlt_from_correspondences(const std::vector<Correspondence>& pairs) {
  const std::size_t n = pairs.size();
  if (n < 4) throw Error(ErrorCode::DegenerateConfiguration, "need at least 4 correspondences");

  std::vector<Point2> src, dst;
  src.reserve(n);
  dst.reserve(n);
  for (const auto& [a, b] : pairs) {
    src.push_back(a);
    dst.push_back(b);
  }
  const auto ns = detail::hartley_normalize(src);
  const auto nd = detail::hartley_normalize(dst);
  // Normalized coordinates have mean distance sqrt(2), so a fixed tolerance
  // on twice the triangle area is scale-free.
  if (n == 4 && (detail::has_collinear_triple(ns.pts, 1e-9) ||
                 detail::has_collinear_triple(nd.pts, 1e-9))) {
    throw Error(ErrorCode::DegenerateConfiguration, "collinear minimal sample");
  }

  const Eigen::Index rows = std::max<Eigen::Index>(9, static_cast<Eigen::Index>(2 * n));
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(rows, 9);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = ns.pts[i].x, y = ns.pts[i].y;
    const double u = nd.pts[i].x, v = nd.pts[i].y;
    const auto r = static_cast<Eigen::Index>(2 * i);
    a.row(r) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
    a.row(r + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (sv(0) <= 0.0 || sv(7) / sv(0) < 1e-10) {
    throw Error(ErrorCode::DegenerateConfiguration, "rank-deficient design matrix");
  }
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  const Eigen::Matrix3d full = nd.t.inverse() * hn * ns.t;
  try {
    return Homography(full);
  } catch (const Error&) {
    throw Error(ErrorCode::DegenerateConfiguration, "fitted matrix is singular");
  }
}

/// Distances between ground-truth and estimated images of the four corners
/// of the (0,0)-(width,height) rectangle, in TL, TR, BR, BL order.
inline std::array<double, 4> corner_error(const Homography& h_est, const Homography& h_gt,
                                          double width, double height) {
  const std::array<Point2, 4> corners{Point2{0, 0}, Point2{width, 0}, Point2{width, height},
                                      Point2{0, height}};
  std::array<double, 4> out{};
  for (int i = 0; i < 4; ++i) {
    out[i] = distance(apply_point(h_gt, corners[i]), apply_point(h_est, corners[i]));
  }
  return out;
}

/// Nine whitespace-separated decimals, row-major (the HPatches H_1_k layout).
inline Homography read_homography(std::istream& in) {
  std::array<double, 9> v{};
  for (auto& x : v) {
    if (!(in >> x)) throw Error(ErrorCode::UnreadableHomography, "expected 9 numbers");
  }
  std::string rest;
  if (in >> rest) throw Error(ErrorCode::UnreadableHomography, "trailing content '" + rest + "'");
  try {
    return Homography::from_rows(v);
  } catch (const Error& e) {
    throw Error(ErrorCode::UnreadableHomography, e.what());
  }
}

inline Homography parse_homography(const std::string& text) {
  std::istringstream in(text);
  return read_homography(in);
}

inline void write_homography(std::ostream& out, const Homography& h) {
  out << std::setprecision(17);
  for (int r = 0; r < 3; ++r) {
    out << h(r, 0) << ' ' << h(r, 1) << ' ' << h(r, 2) << '\n';
  }
}

}  // namespace advpatch
