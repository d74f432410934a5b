#pragma once

#include <advpatch/error.hpp>
#include <advpatch/features.hpp>
#include <advpatch/geometry.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

namespace advpatch::matching {

struct Match {
  int source = 0;
  int target = 0;
  double distance = 0.0;

  friend bool operator==(const Match&, const Match&) = default;
};

/// Sorted ascending by (distance, source, target); one entry per source.
using MatchSet = std::vector<Match>;

struct KnnOptions {
  int top_n = 1000;
  /// Lowe ratio test on the two nearest distances; 0 disables it.
  double ratio = 0.0;
};

/// Exact exhaustive 1-NN in Euclidean distance.
inline MatchSet knn_match(const DescriptorSet& a, const DescriptorSet& b, KnnOptions opt = {}) {
  if (a.size() > 0 && b.size() > 0 && a.dim() != b.dim()) {
    throw Error(ErrorCode::DimensionMismatch, "descriptor dimensions differ");
  }
  MatchSet out;
  if (a.size() == 0 || b.size() == 0) return out;
  const int dim = a.dim();
  // Row-major copies keep the inner loop contiguous.
  std::vector<double> ra(static_cast<std::size_t>(a.size()) * dim), rb(static_cast<std::size_t>(b.size()) * dim);
  for (int i = 0; i < a.size(); ++i)
    for (int k = 0; k < dim; ++k) ra[static_cast<std::size_t>(i) * dim + k] = a.rows(i, k);
  for (int j = 0; j < b.size(); ++j)
    for (int k = 0; k < dim; ++k) rb[static_cast<std::size_t>(j) * dim + k] = b.rows(j, k);

  for (int i = 0; i < a.size(); ++i) {
    const double* pa = &ra[static_cast<std::size_t>(i) * dim];
    double best = std::numeric_limits<double>::infinity(), second = best;
    int best_j = -1;
    for (int j = 0; j < b.size(); ++j) {
      const double* pb = &rb[static_cast<std::size_t>(j) * dim];
      double s = 0.0;
      for (int k = 0; k < dim; ++k) {
        const double d = pa[k] - pb[k];
        s += d * d;
      }
      if (s < best) {
        second = best;
        best = s;
        best_j = j;
      } else if (s < second) {
        second = s;
      }
    }
    const double d1 = std::sqrt(best);
    if (opt.ratio > 0.0 && b.size() > 1 && !(d1 < opt.ratio * std::sqrt(second))) continue;
    out.push_back({i, best_j, d1});
  }
  std::sort(out.begin(), out.end(), [](const Match& x, const Match& y) {
    if (x.distance != y.distance) return x.distance < y.distance;
    if (x.source != y.source) return x.source < y.source;
    return x.target < y.target;
  });
  if (static_cast<int>(out.size()) > opt.top_n) out.resize(static_cast<std::size_t>(std::max(0, opt.top_n)));
  return out;
}

struct RansacOptions {
  int iterations = 2000;
  double inlier_px = 3.0;
  std::uint64_t seed = 0;
};

struct RansacResult {
  Homography h_est;
  std::vector<bool> inliers;
  int iterations_used = 0;
  int inlier_count() const { return static_cast<int>(std::count(inliers.begin(), inliers.end(), true)); }
};

namespace detail {

struct Score {
  int count = -1;
  double mean_error = std::numeric_limits<double>::infinity();

  bool better_than(const Score& o) const {
    return count != o.count ? count > o.count : mean_error < o.mean_error;
  }
};

inline double reprojection_error(const Homography& h, Point2 a, Point2 b) {
  try {
    return distance(apply_point(h, a), b);
  } catch (const Error&) {
    return std::numeric_limits<double>::infinity();
  }
}

inline Score score_model(const Homography& h, const std::vector<Correspondence>& c, double thr,
                         std::vector<bool>* flags = nullptr) {
  Score s{0, 0.0};
  if (flags) flags->assign(c.size(), false);
  for (std::size_t i = 0; i < c.size(); ++i) {
    const double e = reprojection_error(h, c[i].first, c[i].second);
    if (e < thr) {
      ++s.count;
      s.mean_error += e;
      if (flags) (*flags)[i] = true;
    }
  }
  s.mean_error = s.count ? s.mean_error / s.count : std::numeric_limits<double>::infinity();
  return s;
}

}  // namespace detail

/// Seeded 4-point RANSAC over normalized DLT, with a final least-squares
/// refit on the best consensus set. Degenerate samples are redrawn and do not
/// consume iterations.
inline RansacResult ransac_homography(const std::vector<Keypoint>& kps_a, const std::vector<Keypoint>& kps_b,
                                      const MatchSet& matches, const RansacOptions& opt = {}) {
  if (matches.size() < 4) throw Error(ErrorCode::TooFewMatches, std::to_string(matches.size()) + " matches");
  std::vector<Correspondence> corr;
  corr.reserve(matches.size());
  for (const auto& m : matches) corr.emplace_back(kps_a.at(m.source).position, kps_b.at(m.target).position);

  RansacResult res;
  if (corr.size() == 4) {
    try {
      res.h_est = dlt_from_correspondences(corr);
    } catch (const Error&) {
      throw Error(ErrorCode::NoModel, "minimal sample is degenerate");
    }
    detail::score_model(res.h_est, corr, opt.inlier_px, &res.inliers);
    res.iterations_used = 1;
    return res;
  }

  std::mt19937_64 rng(opt.seed);
  std::uniform_int_distribution<std::size_t> pick(0, corr.size() - 1);
  detail::Score best;
  Homography best_h;
  const long max_attempts = 20L * opt.iterations + 1000;
  long attempts = 0;
  int iters = 0;
  std::vector<Correspondence> sample(4);
  while (iters < opt.iterations && attempts < max_attempts) {
    ++attempts;
    std::array<std::size_t, 4> idx{};
    for (int k = 0; k < 4; ++k) {
      bool dup;
      do {
        idx[k] = pick(rng);
        dup = std::find(idx.begin(), idx.begin() + k, idx[k]) != idx.begin() + k;
      } while (dup);
      sample[k] = corr[idx[k]];
    }
    Homography h;
    try {
      h = dlt_from_correspondences(sample);
    } catch (const Error&) {
      continue;
    }
    ++iters;
    const auto s = detail::score_model(h, corr, opt.inlier_px);
    if (s.better_than(best)) {
      best = s;
      best_h = h;
    }
  }
  if (best.count < 0) throw Error(ErrorCode::NoModel, "every sample was degenerate");

  std::vector<bool> flags;
  detail::score_model(best_h, corr, opt.inlier_px, &flags);
  res.h_est = best_h;
  res.inliers = flags;
  res.iterations_used = iters;

  std::vector<Correspondence> in;
  for (std::size_t i = 0; i < corr.size(); ++i)
    if (flags[i]) in.push_back(corr[i]);
  if (in.size() >= 4) {
    try {
      const Homography refit = dlt_from_correspondences(in);
      std::vector<bool> refit_flags;
      const auto s = detail::score_model(refit, corr, opt.inlier_px, &refit_flags);
      if (s.count >= 4) {
        res.h_est = refit;
        res.inliers = std::move(refit_flags);
      }
    } catch (const Error&) {
    }
  }
  return res;
}

}  // namespace advpatch::matching
