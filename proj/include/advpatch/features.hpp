#pragma once

#include <advpatch/geometry.hpp>

#include <Eigen/Dense>

#include <vector>

namespace advpatch {

struct Keypoint {
  Point2 position;
  double score = 0.0;
};

/// One descriptor per row. Rows flagged degenerate are all-zero (the raw
/// descriptor had zero norm and could not be normalized).
struct DescriptorSet {
  Eigen::MatrixXd rows;
  std::vector<bool> degenerate;

  int size() const { return static_cast<int>(rows.rows()); }
  int dim() const { return static_cast<int>(rows.cols()); }
};

struct Features {
  std::vector<Keypoint> keypoints;
  DescriptorSet descriptors;
};

/// Keeps the first n keypoints and their descriptor rows.
inline Features truncate(Features f, std::size_t n) {
  if (f.keypoints.size() <= n) return f;
  f.keypoints.resize(n);
  f.descriptors.rows.conservativeResize(static_cast<Eigen::Index>(n), Eigen::NoChange);
  f.descriptors.degenerate.resize(n);
  return f;
}

}  // namespace advpatch
