#include <advpatch/geometry.hpp>

#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "test_support.hpp"

using namespace advpatch;

TEST(Homography, NormalizesToUnitH33) {
  const auto h = Homography::from_rows({2, 0, 4, 0, 2, 6, 0, 0, 2});
  EXPECT_DOUBLE_EQ(h(2, 2), 1.0);
  EXPECT_DOUBLE_EQ(h(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(h(0, 2), 2.0);
}

TEST(Homography, SmallH33FallsBackToFrobenius) {
  const auto h = Homography::from_rows({0, 1, 0, 1, 0, 1, 1, 1, 0});
  EXPECT_NEAR(h.matrix().norm(), 1.0, 1e-15);
}

TEST(Homography, RejectsSingular) {
  EXPECT_THROW(Homography::from_rows({1, 2, 3, 2, 4, 6, 0, 0, 1}), Error);
  try {
    Homography::from_rows({1, 2, 3, 2, 4, 6, 0, 0, 1});
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Singular);
  }
}

TEST(ApplyPoint, Identity) {
  const auto p = apply_point(Homography::identity(), {7.5, -2});
  EXPECT_EQ(p.x, 7.5);
  EXPECT_EQ(p.y, -2.0);
}

TEST(ApplyPoint, Scaling) {
  const auto p = apply_point(Homography::from_rows({2, 0, 0, 0, 2, 0, 0, 0, 1}), {3, 4});
  EXPECT_EQ(p, (Point2{6, 8}));
}

TEST(ApplyPoint, ScaleEquivalence) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    const Eigen::Matrix3d m = testing_support::random_homography_matrix(rng);
    const Homography h(m);
    for (double c : {2.0, -0.5, 4.0}) {
      const Homography hc(c * m);
      const Point2 p{std::uniform_real_distribution<double>(0, 640)(rng),
                     std::uniform_real_distribution<double>(0, 480)(rng)};
      // Power-of-two factors commute with the h33 normalization exactly.
      EXPECT_EQ(apply_point(hc, p), apply_point(h, p));
    }
    const Homography h3(-3.0 * m);
    const auto a = apply_point(h3, {100, 50}), b = apply_point(h, {100, 50});
    EXPECT_NEAR(a.x, b.x, 1e-9);
    EXPECT_NEAR(a.y, b.y, 1e-9);
  }
}

TEST(ApplyPoint, PointAtInfinity) {
  const auto h = Homography::from_rows({1, 0, 0, 0, 1, 0, 1, 0, 1});
  try {
    apply_point(h, {-1, 3});
    FAIL() << "expected DegeneratePoint";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegeneratePoint);
  }
}

TEST(Invert, IdentityAndScale) {
  EXPECT_TRUE(invert(Homography::identity()).matrix().isApprox(Eigen::Matrix3d::Identity()));
  const auto inv = invert(Homography::from_rows({2, 0, 0, 0, 2, 0, 0, 0, 1}));
  Eigen::Matrix3d expect = Eigen::Matrix3d::Identity();
  expect(0, 0) = expect(1, 1) = 0.5;
  EXPECT_TRUE(inv.matrix().isApprox(expect, 1e-15));
}

TEST(Invert, RoundTripOnRandomPoints) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> ux(0, 640), uy(0, 480);
  for (int t = 0; t < 20; ++t) {
    const Homography h(testing_support::random_homography_matrix(rng));
    const Homography hi = invert(h);
    for (int i = 0; i < 100; ++i) {
      const Point2 p{ux(rng), uy(rng)};
      EXPECT_LT(distance(apply_point(hi, apply_point(h, p)), p), 1e-6);
    }
  }
}

TEST(Compose, InverseAndIdentity) {
  std::mt19937_64 rng(2);
  const Homography h(testing_support::random_homography_matrix(rng));
  EXPECT_TRUE(compose(h, invert(h)).matrix().isApprox(Eigen::Matrix3d::Identity(), 1e-12));
  EXPECT_TRUE(compose(Homography::identity(), h).matrix().isApprox(h.matrix(), 1e-15));
}

TEST(Compose, AssociativePointwise) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ux(0, 640), uy(0, 480);
  for (int t = 0; t < 20; ++t) {
    const Homography a(testing_support::random_homography_matrix(rng));
    const Homography b(testing_support::random_homography_matrix(rng));
    const Homography c(testing_support::random_homography_matrix(rng));
    for (int i = 0; i < 20; ++i) {
      const Point2 p{ux(rng), uy(rng)};
      const Point2 direct = apply_point(a, apply_point(b, apply_point(c, p)));
      EXPECT_LT(distance(apply_point(compose(compose(a, b), c), p), direct), 1e-6);
      EXPECT_LT(distance(apply_point(compose(a, compose(b, c)), p), direct), 1e-6);
    }
  }
}

TEST(Dlt, UnitSquareScaling) {
  const auto s = Homography::from_rows({2, 0, 0, 0, 2, 0, 0, 0, 1});
  std::vector<Correspondence> pairs;
  for (Point2 p : {Point2{0, 0}, Point2{1, 0}, Point2{1, 1}, Point2{0, 1}}) pairs.emplace_back(p, apply_point(s, p));
  const auto h = dlt_from_correspondences(pairs);
  EXPECT_LT((h.matrix() - s.matrix()).norm(), 1e-12);
}

TEST(Dlt, ExactRecoveryOfRandomHomographies) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> ux(0, 640), uy(0, 480);
  for (int t = 0; t < 50; ++t) {
    const Homography gt(testing_support::random_homography_matrix(rng));
    std::vector<Correspondence> pairs;
    for (int i = 0; i < 8; ++i) {
      const Point2 p{ux(rng), uy(rng)};
      pairs.emplace_back(p, apply_point(gt, p));
    }
    const auto h = dlt_from_correspondences(pairs);
    double worst = 0.0;
    for (const auto& [a, b] : pairs) worst = std::max(worst, distance(apply_point(h, a), b));
    EXPECT_LT(worst, 1e-6);
    EXPECT_LT((h.matrix() / h.matrix().norm() - gt.matrix() / gt.matrix().norm()).norm(), 1e-6);
  }
}

TEST(Dlt, CollinearConfigurationIsDegenerate) {
  std::vector<Correspondence> pairs{
      {{0, 0}, {0, 0}}, {{1, 1}, {2, 1}}, {{2, 2}, {3, 5}}, {{5, 0}, {4, 1}}};
  try {
    dlt_from_correspondences(pairs);
    FAIL() << "expected DegenerateConfiguration";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateConfiguration);
  }
}

TEST(Dlt, AllPointsOnALineIsDegenerate) {
  std::vector<Correspondence> pairs;
  for (int i = 0; i < 6; ++i) pairs.push_back({{double(i), 2.0 * i}, {double(i), 3.0 * i}});
  EXPECT_THROW(dlt_from_correspondences(pairs), Error);
}

TEST(Dlt, TooFewPoints) {
  std::vector<Correspondence> pairs{{{0, 0}, {0, 0}}, {{1, 0}, {1, 0}}, {{0, 1}, {0, 1}}};
  EXPECT_THROW(dlt_from_correspondences(pairs), Error);
}

TEST(CornerError, ZeroForEqualHomographies) {
  std::mt19937_64 rng(8);
  const Homography h(testing_support::random_homography_matrix(rng));
  for (double e : corner_error(h, h, 640, 480)) EXPECT_EQ(e, 0.0);
}

TEST(CornerError, UnitSourceShift) {
  const auto est = compose(Homography::identity(), translation(1, 0));
  for (double e : corner_error(est, Homography::identity(), 640, 480)) EXPECT_EQ(e, 1.0);
}

TEST(CornerError, MatchesDirectRecomputation) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> noise(0, 1e-4);
  for (int t = 0; t < 20; ++t) {
    const Eigen::Matrix3d m = testing_support::random_homography_matrix(rng);
    Eigen::Matrix3d pm = m;
    for (int i = 0; i < 8; ++i) pm(i / 3, i % 3) += noise(rng);
    const Homography gt(m), est(pm);
    const auto ce = corner_error(est, gt, 320, 240);
    const double cx[4] = {0, 320, 320, 0}, cy[4] = {0, 0, 240, 240};
    for (int i = 0; i < 4; ++i) {
      const Eigen::Vector3d a = m * Eigen::Vector3d(cx[i], cy[i], 1);
      const Eigen::Vector3d b = pm * Eigen::Vector3d(cx[i], cy[i], 1);
      const double d = std::hypot(a.x() / a.z() - b.x() / b.z(), a.y() / a.z() - b.y() / b.z());
      EXPECT_NEAR(ce[i], d, 1e-9);
    }
  }
}

TEST(HomographyText, ParsesHpatchesLayout) {
  const auto h = parse_homography("0.79208 0.010314 27.290\n -0.1927 1.0163 -11.497\n 0.000 0.0000 1.0000\n");
  EXPECT_DOUBLE_EQ(h(0, 0), 0.79208);
  EXPECT_DOUBLE_EQ(h(1, 2), -11.497);
  std::ostringstream out;
  write_homography(out, h);
  EXPECT_EQ(parse_homography(out.str()).matrix(), h.matrix());
}

TEST(HomographyText, RejectsShortInput) {
  try {
    parse_homography("1 0 0 0 1 0 0 0");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnreadableHomography);
  }
}

TEST(Quad, PointInQuadBasics) {
  const auto sq = Quad::rectangle(0, 0, 1, 1);
  EXPECT_TRUE(point_in_quad(sq, {0.5, 0.5}));
  EXPECT_FALSE(point_in_quad(sq, {2, 2}));
  EXPECT_TRUE(point_in_quad(sq, {1, 0.5}));
  EXPECT_TRUE(point_in_quad(sq, {0, 0}));
}

TEST(Quad, CoverageIsHalfOpenOnRectangles) {
  const auto q = Quad::rectangle(0, 0, 4, 3);
  int n = 0;
  for (int y = -1; y <= 5; ++y)
    for (int x = -1; x <= 5; ++x) n += quad_covers_pixel(q, {double(x), double(y)});
  EXPECT_EQ(n, 12);
  EXPECT_TRUE(quad_covers_pixel(q, {0, 0}));
  EXPECT_FALSE(quad_covers_pixel(q, {4, 0}));
  EXPECT_FALSE(quad_covers_pixel(q, {0, 3}));
}

TEST(Quad, AdjacentQuadsPartitionPixels) {
  // Two triangles-as-quads sharing a diagonal edge never both claim a pixel.
  const Quad left{{Point2{0, 0}, Point2{10, 0}, Point2{10, 0}, Point2{0, 10}}};
  const Quad right{{Point2{10, 0}, Point2{10, 10}, Point2{0, 10}, Point2{0, 10}}};
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) {
      const Point2 p{double(x), double(y)};
      EXPECT_EQ(quad_covers_pixel(left, p) + quad_covers_pixel(right, p), 1) << x << "," << y;
    }
}
