#include <advpatch/maskgen.hpp>

#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "test_support.hpp"

using namespace advpatch;
using namespace advpatch::maskgen;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::Io;
}

// Winding number of a closed polygon around p, with boundary points reported
// separately so the inclusive rule can be applied.
int winding(const Quad& q, Point2 p, bool& on_boundary) {
  int wn = 0;
  on_boundary = false;
  for (int i = 0; i < 4; ++i) {
    const Point2 a = q.corners[i], b = q.corners[(i + 1) % 4];
    const double c = (b.x - a.x) * (p.y - a.y) - (p.x - a.x) * (b.y - a.y);
    if (c == 0 && std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) && std::min(a.y, b.y) <= p.y &&
        p.y <= std::max(a.y, b.y))
      on_boundary = true;
    if (a.y <= p.y) {
      if (b.y > p.y && c > 0) ++wn;
    } else if (b.y <= p.y && c < 0) {
      --wn;
    }
  }
  return wn;
}

}  // namespace

TEST(PlaceSourceMask, CenterArithmetic) {
  const auto q = place_source_mask(640, 480, 128);
  EXPECT_EQ(q.corners[0], (Point2{256, 176}));
  EXPECT_EQ(q.corners[2], (Point2{384, 304}));
}

TEST(PlaceSourceMask, WholeImage) {
  const auto q = place_source_mask(200, 200, 200);
  EXPECT_EQ(q.corners[0], (Point2{0, 0}));
  EXPECT_EQ(q.corners[2], (Point2{200, 200}));
}

TEST(PlaceSourceMask, SeededRandomAlwaysInside) {
  for (std::uint64_t s = 0; s < 10000; ++s) {
    const auto q = place_source_mask(640, 480, 128, Placement::SeededRandom, s);
    ASSERT_TRUE(quad_inside_image(q, 640, 480)) << s;
    ASSERT_DOUBLE_EQ(q.area(), 128.0 * 128.0);
  }
  EXPECT_EQ(place_source_mask(640, 480, 64, Placement::SeededRandom, 9).corners[0],
            place_source_mask(640, 480, 64, Placement::SeededRandom, 9).corners[0]);
}

TEST(PlaceSourceMask, TooLarge) {
  EXPECT_EQ(code_of([] { place_source_mask(640, 480, 481); }), ErrorCode::MaskTooLarge);
}

TEST(DeriveTargetMask, IdentityNeedsOneMaskWidthPlusAStep) {
  const auto src = place_source_mask(640, 480, 128);
  const auto m = derive_target_mask(Homography::identity(), src, 640, 480);
  // Touching quads count as overlapping, so the first separating grid offset
  // lies one 8 px step beyond the mask width.
  EXPECT_EQ(std::hypot(m.dx, m.dy), 136.0);
  EXPECT_EQ(m.dx, 136.0);
  EXPECT_EQ(m.dy, 0.0);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(m.target.corners[i], (src.corners[i] + Point2{136, 0}));
}

TEST(DeriveTargetMask, ScalingHalvesTheSquare) {
  const auto src = place_source_mask(640, 480, 128);
  const auto h = Homography::from_rows({2, 0, 0, 0, 2, 0, 0, 0, 1});
  const auto m = derive_target_mask(h, src, 640, 480);
  const auto untranslated = m.target.translated(-m.dx, -m.dy);
  EXPECT_EQ(untranslated.corners[0], (Point2{128, 88}));
  EXPECT_EQ(untranslated.corners[2], (Point2{192, 152}));
}

TEST(DeriveTargetMask, RandomHomographyInvariants) {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 100; ++t) {
    const Eigen::Matrix3d hm = testing_support::random_homography_matrix(rng);
    const Homography h(hm);
    const auto src = place_source_mask(640, 480, 96, Placement::SeededRandom, t);
    const auto m = derive_target_mask(h, src, 640, 480);
    EXPECT_TRUE(quad_inside_image(m.target, 640, 480));
    EXPECT_FALSE(quads_overlap(m.source, m.target));
    EXPECT_EQ(std::fmod(m.dx, 8.0), 0.0);
    EXPECT_EQ(std::fmod(m.dy, 8.0), 0.0);
    // Independent corner recomputation through the explicit inverse matrix.
    const Eigen::Matrix3d inv = hm.inverse();
    for (int i = 0; i < 4; ++i) {
      const Eigen::Vector3d p = inv * Eigen::Vector3d(src.corners[i].x, src.corners[i].y, 1.0);
      EXPECT_NEAR(m.target.corners[i].x - m.dx, p.x() / p.z(), 1e-9);
      EXPECT_NEAR(m.target.corners[i].y - m.dy, p.y() / p.z(), 1e-9);
    }
    // Translation keeps the shape.
    const auto pulled = transfer_quad(invert(h), src);
    for (int i = 0; i < 4; ++i)
      for (int j = i + 1; j < 4; ++j)
        EXPECT_NEAR(distance(m.target.corners[i], m.target.corners[j]), distance(pulled.corners[i], pulled.corners[j]),
                    1e-12);
  }
}

TEST(DeriveTargetMask, NoValidPlacement) {
  const auto src = place_source_mask(200, 200, 150);
  EXPECT_EQ(code_of([&] { derive_target_mask(Homography::identity(), src, 200, 200); }), ErrorCode::NoValidPlacement);
}

TEST(SpiralOffsets, OrderedByLengthThenAngle) {
  const auto o = spiral_offsets(16, 8);
  ASSERT_EQ(o.size(), 25u);
  EXPECT_EQ(o[0].dx, 0);
  EXPECT_EQ(o[0].dy, 0);
  EXPECT_EQ(o[1].dx, 8);
  EXPECT_EQ(o[1].dy, 0);
  EXPECT_EQ(o[2].dx, 0);
  EXPECT_EQ(o[2].dy, -8);
  for (std::size_t i = 1; i < o.size(); ++i)
    EXPECT_LE(o[i - 1].dx * o[i - 1].dx + o[i - 1].dy * o[i - 1].dy, o[i].dx * o[i].dx + o[i].dy * o[i].dy);
}

TEST(TransferQuad, IdentityTranslationRoundTrip) {
  const Quad q{{Point2{10, 20}, Point2{50, 18}, Point2{55, 70}, Point2{8, 66}}};
  const auto same = transfer_quad(Homography::identity(), q);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(same.corners[i], q.corners[i]);
  const auto moved = transfer_quad(translation(5, -3), q);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(moved.corners[i], (q.corners[i] + Point2{5, -3}));
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    const Homography h(testing_support::random_homography_matrix(rng));
    const auto back = transfer_quad(compose(h, invert(h)), q);
    for (int i = 0; i < 4; ++i) EXPECT_LT(distance(back.corners[i], q.corners[i]), 1e-6);
  }
}

TEST(PointInQuad, MatchesWindingNumber) {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(-20, 120);
  const Quad quads[] = {
      Quad::rectangle(0, 0, 100, 100),
      {{Point2{10, 5}, Point2{90, 20}, Point2{80, 95}, Point2{15, 70}}},
      {{Point2{50, 0}, Point2{100, 50}, Point2{50, 100}, Point2{0, 50}}},
      {{Point2{15, 70}, Point2{80, 95}, Point2{90, 20}, Point2{10, 5}}},
  };
  int mismatches = 0;
  for (const auto& q : quads)
    for (int i = 0; i < 25000; ++i) {
      Point2 p{u(rng), u(rng)};
      if (i % 50 == 0) p = {std::round(p.x), std::round(p.y)};
      bool boundary = false;
      const bool inside = winding(q, p, boundary) != 0 || boundary;
      mismatches += inside != point_in_quad(q, p);
    }
  EXPECT_EQ(mismatches, 0);
}

TEST(QuadsOverlap, TouchingAndSeparated) {
  const auto a = Quad::rectangle(0, 0, 10, 10);
  EXPECT_TRUE(quads_overlap(a, Quad::rectangle(10, 0, 20, 10)));
  EXPECT_FALSE(quads_overlap(a, Quad::rectangle(10.5, 0, 20, 10)));
  EXPECT_TRUE(quads_overlap(a, Quad::rectangle(2, 2, 4, 4)));
  const Quad diamond{{Point2{15, 5}, Point2{20, 10}, Point2{15, 15}, Point2{10.5, 10}}};
  EXPECT_FALSE(quads_overlap(a, diamond));
}

TEST(MaskFile, RoundTrip) {
  const auto src = place_source_mask(640, 480, 128);
  std::mt19937_64 rng(5);
  const auto m = derive_target_mask(Homography(testing_support::random_homography_matrix(rng)), src, 640, 480);
  std::stringstream ss;
  write_masks(ss, m);
  const auto back = read_masks(ss);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(back.source.corners[i], m.source.corners[i]);
    EXPECT_EQ(back.target.corners[i], m.target.corners[i]);
  }
  EXPECT_EQ(back.dx, m.dx);
  std::stringstream bad("1 2 3");
  EXPECT_EQ(code_of([&] { read_masks(bad); }), ErrorCode::MalformedHeader);
}
