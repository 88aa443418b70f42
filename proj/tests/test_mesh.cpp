#include <gtest/gtest.h>

#include <numbers>

#include "support.hpp"

using namespace fsmdet;
using namespace fsmdet::testing;

namespace {
std::vector<Vec3> cube_corners() {
  std::vector<Vec3> v;
  for (int i = 0; i < 8; ++i) v.emplace_back(i & 1, (i >> 1) & 1, (i >> 2) & 1);
  return v;
}
}  // namespace

TEST(ConvexHull, UnitCube) {
  const auto hull = convex_hull(cube_corners());
  EXPECT_EQ(hull.triangles().size(), 12u);
  EXPECT_NEAR(hull.volume(), 1.0, 1e-9);
  EXPECT_TRUE(hull.watertight());
}

TEST(ConvexHull, InteriorPointIgnored) {
  auto pts = cube_corners();
  pts.emplace_back(0.5, 0.5, 0.5);
  const auto hull = convex_hull(pts);
  EXPECT_EQ(hull.triangles().size(), 12u);
  EXPECT_NEAR(hull.volume(), 1.0, 1e-9);
  for (const auto& [n, d] : face_planes(hull)) EXPECT_LT(n.dot(Vec3(0.5, 0.5, 0.5)), d - 0.1);
}

TEST(ConvexHull, SphereSamplesMonteCarlo) {
  Rng rng(21);
  std::vector<Vec3> pts;
  for (int i = 0; i < 200; ++i) pts.push_back(Vec3(rng.normal(), rng.normal(), rng.normal()).normalized());
  const auto hull = convex_hull(pts);
  const double ball = 4.0 / 3.0 * std::numbers::pi;
  // Monte-Carlo volume using the half-space oracle on the hull's planes.
  const auto planes = face_planes(hull);
  int inside = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const Vec3 p = random_vec(rng, -1, 1);
    bool in = true;
    for (const auto& [nn, d] : planes) in = in && nn.dot(p) <= d + 1e-12;
    inside += in;
    if (in) {
      EXPECT_LE(p.norm(), 1.0 + 1e-9);
    }
  }
  const double mc = 8.0 * inside / n;
  EXPECT_NEAR(hull.volume(), mc, 0.05 * ball);
  EXPECT_LE(hull.volume(), ball);
  EXPECT_GE(hull.volume(), 0.9 * 0.85 * ball);
  for (const auto& p : pts)
    for (const auto& [nn, d] : planes) EXPECT_LE(nn.dot(p), d + 1e-9);
}

TEST(ConvexHull, DegenerateInputs) {
  EXPECT_THROW(convex_hull({Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0)}), DegenerateInput);
  EXPECT_THROW(convex_hull({Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(1, 1, 0)}), DegenerateInput);
  EXPECT_THROW(convex_hull({Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0), Vec3(3, 0, 0)}), DegenerateInput);
  EXPECT_THROW(convex_hull(std::vector<Vec3>(5, Vec3(1, 1, 1))), DegenerateInput);
}

TEST(ConvexHull, RandomHullsContainInputs) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Vec3> pts;
    for (int i = 0; i < 60; ++i) pts.push_back(random_vec(rng, -2, 2));
    const auto hull = convex_hull(pts);
    EXPECT_TRUE(hull.watertight());
    const auto planes = face_planes(hull);
    for (const auto& p : pts)
      for (const auto& [n, d] : planes) EXPECT_LE(n.dot(p), d + 1e-9);
  }
}

TEST(Expand, IdentityAndCubicScaling) {
  const auto cube = unit_cube(Vec3(3, 1, 2));
  const auto same = expand(cube, 1.0);
  for (std::size_t i = 0; i < cube.vertices().size(); ++i)
    EXPECT_NEAR((same.vertices()[i] - cube.vertices()[i]).norm(), 0.0, 1e-15);
  EXPECT_NEAR(expand(cube, 2.0).volume(), 8.0, 1e-9);
  EXPECT_THROW(expand(cube, 0.99), InvalidDelta);
}

TEST(Expand, CentroidFixedAndDistancesScale) {
  Rng rng(6);
  const auto hull = random_hull(rng, 40, 1.5, Vec3(4, -2, 1));
  const auto big = expand(hull, 1.15);
  EXPECT_NEAR((big.centroid() - hull.centroid()).norm(), 0.0, 1e-9);
  EXPECT_EQ(big.triangles(), hull.triangles());
  for (std::size_t i = 0; i < hull.vertices().size(); ++i) {
    const double d0 = (hull.vertices()[i] - hull.centroid()).norm();
    const double d1 = (big.vertices()[i] - hull.centroid()).norm();
    EXPECT_NEAR(d1, 1.15 * d0, 1e-9 * d1);
  }
}

TEST(Expand, OriginalVerticesStrictlyInside) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const auto hull = random_hull(rng, 30);
    const auto big = expand(hull, 1.15);
    const auto planes = face_planes(big);
    for (const auto& v : hull.vertices()) {
      EXPECT_TRUE(contains(big, v));
      for (const auto& [n, d] : planes) EXPECT_LT(n.dot(v), d);
    }
  }
}

TEST(Intersect, AxisAlignedSlab) {
  const auto cube = unit_cube(Vec3(0, 0, 5));
  const auto hit = intersect(cube, Ray(Vec3::Zero(), Vec3::UnitZ()));
  ASSERT_TRUE(hit);
  EXPECT_NEAR(hit->travel, 4.5, 1e-12);
  EXPECT_NEAR((hit->point - Vec3(0, 0, 4.5)).norm(), 0.0, 1e-12);
  EXPECT_FALSE(intersect(cube, Ray(Vec3::Zero(), -Vec3::UnitZ())));
}

TEST(Intersect, MatchesBruteForce) {
  Rng rng(9);
  const auto hull = random_hull(rng, 50, 1.0, Vec3(0, 0, 0));
  ASSERT_LE(hull.triangles().size(), 500u);
  int hits = 0;
  for (int i = 0; i < 10000; ++i) {
    const Vec3 o = random_vec(rng, -3, 3);
    const Vec3 d = i % 2 ? Vec3(rng.normal(), rng.normal(), rng.normal()) : Vec3(random_vec(rng, -0.5, 0.5) - o);
    const Ray r(o, d);
    const auto got = intersect(hull, r);
    const auto want = brute_nearest(hull, r);
    ASSERT_EQ(got.has_value(), want.has_value()) << "ray " << i;
    if (got) {
      ++hits;
      EXPECT_NEAR(got->travel, *want, 1e-9);
      EXPECT_NEAR((got->point - r.point_at(got->travel)).norm(), 0.0, 1e-9);
      EXPECT_GT(got->travel, 0.0);
    }
  }
  EXPECT_GT(hits, 4000);
}

TEST(Intersect, EdgeTieBreaksToLowestIndex) {
  const auto cube = unit_cube();
  // Through the diagonal shared by the two triangles of the z = −0.5 face.
  const auto hit = intersect(cube, Ray(Vec3(0, 0, -3), Vec3::UnitZ()));
  ASSERT_TRUE(hit);
  EXPECT_NEAR(hit->travel, 2.5, 1e-12);
  EXPECT_EQ(hit->triangle_index, 0);
}

TEST(Contains, CubeCenterAndFarPoint) {
  const auto cube = unit_cube();
  EXPECT_TRUE(contains(cube, Vec3::Zero()));
  EXPECT_FALSE(contains(cube, Vec3(2 * std::sqrt(0.75), 0, 0)));
  EXPECT_TRUE(contains(cube, Vec3(0.5, 0.1, 0.1)));
}

TEST(Contains, AgreesWithHalfSpacesOnConvexHulls) {
  Rng rng(10);
  const auto hull = random_hull(rng, 40);
  const auto planes = face_planes(hull);
  for (int i = 0; i < 10000; ++i) {
    const Vec3 p = random_vec(rng, -1.5, 1.5);
    double margin = -1e300;
    for (const auto& [n, d] : planes) margin = std::max(margin, n.dot(p) - d);
    if (std::abs(margin) < 1e-7) continue;
    EXPECT_EQ(contains(hull, p), margin < 0) << p.transpose();
  }
}

TEST(Contains, RejectsOpenMesh) {
  const TriangleMesh open({Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0)}, {{0, 1, 2}});
  EXPECT_FALSE(open.watertight());
  EXPECT_THROW(contains(open, Vec3::Zero()), NotWatertight);
}

TEST(TriangleMesh, DropsDegenerateTriangles) {
  const TriangleMesh m({Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0), Vec3(0, 1, 0)}, {{0, 1, 2}, {0, 1, 3}});
  EXPECT_EQ(m.triangles().size(), 1u);
  EXPECT_EQ(m.dropped_degenerate(), 1u);
  EXPECT_THROW(TriangleMesh({Vec3::Zero()}, {{0, 0, 5}}), InvalidArgument);
}

TEST(TriangleMesh, CentroidIsAreaWeighted) {
  const auto cube = unit_cube(Vec3(1, 2, 3));
  EXPECT_NEAR((cube.centroid() - Vec3(1, 2, 3)).norm(), 0.0, 1e-12);
}
