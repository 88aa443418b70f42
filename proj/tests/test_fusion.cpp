#include <gtest/gtest.h>

#include "support.hpp"

using namespace fsmdet;
using namespace fsmdet::testing;

namespace {

ImageFeatureMap random_map(Rng& rng, int w, int h, int c) {
  ImageFeatureMap m(w, h, c);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k) m.texel(x, y)[k] = rng.normal();
  return m;
}

VecX random_query(Rng& rng, int f) {
  VecX q(f);
  for (int i = 0; i < f; ++i) q[i] = rng.normal();
  return q;
}

DeformAttnParams identity_params(int C) {
  DeformAttnParams p;
  p.heads = 1;
  p.samples = 1;
  p.feature_dim = C;
  p.channels = C;
  p.value_dim = C;
  p.neighborhood_proj = Dense{MatX::Zero(C, C), VecX::Zero(C)};
  p.offset_mlp.layers = {Dense{MatX::Zero(2, 2 * C), VecX::Zero(2)}};
  p.attention = Dense{MatX::Zero(1, C), VecX::Zero(1)};
  p.value_proj = {MatX::Identity(C, C)};
  p.output_proj = {MatX::Identity(C, C)};
  return p;
}

}  // namespace

TEST(Bilinear, TexelAndMidpoint) {
  Rng rng(1);
  const auto m = random_map(rng, 8, 6, 3);
  EXPECT_EQ(bilinear_sample(m, {3, 2}), VecX(m.texel(3, 2)));
  EXPECT_EQ(bilinear_sample(m, {7, 5}), VecX(m.texel(7, 5)));
  EXPECT_NEAR((bilinear_sample(m, {3.5, 2}) - (m.texel(3, 2) + m.texel(4, 2)) / 2).norm(), 0.0, 1e-15);
  EXPECT_NEAR((bilinear_sample(m, {-4, 20}) - m.texel(0, 5)).norm(), 0.0, 1e-15);
}

TEST(Bilinear, JacobianMatchesFiniteDifferences) {
  Rng rng(2);
  const auto m = random_map(rng, 10, 10, 4);
  for (int i = 0; i < 200; ++i) {
    const Pixel2D p{rng.uniform(0.05, 8.95), rng.uniform(0.05, 8.95)};
    if (std::abs(p.u - std::round(p.u)) < 2e-4 || std::abs(p.v - std::round(p.v)) < 2e-4) continue;
    const MatX j = bilinear_sample_jacobian(m, p);
    const double h = 1e-4;
    const VecX du = (bilinear_sample(m, {p.u + h, p.v}) - bilinear_sample(m, {p.u - h, p.v})) / (2 * h);
    const VecX dv = (bilinear_sample(m, {p.u, p.v + h}) - bilinear_sample(m, {p.u, p.v - h})) / (2 * h);
    EXPECT_LE((j.col(0) - du).norm(), 1e-5 * std::max(1.0, du.norm()));
    EXPECT_LE((j.col(1) - dv).norm(), 1e-5 * std::max(1.0, dv.norm()));
  }
}

TEST(DeformAttn, DegenerateIsPlainSampling) {
  Rng rng(3);
  const auto m = random_map(rng, 12, 9, 5);
  const auto p = identity_params(5);
  for (int i = 0; i < 50; ++i) {
    const Pixel2D px{rng.uniform(0, 11), rng.uniform(0, 8)};
    EXPECT_NEAR((deform_attn(p, m, random_query(rng, 5), px) - bilinear_sample(m, px)).norm(), 0.0, 1e-14);
  }
}

TEST(DeformAttn, ConstantMapIgnoresOffsets) {
  Rng rng(4);
  const VecX c = random_query(rng, 6);
  const auto m = ImageFeatureMap::constant(20, 15, c);
  const auto p = random_deform_attn(3, 4, 8, 6, 5, 16, 11);
  VecX want = VecX::Zero(8);
  for (int h = 0; h < 3; ++h) want += p.output_proj[h] * p.value_proj[h] * c;
  for (int i = 0; i < 20; ++i)
    EXPECT_NEAR((deform_attn(p, m, random_query(rng, 8), {rng.uniform(0, 19), rng.uniform(0, 14)}) - want).norm(),
                0.0, 1e-12);
}

TEST(DeformAttn, MatchesNaiveLoops) {
  Rng rng(5);
  const auto m = random_map(rng, 40, 30, 6);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_deform_attn(1 + trial % 4, 1 + trial % 5, 8, 6, 4, 12, 100 + trial);
    const VecX q = random_query(rng, 8);
    const Pixel2D px{rng.uniform(-2, 41), rng.uniform(-2, 31)};
    const VecX got = deform_attn(p, m, q, px);
    const auto want = naive_deform_attn(p, m, q, px.u, px.v);
    for (int f = 0; f < 8; ++f) EXPECT_NEAR(got[f], want[f], 1e-9);
  }
}

TEST(DeformAttn, WeightsAreSoftmaxAndDimensionsChecked) {
  Rng rng(6);
  const auto p = random_deform_attn(4, 3, 8, 6, 4, 12, 7);
  for (int i = 0; i < 100; ++i) {
    const VecX w = attention_weights(p, random_query(rng, 8) * 5.0);
    for (int h = 0; h < 4; ++h) {
      EXPECT_NEAR(w.segment(h * 3, 3).sum(), 1.0, 1e-12);
      EXPECT_GE(w.segment(h * 3, 3).minCoeff(), 0.0);
    }
  }
  const auto m = random_map(rng, 10, 10, 6);
  EXPECT_THROW(deform_attn(p, m, VecX::Zero(7), {1, 1}), DimensionMismatch);
  EXPECT_THROW(deform_attn(p, random_map(rng, 10, 10, 5), VecX::Zero(8), {1, 1}), DimensionMismatch);
  auto bad = p;
  bad.value_proj[2] = MatX::Zero(4, 5);
  EXPECT_THROW(bad.validate(), DimensionMismatch);
}

TEST(DeformAttn, LinearInMapWithFrozenSampling) {
  Rng rng(7);
  const auto p = random_deform_attn(2, 3, 8, 6, 4, 12, 9);
  const auto r1 = random_map(rng, 25, 20, 6), r2 = random_map(rng, 25, 20, 6);
  const double a = 0.7, b = -1.3;
  ImageFeatureMap mix(25, 20, 6);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 25; ++x) mix.texel(x, y) = a * r1.texel(x, y) + b * r2.texel(x, y);
  for (int i = 0; i < 20; ++i) {
    const Pixel2D px{rng.uniform(0, 24), rng.uniform(0, 19)};
    const auto s = deform_attn_sampling(p, r1, random_query(rng, 8), px);
    const VecX lhs = deform_attn_apply(p, mix, px, s);
    const VecX rhs = a * deform_attn_apply(p, r1, px, s) + b * deform_attn_apply(p, r2, px, s);
    EXPECT_NEAR((lhs - rhs).norm(), 0.0, 1e-9);
  }
}

TEST(DeformAttn, QueryGradientMatchesFiniteDifferences) {
  Rng rng(8);
  const auto p = random_deform_attn(4, 4, 8, 6, 5, 16, 3);
  const auto m = random_map(rng, 30, 30, 6);
  for (int trial = 0; trial < 10; ++trial) {
    const VecX q = random_query(rng, 8);
    const Pixel2D px{rng.uniform(5, 25), rng.uniform(5, 25)};
    const auto offsets = deform_attn_sampling(p, m, q, px).offsets;
    const VecX g = deform_attn_norm_grad_query(p, m, q, px, offsets);
    const auto f = [&](const VecX& x) {
      return deform_attn_apply(p, m, px, DeformAttnSampling{offsets, attention_weights(p, x)}).norm();
    };
    for (int i = 0; i < 8; ++i) {
      VecX hi = q, lo = q;
      hi[i] += 1e-5, lo[i] -= 1e-5;
      const double fd = (f(hi) - f(lo)) / 2e-5;
      EXPECT_NEAR(g[i], fd, 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(FuseGrid, EmptyOneVoxelAndOccupancy) {
  Rng rng(9);
  const auto cam = forward_camera(40, 40, 32, 24, 64, 48, Vec3(-2, 4, 2));
  const auto spec = small_spec(8, 8, 4);
  const auto p = random_deform_attn(2, 2, 4, 3, 4, 8, 5);
  const auto m = random_map(rng, 64, 48, 3);
  SparseVoxelGrid empty;
  empty.spec = spec;
  empty.feature_dim = 4;
  EXPECT_TRUE(fuse_grid(empty, m, cam, p).voxels.empty());

  SparseVoxelGrid one = empty;
  const Index3 a{5, 4, 2}, behind{0, 0, 0};
  one.voxels[a] = Voxel{a, VecX::Ones(4), spec.center(a), 1};
  auto cam_inside = forward_camera(40, 40, 32, 24, 64, 48, Vec3(2, 4, 2.5));
  one.voxels[behind] = Voxel{behind, VecX::Ones(4), spec.center(behind), 1};
  const auto fused = fuse_grid(one, m, cam_inside, p);
  EXPECT_NE(fused.voxels.at(a).feature, VecX::Ones(4));
  EXPECT_EQ(fused.voxels.at(behind).feature, VecX::Ones(4));
  EXPECT_TRUE(fused.voxels.at(behind).off_image);
  EXPECT_FALSE(fused.voxels.at(a).off_image);

  for (int trial = 0; trial < 5; ++trial) {
    const auto g = random_grid(rng, spec, 0.2, 0.1, 4);
    const auto f1 = fuse_grid(g, m, cam, p, FusionMode::kDeformAttn, 1);
    const auto f4 = fuse_grid(g, m, cam, p, FusionMode::kDeformAttn, 4);
    EXPECT_EQ(f1.occupancy(), g.occupancy());
    for (const auto& [i, v] : g.voxels) {
      EXPECT_EQ(f1.voxels.at(i).centroid, v.centroid);
      EXPECT_EQ(f1.voxels.at(i).point_count, v.point_count);
      EXPECT_EQ(f1.voxels.at(i).feature, f4.voxels.at(i).feature);
    }
  }
  EXPECT_THROW(fuse_grid(random_grid(rng, spec, 0.1, 0, 5), m, cam, p), DimensionMismatch);
}

TEST(ClassifyForeground, OracleMatchesLabelPropagation) {
  const Scene s = generate_scene(3, 3);
  const Scan sc = scan(s, 32, 360);
  const auto g = voxelize(sc.points, nullptr, default_grid());
  const auto mask = classify_foreground(g, sc, s);
  std::set<Index3> want;
  for (std::size_t i = 0; i < sc.points.size(); ++i)
    if (sc.point_object[i])
      if (const auto idx = g.spec.index_of(sc.points[i])) want.insert(*idx);
  EXPECT_EQ(mask.indices, want);
  EXPECT_FALSE(want.empty());
  for (const auto& i : mask.indices) EXPECT_TRUE(g.occupied(i));

  Scan bg = sc;
  for (auto& o : bg.point_object) o.reset();
  EXPECT_TRUE(classify_foreground(g, bg, s).indices.empty());
}

TEST(ClassifyForeground, StubIsDeterministic) {
  Rng rng(10);
  const auto g = random_grid(rng, small_spec(10, 10, 4), 0.3, 0.0, 8);
  const auto stub = ClassifierStub::random(8, 16, 4);
  const auto a = classify_foreground(g, stub), b = classify_foreground(g, ClassifierStub::random(8, 16, 4));
  EXPECT_EQ(a.indices, b.indices);
  for (const auto& [i, s] : a.scores) EXPECT_EQ(s, b.scores.at(i));
  for (const auto& i : a.indices) EXPECT_TRUE(g.occupied(i));
}
