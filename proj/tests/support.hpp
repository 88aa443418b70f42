#pragma once

// Shared fixtures and independent oracles for the test suite. Oracles here
// deliberately avoid the library's own helpers where the behavior under test
// would otherwise be checked against itself.

#include <cmath>
#include <set>
#include <vector>

#include "fsmdet/fsmdet.hpp"

namespace fsmdet::testing {

inline Mat3 random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  return q.normalized().toRotationMatrix();
}

inline Vec3 random_vec(Rng& rng, double lo, double hi) {
  return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

inline CameraModel identity_camera(double f, double c, int w = 100, int h = 100) {
  return CameraModel(f, f, c, c, w, h, RigidTransform{});
}

inline CameraModel random_camera(Rng& rng) {
  RigidTransform ext{random_rotation(rng), random_vec(rng, -2.0, 2.0)};
  return CameraModel(rng.uniform(200, 600), rng.uniform(200, 600), rng.uniform(280, 360), rng.uniform(160, 200), 640,
                     360, ext);
}

/// Axis-aligned box as a 12-triangle mesh with outward winding.
inline TriangleMesh box_mesh(const Vec3& lo, const Vec3& hi) {
  std::vector<Vec3> v;
  for (int i = 0; i < 8; ++i)
    v.emplace_back(i & 1 ? hi.x() : lo.x(), i & 2 ? hi.y() : lo.y(), i & 4 ? hi.z() : lo.z());
  const std::vector<Triangle> t{{0, 2, 1}, {1, 2, 3}, {4, 5, 6}, {5, 7, 6}, {0, 1, 4}, {1, 5, 4},
                                {2, 6, 3}, {3, 6, 7}, {0, 4, 2}, {2, 4, 6}, {1, 3, 5}, {3, 7, 5}};
  return TriangleMesh(v, t);
}

inline TriangleMesh unit_cube(const Vec3& center = Vec3::Zero()) {
  return box_mesh(center - Vec3::Constant(0.5), center + Vec3::Constant(0.5));
}

inline TriangleMesh random_hull(Rng& rng, int n = 30, double radius = 1.0, const Vec3& center = Vec3::Zero()) {
  std::vector<Vec3> pts;
  for (int i = 0; i < n; ++i) pts.push_back(center + radius * random_vec(rng, -1.0, 1.0));
  return convex_hull(pts);
}

/// Outward face planes (n, d) with n·x ≤ d inside, from vertex-average orientation.
inline std::vector<std::pair<Vec3, double>> face_planes(const TriangleMesh& m) {
  Vec3 inner = Vec3::Zero();
  for (const auto& v : m.vertices()) inner += v;
  inner /= static_cast<double>(m.vertices().size());
  std::vector<std::pair<Vec3, double>> out;
  for (std::size_t i = 0; i < m.triangles().size(); ++i) {
    const Vec3 a = m.corner(i, 0), b = m.corner(i, 1), c = m.corner(i, 2);
    Vec3 n = (b - a).cross(c - a).normalized();
    if (n.dot(inner - a) > 0) n = -n;
    out.emplace_back(n, n.dot(a));
  }
  return out;
}

/// Brute-force nearest hit: plain barycentric solve per triangle via a 3×3 system.
inline std::optional<double> brute_nearest(const TriangleMesh& m, const Ray& r) {
  std::optional<double> best;
  for (std::size_t i = 0; i < m.triangles().size(); ++i) {
    const Vec3 a = m.corner(i, 0), b = m.corner(i, 1), c = m.corner(i, 2);
    Mat3 A;
    A.col(0) = -r.direction();
    A.col(1) = b - a;
    A.col(2) = c - a;
    if (std::abs(A.determinant()) < 1e-14) continue;
    const Vec3 x = A.fullPivLu().solve(r.origin() - a);
    const double t = x[0], u = x[1], v = x[2];
    if (u < -1e-12 || v < -1e-12 || u + v > 1 + 1e-12 || t <= 1e-12) continue;
    if (!best || t < *best) best = t;
  }
  return best;
}

/// Random sparse grid with a random invisible set.
inline SparseVoxelGrid random_grid(Rng& rng, const GridSpec& spec, double occupancy, double invisible, int F = 4) {
  SparseVoxelGrid g;
  g.spec = spec;
  g.feature_dim = F;
  g.invisible = VoxelMask(spec);
  for (int z = 0; z < spec.dims[2]; ++z)
    for (int y = 0; y < spec.dims[1]; ++y)
      for (int x = 0; x < spec.dims[0]; ++x) {
        const Index3 i{x, y, z};
        if (rng.uniform() < occupancy) {
          Voxel v;
          v.index = i;
          v.feature = VecX::NullaryExpr(F, [&](Eigen::Index) { return rng.normal(); });
          v.centroid = spec.center(i);
          v.point_count = 1 + static_cast<int>(rng.below(5));
          if (rng.uniform() < 0.5) v.class_id = static_cast<int>(rng.below(2));
          g.voxels.emplace(i, v);
        } else if (rng.uniform() < invisible) {
          g.invisible.set(i);
        }
      }
  return g;
}

inline GridSpec small_spec(int nx, int ny, int nz, double s = 1.0) {
  GridSpec g;
  g.origin = Vec3::Zero();
  g.voxel_size = Vec3::Constant(s);
  g.dims = {nx, ny, nz};
  return g;
}

// Deformable attention as straight scalar loops over the raw parameter arrays.
inline double texel(const ImageFeatureMap& m, int x, int y, int c) {
  x = x < 0 ? 0 : (x > m.width() - 1 ? m.width() - 1 : x);
  y = y < 0 ? 0 : (y > m.height() - 1 ? m.height() - 1 : y);
  return m.texel(x, y)[c];
}

inline double naive_bilinear(const ImageFeatureMap& m, double u, double v, int c) {
  if (u < 0) u = 0;
  if (v < 0) v = 0;
  if (u > m.width() - 1) u = m.width() - 1;
  if (v > m.height() - 1) v = m.height() - 1;
  int x0 = static_cast<int>(u), y0 = static_cast<int>(v);
  if (x0 > m.width() - 2) x0 = m.width() - 2;
  if (y0 > m.height() - 2) y0 = m.height() - 2;
  const double a = u - x0, b = v - y0;
  return (1 - a) * (1 - b) * texel(m, x0, y0, c) + a * (1 - b) * texel(m, x0 + 1, y0, c) +
         (1 - a) * b * texel(m, x0, y0 + 1, c) + a * b * texel(m, x0 + 1, y0 + 1, c);
}

inline std::vector<double> naive_dense(const Dense& d, const std::vector<double>& x, bool relu) {
  std::vector<double> y(d.weight.rows());
  for (int r = 0; r < d.weight.rows(); ++r) {
    double s = d.bias[r];
    for (int c = 0; c < d.weight.cols(); ++c) s += d.weight(r, c) * x[c];
    y[r] = relu && s < 0 ? 0.0 : s;
  }
  return y;
}

inline std::vector<double> naive_deform_attn(const DeformAttnParams& p, const ImageFeatureMap& m, const VecX& q, double u,
                                      double v) {
  const int C = p.channels, F = p.feature_dim, M = p.heads, K = p.samples, r = p.neighborhood_order;
  const int cu = static_cast<int>(std::floor(u + 0.5)), cv = static_cast<int>(std::floor(v + 0.5));
  std::vector<double> mean(C, 0.0);
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      for (int c = 0; c < C; ++c) mean[c] += texel(m, cu + dx, cv + dy, c) / ((2 * r + 1) * (2 * r + 1));
  std::vector<double> in = naive_dense(p.neighborhood_proj, mean, false);
  for (int i = 0; i < F; ++i) in.push_back(q[i]);
  for (std::size_t l = 0; l < p.offset_mlp.layers.size(); ++l)
    in = naive_dense(p.offset_mlp.layers[l], in, l + 1 < p.offset_mlp.layers.size());
  std::vector<double> qv(q.data(), q.data() + F);
  const std::vector<double> logits = naive_dense(p.attention, qv, false);
  std::vector<double> out(F, 0.0);
  for (int h = 0; h < M; ++h) {
    double mx = -1e300, z = 0;
    for (int k = 0; k < K; ++k) mx = std::max(mx, logits[h * K + k]);
    for (int k = 0; k < K; ++k) z += std::exp(logits[h * K + k] - mx);
    std::vector<double> pooled(C, 0.0);
    for (int k = 0; k < K; ++k) {
      const int i = h * K + k;
      const double a = std::exp(logits[i] - mx) / z;
      const double ox = std::max(-p.max_offset, std::min(p.max_offset, in[2 * i]));
      const double oy = std::max(-p.max_offset, std::min(p.max_offset, in[2 * i + 1]));
      for (int c = 0; c < C; ++c) pooled[c] += a * naive_bilinear(m, u + ox, v + oy, c);
    }
    std::vector<double> val(p.value_dim, 0.0);
    for (int j = 0; j < p.value_dim; ++j)
      for (int c = 0; c < C; ++c) val[j] += p.value_proj[h](j, c) * pooled[c];
    for (int f = 0; f < F; ++f)
      for (int j = 0; j < p.value_dim; ++j) out[f] += p.output_proj[h](f, j) * val[j];
  }
  return out;
}

// Direct evaluation of the predicate on explicit axis steps.
inline std::vector<Direction> predicate_oracle(const SparseVoxelGrid& g, const Index3& t) {
  const int steps[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
  std::vector<Direction> out;
  for (int a = 0; a < 4; ++a) {
    const Index3 n1{t.x + steps[a][0], t.y + steps[a][1], t.z};
    const Index3 n2{t.x + 2 * steps[a][0], t.y + 2 * steps[a][1], t.z};
    const bool in1 = n1.x >= 0 && n1.y >= 0 && n1.x < g.spec.dims[0] && n1.y < g.spec.dims[1];
    if (!in1 || g.invisible.contains(n1)) continue;
    if (g.voxels.count(n1) || g.voxels.count(n2)) continue;
    out.push_back(kAllDirections[a]);
  }
  return out;
}

}  // namespace fsmdet::testing
