#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <vector>

#include "fsmdet/geometry.hpp"
#include "fsmdet/mesh.hpp"
#include "fsmdet/voxel.hpp"

namespace fsmdet {

// Visible-part ground truth: per-pixel ray casting against the
// δ-expanded hull. Integer pixel (u, v) is cast through its center
// (u + 0.5, v + 0.5).

struct PixelRect {
  int u_min = 0, v_min = 0, u_max = -1, v_max = -1;  // inclusive
  bool contains(const Index2& p) const {
    return p.x >= u_min && p.x <= u_max && p.y >= v_min && p.y <= v_max;
  }
};

/// 2D instance I_i: pixels (x = u, y = v) in row-major order, tight bbox.
struct InstanceRegion2D {
  std::vector<Index2> pixels;
  PixelRect bbox;
};

struct VpSurface {
  std::vector<Vec3> points;
  std::vector<double> depths;
  std::vector<Index2> source_pixels;
  std::size_t missed = 0;
};

inline Pixel2D pixel_center(const Index2& p) { return {p.x + 0.5, p.y + 0.5}; }

/// Silhouette of the (unexpanded) mesh as an instance mask. A pixel belongs
/// to the instance when the ray through its center or through any of its
/// four corners hits the mesh, so boundary pixels that the mesh only
/// partially covers are included the way a 2D instance mask includes them.
inline InstanceRegion2D instance_region(const CameraModel& cam, const TriangleMesh& mesh) {
  int u0 = 0, v0 = 0, u1 = cam.width() - 1, v1 = cam.height() - 1;
  bool all_front = true;
  double umin = 1e300, vmin = 1e300, umax = -1e300, vmax = -1e300;
  for (const auto& vtx : mesh.vertices()) {
    const auto px = project(cam, vtx);
    if (!px) {
      all_front = false;
      break;
    }
    umin = std::min(umin, px->u), umax = std::max(umax, px->u);
    vmin = std::min(vmin, px->v), vmax = std::max(vmax, px->v);
  }
  if (all_front) {
    if (umax < -1.0 || vmax < -1.0 || umin > cam.width() + 1.0 || vmin > cam.height() + 1.0)
      throw NotVisible("mesh projects outside the image");
    u0 = std::max(u0, static_cast<int>(std::floor(umin)) - 1);
    v0 = std::max(v0, static_cast<int>(std::floor(vmin)) - 1);
    u1 = std::min(u1, static_cast<int>(std::floor(umax)) + 1);
    v1 = std::min(v1, static_cast<int>(std::floor(vmax)) + 1);
  }
  InstanceRegion2D region;
  if (u0 > u1 || v0 > v1) throw NotVisible("mesh projects outside the image");

  const int cw = u1 - u0 + 2;
  std::vector<std::uint8_t> corner_hit(static_cast<std::size_t>(cw) * (v1 - v0 + 2), 0);
  for (int j = v0; j <= v1 + 1; ++j)
    for (int i = u0; i <= u1 + 1; ++i)
      corner_hit[(j - v0) * cw + (i - u0)] =
          intersect(mesh, pixel_ray(cam, Pixel2D{double(i), double(j)})) ? 1 : 0;

  region.bbox = {u1 + 1, v1 + 1, u0 - 1, v0 - 1};
  for (int j = v0; j <= v1; ++j)
    for (int i = u0; i <= u1; ++i) {
      const auto c = [&](int di, int dj) { return corner_hit[(j - v0 + dj) * cw + (i - u0 + di)] != 0; };
      bool in = c(0, 0) || c(1, 0) || c(0, 1) || c(1, 1);
      if (!in) in = intersect(mesh, pixel_ray(cam, pixel_center({i, j}))).has_value();
      if (!in) continue;
      region.pixels.push_back({i, j});
      region.bbox.u_min = std::min(region.bbox.u_min, i);
      region.bbox.v_min = std::min(region.bbox.v_min, j);
      region.bbox.u_max = std::max(region.bbox.u_max, i);
      region.bbox.v_max = std::max(region.bbox.v_max, j);
    }
  if (region.pixels.empty()) throw NotVisible("no pixel sees the mesh");
  return region;
}

struct DepthHit {
  double depth = 0.0;  // camera-plane depth d_c
  double travel = 0.0;
  Vec3 point = Vec3::Zero();
};

/// d_c for a pixel against an already expanded hull.
inline std::optional<DepthHit> cast_depth_expanded(const CameraModel& cam, const TriangleMesh& expanded,
                                                   const Pixel2D& px) {
  const Ray ray = pixel_ray(cam, px);
  const auto hit = intersect(expanded, ray);
  if (!hit) return std::nullopt;
  return DepthHit{hit->travel * ray_slope_scale(cam, px), hit->travel, hit->point};
}

/// Camera-plane depth of the first hit on the δ-expanded hull:
/// travel along the pixel ray × ray_slope_scale. nullopt on a miss.
inline std::optional<double> cast_depth(const CameraModel& cam, const TriangleMesh& mesh, double delta,
                                        const Pixel2D& px) {
  const auto hit = cast_depth_expanded(cam, expand(mesh, delta), px);
  if (!hit) return std::nullopt;
  return hit->depth;
}

/// Dense visible surface L̂_i: one point per region pixel that hits the
/// expanded hull, in region (row-major) order.
inline VpSurface generate_vp(const CameraModel& cam, const TriangleMesh& mesh,
                             const InstanceRegion2D& region, double delta) {
  const TriangleMesh expanded = expand(mesh, delta);
  VpSurface vp;
  vp.points.reserve(region.pixels.size());
  vp.depths.reserve(region.pixels.size());
  vp.source_pixels.reserve(region.pixels.size());
  for (const auto& p : region.pixels) {
    const auto hit = cast_depth_expanded(cam, expanded, pixel_center(p));
    if (!hit) {
      ++vp.missed;
      continue;
    }
    vp.points.push_back(hit->point);
    vp.depths.push_back(hit->depth);
    vp.source_pixels.push_back(p);
  }
  return vp;
}

/// BEV cells occupied by VP points inside the grid: the shape-recovery target V_gt.
inline std::set<Index2> vp_occupancy_gt(const VpSurface& vp, const GridSpec& spec) {
  std::set<Index2> cells;
  for (const auto& p : vp.points)
    if (const auto idx = spec.index_of(p)) cells.insert({idx->x, idx->y});
  return cells;
}

}  // namespace fsmdet
