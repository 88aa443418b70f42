#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "fsmdet/simlidar.hpp"
#include "fsmdet/voxel.hpp"

namespace fsmdet {

// Self Diffusion Layer: pushes foreground BEV features away from the sensor
// along each cell's viewing ray (scope σ0, scaled per class) and thickens
// the rasterized line perpendicular to the ray (scope σ1).

struct SdConfig {
  int sigma0 = 6;
  int sigma1 = 4;
  std::map<int, double> class_scale{{kVehicle, 1.0}, {kPedestrian, 0.33}};

  void validate() const {
    if (sigma0 < 1) throw InvalidArgument("sigma0 must be >= 1");
    if (sigma1 < 0) throw InvalidArgument("sigma1 must be >= 0");
    for (const auto& [cls, s] : class_scale)
      if (!(s > 0.0 && s <= 1.0)) throw InvalidArgument("class scale must lie in (0, 1]");
  }

  /// Along-ray scope for a class: round(σ0 · scale), at least 1.
  int scope(int class_id) const {
    auto it = class_scale.find(class_id);
    const double s = it == class_scale.end() ? 1.0 : it->second;
    return std::max(1, static_cast<int>(std::lround(sigma0 * s)));
  }
};

using ClassMap = std::map<Index2, int>;

/// Unit BEV direction from the sensor through the cell center.
inline std::array<double, 2> ray_dir_bev(const Vec3& sensor_origin, const Index2& cell, const GridSpec& spec) {
  const auto c = spec.center(cell);
  const double dx = c[0] - sensor_origin.x(), dy = c[1] - sensor_origin.y();
  const double n = std::hypot(dx, dy);
  if (n <= 1e-9) throw DegenerateCell("cell center coincides with the sensor");
  return {dx / n, dy / n};
}

/// The first `count` cells after `start` visited by the 2D ray from the
/// start cell's center along `dir` (grid traversal; x steps first on ties).
inline std::vector<Index2> rasterize_ray(const GridSpec& spec, const Index2& start, const std::array<double, 2>& dir,
                                         int count) {
  std::vector<Index2> out;
  Index2 cell = start;
  const double sx = spec.voxel_size.x(), sy = spec.voxel_size.y();
  const int step_x = dir[0] > 0 ? 1 : (dir[0] < 0 ? -1 : 0);
  const int step_y = dir[1] > 0 ? 1 : (dir[1] < 0 ? -1 : 0);
  constexpr double inf = std::numeric_limits<double>::infinity();
  // Starting at the cell center, the first boundary is half a cell away.
  double t_max_x = step_x ? 0.5 * sx / std::abs(dir[0]) : inf;
  double t_max_y = step_y ? 0.5 * sy / std::abs(dir[1]) : inf;
  const double dt_x = step_x ? sx / std::abs(dir[0]) : inf;
  const double dt_y = step_y ? sy / std::abs(dir[1]) : inf;
  while (static_cast<int>(out.size()) < count) {
    if (t_max_x <= t_max_y) {
      cell.x += step_x;
      t_max_x += dt_x;
    } else {
      cell.y += step_y;
      t_max_y += dt_y;
    }
    if (!spec.in_range(cell)) break;
    out.push_back(cell);
  }
  return out;
}

/// Index-space perpendicular to dir, scaled so its larger component is 1
/// (one ℓ∞ step).
inline std::array<double, 2> perpendicular_step(const GridSpec& spec, const std::array<double, 2>& dir) {
  const double px = -dir[1] / spec.voxel_size.x(), py = dir[0] / spec.voxel_size.y();
  const double m = std::max(std::abs(px), std::abs(py));
  return {px / m, py / m};
}

/// Classes of the foreground cells of a BEV map.
inline ClassMap bev_classes(const BevMap& bev) {
  ClassMap classes;
  for (const auto& [i, c] : bev.cells)
    if (c.class_id) classes[i] = *c.class_id;
  return classes;
}

/// Diffuses every cell in `classes` (foreground) along its viewing ray and
/// sideways. New cells copy the source cell's feature and class; existing
/// cells are never modified. Sources run in lexicographic order and the
/// first writer wins.
inline BevMap self_diffuse(const BevMap& bev, const ClassMap& classes, const Vec3& sensor_origin,
                           const SdConfig& config) {
  config.validate();
  BevMap out = bev;
  for (const auto& [src, cls] : classes) {
    const auto src_it = bev.cells.find(src);
    if (src_it == bev.cells.end()) throw InvalidArgument("classified cell is not occupied");
    const BevCell& source = src_it->second;
    const auto dir = ray_dir_bev(sensor_origin, src, bev.spec);
    const auto perp = perpendicular_step(bev.spec, dir);
    auto emit = [&](const Index2& cell) {
      if (!bev.spec.in_range(cell) || out.cells.count(cell)) return;
      out.cells.emplace(cell, BevCell{source.feature, cls, true});
    };
    for (const Index2& c : rasterize_ray(bev.spec, src, dir, config.scope(cls))) {
      emit(c);
      for (int j = 1; j <= config.sigma1; ++j)
        for (int sgn : {-1, 1})
          emit({c.x + static_cast<int>(std::lround(sgn * j * perp[0])),
                c.y + static_cast<int>(std::lround(sgn * j * perp[1]))});
    }
  }
  return out;
}

/// Ablation fallback for a disabled self-diffusion stage: 8-neighborhood
/// dilation of the foreground cells.
inline BevMap dilate_foreground(const BevMap& bev, const ClassMap& classes) {
  BevMap out = bev;
  for (const auto& [src, cls] : classes) {
    const BevCell& source = bev.cells.at(src);
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const Index2 c{src.x + dx, src.y + dy};
        if (!bev.spec.in_range(c) || out.cells.count(c)) continue;
        out.cells.emplace(c, BevCell{source.feature, cls, true});
      }
  }
  return out;
}

}  // namespace fsmdet
