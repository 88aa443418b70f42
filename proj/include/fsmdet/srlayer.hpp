#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fsmdet/fusion.hpp"
#include "fsmdet/voxel.hpp"

namespace fsmdet {

// Shape Recover Layer: BEV-planar diffusion of foreground voxels along the
// four axis directions, into cells that are visible and currently empty.

enum class Direction { kPosX, kNegX, kPosY, kNegY };

inline constexpr std::array<Direction, 4> kAllDirections{Direction::kPosX, Direction::kNegX, Direction::kPosY,
                                                         Direction::kNegY};

inline Index3 step_of(Direction d) {
  switch (d) {
    case Direction::kPosX: return {1, 0, 0};
    case Direction::kNegX: return {-1, 0, 0};
    case Direction::kPosY: return {0, 1, 0};
    case Direction::kNegY: return {0, -1, 0};
  }
  return {};
}

inline const char* direction_name(Direction d) {
  switch (d) {
    case Direction::kPosX: return "+x";
    case Direction::kNegX: return "-x";
    case Direction::kPosY: return "+y";
    case Direction::kNegY: return "-y";
  }
  return "?";
}

inline Index3 offset(const Index3& t, Direction d, int k) {
  const Index3 s = step_of(d);
  return {t.x + k * s.x, t.y + k * s.y, t.z + k * s.z};
}

/// Directions whose adjacent cell is visible (in-grid, not in V_∅) and whose
/// cells at offsets 1 and 2 are both unoccupied. Order: +x, −x, +y, −y.
inline std::vector<Direction> candidate_directions(const SparseVoxelGrid& grid, const Index3& t) {
  std::vector<Direction> out;
  for (Direction d : kAllDirections) {
    const Index3 n1 = offset(t, d, 1), n2 = offset(t, d, 2);
    if (!grid.spec.in_range(n1) || grid.is_invisible(n1)) continue;
    if (grid.occupied(n1) || grid.occupied(n2)) continue;
    out.push_back(d);
  }
  return out;
}

/// Count of directions satisfying the equation as literally printed
/// (adjacent cell invisible and nearest occupied voxel closer than 2).
/// Reported alongside the implemented predicate for comparison.
inline int literal_direction_count(const SparseVoxelGrid& grid, const Index3& t) {
  int n = 0;
  for (Direction d : kAllDirections) {
    const Index3 n1 = offset(t, d, 1);
    if (grid.spec.in_range(n1) && grid.is_invisible(n1) && grid.occupied(n1)) ++n;
  }
  return n;
}

enum class SrMode { kOracle, kLearnedStub };

struct SrConfig {
  int delta_max = 8;
  int neighborhood_order = 2;  // d in the feature fill
  Mlp fill_mlp;                // (2d+1)²·C → F
  Mlp dist_mlp;                // F + C → 1
  SrMode mode = SrMode::kOracle;

  void validate(int feature_dim, int channels) const {
    if (delta_max < 1) throw InvalidArgument("delta_max must be >= 1");
    if (neighborhood_order < 0) throw InvalidArgument("neighborhood_order must be >= 0");
    const int side = 2 * neighborhood_order + 1;
    fill_mlp.validate("/fill_mlp");
    if (fill_mlp.in_dim() != side * side * channels || fill_mlp.out_dim() != feature_dim)
      throw DimensionMismatch("/fill_mlp: expected " + std::to_string(side * side * channels) + " → " +
                              std::to_string(feature_dim));
    if (mode == SrMode::kLearnedStub) {
      dist_mlp.validate("/dist_mlp");
      if (dist_mlp.in_dim() != feature_dim + channels || dist_mlp.out_dim() != 1)
        throw DimensionMismatch("/dist_mlp: expected F + C → 1");
    }
  }

  static SrConfig random(int feature_dim, int channels, std::uint64_t seed, int order = 2, int hidden = 32) {
    Rng rng(seed);
    SrConfig c;
    c.neighborhood_order = order;
    const int side = 2 * order + 1;
    c.fill_mlp = random_mlp({side * side * channels, hidden, feature_dim}, rng);
    c.dist_mlp = random_mlp({feature_dim + channels, hidden, 1}, rng);
    return c;
  }
};

/// Learned-stub distance: round(sigmoid(dist_mlp([voxel; dir image])) · delta_max).
inline int regress_distance(const SrConfig& config, const VecX& voxel_feature, const VecX& dir_image_feature) {
  const int expected = config.dist_mlp.in_dim();
  if (voxel_feature.size() + dir_image_feature.size() != expected)
    throw DimensionMismatch("distance regressor expects " + std::to_string(expected) + " inputs");
  VecX in(expected);
  in << voxel_feature, dir_image_feature;
  const double s = sigmoid(config.dist_mlp(in)[0]);
  return static_cast<int>(std::lround(s * config.delta_max));
}

/// Oracle distance: length of the run of V_gt cells starting at offset 1
/// along the direction, capped at delta_max.
inline int regress_distance_oracle(const std::set<Index2>& vp_gt, const Index3& t, Direction d, int delta_max) {
  int k = 0;
  while (k < delta_max) {
    const Index3 c = offset(t, d, k + 1);
    if (!vp_gt.count({c.x, c.y})) break;
    ++k;
  }
  return k;
}

/// V′_f for a new voxel: fill_mlp over the row-major concatenation of image
/// features sampled on the order-d pixel neighborhood of its projection.
/// nullopt when the center projects behind the camera or off-image.
inline std::optional<VecX> fill_feature(const SrConfig& config, const ImageFeatureMap& map, const CameraModel& cam,
                                        const Vec3& new_voxel_center) {
  const auto px = project(cam, new_voxel_center);
  if (!px || !cam.in_bounds(*px)) return std::nullopt;
  const Pixel2D t = to_texel(*px);
  const int d = config.neighborhood_order;
  const int c = map.channels();
  VecX in((2 * d + 1) * (2 * d + 1) * c);
  int k = 0;
  for (int dv = -d; dv <= d; ++dv)
    for (int du = -d; du <= d; ++du, ++k) in.segment(k * c, c) = bilinear_sample(map, {t.u + du, t.v + dv});
  return config.fill_mlp(in);
}

struct ExpansionRecord {
  Index3 source;
  Direction direction;
  int distance = 0;
  std::vector<Index3> new_cells;
};

struct ShapeRecoverStats {
  std::size_t candidates = 0;
  std::size_t literal_candidates = 0;
  std::size_t new_voxels = 0;
};

/// Expands every foreground voxel along each candidate direction by its
/// regressed distance. Works on a frozen snapshot of the input occupancy;
/// the first writer in (source, direction) order wins a contested cell.
inline SparseVoxelGrid shape_recover(const SparseVoxelGrid& grid, const ForegroundMask& mask,
                                     const ImageFeatureMap& map, const CameraModel& cam, const SrConfig& config,
                                     const std::set<Index2>* vp_gt = nullptr,
                                     std::vector<ExpansionRecord>* trace = nullptr,
                                     ShapeRecoverStats* stats = nullptr) {
  if (config.mode == SrMode::kOracle && !vp_gt) throw InvalidArgument("oracle shape recovery needs V_gt");
  SparseVoxelGrid out = grid;
  ShapeRecoverStats local;
  for (const Index3& t : mask.indices) {
    const Voxel* src = grid.find(t);
    if (!src) throw InvalidArgument("foreground index is not an occupied voxel");
    local.literal_candidates += literal_direction_count(grid, t);
    const auto dirs = candidate_directions(grid, t);
    local.candidates += dirs.size();
    for (Direction d : dirs) {
      int dist = 0;
      if (config.mode == SrMode::kOracle) {
        dist = regress_distance_oracle(*vp_gt, t, d, config.delta_max);
      } else {
        const Vec3 probe = grid.spec.center(offset(t, d, 1));
        const auto px = project(cam, probe);
        const VecX dir_feat = px && cam.in_bounds(*px) ? bilinear_sample(map, to_texel(*px))
                                                       : VecX::Zero(map.channels());
        dist = regress_distance(config, src->feature, dir_feat);
      }
      ExpansionRecord rec{t, d, dist, {}};
      for (int k = 1; k <= dist; ++k) {
        const Index3 cell = offset(t, d, k);
        if (!grid.spec.in_range(cell)) break;
        if (out.occupied(cell)) continue;
        Voxel v;
        v.index = cell;
        v.centroid = grid.spec.center(cell);
        v.synthetic = true;
        v.class_id = src->class_id;
        if (!v.class_id && mask.scores.count(t)) v.class_id = mask.class_of(t);
        if (auto f = fill_feature(config, map, cam, v.centroid)) {
          v.feature = std::move(*f);
        } else {
          v.feature = VecX::Zero(grid.feature_dim);
          v.off_image = true;
        }
        out.voxels.emplace(cell, std::move(v));
        rec.new_cells.push_back(cell);
        ++local.new_voxels;
      }
      if (trace) trace->push_back(std::move(rec));
    }
  }
  if (stats) *stats = local;
  return out;
}

}  // namespace fsmdet
