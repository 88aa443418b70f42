#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include <Eigen/Dense>

#include "fsmdet/geometry.hpp"

namespace fsmdet {

using Feature = Eigen::VectorXd;

inline constexpr int kDefaultFeatureDim = 32;

/// Axis-aligned voxel lattice. Cells are half-open: index = floor((p − origin) / size).
struct GridSpec {
  Vec3 origin = Vec3::Zero();
  Vec3 voxel_size = Vec3::Ones();
  std::array<int, 3> dims{1, 1, 1};

  void validate() const {
    if (!origin.allFinite()) throw InvalidArgument("grid origin not finite");
    for (int a = 0; a < 3; ++a) {
      if (!(voxel_size[a] > 0.0) || !std::isfinite(voxel_size[a]))
        throw InvalidArgument("voxel size must be positive");
      if (dims[a] < 1) throw InvalidArgument("grid dims must be >= 1");
    }
  }

  std::size_t cell_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }

  bool in_range(const Index3& i) const {
    return i.x >= 0 && i.y >= 0 && i.z >= 0 && i.x < dims[0] && i.y < dims[1] && i.z < dims[2];
  }
  bool in_range(const Index2& i) const {
    return i.x >= 0 && i.y >= 0 && i.x < dims[0] && i.y < dims[1];
  }

  /// Unclamped lattice coordinate of p.
  Index3 raw_index(const Vec3& p) const {
    return {static_cast<int>(std::floor((p.x() - origin.x()) / voxel_size.x())),
            static_cast<int>(std::floor((p.y() - origin.y()) / voxel_size.y())),
            static_cast<int>(std::floor((p.z() - origin.z()) / voxel_size.z()))};
  }

  std::optional<Index3> index_of(const Vec3& p) const {
    for (int a = 0; a < 3; ++a) {
      const double f = std::floor((p[a] - origin[a]) / voxel_size[a]);
      if (!(f >= 0.0) || f >= dims[a]) return std::nullopt;
    }
    return raw_index(p);
  }

  Vec3 lower_corner(const Index3& i) const {
    return origin + Vec3(i.x * voxel_size.x(), i.y * voxel_size.y(), i.z * voxel_size.z());
  }
  Vec3 center(const Index3& i) const {
    return origin + Vec3((i.x + 0.5) * voxel_size.x(), (i.y + 0.5) * voxel_size.y(),
                         (i.z + 0.5) * voxel_size.z());
  }
  /// BEV cell center in the xy plane (z = 0).
  std::array<double, 2> center(const Index2& i) const {
    return {origin.x() + (i.x + 0.5) * voxel_size.x(), origin.y() + (i.y + 0.5) * voxel_size.y()};
  }

  Vec3 upper_bound() const {
    return origin + Vec3(dims[0] * voxel_size.x(), dims[1] * voxel_size.y(), dims[2] * voxel_size.z());
  }

  std::size_t linear(const Index3& i) const {
    return (static_cast<std::size_t>(i.z) * dims[1] + i.y) * dims[0] + i.x;
  }

  /// Coarser lattice merging factor³ children.
  GridSpec coarsened(int factor) const {
    if (factor != 2 && factor != 4 && factor != 8)
      throw InvalidArgument("downsample factor must be 2, 4 or 8");
    for (int a = 0; a < 3; ++a)
      if (dims[a] % factor != 0)
        throw IndivisibleDims("dimension " + std::to_string(dims[a]) +
                              " not divisible by " + std::to_string(factor));
    GridSpec s = *this;
    s.voxel_size *= factor;
    for (auto& d : s.dims) d /= factor;
    return s;
  }

  bool operator==(const GridSpec& o) const {
    return origin == o.origin && voxel_size == o.voxel_size && dims == o.dims;
  }
};

/// Dense per-cell flag over a GridSpec. Used for the invisible set V_∅.
class VoxelMask {
 public:
  VoxelMask() = default;
  explicit VoxelMask(const GridSpec& spec) : spec_(spec), bits_(spec.cell_count(), 0) {}

  bool defined() const { return !bits_.empty(); }
  const GridSpec& spec() const { return spec_; }

  bool contains(const Index3& i) const {
    return defined() && spec_.in_range(i) && bits_[spec_.linear(i)] != 0;
  }
  void set(const Index3& i, bool value = true) { bits_[spec_.linear(i)] = value ? 1 : 0; }
  std::uint8_t* raw() { return bits_.data(); }

  std::size_t size() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    if (!defined()) return;
    for (int z = 0; z < spec_.dims[2]; ++z)
      for (int y = 0; y < spec_.dims[1]; ++y)
        for (int x = 0; x < spec_.dims[0]; ++x)
          if (bits_[spec_.linear({x, y, z})]) fn(Index3{x, y, z});
  }

  bool operator==(const VoxelMask& o) const { return spec_ == o.spec_ && bits_ == o.bits_; }

 private:
  GridSpec spec_;
  std::vector<std::uint8_t> bits_;
};

struct Voxel {
  Index3 index;
  Feature feature;
  Vec3 centroid = Vec3::Zero();
  int point_count = 0;
  std::optional<int> class_id;
  bool synthetic = false;
  /// Set when an image-dependent stage could not see this voxel.
  bool off_image = false;
};

/// Occupied voxels {V_i, V_f_i, c_i} plus the invisible set V_∅.
struct SparseVoxelGrid {
  GridSpec spec;
  int feature_dim = kDefaultFeatureDim;
  std::map<Index3, Voxel> voxels;
  VoxelMask invisible;
  std::size_t dropped_points = 0;

  bool occupied(const Index3& i) const { return voxels.count(i) != 0; }
  const Voxel* find(const Index3& i) const {
    auto it = voxels.find(i);
    return it == voxels.end() ? nullptr : &it->second;
  }
  bool is_invisible(const Index3& i) const { return invisible.contains(i); }
  std::set<Index3> occupancy() const {
    std::set<Index3> s;
    for (const auto& [i, v] : voxels) s.insert(i);
    return s;
  }
};

struct BevCell {
  Feature feature;
  std::optional<int> class_id;
  bool synthetic = false;
};

/// Bird's-eye view: (x, y) → feature. The spec's nz is ignored.
struct BevMap {
  GridSpec spec;
  int feature_dim = kDefaultFeatureDim;
  std::map<Index2, BevCell> cells;

  std::set<Index2> occupancy() const {
    std::set<Index2> s;
    for (const auto& [i, c] : cells) s.insert(i);
    return s;
  }
  std::set<Index2> foreground() const {
    std::set<Index2> s;
    for (const auto& [i, c] : cells)
      if (c.class_id) s.insert(i);
    return s;
  }
};

namespace detail {

inline bool lex_less(const Vec3& a, const Vec3& b) {
  return std::lexicographical_compare(a.data(), a.data() + 3, b.data(), b.data() + 3);
}

}  // namespace detail

/// Bins points into voxels. Centroid and feature are arithmetic means of
/// the members, accumulated in a canonical member order so the result does
/// not depend on input order. Points outside the grid are dropped and counted.
inline SparseVoxelGrid voxelize(const std::vector<Vec3>& points,
                                const std::vector<Feature>* features, const GridSpec& spec,
                                int feature_dim = kDefaultFeatureDim) {
  spec.validate();
  if (features) {
    if (features->size() != points.size())
      throw DimensionMismatch("feature count differs from point count");
    if (!features->empty()) feature_dim = static_cast<int>(features->front().size());
    for (const auto& f : *features)
      if (f.size() != feature_dim) throw DimensionMismatch("inconsistent feature dimension");
  }
  if (feature_dim < 1) throw InvalidArgument("feature dimension must be >= 1");

  SparseVoxelGrid grid;
  grid.spec = spec;
  grid.feature_dim = feature_dim;

  std::map<Index3, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!points[i].allFinite()) {
      ++grid.dropped_points;
      continue;
    }
    const auto idx = spec.index_of(points[i]);
    if (!idx) {
      ++grid.dropped_points;
      continue;
    }
    members[*idx].push_back(i);
  }
  if (members.empty()) throw EmptyInput("no points fall inside the grid");

  for (auto& [idx, list] : members) {
    std::sort(list.begin(), list.end(), [&](std::size_t a, std::size_t b) {
      if (points[a] != points[b]) return detail::lex_less(points[a], points[b]);
      if (!features) return false;
      const Feature& fa = (*features)[a];
      const Feature& fb = (*features)[b];
      return std::lexicographical_compare(fa.data(), fa.data() + fa.size(), fb.data(),
                                          fb.data() + fb.size());
    });
    Voxel v;
    v.index = idx;
    v.point_count = static_cast<int>(list.size());
    v.feature = Feature::Zero(feature_dim);
    Vec3 sum = Vec3::Zero();
    for (std::size_t i : list) {
      sum += points[i];
      if (features) v.feature += (*features)[i];
    }
    v.centroid = sum / static_cast<double>(list.size());
    if (features) v.feature /= static_cast<double>(list.size());
    grid.voxels.emplace(idx, std::move(v));
  }
  return grid;
}

/// 3D digital differential traversal of segment a→b clipped to the grid.
/// Calls visit(cell) in order; stops early when visit returns false.
template <typename Visit>
void traverse_segment(const GridSpec& spec, const Vec3& a, const Vec3& b, Visit&& visit) {
  const Vec3 d = b - a;
  const Vec3 lo = spec.origin;
  const Vec3 hi = spec.upper_bound();
  double t0 = 0.0, t1 = 1.0;
  for (int k = 0; k < 3; ++k) {
    if (std::abs(d[k]) < 1e-300) {
      if (a[k] < lo[k] || a[k] >= hi[k]) return;
      continue;
    }
    double ta = (lo[k] - a[k]) / d[k];
    double tb = (hi[k] - a[k]) / d[k];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 > t1) return;

  const Vec3 start = a + t0 * d;
  Index3 cell = spec.raw_index(start);
  int* c[3] = {&cell.x, &cell.y, &cell.z};
  int step[3];
  double t_max[3], t_delta[3];
  for (int k = 0; k < 3; ++k) {
    *c[k] = std::clamp(*c[k], 0, spec.dims[k] - 1);
    if (d[k] > 0) {
      step[k] = 1;
      const double boundary = lo[k] + (*c[k] + 1) * spec.voxel_size[k];
      t_max[k] = (boundary - a[k]) / d[k];
      t_delta[k] = spec.voxel_size[k] / d[k];
    } else if (d[k] < 0) {
      step[k] = -1;
      const double boundary = lo[k] + *c[k] * spec.voxel_size[k];
      t_max[k] = (boundary - a[k]) / d[k];
      t_delta[k] = -spec.voxel_size[k] / d[k];
    } else {
      step[k] = 0;
      t_max[k] = std::numeric_limits<double>::infinity();
      t_delta[k] = std::numeric_limits<double>::infinity();
    }
  }
  while (true) {
    if (!visit(cell)) return;
    int axis = 0;
    if (t_max[1] < t_max[axis]) axis = 1;
    if (t_max[2] < t_max[axis]) axis = 2;
    if (t_max[axis] > t1) return;
    *c[axis] += step[axis];
    if (*c[axis] < 0 || *c[axis] >= spec.dims[axis]) return;
    t_max[axis] += t_delta[axis];
  }
}

/// Labels V_∅. A cell is invisible when its center projects behind the camera
/// or off-image, or when the camera→center segment passes through another
/// occupied cell first. The cell containing the camera is not an occluder.
inline SparseVoxelGrid carve_visibility(const SparseVoxelGrid& grid, const CameraModel& cam,
                                        unsigned threads = 1) {
  SparseVoxelGrid out = grid;
  const GridSpec& spec = grid.spec;
  out.invisible = VoxelMask(spec);

  std::vector<std::uint8_t> occ(spec.cell_count(), 0);
  for (const auto& [i, v] : grid.voxels) occ[spec.linear(i)] = 1;
  const Vec3 eye = cam.center();
  const auto eye_cell = spec.index_of(eye);
  std::uint8_t* invisible = out.invisible.raw();

  parallel_for(static_cast<std::size_t>(spec.dims[2]) * spec.dims[1], threads, [&](std::size_t row) {
    const int z = static_cast<int>(row / spec.dims[1]);
    const int y = static_cast<int>(row % spec.dims[1]);
    for (int x = 0; x < spec.dims[0]; ++x) {
      const Index3 target{x, y, z};
      const Vec3 c = spec.center(target);
      const auto px = project(cam, c);
      bool hidden = !px || !cam.in_bounds(*px);
      if (!hidden) {
        traverse_segment(spec, eye, c, [&](const Index3& cell) {
          if (cell == target) return false;
          if (eye_cell && cell == *eye_cell) return true;
          if (occ[spec.linear(cell)]) {
            hidden = true;
            return false;
          }
          return true;
        });
      }
      if (hidden) invisible[spec.linear(target)] = 1;
    }
  });
  return out;
}

/// Collapses z. Cell feature is the per-channel max over the column; the
/// class comes from the column's most point-supported foreground voxel.
inline BevMap flatten_bev(const SparseVoxelGrid& grid) {
  BevMap bev;
  bev.spec = grid.spec;
  bev.feature_dim = grid.feature_dim;
  std::map<Index2, int> class_weight;
  for (const auto& [i, v] : grid.voxels) {
    const Index2 key{i.x, i.y};
    auto [it, fresh] = bev.cells.try_emplace(key);
    BevCell& cell = it->second;
    if (fresh) {
      cell.feature = v.feature;
      cell.synthetic = v.synthetic;
    } else {
      cell.feature = cell.feature.cwiseMax(v.feature);
      cell.synthetic = cell.synthetic && v.synthetic;
    }
    if (v.class_id) {
      const int w = std::max(v.point_count, 1);
      auto cw = class_weight.find(key);
      if (cw == class_weight.end() || w > cw->second) {
        class_weight[key] = w;
        cell.class_id = v.class_id;
      }
    }
  }
  return bev;
}

/// Merges factor³ children into parents. Centroid is the point-weighted mean
/// of child centroids (cell center for purely synthetic parents), features
/// take the per-channel max, counts add. Visibility is not carried over.
inline SparseVoxelGrid downsample(const SparseVoxelGrid& grid, int factor) {
  SparseVoxelGrid out;
  out.spec = grid.spec.coarsened(factor);
  out.feature_dim = grid.feature_dim;
  out.dropped_points = grid.dropped_points;

  struct Acc {
    Vec3 weighted = Vec3::Zero();
    std::map<int, int> class_votes;
  };
  std::map<Index3, Acc> acc;
  for (const auto& [i, v] : grid.voxels) {
    const Index3 parent{i.x / factor, i.y / factor, i.z / factor};
    auto [it, fresh] = out.voxels.try_emplace(parent);
    Voxel& p = it->second;
    Acc& a = acc[parent];
    if (fresh) {
      p.index = parent;
      p.feature = v.feature;
      p.synthetic = v.synthetic;
      p.off_image = v.off_image;
    } else {
      p.feature = p.feature.cwiseMax(v.feature);
      p.synthetic = p.synthetic && v.synthetic;
      p.off_image = p.off_image && v.off_image;
    }
    p.point_count += v.point_count;
    a.weighted += v.point_count * v.centroid;
    if (v.class_id) a.class_votes[*v.class_id] += std::max(v.point_count, 1);
  }
  for (auto& [i, p] : out.voxels) {
    const Acc& a = acc[i];
    p.centroid = p.point_count > 0 ? Vec3(a.weighted / p.point_count) : out.spec.center(i);
    int best = -1;
    for (const auto& [cls, votes] : a.class_votes)
      if (votes > best) best = votes, p.class_id = cls;
  }
  return out;
}

}  // namespace fsmdet
