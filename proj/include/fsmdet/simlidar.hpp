#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "fsmdet/geometry.hpp"
#include "fsmdet/mesh.hpp"

namespace fsmdet {

/// Object classes. Background is always the last class.
enum ClassId : int { kVehicle = 0, kPedestrian = 1, kBackground = 2 };
inline constexpr int kNumClasses = 3;

struct Box3D {
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Ones();  // length (along heading), width, height
  double yaw = 0.0;
  int class_id = kVehicle;

  std::array<Vec3, 8> corners() const {
    std::array<Vec3, 8> out;
    const double c = std::cos(yaw), s = std::sin(yaw);
    int k = 0;
    for (int ix : {-1, 1})
      for (int iy : {-1, 1})
        for (int iz : {-1, 1}) {
          const double lx = ix * size.x() / 2, ly = iy * size.y() / 2, lz = iz * size.z() / 2;
          out[k++] = center + Vec3(c * lx - s * ly, s * lx + c * ly, lz);
        }
    return out;
  }

  /// Local-frame coordinates of a world point.
  Vec3 to_local(const Vec3& p) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const Vec3 d = p - center;
    return {c * d.x() + s * d.y(), -s * d.x() + c * d.y(), d.z()};
  }

  bool contains(const Vec3& p, double inflate = 1.0) const {
    const Vec3 l = to_local(p);
    return std::abs(l.x()) <= inflate * size.x() / 2 && std::abs(l.y()) <= inflate * size.y() / 2 &&
           std::abs(l.z()) <= inflate * size.z() / 2;
  }

  bool contains_bev(double x, double y) const {
    const Vec3 l = to_local(Vec3(x, y, center.z()));
    return std::abs(l.x()) <= size.x() / 2 && std::abs(l.y()) <= size.y() / 2;
  }

  double bev_radius() const { return 0.5 * std::hypot(size.x(), size.y()); }
};

struct SceneParams {
  bool in_frustum = true;
  /// Require disjoint azimuth intervals (seen from the sensor) between objects.
  bool unoccluded = false;
  double min_range = 7.0;
  double max_range = 24.0;
  double pedestrian_fraction = 0.3;
  /// Objects are kept inside x ∈ [0, max_x], |y| ≤ max_abs_y.
  double max_x = 30.0;
  double max_abs_y = 15.0;
  int max_retries = 500;
  /// Angular gap (radians) between objects when unoccluded.
  double angular_margin = 0.02;
};

/// Default sensor rig: 640x360 camera, 90° horizontal FOV, co-located with
/// the LiDAR 1.8 m above the ground.
inline Vec3 default_sensor_origin() { return Vec3(0.0, 0.0, 1.8); }
inline CameraModel default_camera(const Vec3& sensor = default_sensor_origin()) {
  return forward_camera(320.0, 320.0, 320.0, 180.0, 640, 360, sensor);
}

struct Scene {
  std::vector<Box3D> boxes;
  std::vector<TriangleMesh> meshes;
  CameraModel camera = default_camera();
  Vec3 sensor_origin = default_sensor_origin();

  std::uint64_t fingerprint() const {
    Fnv1a h;
    for (const auto& b : boxes) {
      h.bytes(b.center.data(), sizeof(double) * 3);
      h.bytes(b.size.data(), sizeof(double) * 3);
      h.value(b.yaw);
      h.value(b.class_id);
    }
    for (const auto& m : meshes) {
      for (const auto& v : m.vertices()) h.bytes(v.data(), sizeof(double) * 3);
      for (const auto& t : m.triangles()) h.bytes(t.data(), sizeof(int) * 3);
    }
    h.bytes(sensor_origin.data(), sizeof(double) * 3);
    return h.digest();
  }
};

struct Scan {
  std::vector<Vec3> points;
  std::vector<std::optional<int>> point_object;
};

struct ScanPattern {
  double elevation_min_deg = -15.0;
  double elevation_max_deg = 5.0;
  /// Azimuth range; unset means the camera's horizontal field of view.
  std::optional<std::pair<double, double>> azimuth_range;
  double max_range = 120.0;
};

namespace detail {

inline std::vector<Vec3> vehicle_profile(const Vec3& size, Rng& rng) {
  const double l = size.x() / 2, w = size.y() / 2, h = size.z();
  const double belt = h * rng.uniform(0.45, 0.6);
  const double front = rng.uniform(0.55, 0.85), rear = rng.uniform(0.6, 0.95);
  const double roof_w = rng.uniform(0.75, 0.95);
  const double nose = rng.uniform(0.85, 1.0), floor_in = rng.uniform(0.9, 1.0);
  std::vector<Vec3> pts;
  for (double sy : {-1.0, 1.0}) {
    pts.emplace_back(floor_in * l, sy * w * 0.95, 0.0);
    pts.emplace_back(-floor_in * l, sy * w * 0.95, 0.0);
    pts.emplace_back(l, sy * w, belt * nose);
    pts.emplace_back(-l, sy * w, belt);
    pts.emplace_back(front * l, sy * w * roof_w, h);
    pts.emplace_back(-rear * l, sy * w * roof_w, h);
  }
  return pts;
}

inline std::vector<Vec3> pedestrian_profile(const Vec3& size, Rng& rng) {
  const double rx = size.x() / 2, ry = size.y() / 2, h = size.z();
  const double top = rng.uniform(0.55, 0.8);
  const double phase = rng.uniform(0.0, std::numbers::pi / 4);
  std::vector<Vec3> pts;
  for (int k = 0; k < 8; ++k) {
    const double a = phase + k * std::numbers::pi / 4;
    pts.emplace_back(0.95 * rx * std::cos(a), 0.95 * ry * std::sin(a), 0.0);
    pts.emplace_back(rx * std::cos(a), ry * std::sin(a), 0.55 * h);
    pts.emplace_back(top * rx * std::cos(a), top * ry * std::sin(a), h);
  }
  return pts;
}

inline std::pair<double, double> azimuth_extent(const Box3D& box, const Vec3& sensor) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& c : box.corners()) {
    const double a = std::atan2(c.y() - sensor.y(), c.x() - sensor.x());
    lo = std::min(lo, a);
    hi = std::max(hi, a);
  }
  return {lo, hi};
}

}  // namespace detail

/// Object hull: convex hull of a box-conforming profile placed in the box.
inline TriangleMesh object_mesh(const Box3D& box, Rng& rng) {
  std::vector<Vec3> local = box.class_id == kPedestrian ? detail::pedestrian_profile(box.size, rng)
                                                        : detail::vehicle_profile(box.size, rng);
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const Vec3 base = box.center - Vec3(0, 0, box.size.z() / 2);
  std::vector<Vec3> world;
  world.reserve(local.size());
  for (const auto& p : local) world.push_back(base + Vec3(c * p.x() - s * p.y(), s * p.x() + c * p.y(), p.z()));
  return convex_hull(world);
}

/// Random scene, deterministic for a given seed.
inline Scene generate_scene(std::uint64_t seed, int n_objects, const SceneParams& params = {},
                            const CameraModel& camera = default_camera(),
                            const Vec3& sensor_origin = default_sensor_origin()) {
  if (n_objects < 0) throw InvalidArgument("n_objects must be >= 0");
  Scene scene{{}, {}, camera, sensor_origin};
  Rng rng(seed);
  const auto [fov_lo, fov_hi] = camera.horizontal_fov();
  const Vec3 fwd = camera.to_lidar_direction(Vec3::UnitZ());
  const double axis = std::atan2(fwd.y(), fwd.x());
  std::vector<std::pair<double, double>> extents;

  for (int obj = 0; obj < n_objects; ++obj) {
    bool placed = false;
    for (int attempt = 0; attempt < params.max_retries && !placed; ++attempt) {
      Box3D box;
      box.class_id = rng.uniform() < params.pedestrian_fraction ? kPedestrian : kVehicle;
      if (box.class_id == kVehicle)
        box.size = Vec3(rng.uniform(3.8, 4.8), rng.uniform(1.6, 2.0), rng.uniform(1.4, 1.7));
      else
        box.size = Vec3(rng.uniform(0.5, 0.8), rng.uniform(0.5, 0.8), rng.uniform(1.6, 1.9));
      const double range = rng.uniform(params.min_range, params.max_range);
      // Camera x right is LiDAR −y, so image-left azimuths are positive.
      const double az = axis + rng.uniform(-fov_hi, -fov_lo);
      box.center = Vec3(sensor_origin.x() + range * std::cos(az),
                        sensor_origin.y() + range * std::sin(az), box.size.z() / 2);
      box.yaw = rng.uniform(0.0, std::numbers::pi);

      bool ok = true;
      for (const auto& c : box.corners())
        if (c.x() < 0.0 || c.x() > params.max_x || std::abs(c.y()) > params.max_abs_y) ok = false;
      if (ok && params.in_frustum)
        for (const auto& c : box.corners()) {
          const auto px = project(camera, c);
          if (!px || !camera.in_bounds(*px)) ok = false;
        }
      if (ok)
        for (const auto& other : scene.boxes) {
          const double gap = std::hypot(box.center.x() - other.center.x(), box.center.y() - other.center.y());
          if (gap < box.bev_radius() + other.bev_radius() + 0.3) ok = false;
        }
      const auto ext = detail::azimuth_extent(box, sensor_origin);
      if (ok && params.unoccluded)
        for (const auto& e : extents)
          if (ext.first < e.second + params.angular_margin && e.first < ext.second + params.angular_margin)
            ok = false;
      if (!ok) continue;
      scene.meshes.push_back(object_mesh(box, rng));
      scene.boxes.push_back(box);
      extents.push_back(ext);
      placed = true;
    }
    if (!placed)
      throw PlacementFailure("could not place object " + std::to_string(obj) + " after " +
                             std::to_string(params.max_retries) + " attempts");
  }
  return scene;
}

/// Nearest object hit along a ray over all meshes in a scene.
inline std::optional<std::pair<int, RayHit>> cast_scene(const Scene& scene, const Ray& ray) {
  std::optional<std::pair<int, RayHit>> best;
  for (std::size_t m = 0; m < scene.meshes.size(); ++m) {
    const auto hit = intersect(scene.meshes[m], ray);
    if (hit && (!best || hit->travel < best->second.travel)) best = std::make_pair(static_cast<int>(m), *hit);
  }
  return best;
}

/// Simulated spinning-LiDAR sweep: one ray per (elevation, azimuth), nearest
/// mesh hit, else the ground plane z = 0 for downward rays.
inline Scan scan(const Scene& scene, int beams, int azimuth_steps, const ScanPattern& pattern = {}) {
  if (beams < 1 || azimuth_steps < 1) throw InvalidArgument("beams and azimuth_steps must be >= 1");
  double az_lo, az_hi;
  if (pattern.azimuth_range) {
    std::tie(az_lo, az_hi) = *pattern.azimuth_range;
  } else {
    const auto [fov_lo, fov_hi] = scene.camera.horizontal_fov();
    // Azimuth of the optical axis in the LiDAR frame.
    const Vec3 fwd = scene.camera.to_lidar_direction(Vec3::UnitZ());
    const double axis = std::atan2(fwd.y(), fwd.x());
    az_lo = axis - fov_hi;
    az_hi = axis - fov_lo;
  }
  auto lerp = [](double lo, double hi, int i, int n) {
    return n == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * i / (n - 1);
  };
  constexpr double deg = std::numbers::pi / 180.0;

  Scan out;
  for (int b = 0; b < beams; ++b) {
    const double el = lerp(pattern.elevation_min_deg, pattern.elevation_max_deg, b, beams) * deg;
    for (int a = 0; a < azimuth_steps; ++a) {
      const double az = lerp(az_lo, az_hi, a, azimuth_steps);
      const Ray ray(scene.sensor_origin,
                    Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)));
      if (const auto hit = cast_scene(scene, ray); hit && hit->second.travel <= pattern.max_range) {
        out.points.push_back(hit->second.point);
        out.point_object.push_back(hit->first);
      } else if (ray.direction().z() < 0.0) {
        const double t = -ray.origin().z() / ray.direction().z();
        if (t > 0.0 && t <= pattern.max_range) {
          Vec3 p = ray.point_at(t);
          p.z() = 0.0;
          out.points.push_back(p);
          out.point_object.push_back(std::nullopt);
        }
      }
    }
  }
  return out;
}

/// Area-uniform samples over a mesh surface; count = round(density · area).
inline std::vector<Vec3> sample_surface(const TriangleMesh& mesh, double density, std::uint64_t seed = 0) {
  if (!(density > 0.0)) throw InvalidArgument("density must be positive");
  const std::size_t nt = mesh.triangles().size();
  std::vector<double> cdf(nt);
  double total = 0.0;
  for (std::size_t i = 0; i < nt; ++i) cdf[i] = (total += mesh.triangle_area(i));
  const auto count = static_cast<std::size_t>(std::llround(density * total));
  Rng rng(seed);
  std::vector<Vec3> pts;
  pts.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const double r = rng.uniform() * total;
    const std::size_t t = std::min<std::size_t>(
        static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), r) - cdf.begin()), nt - 1);
    double u = rng.uniform(), v = rng.uniform();
    if (u + v > 1.0) u = 1.0 - u, v = 1.0 - v;
    const Vec3 a = mesh.corner(t, 0), b = mesh.corner(t, 1), c = mesh.corner(t, 2);
    pts.push_back(a + u * (b - a) + v * (c - a));
  }
  return pts;
}

/// Densified full-shape point set for one scene object.
inline std::vector<Vec3> full_shape_points(const Scene& scene, int object_index, double density,
                                           std::uint64_t seed = 0) {
  if (object_index < 0 || object_index >= static_cast<int>(scene.meshes.size()))
    throw InvalidArgument("object index out of range");
  return sample_surface(scene.meshes[object_index], density, seed);
}

}  // namespace fsmdet
