#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "fsmdet/geometry.hpp"

namespace fsmdet {

using Triangle = std::array<int, 3>;

struct Aabb {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = Vec3::Constant(-std::numeric_limits<double>::infinity());

  void extend(const Vec3& p) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }

  /// Slab test. Returns the parametric entry/exit interval or nullopt.
  std::optional<std::pair<double, double>> clip(const Ray& ray) const {
    double t0 = -std::numeric_limits<double>::infinity();
    double t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      const double o = ray.origin()[a];
      const double d = ray.direction()[a];
      if (std::abs(d) < 1e-300) {
        if (o < lo[a] || o > hi[a]) return std::nullopt;
        continue;
      }
      double ta = (lo[a] - o) / d;
      double tb = (hi[a] - o) / d;
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
      if (t0 > t1) return std::nullopt;
    }
    return std::make_pair(t0, t1);
  }
};

struct RayHit {
  double travel = 0.0;
  Vec3 point = Vec3::Zero();
  int triangle_index = -1;
};

inline constexpr double kMinTriangleArea = 1e-12;
inline constexpr double kMinTravel = 1e-12;

/// Möller–Trumbore, two-sided. Returns travel t (any sign) when the ray's
/// line meets the closed triangle.
inline std::optional<double> ray_triangle(const Ray& ray, const Vec3& a, const Vec3& b,
                                          const Vec3& c) {
  const Vec3 e1 = b - a;
  const Vec3 e2 = c - a;
  const Vec3 pvec = ray.direction().cross(e2);
  const double det = e1.dot(pvec);
  const double scale = e1.norm() * e2.norm();
  if (std::abs(det) <= 1e-14 * scale) return std::nullopt;
  const double inv = 1.0 / det;
  const Vec3 tvec = ray.origin() - a;
  const double u = tvec.dot(pvec) * inv;
  if (u < 0.0 || u > 1.0) return std::nullopt;
  const Vec3 qvec = tvec.cross(e1);
  const double v = ray.direction().dot(qvec) * inv;
  if (v < 0.0 || u + v > 1.0) return std::nullopt;
  return e2.dot(qvec) * inv;
}

/// Closest point on triangle abc to p (Ericson, Real-Time Collision Detection 5.1.5).
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b,
                                      const Vec3& c) {
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0 && d2 <= 0) return a;
  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0 && d4 <= d3) return b;
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) return a + (d1 / (d1 - d3)) * ab;
  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0 && d5 <= d6) return c;
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) return a + (d2 / (d2 - d6)) * ac;
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0)
    return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b);
  const double denom = 1.0 / (va + vb + vc);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

/// Triangle mesh for object hulls. Immutable after construction.
class TriangleMesh {
 public:
  TriangleMesh() = default;

  /// Validates indices, drops degenerate triangles (counted), caches the
  /// area-weighted surface centroid, bounds and the watertight flag.
  TriangleMesh(std::vector<Vec3> vertices, const std::vector<Triangle>& triangles)
      : vertices_(std::move(vertices)) {
    const int n = static_cast<int>(vertices_.size());
    for (const auto& v : vertices_)
      if (!v.allFinite()) throw InvalidArgument("mesh vertex not finite");
    triangles_.reserve(triangles.size());
    for (const auto& t : triangles) {
      for (int i : t)
        if (i < 0 || i >= n) throw InvalidArgument("triangle index out of range");
      if (area_of(t) <= kMinTriangleArea) {
        ++dropped_;
        continue;
      }
      triangles_.push_back(t);
    }
    for (const auto& v : vertices_) bounds_.extend(v);
    compute_centroid();
    compute_watertight();
  }

  const std::vector<Vec3>& vertices() const { return vertices_; }
  const std::vector<Triangle>& triangles() const { return triangles_; }
  const Vec3& centroid() const { return centroid_; }
  const Aabb& bounds() const { return bounds_; }
  bool watertight() const { return watertight_; }
  std::size_t dropped_degenerate() const { return dropped_; }
  bool empty() const { return triangles_.empty(); }

  double triangle_area(std::size_t i) const { return area_of(triangles_[i]); }

  double surface_area() const {
    double s = 0.0;
    for (std::size_t i = 0; i < triangles_.size(); ++i) s += triangle_area(i);
    return s;
  }

  /// Enclosed volume (absolute value of the divergence-theorem sum).
  double volume() const {
    double v = 0.0;
    for (const auto& t : triangles_)
      v += vertices_[t[0]].dot(vertices_[t[1]].cross(vertices_[t[2]]));
    return std::abs(v) / 6.0;
  }

  Vec3 corner(std::size_t tri, int k) const { return vertices_[triangles_[tri][k]]; }

 private:
  double area_of(const Triangle& t) const {
    return 0.5 * (vertices_[t[1]] - vertices_[t[0]]).cross(vertices_[t[2]] - vertices_[t[0]]).norm();
  }

  void compute_centroid() {
    double total = 0.0;
    Vec3 acc = Vec3::Zero();
    for (const auto& t : triangles_) {
      const double a = area_of(t);
      acc += a * (vertices_[t[0]] + vertices_[t[1]] + vertices_[t[2]]) / 3.0;
      total += a;
    }
    centroid_ = total > 0.0 ? Vec3(acc / total) : Vec3::Zero();
  }

  void compute_watertight() {
    std::map<std::pair<int, int>, int> edges;
    for (const auto& t : triangles_)
      for (int k = 0; k < 3; ++k) {
        const int a = t[k], b = t[(k + 1) % 3];
        ++edges[{std::min(a, b), std::max(a, b)}];
      }
    watertight_ = !triangles_.empty();
    for (const auto& [e, count] : edges)
      if (count != 2) watertight_ = false;
  }

  std::vector<Vec3> vertices_;
  std::vector<Triangle> triangles_;
  Vec3 centroid_ = Vec3::Zero();
  Aabb bounds_;
  bool watertight_ = false;
  std::size_t dropped_ = 0;
};

/// Convex hull by incremental construction. Output faces are oriented
/// outward and only hull vertices are kept.
inline TriangleMesh convex_hull(const std::vector<Vec3>& points) {
  if (points.size() < 4) throw DegenerateInput("convex hull needs at least 4 points");
  for (const auto& p : points)
    if (!p.allFinite()) throw DegenerateInput("non-finite point");

  constexpr double tol = 1e-9;
  const std::size_t n = points.size();

  // Initial tetrahedron from extreme points.
  std::size_t i0 = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (points[i].x() < points[i0].x()) i0 = i;
  std::size_t i1 = i0;
  double best = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = (points[i] - points[i0]).norm();
    if (d > best) best = d, i1 = i;
  }
  if (best <= tol) throw DegenerateInput("points are coincident");
  const Vec3 axis = (points[i1] - points[i0]).normalized();
  std::size_t i2 = i0;
  best = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = (points[i] - points[i0]).cross(axis).norm();
    if (d > best) best = d, i2 = i;
  }
  if (best <= tol) throw DegenerateInput("points are collinear");
  const Vec3 plane_n = (points[i1] - points[i0]).cross(points[i2] - points[i0]).normalized();
  std::size_t i3 = i0;
  best = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = std::abs((points[i] - points[i0]).dot(plane_n));
    if (d > best) best = d, i3 = i;
  }
  if (best <= tol) throw DegenerateInput("points are coplanar");

  struct Face {
    std::array<std::size_t, 3> v;
    Vec3 normal;
    double offset;
    bool alive = true;
  };
  std::vector<Face> faces;
  const Vec3 inside = (points[i0] + points[i1] + points[i2] + points[i3]) / 4.0;
  auto make_face = [&](std::size_t a, std::size_t b, std::size_t c) {
    Face f{{a, b, c}, Vec3::Zero(), 0.0};
    f.normal = (points[b] - points[a]).cross(points[c] - points[a]).normalized();
    f.offset = f.normal.dot(points[a]);
    return f;
  };
  auto add_oriented = [&](std::size_t a, std::size_t b, std::size_t c) {
    Face f = make_face(a, b, c);
    if (f.normal.dot(inside) - f.offset > 0.0) f = make_face(a, c, b);
    faces.push_back(f);
  };
  add_oriented(i0, i1, i2);
  add_oriented(i0, i1, i3);
  add_oriented(i0, i2, i3);
  add_oriented(i1, i2, i3);

  for (std::size_t p = 0; p < n; ++p) {
    if (p == i0 || p == i1 || p == i2 || p == i3) continue;
    std::vector<std::size_t> visible;
    for (std::size_t f = 0; f < faces.size(); ++f)
      if (faces[f].alive && faces[f].normal.dot(points[p]) - faces[f].offset > tol)
        visible.push_back(f);
    if (visible.empty()) continue;

    // Horizon: directed edges of visible faces whose reverse is not visible.
    std::map<std::pair<std::size_t, std::size_t>, int> directed;
    for (std::size_t f : visible)
      for (int k = 0; k < 3; ++k) directed[{faces[f].v[k], faces[f].v[(k + 1) % 3]}] = 1;
    std::vector<std::pair<std::size_t, std::size_t>> horizon;
    for (const auto& [e, one] : directed)
      if (!directed.count({e.second, e.first})) horizon.push_back(e);
    for (std::size_t f : visible) faces[f].alive = false;
    for (const auto& [a, b] : horizon) faces.push_back(make_face(a, b, p));
  }

  std::vector<int> remap(n, -1);
  std::vector<Vec3> verts;
  std::vector<Triangle> tris;
  for (const auto& f : faces) {
    if (!f.alive) continue;
    Triangle t{};
    for (int k = 0; k < 3; ++k) {
      if (remap[f.v[k]] < 0) {
        remap[f.v[k]] = static_cast<int>(verts.size());
        verts.push_back(points[f.v[k]]);
      }
      t[k] = remap[f.v[k]];
    }
    tris.push_back(t);
  }
  return TriangleMesh(std::move(verts), tris);
}

/// Scales vertices about the surface centroid by `delta` (>= 1).
inline TriangleMesh expand(const TriangleMesh& mesh, double delta) {
  if (!(delta >= 1.0) || !std::isfinite(delta))
    throw InvalidDelta("expansion coefficient must be >= 1, got " + std::to_string(delta));
  const Vec3& c = mesh.centroid();
  std::vector<Vec3> verts;
  verts.reserve(mesh.vertices().size());
  for (const auto& v : mesh.vertices()) verts.push_back(c + delta * (v - c));
  return TriangleMesh(std::move(verts), mesh.triangles());
}

/// Nearest positive-travel hit. Ties go to the lowest triangle index.
inline std::optional<RayHit> intersect(const TriangleMesh& mesh, const Ray& ray) {
  const auto slab = mesh.bounds().clip(ray);
  if (!slab || slab->second < kMinTravel) return std::nullopt;
  std::optional<RayHit> hit;
  const auto& tris = mesh.triangles();
  for (std::size_t i = 0; i < tris.size(); ++i) {
    const auto t = ray_triangle(ray, mesh.corner(i, 0), mesh.corner(i, 1), mesh.corner(i, 2));
    if (!t || *t <= kMinTravel) continue;
    if (!hit || *t < hit->travel) hit = RayHit{*t, Vec3::Zero(), static_cast<int>(i)};
  }
  if (hit) hit->point = ray.point_at(hit->travel);
  return hit;
}

/// Euclidean distance from p to the mesh surface.
inline double surface_distance(const TriangleMesh& mesh, const Vec3& p) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < mesh.triangles().size(); ++i) {
    const Vec3 q = closest_point_on_triangle(p, mesh.corner(i, 0), mesh.corner(i, 1), mesh.corner(i, 2));
    best = std::min(best, (q - p).norm());
  }
  return best;
}

/// Point-in-mesh by crossing parity along a fixed direction. Points within
/// 1e-9 of the surface count as inside.
inline bool contains(const TriangleMesh& mesh, const Vec3& p) {
  if (!mesh.watertight()) throw NotWatertight("containment requires a watertight mesh");
  const Aabb& b = mesh.bounds();
  constexpr double on_surface = 1e-9;
  if ((p.array() < b.lo.array() - on_surface).any() || (p.array() > b.hi.array() + on_surface).any())
    return false;
  if (surface_distance(mesh, p) <= on_surface) return true;
  const Ray probe(p, Vec3(0.5281, 0.3162, 0.7883));
  int crossings = 0;
  for (std::size_t i = 0; i < mesh.triangles().size(); ++i) {
    const auto t = ray_triangle(probe, mesh.corner(i, 0), mesh.corner(i, 1), mesh.corner(i, 2));
    if (t && *t > 0.0) ++crossings;
  }
  return crossings % 2 == 1;
}

}  // namespace fsmdet
