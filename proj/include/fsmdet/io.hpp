#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/SVD>

#include "json.hpp"

#include "fsmdet/fusion.hpp"
#include "fsmdet/mesh.hpp"
#include "fsmdet/simlidar.hpp"
#include "fsmdet/voxel.hpp"
#include "fsmdet/vpgt.hpp"

namespace fsmdet::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- text files

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
  if (!out) throw FormatError("write failed for " + path.string());
}

inline json read_json(const fs::path& path) {
  const std::string text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------- json helpers

namespace detail {

inline const json& member(const json& j, const std::string& key, const std::string& where) {
  if (!j.is_object()) throw FormatError(where + ": expected an object");
  auto it = j.find(key);
  if (it == j.end()) throw FormatError(where + "/" + key + ": missing");
  return *it;
}

inline double number(const json& j, const std::string& where) {
  if (!j.is_number()) throw FormatError(where + ": expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw FormatError(where + ": not finite");
  return v;
}

inline int integer(const json& j, const std::string& where) {
  if (!j.is_number_integer()) throw FormatError(where + ": expected an integer");
  return j.get<int>();
}

inline std::vector<double> numbers(const json& j, const std::string& where, std::optional<std::size_t> expect = {}) {
  if (!j.is_array()) throw FormatError(where + ": expected an array");
  if (expect && j.size() != *expect)
    throw FormatError(where + ": expected " + std::to_string(*expect) + " values, got " + std::to_string(j.size()));
  std::vector<double> out;
  out.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(number(j[i], where + "/" + std::to_string(i)));
  return out;
}

inline Vec3 vec3(const json& j, const std::string& where) {
  const auto v = numbers(j, where, 3);
  return {v[0], v[1], v[2]};
}

inline json to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

inline json to_json(const VecX& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline VecX vecx(const json& j, const std::string& where) {
  const auto v = numbers(j, where);
  return Eigen::Map<const VecX>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace detail

// ---------------------------------------------------------------- camera

inline constexpr double kCalibrationTolerance = 1e-6;

/// Nearest rotation (SVD projection, det +1).
inline Mat3 orthonormalize(const Mat3& r) {
  Eigen::JacobiSVD<Mat3> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  if ((u * svd.matrixV().transpose()).determinant() < 0.0) u.col(2) *= -1.0;
  return u * svd.matrixV().transpose();
}

inline json camera_to_json(const CameraModel& cam) {
  json rot = json::array();
  const Mat3& r = cam.extrinsic().rotation;
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) rot.push_back(r(i, k));
  return {{"fx", cam.fx()},         {"fy", cam.fy()},       {"cx", cam.cx()},
          {"cy", cam.cy()},         {"width", cam.width()}, {"height", cam.height()},
          {"rotation", rot},        {"translation", detail::to_json(cam.extrinsic().translation)}};
}

inline CameraModel camera_from_json(const json& j, const std::string& where = "camera") {
  using namespace detail;
  const auto rot = numbers(member(j, "rotation", where), where + "/rotation", 9);
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) r(i, k) = rot[i * 3 + k];
  const double err = rotation_error(r);
  if (err > kCalibrationTolerance) {
    std::ostringstream msg;
    msg << where << "/rotation: not orthonormal (error " << err << " > " << kCalibrationTolerance << ")";
    throw InvalidCamera(msg.str());
  }
  RigidTransform ext;
  ext.rotation = orthonormalize(r);
  ext.translation = vec3(member(j, "translation", where), where + "/translation");
  return CameraModel(number(member(j, "fx", where), where + "/fx"), number(member(j, "fy", where), where + "/fy"),
                     number(member(j, "cx", where), where + "/cx"), number(member(j, "cy", where), where + "/cy"),
                     integer(member(j, "width", where), where + "/width"),
                     integer(member(j, "height", where), where + "/height"), ext);
}

inline CameraModel read_camera(const fs::path& path) { return camera_from_json(read_json(path), path.string()); }

// ---------------------------------------------------------------- PLY

struct PlyProperty {
  std::string name;
  bool is_list = false;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> properties;
  /// One row per element; list properties are stored as their items only,
  /// so rows with lists may vary in length.
  std::vector<std::vector<double>> rows;

  int property_index(const std::string& prop) const {
    for (std::size_t i = 0; i < properties.size(); ++i)
      if (properties[i].name == prop) return static_cast<int>(i);
    return -1;
  }
};

struct PlyFile {
  std::vector<PlyElement> elements;

  const PlyElement* find(const std::string& name) const {
    for (const auto& e : elements)
      if (e.name == name) return &e;
    return nullptr;
  }
};

inline PlyFile parse_ply(const std::string& text, const std::string& where = "ply") {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.substr(0, 3) != "ply") throw FormatError(where + ": missing 'ply' magic");
  PlyFile ply;
  bool header_done = false, format_seen = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw.empty() || kw == "comment" || kw == "obj_info") continue;
    if (kw == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "ascii") throw FormatError(where + ": only ASCII PLY is supported, got " + fmt);
      format_seen = true;
    } else if (kw == "element") {
      PlyElement e;
      long long n = -1;
      ls >> e.name >> n;
      if (e.name.empty() || n < 0) throw FormatError(where + ": bad element line '" + line + "'");
      e.count = static_cast<std::size_t>(n);
      ply.elements.push_back(std::move(e));
    } else if (kw == "property") {
      if (ply.elements.empty()) throw FormatError(where + ": property before element");
      std::string type;
      ls >> type;
      PlyProperty p;
      if (type == "list") {
        std::string count_type, item_type;
        ls >> count_type >> item_type;
        p.is_list = true;
      }
      ls >> p.name;
      if (p.name.empty()) throw FormatError(where + ": bad property line '" + line + "'");
      ply.elements.back().properties.push_back(p);
    } else if (kw == "end_header") {
      header_done = true;
      break;
    } else {
      throw FormatError(where + ": unknown header keyword '" + kw + "'");
    }
  }
  if (!header_done) throw FormatError(where + ": missing end_header");
  if (!format_seen) throw FormatError(where + ": missing format line");

  for (auto& e : ply.elements) {
    e.rows.reserve(e.count);
    for (std::size_t r = 0; r < e.count; ++r) {
      if (!std::getline(in, line)) throw FormatError(where + ": truncated " + e.name + " data");
      std::istringstream ls(line);
      std::vector<double> row;
      for (const auto& p : e.properties) {
        double v;
        if (!(ls >> v)) throw FormatError(where + ": bad " + e.name + " row " + std::to_string(r));
        if (!p.is_list) {
          row.push_back(v);
          continue;
        }
        const auto n = static_cast<long long>(v);
        if (n < 0 || static_cast<double>(n) != v) throw FormatError(where + ": bad list length");
        for (long long k = 0; k < n; ++k) {
          if (!(ls >> v)) throw FormatError(where + ": short list in " + e.name + " row " + std::to_string(r));
          row.push_back(v);
        }
      }
      e.rows.push_back(std::move(row));
    }
  }
  return ply;
}

inline PlyFile read_ply(const fs::path& path) { return parse_ply(read_text(path), path.string()); }

namespace detail {

inline std::string ply_header(const std::vector<std::pair<std::string, std::vector<std::string>>>& elements,
                              const std::vector<std::size_t>& counts) {
  std::ostringstream out;
  out << "ply\nformat ascii 1.0\n";
  for (std::size_t e = 0; e < elements.size(); ++e) {
    out << "element " << elements[e].first << " " << counts[e] << "\n";
    for (const auto& p : elements[e].second) out << "property " << p << "\n";
  }
  out << "end_header\n";
  return out.str();
}

inline std::ostringstream ply_stream() {
  std::ostringstream out;
  out.precision(17);
  return out;
}

inline Vec3 xyz(const PlyElement& e, std::size_t r, const std::string& where) {
  const int ix = e.property_index("x"), iy = e.property_index("y"), iz = e.property_index("z");
  if (ix < 0 || iy < 0 || iz < 0) throw FormatError(where + ": vertex needs x, y, z");
  for (const auto& p : e.properties)
    if (p.is_list) throw FormatError(where + ": list property in point element");
  const auto& row = e.rows[r];
  return {row[ix], row[iy], row[iz]};
}

inline const PlyElement& vertices(const PlyFile& ply, const std::string& where) {
  const PlyElement* v = ply.find("vertex");
  if (!v) throw FormatError(where + ": no vertex element");
  return *v;
}

}  // namespace detail

/// Triangle mesh; polygon faces are fan-triangulated.
inline TriangleMesh mesh_from_ply(const PlyFile& ply, const std::string& where = "ply") {
  const PlyElement& ve = detail::vertices(ply, where);
  std::vector<Vec3> verts;
  for (std::size_t r = 0; r < ve.count; ++r) verts.push_back(detail::xyz(ve, r, where));
  std::vector<Triangle> tris;
  if (const PlyElement* fe = ply.find("face")) {
    if (fe->properties.size() != 1 || !fe->properties[0].is_list)
      throw FormatError(where + ": face element must hold one index list");
    for (std::size_t r = 0; r < fe->count; ++r) {
      const auto& idx = fe->rows[r];
      if (idx.size() < 3) throw FormatError(where + ": face " + std::to_string(r) + " has fewer than 3 vertices");
      for (double v : idx)
        if (v < 0 || v >= static_cast<double>(verts.size()))
          throw FormatError(where + ": face " + std::to_string(r) + " index out of range");
      for (std::size_t k = 1; k + 1 < idx.size(); ++k)
        tris.push_back({static_cast<int>(idx[0]), static_cast<int>(idx[k]), static_cast<int>(idx[k + 1])});
    }
  }
  return TriangleMesh(std::move(verts), std::move(tris));
}

inline TriangleMesh read_mesh_ply(const fs::path& path) { return mesh_from_ply(read_ply(path), path.string()); }

inline std::string mesh_to_ply(const TriangleMesh& mesh) {
  auto out = detail::ply_stream();
  out << detail::ply_header({{"vertex", {"double x", "double y", "double z"}},
                             {"face", {"list uchar int vertex_indices"}}},
                            {mesh.vertices().size(), mesh.triangles().size()});
  for (const auto& v : mesh.vertices()) out << v.x() << " " << v.y() << " " << v.z() << "\n";
  for (const auto& t : mesh.triangles()) out << "3 " << t[0] << " " << t[1] << " " << t[2] << "\n";
  return out.str();
}

inline void write_mesh_ply(const fs::path& path, const TriangleMesh& mesh) { write_text(path, mesh_to_ply(mesh)); }

/// Scan points with object_id (−1 for background).
inline std::string scan_to_ply(const Scan& scan) {
  auto out = detail::ply_stream();
  out << detail::ply_header({{"vertex", {"double x", "double y", "double z", "int object_id"}}}, {scan.points.size()});
  for (std::size_t i = 0; i < scan.points.size(); ++i) {
    const Vec3& p = scan.points[i];
    out << p.x() << " " << p.y() << " " << p.z() << " " << scan.point_object[i].value_or(-1) << "\n";
  }
  return out.str();
}

inline Scan scan_from_ply(const PlyFile& ply, const std::string& where = "ply") {
  const PlyElement& ve = detail::vertices(ply, where);
  const int io = ve.property_index("object_id");
  Scan scan;
  for (std::size_t r = 0; r < ve.count; ++r) {
    scan.points.push_back(detail::xyz(ve, r, where));
    const int id = io < 0 ? -1 : static_cast<int>(ve.rows[r][io]);
    scan.point_object.push_back(id < 0 ? std::nullopt : std::optional<int>(id));
  }
  return scan;
}

inline void write_scan_ply(const fs::path& path, const Scan& scan) { write_text(path, scan_to_ply(scan)); }
inline Scan read_scan_ply(const fs::path& path) { return scan_from_ply(read_ply(path), path.string()); }

/// Visible-part points with camera-plane depth and source pixel.
inline std::string vp_to_ply(const VpSurface& vp) {
  auto out = detail::ply_stream();
  out << detail::ply_header(
      {{"vertex", {"double x", "double y", "double z", "double depth", "int u", "int v"}}}, {vp.points.size()});
  for (std::size_t i = 0; i < vp.points.size(); ++i) {
    const Vec3& p = vp.points[i];
    out << p.x() << " " << p.y() << " " << p.z() << " " << vp.depths[i] << " " << vp.source_pixels[i].x << " "
        << vp.source_pixels[i].y << "\n";
  }
  return out.str();
}

inline VpSurface vp_from_ply(const PlyFile& ply, const std::string& where = "ply") {
  const PlyElement& ve = detail::vertices(ply, where);
  const int id = ve.property_index("depth"), iu = ve.property_index("u"), iv = ve.property_index("v");
  if (id < 0 || iu < 0 || iv < 0) throw FormatError(where + ": VP vertex needs depth, u, v");
  VpSurface vp;
  for (std::size_t r = 0; r < ve.count; ++r) {
    vp.points.push_back(detail::xyz(ve, r, where));
    vp.depths.push_back(ve.rows[r][id]);
    vp.source_pixels.push_back({static_cast<int>(ve.rows[r][iu]), static_cast<int>(ve.rows[r][iv])});
  }
  return vp;
}

inline json vp_summary(const VpSurface& vp, std::size_t region_size, double delta) {
  return {{"missed", vp.missed}, {"region_size", region_size}, {"points", vp.points.size()}, {"delta", delta}};
}

// ---------------------------------------------------------------- grids

inline json spec_to_json(const GridSpec& s) {
  return {{"origin", detail::to_json(s.origin)},
          {"voxel_size", detail::to_json(s.voxel_size)},
          {"dims", json::array({s.dims[0], s.dims[1], s.dims[2]})}};
}

inline GridSpec spec_from_json(const json& j, const std::string& where = "grid") {
  using namespace detail;
  GridSpec s;
  s.origin = vec3(member(j, "origin", where), where + "/origin");
  s.voxel_size = vec3(member(j, "voxel_size", where), where + "/voxel_size");
  const json& d = member(j, "dims", where);
  if (!d.is_array() || d.size() != 3) throw FormatError(where + "/dims: expected 3 integers");
  for (int a = 0; a < 3; ++a) s.dims[a] = integer(d[a], where + "/dims/" + std::to_string(a));
  try {
    s.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(where + ": " + e.what());
  }
  return s;
}

namespace detail {
inline json class_json(const std::optional<int>& c) { return c ? json(*c) : json(nullptr); }
inline std::optional<int> class_from(const json& j, const std::string& where) {
  if (j.is_null()) return std::nullopt;
  return integer(j, where);
}
inline json index_json(const Index3& i) { return json::array({i.x, i.y, i.z}); }
inline Index3 index3(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 3) throw FormatError(where + ": expected an index triple");
  return {integer(j[0], where + "/0"), integer(j[1], where + "/1"), integer(j[2], where + "/2")};
}
}  // namespace detail

/// JSON sidecar: spec, F, per-voxel records and the invisible set.
inline json grid_to_json(const SparseVoxelGrid& g) {
  json voxels = json::array();
  for (const auto& [i, v] : g.voxels)
    voxels.push_back({{"index", detail::index_json(i)},
                      {"class_id", detail::class_json(v.class_id)},
                      {"synthetic", v.synthetic},
                      {"off_image", v.off_image},
                      {"point_count", v.point_count},
                      {"centroid", detail::to_json(v.centroid)},
                      {"feature", detail::to_json(v.feature)}});
  json invisible = json::array();
  g.invisible.for_each([&](const Index3& i) { invisible.push_back(detail::index_json(i)); });
  return {{"spec", spec_to_json(g.spec)}, {"feature_dim", g.feature_dim}, {"voxels", voxels},
          {"invisible", invisible},       {"dropped_points", g.dropped_points}};
}

inline SparseVoxelGrid grid_from_json(const json& j, const std::string& where = "grid") {
  using namespace detail;
  SparseVoxelGrid g;
  g.spec = spec_from_json(member(j, "spec", where), where + "/spec");
  g.feature_dim = integer(member(j, "feature_dim", where), where + "/feature_dim");
  if (j.contains("dropped_points")) g.dropped_points = j["dropped_points"].get<std::size_t>();
  const json& vs = member(j, "voxels", where);
  if (!vs.is_array()) throw FormatError(where + "/voxels: expected an array");
  for (std::size_t n = 0; n < vs.size(); ++n) {
    const std::string w = where + "/voxels/" + std::to_string(n);
    Voxel v;
    v.index = index3(member(vs[n], "index", w), w + "/index");
    if (!g.spec.in_range(v.index)) throw FormatError(w + "/index: outside the grid");
    v.class_id = class_from(member(vs[n], "class_id", w), w + "/class_id");
    v.synthetic = member(vs[n], "synthetic", w).get<bool>();
    if (vs[n].contains("off_image")) v.off_image = vs[n]["off_image"].get<bool>();
    if (vs[n].contains("point_count")) v.point_count = integer(vs[n]["point_count"], w + "/point_count");
    v.centroid = vs[n].contains("centroid") ? vec3(vs[n]["centroid"], w + "/centroid") : g.spec.center(v.index);
    v.feature = vecx(member(vs[n], "feature", w), w + "/feature");
    if (v.feature.size() != g.feature_dim)
      throw FormatError(w + "/feature: expected " + std::to_string(g.feature_dim) + " values");
    if (!g.voxels.emplace(v.index, std::move(v)).second) throw FormatError(w + ": duplicate index");
  }
  g.invisible = VoxelMask(g.spec);
  if (j.contains("invisible")) {
    const json& inv = j["invisible"];
    for (std::size_t n = 0; n < inv.size(); ++n) {
      const Index3 i = index3(inv[n], where + "/invisible/" + std::to_string(n));
      if (!g.spec.in_range(i)) throw FormatError(where + "/invisible: index outside the grid");
      g.invisible.set(i);
    }
  }
  return g;
}

inline std::string grid_centers_ply(const SparseVoxelGrid& g) {
  auto out = detail::ply_stream();
  out << detail::ply_header({{"vertex", {"double x", "double y", "double z", "int class_id", "uchar synthetic"}}},
                            {g.voxels.size()});
  for (const auto& [i, v] : g.voxels) {
    const Vec3 c = g.spec.center(i);
    out << c.x() << " " << c.y() << " " << c.z() << " " << v.class_id.value_or(-1) << " " << (v.synthetic ? 1 : 0)
        << "\n";
  }
  return out.str();
}

/// Writes `<stem>.ply` (voxel centers) and `<stem>.json` (sidecar).
inline void write_grid(const fs::path& stem, const SparseVoxelGrid& g) {
  write_text(fs::path(stem.string() + ".ply"), grid_centers_ply(g));
  write_json(fs::path(stem.string() + ".json"), grid_to_json(g));
}

inline SparseVoxelGrid read_grid(const fs::path& sidecar) { return grid_from_json(read_json(sidecar), sidecar.string()); }

inline json bev_to_json(const BevMap& b) {
  json cells = json::array();
  for (const auto& [i, c] : b.cells)
    cells.push_back({{"index", json::array({i.x, i.y})},
                     {"class_id", detail::class_json(c.class_id)},
                     {"synthetic", c.synthetic},
                     {"feature", detail::to_json(c.feature)}});
  return {{"spec", spec_to_json(b.spec)}, {"feature_dim", b.feature_dim}, {"cells", cells}};
}

inline BevMap bev_from_json(const json& j, const std::string& where = "bev") {
  using namespace detail;
  BevMap b;
  b.spec = spec_from_json(member(j, "spec", where), where + "/spec");
  b.feature_dim = integer(member(j, "feature_dim", where), where + "/feature_dim");
  const json& cs = member(j, "cells", where);
  for (std::size_t n = 0; n < cs.size(); ++n) {
    const std::string w = where + "/cells/" + std::to_string(n);
    const json& idx = member(cs[n], "index", w);
    if (!idx.is_array() || idx.size() != 2) throw FormatError(w + "/index: expected a pair");
    const Index2 i{integer(idx[0], w + "/index/0"), integer(idx[1], w + "/index/1")};
    BevCell c;
    c.class_id = class_from(member(cs[n], "class_id", w), w + "/class_id");
    c.synthetic = member(cs[n], "synthetic", w).get<bool>();
    c.feature = vecx(member(cs[n], "feature", w), w + "/feature");
    if (c.feature.size() != b.feature_dim) throw FormatError(w + "/feature: wrong length");
    if (!b.cells.emplace(i, std::move(c)).second) throw FormatError(w + ": duplicate index");
  }
  return b;
}

// ---------------------------------------------------------------- fusion parameters
//
// Dense layers: {"shape": [rows, cols], "weight": [row-major], "bias": [rows]}.
// Matrices:     {"shape": [rows, cols], "data": [row-major]}.

namespace detail {

inline json matrix_json(const MatX& m, const char* key) {
  json data = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  return {{"shape", json::array({m.rows(), m.cols()})}, {key, data}};
}

inline MatX matrix_from(const json& j, const char* key, const std::string& where) {
  const json& shape = member(j, "shape", where);
  if (!shape.is_array() || shape.size() != 2) throw ConfigError(where + "/shape: expected [rows, cols]");
  const int rows = integer(shape[0], where + "/shape/0"), cols = integer(shape[1], where + "/shape/1");
  if (rows < 1 || cols < 1) throw ConfigError(where + "/shape: dimensions must be >= 1");
  const auto data = numbers(member(j, key, where), where + "/" + key);
  if (data.size() != static_cast<std::size_t>(rows) * cols)
    throw ConfigError(where + "/" + key + ": expected " + std::to_string(rows * cols) + " values for shape [" +
                      std::to_string(rows) + ", " + std::to_string(cols) + "], got " + std::to_string(data.size()));
  MatX m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r) * cols + c];
  return m;
}

inline json dense_json(const Dense& d) {
  json j = matrix_json(d.weight, "weight");
  j["bias"] = to_json(d.bias);
  return j;
}

inline Dense dense_from(const json& j, const std::string& where) {
  Dense d;
  d.weight = matrix_from(j, "weight", where);
  d.bias = vecx(member(j, "bias", where), where + "/bias");
  if (d.bias.size() != d.weight.rows())
    throw ConfigError(where + "/bias: expected " + std::to_string(d.weight.rows()) + " values, got " +
                      std::to_string(d.bias.size()));
  return d;
}

inline json mlp_json(const Mlp& m) {
  json a = json::array();
  for (const auto& l : m.layers) a.push_back(dense_json(l));
  return a;
}

inline Mlp mlp_from(const json& j, const std::string& where) {
  if (!j.is_array() || j.empty()) throw ConfigError(where + ": expected a non-empty array of layers");
  Mlp m;
  for (std::size_t i = 0; i < j.size(); ++i) m.layers.push_back(dense_from(j[i], where + "/" + std::to_string(i)));
  return m;
}

}  // namespace detail

inline json fusion_params_to_json(const DeformAttnParams& p) {
  json vp = json::array(), op = json::array();
  for (const auto& m : p.value_proj) vp.push_back(detail::matrix_json(m, "data"));
  for (const auto& m : p.output_proj) op.push_back(detail::matrix_json(m, "data"));
  return {{"heads", p.heads},
          {"samples", p.samples},
          {"feature_dim", p.feature_dim},
          {"channels", p.channels},
          {"value_dim", p.value_dim},
          {"max_offset", p.max_offset},
          {"neighborhood_order", p.neighborhood_order},
          {"neighborhood_proj", detail::dense_json(p.neighborhood_proj)},
          {"offset_mlp", detail::mlp_json(p.offset_mlp)},
          {"attention", detail::dense_json(p.attention)},
          {"value_proj", vp},
          {"output_proj", op}};
}

/// Loads and validates every shape; errors name the offending JSON path.
inline DeformAttnParams fusion_params_from_json(const json& j, const std::string& where = "") {
  using namespace detail;
  DeformAttnParams p;
  try {
    p.heads = integer(member(j, "heads", where), where + "/heads");
    p.samples = integer(member(j, "samples", where), where + "/samples");
    p.feature_dim = integer(member(j, "feature_dim", where), where + "/feature_dim");
    p.channels = integer(member(j, "channels", where), where + "/channels");
    p.value_dim = integer(member(j, "value_dim", where), where + "/value_dim");
    if (j.contains("max_offset")) p.max_offset = number(j["max_offset"], where + "/max_offset");
    if (j.contains("neighborhood_order"))
      p.neighborhood_order = integer(j["neighborhood_order"], where + "/neighborhood_order");
    p.neighborhood_proj = dense_from(member(j, "neighborhood_proj", where), where + "/neighborhood_proj");
    p.offset_mlp = mlp_from(member(j, "offset_mlp", where), where + "/offset_mlp");
    p.attention = dense_from(member(j, "attention", where), where + "/attention");
    const json& vp = member(j, "value_proj", where);
    const json& op = member(j, "output_proj", where);
    if (!vp.is_array() || !op.is_array()) throw ConfigError(where + "/value_proj: expected arrays per head");
    for (std::size_t m = 0; m < vp.size(); ++m)
      p.value_proj.push_back(matrix_from(vp[m], "data", where + "/value_proj/" + std::to_string(m)));
    for (std::size_t m = 0; m < op.size(); ++m)
      p.output_proj.push_back(matrix_from(op[m], "data", where + "/output_proj/" + std::to_string(m)));
    p.validate();
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  } catch (const DimensionMismatch& e) {
    throw ConfigError(where + e.what());
  }
  return p;
}

inline DeformAttnParams read_fusion_params(const fs::path& path) {
  return fusion_params_from_json(read_json(path), path.string() + ":");
}

// ---------------------------------------------------------------- scenes

inline json box_to_json(const Box3D& b) {
  return {{"center", detail::to_json(b.center)}, {"size", detail::to_json(b.size)}, {"yaw", b.yaw}, {"class_id", b.class_id}};
}

inline Box3D box_from_json(const json& j, const std::string& where) {
  using namespace detail;
  Box3D b;
  b.center = vec3(member(j, "center", where), where + "/center");
  b.size = vec3(member(j, "size", where), where + "/size");
  b.yaw = number(member(j, "yaw", where), where + "/yaw");
  b.class_id = integer(member(j, "class_id", where), where + "/class_id");
  if (!(b.size.minCoeff() > 0.0)) throw FormatError(where + "/size: components must be positive");
  if (b.class_id < 0 || b.class_id >= kNumClasses) throw FormatError(where + "/class_id: out of range");
  return b;
}

/// Writes scene.json plus one mesh PLY per object in `<stem>_meshes/`;
/// mesh paths are stored relative to the scene file.
inline void write_scene(const fs::path& path, const Scene& scene) {
  const std::string mesh_dir = path.stem().string() + "_meshes";
  json boxes = json::array(), meshes = json::array();
  for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
    boxes.push_back(box_to_json(scene.boxes[i]));
    const std::string rel = mesh_dir + "/obj_" + std::to_string(i) + ".ply";
    write_mesh_ply(path.parent_path() / rel, scene.meshes[i]);
    meshes.push_back(rel);
  }
  write_json(path, {{"sensor_origin", detail::to_json(scene.sensor_origin)},
                    {"camera", camera_to_json(scene.camera)},
                    {"boxes", boxes},
                    {"meshes", meshes}});
}

/// The camera entry is either an inline calibration object or a path to a
/// calibration file, relative to the scene file.
inline Scene read_scene(const fs::path& path) {
  using namespace detail;
  const json j = read_json(path);
  const std::string where = path.string();
  const fs::path base = path.parent_path();
  const json& cam = member(j, "camera", where);
  Scene scene{{}, {}, cam.is_string() ? read_camera(base / cam.get<std::string>()) : camera_from_json(cam, where + "/camera"),
              vec3(member(j, "sensor_origin", where), where + "/sensor_origin")};
  const json& boxes = member(j, "boxes", where);
  const json& meshes = member(j, "meshes", where);
  if (!boxes.is_array() || !meshes.is_array() || boxes.size() != meshes.size())
    throw FormatError(where + ": boxes and meshes must be arrays of equal length");
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    scene.boxes.push_back(box_from_json(boxes[i], where + "/boxes/" + std::to_string(i)));
    if (!meshes[i].is_string()) throw FormatError(where + "/meshes/" + std::to_string(i) + ": expected a path");
    scene.meshes.push_back(read_mesh_ply(base / meshes[i].get<std::string>()));
  }
  return scene;
}

}  // namespace fsmdet::io
