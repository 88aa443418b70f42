#pragma once

#include <cmath>
#include <optional>

#include <Eigen/Dense>

#include "fsmdet/common.hpp"

namespace fsmdet {

// Frames: the LiDAR frame is right-handed with x forward, y left, z up. The
// camera frame has z forward, x right, y down. All file I/O is in the LiDAR
// frame.

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Continuous image coordinates. Pixel (i, j) covers [i, i+1) x [j, j+1).
struct Pixel2D {
  double u = 0.0;
  double v = 0.0;
};

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  RigidTransform inverse() const {
    RigidTransform inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }
};

/// Largest deviation of R from a proper rotation: max(|RᵀR − I|, |det R − 1|).
inline double rotation_error(const Mat3& r) {
  const double ortho = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
  return std::max(ortho, std::abs(r.determinant() - 1.0));
}

/// Pinhole camera with a rigid LiDAR→camera extrinsic.
class CameraModel {
 public:
  static constexpr double kRotationTolerance = 1e-9;

  CameraModel(double fx, double fy, double cx, double cy, int width, int height,
              RigidTransform extrinsic)
      : fx_(fx), fy_(fy), cx_(cx), cy_(cy), width_(width), height_(height),
        extrinsic_(std::move(extrinsic)) {
    if (!(fx > 0.0) || !(fy > 0.0)) throw InvalidCamera("focal lengths must be positive");
    if (width <= 0 || height <= 0) throw InvalidCamera("image size must be positive");
    if (!std::isfinite(cx) || !std::isfinite(cy)) throw InvalidCamera("principal point not finite");
    if (!extrinsic_.rotation.allFinite() || !extrinsic_.translation.allFinite())
      throw InvalidCamera("extrinsic not finite");
    if (rotation_error(extrinsic_.rotation) > kRotationTolerance)
      throw InvalidCamera("extrinsic rotation is not orthonormal with det +1");
    center_ = extrinsic_.inverse().translation;
  }

  double fx() const { return fx_; }
  double fy() const { return fy_; }
  double cx() const { return cx_; }
  double cy() const { return cy_; }
  int width() const { return width_; }
  int height() const { return height_; }
  const RigidTransform& extrinsic() const { return extrinsic_; }

  /// Camera center in the LiDAR frame.
  const Vec3& center() const { return center_; }

  Vec3 to_camera(const Vec3& p) const { return extrinsic_.apply(p); }
  Vec3 to_lidar_direction(const Vec3& d_cam) const {
    return extrinsic_.rotation.transpose() * d_cam;
  }

  bool in_bounds(const Pixel2D& px) const {
    return px.u >= 0.0 && px.v >= 0.0 && px.u < width_ && px.v < height_;
  }

  /// Horizontal field of view spanned by the image, as (min, max) angle of
  /// the camera-frame ray relative to the optical axis (radians, +x right).
  std::pair<double, double> horizontal_fov() const {
    return {std::atan2(0.0 - cx_, fx_), std::atan2(width_ - cx_, fx_)};
  }

 private:
  double fx_, fy_, cx_, cy_;
  int width_, height_;
  RigidTransform extrinsic_;
  Vec3 center_;
};

/// Ray with unit direction.
class Ray {
 public:
  Ray(Vec3 origin, const Vec3& direction) : origin_(std::move(origin)) {
    const double n = direction.norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw InvalidArgument("ray direction must be nonzero");
    direction_ = direction / n;
  }

  const Vec3& origin() const { return origin_; }
  const Vec3& direction() const { return direction_; }
  Vec3 point_at(double t) const { return origin_ + t * direction_; }

 private:
  Vec3 origin_;
  Vec3 direction_;
};

inline constexpr double kBehindEpsilon = 1e-9;

/// Projects a LiDAR-frame point. Returns nullopt ("behind") when the camera
/// depth is at most 1e-9.
inline std::optional<Pixel2D> project(const CameraModel& cam, const Vec3& p) {
  const Vec3 c = cam.to_camera(p);
  if (!(c.z() > kBehindEpsilon)) return std::nullopt;
  return Pixel2D{cam.fx() * c.x() / c.z() + cam.cx(), cam.fy() * c.y() / c.z() + cam.cy()};
}

namespace detail {
inline Vec3 camera_ray(const CameraModel& cam, const Pixel2D& px) {
  return Vec3((px.u - cam.cx()) / cam.fx(), (px.v - cam.cy()) / cam.fy(), 1.0);
}
}  // namespace detail

/// Back-projection of a pixel: origin at the camera center, unit direction
/// in the LiDAR frame.
inline Ray pixel_ray(const CameraModel& cam, const Pixel2D& px) {
  return Ray(cam.center(), cam.to_lidar_direction(detail::camera_ray(cam, px).normalized()));
}

/// Forward (camera z) component of the unit ray through px. Multiplying a
/// distance travelled along that ray by this factor gives camera-plane depth.
inline double ray_slope_scale(const CameraModel& cam, const Pixel2D& px) {
  return 1.0 / detail::camera_ray(cam, px).norm();
}

/// Rotation taking LiDAR axes (x fwd, y left, z up) to camera axes
/// (x right, y down, z fwd) for a camera looking along LiDAR +x.
inline Mat3 lidar_to_camera_axes() {
  Mat3 r;
  r << 0, -1, 0,
       0, 0, -1,
       1, 0, 0;
  return r;
}

/// Forward-looking camera placed at `center` (LiDAR frame), rotated by `yaw`
/// about LiDAR z.
inline CameraModel forward_camera(double fx, double fy, double cx, double cy, int width,
                                  int height, const Vec3& center, double yaw = 0.0) {
  const Mat3 yaw_rot = Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
  RigidTransform ext;
  ext.rotation = lidar_to_camera_axes() * yaw_rot.transpose();
  ext.translation = -(ext.rotation * center);
  return CameraModel(fx, fy, cx, cy, width, height, ext);
}

}  // namespace fsmdet
