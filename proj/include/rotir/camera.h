#pragma once

#include <optional>

#include "rotir/ray.h"
#include "rotir/vec.h"

namespace rotir {

// Pinhole camera, right-handed, looking down -z in its local frame with +x
// right and +y up (the common synthetic-dataset convention). Image rows grow
// downward, so pixel y maps to -y in camera space.
class Camera {
 public:
  Camera() = default;
  Camera(int width, int height, double fx, double fy, double cx, double cy,
         const Mat3& cam_to_world_rot, const Vec3& center)
      : width_(width), height_(height), fx_(fx), fy_(fy), cx_(cx), cy_(cy),
        rot_(cam_to_world_rot), center_(center) {
    if (width <= 0 || height <= 0 || !(fx > 0) || !(fy > 0) || !std::isfinite(fx) ||
        !std::isfinite(fy) || !std::isfinite(cx) || !std::isfinite(cy) || !is_finite(center)) {
      throw std::invalid_argument("Camera: invalid intrinsics or pose");
    }
    if (!is_orthonormal(rot_)) {
      throw std::invalid_argument("Camera: rotation is not orthonormal");
    }
  }

  static Camera from_fov_x(int width, int height, double fov_x_rad, const Mat3& rot,
                           const Vec3& center) {
    const double fx = 0.5 * width / std::tan(0.5 * fov_x_rad);
    return Camera(width, height, fx, fx, 0.5 * width, 0.5 * height, rot, center);
  }

  int width() const { return width_; }
  int height() const { return height_; }
  double fx() const { return fx_; }
  double fy() const { return fy_; }
  double cx() const { return cx_; }
  double cy() const { return cy_; }
  const Mat3& rotation() const { return rot_; }
  const Vec3& center() const { return center_; }

  // Sub-pixel positions allowed; (cx, cy) maps to the optical axis.
  Ray ray_for_pixel(double px, double py) const {
    const Vec3 dir_cam((px - cx_) / fx_, -(py - cy_) / fy_, -1.0);
    return Ray(center_, UnitVec3(rot_ * dir_cam), 0.0);
  }

  // Forward projection; nullopt when the point is at or behind the camera.
  std::optional<std::pair<double, double>> project(const Vec3& p) const {
    const Vec3 pc = rot_.transposed() * (p - center_);
    const double depth = -pc.z;
    if (!(depth > 0)) return std::nullopt;
    return std::make_pair(cx_ + fx_ * pc.x / depth, cy_ - fy_ * pc.y / depth);
  }

  // Distance from the camera center along the pixel's (unit) ray.
  double ray_depth(const Vec3& p) const { return norm(p - center_); }

 private:
  int width_ = 0, height_ = 0;
  double fx_ = 0, fy_ = 0, cx_ = 0, cy_ = 0;
  Mat3 rot_;
  Vec3 center_;
};

// Look-at pose: camera at `eye`, -z axis toward `target`, `up` approximately +y.
inline Mat3 look_at_rotation(const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Vec3 back = normalize(eye - target);              // camera +z
  const Vec3 right = normalize(cross(up, back));          // camera +x
  const Vec3 cam_up = cross(back, right);                 // camera +y
  return Mat3::from_cols(right, cam_up, back);
}

}  // namespace rotir
