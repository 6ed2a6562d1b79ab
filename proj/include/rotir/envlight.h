#pragma once

#include <string>
#include <vector>

#include "rotir/image.h"
#include "rotir/vec.h"

namespace rotir {

// Rotation about the +y (up) axis:
//   rows (cos, 0, sin), (0, 1, 0), (-sin, 0, cos).
Mat3 rot_y(double phi);

// Per-light-index environment rotation angles, radians in [0, 2pi).
class LightAngleTable {
 public:
  explicit LightAngleTable(std::vector<double> angles_rad);
  int count() const { return static_cast<int>(angles_.size()); }
  double angle(int k) const;  // throws std::out_of_range on bad k
  const std::vector<double>& angles() const { return angles_; }

 private:
  std::vector<double> angles_;
};

// Equirectangular radiance map over unconstrained parameters; the effective
// radiance is softplus(raw), so it stays positive for any parameter values.
// W = 2H, up axis +y.
class EnvironmentMap {
 public:
  explicit EnvironmentMap(int height, double init_radiance = 0.5);
  static EnvironmentMap from_radiance(const ImageBuffer& img);

  int height() const { return height_; }
  int width() const { return 2 * height_; }
  size_t param_count() const { return raw_.size(); }

  std::vector<double>& raw() { return raw_; }
  const std::vector<double>& raw() const { return raw_; }

  size_t texel_offset(int x, int y) const {
    return (static_cast<size_t>(y) * width() + x) * 3;
  }
  Vec3 radiance_texel(int x, int y) const {
    const size_t o = texel_offset(x, y);
    return {softplus(raw_[o]), softplus(raw_[o + 1]), softplus(raw_[o + 2])};
  }

  ImageBuffer to_image() const;  // radiance, linear

 private:
  int height_;
  std::vector<double> raw_;  // H x W x 3
};

// Equirectangular mapping u = 0.5 + atan2(x, -z)/2pi, v = acos(clamp(y))/pi.
// Bilinear with horizontal wrap and vertical clamp; at dir.y = +/-1 the
// matching pole row is averaged.
Vec3 env_lookup(const EnvironmentMap& env, const UnitVec3& dir);

// E_phi(dir) = E(rot_y(phi_k) * dir); single code path through env_lookup.
Vec3 env_lookup_rotated(const EnvironmentMap& env, const UnitVec3& dir, int k,
                        const LightAngleTable& table);

// Accumulates dL/draw into grad (same layout as raw) for a lookup at dir.
void env_lookup_backward(const EnvironmentMap& env, const UnitVec3& dir, const Vec3& dl_drgb,
                         std::vector<double>& grad);
void env_lookup_rotated_backward(const EnvironmentMap& env, const UnitVec3& dir, int k,
                                 const LightAngleTable& table, const Vec3& dl_drgb,
                                 std::vector<double>& grad);

void save_env(const std::string& path, const EnvironmentMap& env);  // linear PFM, W = 2H
EnvironmentMap load_env(const std::string& path);

}  // namespace rotir
