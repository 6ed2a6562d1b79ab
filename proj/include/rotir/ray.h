#pragma once

#include "rotir/vec.h"

namespace rotir {

// r(t) = origin + t * dir, valid for t > t_min.
struct Ray {
  Vec3 origin;
  UnitVec3 dir;
  double t_min = 0.0;

  Ray() = default;
  Ray(const Vec3& o, const UnitVec3& d, double tmin = 0.0) : origin(o), dir(d), t_min(tmin) {
    if (!(t_min >= 0.0) || !std::isfinite(t_min)) {
      throw std::invalid_argument("Ray: t_min must be finite and non-negative");
    }
  }

  Vec3 at(double t) const { return origin + t * dir.vec(); }
};

}  // namespace rotir
