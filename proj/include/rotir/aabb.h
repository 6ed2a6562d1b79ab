#pragma once

#include "rotir/ray.h"
#include "rotir/vec.h"

namespace rotir {

struct Aabb {
  Vec3 lo{kInf, kInf, kInf};
  Vec3 hi{-kInf, -kInf, -kInf};

  bool empty() const { return lo.x > hi.x || lo.y > hi.y || lo.z > hi.z; }
  Vec3 center() const { return 0.5 * (lo + hi); }
  Vec3 extent() const { return hi - lo; }
  double max_extent() const {
    const Vec3 e = extent();
    return std::max(e.x, std::max(e.y, e.z));
  }

  void expand(const Vec3& p) {
    lo = min(lo, p);
    hi = max(hi, p);
  }
  void expand(const Aabb& b) {
    lo = min(lo, b.lo);
    hi = max(hi, b.hi);
  }
  Aabb padded(double d) const { return {lo - Vec3(d, d, d), hi + Vec3(d, d, d)}; }

  bool contains(const Vec3& p) const {
    return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z;
  }

  // Slab test against [t0, t1]; inf/nan-safe for axis-parallel rays.
  bool hit(const Ray& ray, double t0, double t1) const {
    const Vec3 d = ray.dir;
    const Vec3& o = ray.origin;
    for (int a = 0; a < 3; ++a) {
      const double inv = 1.0 / d[a];
      double ta = (lo[a] - o[a]) * inv;
      double tb = (hi[a] - o[a]) * inv;
      if (inv < 0.0) std::swap(ta, tb);
      t0 = ta > t0 ? ta : t0;
      t1 = tb < t1 ? tb : t1;
      if (t1 < t0) return false;
    }
    return true;
  }
};

inline Aabb merge(const Aabb& a, const Aabb& b) {
  return {min(a.lo, b.lo), max(a.hi, b.hi)};
}

}  // namespace rotir
