#pragma once

#include <cstdint>
#include <vector>

#include "rotir/gsplat.h"
#include "rotir/optim.h"
#include "rotir/ray.h"
#include "rotir/shading.h"

namespace rotir {
namespace detail {

// Flat-parameter bridge between GaussianScene arrays and a ParamStore. Group
// names are fixed; stage 1 trains geometry + SH, stage 2 only materials.
struct GaussLrs {
  double mu = 2e-3, quat = 2e-3, scale = 5e-3, opacity = 5e-2, sh = 1e-2;
  double albedo = 5e-2, roughness = 5e-2;
};
struct GaussTrainFlags {
  bool geometry = true;
  bool sh = true;
  bool material = true;
};

void add_scene_groups(ParamStore& store, const GaussianScene& scene, const GaussLrs& lrs,
                      const GaussTrainFlags& flags);
void store_to_scene(const ParamStore& store, GaussianScene& scene);
void grads_to_store(const GaussGrads& grads, ParamStore& store);

// Hash of everything stage 2 must not touch (mu, quat, scales, opacity, SH).
uint64_t geometry_sh_hash(const GaussianScene& scene);

// Splat material at a surface point: blend along a short ray dropped back
// onto the surface from just above it. ray/hits are retained so gradients
// can replay the same blend.
struct MaterialProbe {
  Material material;
  Ray ray;
  Vec3 view_dir;
  std::vector<GaussHit> hits;
  bool valid = false;
};
MaterialProbe probe_material(const GaussianScene& scene, const GaussAccel* accel,
                             const Vec3& point, const Vec3& normal, double extent);

}  // namespace detail
}  // namespace rotir
