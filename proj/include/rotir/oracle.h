#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rotir/bvh.h"
#include "rotir/camera.h"
#include "rotir/envlight.h"
#include "rotir/image.h"
#include "rotir/meshproxy.h"
#include "rotir/shading.h"

namespace rotir {

// Ground-truth forward renderer and synthetic dataset generator. Keeps its
// own BRDF evaluation (same formula as the shading module, separate code) so
// cross-checks between the two estimators are meaningful.

// One named object. When `checker` is set the albedo alternates between
// material.albedo and albedo2 on a world-space x/z grid of pitch
// checker_scale (the "textured floor" pattern).
struct SceneObject {
  std::string name;
  TriangleMesh mesh;
  Material material;
  bool checker = false;
  Vec3 albedo2{0, 0, 0};
  double checker_scale = 0.5;
};

struct SceneDescription {
  std::vector<SceneObject> objects;
  EnvironmentMap env{1, 1.0};
  std::vector<double> light_angles_deg{0.0};

  // Derived by finalize(): all object meshes merged into one BVH-indexed
  // mesh, with a triangle -> object map for material lookup.
  TriangleMesh merged;
  std::vector<uint32_t> tri_object;
  Bvh accel;
  double extent = 0;  // max AABB extent of the merged mesh

  void finalize();  // throws std::invalid_argument on an empty scene
  LightAngleTable angle_table() const;
  Material material_at(uint32_t tri, const Vec3& point) const;
};

// Analytic building blocks (boxes, planes, icospheres only).
TriangleMesh make_plane_mesh(double half_x, double half_z, double y);
// Closed axis-aligned box with outward normals; faces listed in `skip_top` /
// `skip_bottom` order so open containers can be built.
TriangleMesh make_box_mesh(const Vec3& lo, const Vec3& hi, bool skip_top = false,
                           bool skip_bottom = false);
TriangleMesh make_icosphere_mesh(const Vec3& center, double radius, int subdivisions);

// Fixed asymmetric HDR environment (gradient sky + off-axis sun blob) so
// y-rotations of the light are observable.
EnvironmentMap make_gt_env();

// name in {"shadow-box", "sphere-plane", "two-box-cavity"}; throws
// std::invalid_argument otherwise. Returned scene is finalized and carries
// angles {0, 120, 240}.
SceneDescription make_scene(const std::string& name);

// Deterministic capture rig: orbit positions on the upper hemisphere around
// the scene. split 0 = train, 1 = test (offset so the sets interleave).
Camera make_orbit_camera(int index, int split, int resolution);

// Oracle BRDF (Lambert + GGX; identical formula to shading::brdf_eval,
// independent implementation).
Vec3 oracle_brdf(const Material& mat, const UnitVec3& n, const UnitVec3& omega_i,
                 const UnitVec3& omega_o);

// Unbiased path tracer: uniform hemisphere sampling, Russian roulette after
// bounce 3, max_bounces surface interactions, env radiance rotated by light
// index k. Output is linear RGB + alpha, alpha = primary-hit fraction.
ImageBuffer path_trace(const SceneDescription& scene, const Camera& camera, int k, int spp,
                       int max_bounces, uint64_t seed);

// Hemisphere visibility at a surface point (independent of
// shading::ambient_occlusion).
double oracle_ao(const SceneDescription& scene, const Vec3& x, const UnitVec3& n, int n_samples,
                 uint64_t seed, uint64_t key);

// Ground-truth maps for one view, averaged over jittered primary hits.
// albedo is RGB + mask alpha; roughness and ao are single-channel; normal
// holds world-space components in [-1, 1].
struct GtMaps {
  ImageBuffer albedo;
  ImageBuffer roughness;
  ImageBuffer normal;
  ImageBuffer ao;
};
GtMaps render_gt_maps(const SceneDescription& scene, const Camera& camera, int spp,
                      int ao_samples, uint64_t seed);

struct DatasetConfig {
  std::string scene = "shadow-box";
  std::vector<double> angles_deg = {0.0, 120.0, 240.0};
  int n_train = 32;  // camera positions; each is rendered under every angle
  int n_test = 8;    // camera positions; one frame each, angle index v % K
  int resolution = 128;
  int spp = 64;
  int max_bounces = 4;
  int gt_spp = 4;
  int ao_samples = 1024;
  uint64_t seed = 0;
};

// Writes the full capture directory: transforms_{train,test}.json (NeRF
// layout + per-frame light_angle_deg), linear PFM images with PNG previews,
// per-test-view ground-truth maps, gt_mesh.obj, gt_env.pfm. Re-running with
// the same config is byte-identical.
void gen_dataset(const DatasetConfig& cfg, const std::string& out_dir);

}  // namespace rotir
