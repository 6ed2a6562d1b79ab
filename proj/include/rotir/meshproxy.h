#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "rotir/bvh.h"
#include "rotir/camera.h"
#include "rotir/image.h"

namespace rotir {

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<uint32_t, 3>> triangles;
  std::vector<Vec3> face_normals;  // unit, follows vertex winding

  size_t triangle_count() const { return triangles.size(); }
  bool empty() const { return triangles.empty(); }

  // Drops degenerate (zero-area) triangles and fills face_normals.
  void finalize(double area_eps = 1e-12);

  double triangle_area(size_t i) const;
  double surface_area() const;
  Aabb triangle_bounds(size_t i) const;
  Aabb bounds() const;
  Vec3 point_at(size_t tri, double b0, double b1) const;  // b2 = 1 - b0 - b1
};

Bvh build_mesh_bvh(const TriangleMesh& mesh);

struct MeshHit {
  double t = kInf;
  uint32_t tri = 0;
  double b0 = 0, b1 = 0;  // weights of vertices 0 and 1; b2 = 1 - b0 - b1
  Vec3 point;
  Vec3 normal;  // face normal (winding orientation, not flipped)
};

// Closest hit with t > ray.t_min; Moller-Trumbore with eps 1e-9; ties broken
// by lower triangle index.
std::optional<MeshHit> ray_mesh_intersect(const Bvh& bvh, const TriangleMesh& mesh,
                                          const Ray& ray);
// Single-triangle test, shared by the BVH path and brute-force oracles.
std::optional<MeshHit> ray_triangle_intersect(const TriangleMesh& mesh, size_t tri,
                                              const Ray& ray);

struct TsdfConfig {
  int resolution = 128;          // grid nodes along the longest axis
  double truncation_voxels = 4;  // tau in voxel units
  double alpha_threshold = 0.5;
  Aabb bounds;                   // world region to voxelize (pre-padded)
};

// Uniform cubic lattice of signed-distance samples in [-1, 1] (units of the
// truncation distance) with per-node fusion weights.
class TsdfGrid {
 public:
  TsdfGrid(const Aabb& bounds, int resolution, double truncation_voxels);

  int nx() const { return dims_[0]; }
  int ny() const { return dims_[1]; }
  int nz() const { return dims_[2]; }
  double voxel_size() const { return voxel_; }
  double truncation() const { return trunc_; }  // world units
  const Vec3& origin() const { return origin_; }

  size_t node_index(int i, int j, int k) const {
    return (static_cast<size_t>(k) * dims_[1] + j) * dims_[0] + i;
  }
  Vec3 node_position(int i, int j, int k) const {
    return origin_ + Vec3(i * voxel_, j * voxel_, k * voxel_);
  }

  double value(int i, int j, int k) const { return value_[node_index(i, j, k)]; }
  double weight(int i, int j, int k) const { return weight_[node_index(i, j, k)]; }
  // Effective field for extraction: zero-weight nodes read as outside (+1).
  double field(int i, int j, int k) const {
    const size_t n = node_index(i, j, k);
    return weight_[n] > 0 ? value_[n] : 1.0;
  }

  void integrate(size_t node, double tsdf, double w) {
    value_[node] = (value_[node] * weight_[node] + tsdf * w) / (weight_[node] + w);
    weight_[node] += w;
  }

  std::vector<double>& values() { return value_; }
  std::vector<double>& weights() { return weight_; }

 private:
  std::array<int, 3> dims_;
  double voxel_;
  double trunc_;
  Vec3 origin_;
  std::vector<double> value_, weight_;
};

// Weighted TSDF fusion of ray-distance depth maps; only pixels whose alpha
// exceeds the threshold contribute.
TsdfGrid tsdf_fuse(const std::vector<ImageBuffer>& depths, const std::vector<ImageBuffer>& alphas,
                   const std::vector<Camera>& cameras, const TsdfConfig& config);

// Standard 256-case marching cubes; edge vertices welded exactly via shared
// edge keys; triangle winding aligned with the field gradient (normals point
// toward positive field, i.e. outside).
TriangleMesh marching_cubes(const TsdfGrid& grid, double iso = 0.0);

struct SurfaceSample {
  Vec3 point;
  Vec3 normal;  // face normal of the source triangle
  Vec3 dir;     // unit, dir . normal >= 0
  uint32_t tri = 0;
};

// Triangles chosen uniformly over indices (area-weighted behind the flag);
// square-root barycentric point sampling; direction uniform on the hemisphere
// about the face normal. Per-sample RNG keys -> order independent.
std::vector<SurfaceSample> sample_surface(const TriangleMesh& mesh, size_t n, uint64_t seed,
                                          bool area_weighted = false);

void save_obj(const std::string& path, const TriangleMesh& mesh);
TriangleMesh load_obj(const std::string& path);

void save_tsdf(const std::string& path, const TsdfGrid& grid);

}  // namespace rotir
