#include "rotir/meshproxy.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "mc_tables.h"
#include "rotir/parallel.h"
#include "rotir/rng.h"

namespace rotir {

void TriangleMesh::finalize(double area_eps) {
  std::vector<std::array<uint32_t, 3>> kept;
  kept.reserve(triangles.size());
  face_normals.clear();
  for (const auto& tri : triangles) {
    for (uint32_t v : tri)
      if (v >= vertices.size()) throw std::invalid_argument("TriangleMesh: index out of range");
    const Vec3 e1 = vertices[tri[1]] - vertices[tri[0]];
    const Vec3 e2 = vertices[tri[2]] - vertices[tri[0]];
    const Vec3 c = cross(e1, e2);
    const double area2 = norm(c);
    if (area2 * 0.5 <= area_eps) continue;
    kept.push_back(tri);
    face_normals.push_back(c / area2);
  }
  triangles = std::move(kept);
}

double TriangleMesh::triangle_area(size_t i) const {
  const auto& t = triangles[i];
  return 0.5 * norm(cross(vertices[t[1]] - vertices[t[0]], vertices[t[2]] - vertices[t[0]]));
}

double TriangleMesh::surface_area() const {
  double a = 0;
  for (size_t i = 0; i < triangles.size(); ++i) a += triangle_area(i);
  return a;
}

Aabb TriangleMesh::triangle_bounds(size_t i) const {
  Aabb b;
  for (uint32_t v : triangles[i]) b.expand(vertices[v]);
  return b;
}

Aabb TriangleMesh::bounds() const {
  Aabb b;
  for (const Vec3& v : vertices) b.expand(v);
  return b;
}

Vec3 TriangleMesh::point_at(size_t tri, double b0, double b1) const {
  const auto& t = triangles[tri];
  return b0 * vertices[t[0]] + b1 * vertices[t[1]] + (1 - b0 - b1) * vertices[t[2]];
}

Bvh build_mesh_bvh(const TriangleMesh& mesh) {
  std::vector<Aabb> bounds(mesh.triangle_count());
  for (size_t i = 0; i < bounds.size(); ++i) bounds[i] = mesh.triangle_bounds(i);
  return Bvh(bounds);
}

std::optional<MeshHit> ray_triangle_intersect(const TriangleMesh& mesh, size_t tri,
                                              const Ray& ray) {
  const auto& idx = mesh.triangles[tri];
  const Vec3& v0 = mesh.vertices[idx[0]];
  const Vec3 e1 = mesh.vertices[idx[1]] - v0;
  const Vec3 e2 = mesh.vertices[idx[2]] - v0;
  const Vec3 p = cross(ray.dir.vec(), e2);
  const double det = dot(e1, p);
  if (std::abs(det) < 1e-9) return std::nullopt;
  const double inv = 1.0 / det;
  const Vec3 s = ray.origin - v0;
  const double u = dot(s, p) * inv;
  if (u < 0.0 || u > 1.0) return std::nullopt;
  const Vec3 q = cross(s, e1);
  const double v = dot(ray.dir.vec(), q) * inv;
  if (v < 0.0 || u + v > 1.0) return std::nullopt;
  const double t = dot(e2, q) * inv;
  if (t <= ray.t_min) return std::nullopt;
  MeshHit hit;
  hit.t = t;
  hit.tri = static_cast<uint32_t>(tri);
  hit.b0 = 1.0 - u - v;  // weight of vertex 0
  hit.b1 = u;            // weight of vertex 1
  hit.point = ray.at(t);
  hit.normal = mesh.face_normals.empty() ? normalize(cross(e1, e2)) : mesh.face_normals[tri];
  return hit;
}

std::optional<MeshHit> ray_mesh_intersect(const Bvh& bvh, const TriangleMesh& mesh,
                                          const Ray& ray) {
  std::optional<MeshHit> best;
  bvh.traverse(ray, kInf, [&](uint32_t tri, double t_max) {
    if (auto h = ray_triangle_intersect(mesh, tri, ray)) {
      if (!best || h->t < best->t || (h->t == best->t && h->tri < best->tri)) {
        best = *h;
        return h->t;
      }
    }
    return t_max;
  });
  return best;
}

TsdfGrid::TsdfGrid(const Aabb& bounds, int resolution, double truncation_voxels) {
  if (resolution < 2 || bounds.empty()) throw std::invalid_argument("TsdfGrid: bad config");
  const Vec3 ext = bounds.extent();
  voxel_ = std::max(ext.x, std::max(ext.y, ext.z)) / (resolution - 1);
  if (!(voxel_ > 0)) throw std::invalid_argument("TsdfGrid: degenerate bounds");
  trunc_ = truncation_voxels * voxel_;
  origin_ = bounds.lo;
  for (int a = 0; a < 3; ++a) {
    dims_[a] = std::max(2, static_cast<int>(std::ceil(ext[a] / voxel_)) + 1);
  }
  const size_t n = static_cast<size_t>(dims_[0]) * dims_[1] * dims_[2];
  value_.assign(n, 0.0);
  weight_.assign(n, 0.0);
}

TsdfGrid tsdf_fuse(const std::vector<ImageBuffer>& depths, const std::vector<ImageBuffer>& alphas,
                   const std::vector<Camera>& cameras, const TsdfConfig& config) {
  if (depths.size() != alphas.size() || depths.size() != cameras.size()) {
    throw std::invalid_argument("tsdf_fuse: view count mismatch");
  }
  for (size_t i = 0; i < depths.size(); ++i) {
    if (depths[i].width() != cameras[i].width() || depths[i].height() != cameras[i].height() ||
        alphas[i].width() != depths[i].width() || alphas[i].height() != depths[i].height()) {
      throw std::invalid_argument("tsdf_fuse: image size mismatch");
    }
  }

  TsdfGrid grid(config.bounds, config.resolution, config.truncation_voxels);
  const double trunc = grid.truncation();

  const size_t n_nodes = static_cast<size_t>(grid.nx()) * grid.ny() * grid.nz();
  parallel_for(n_nodes, [&](size_t node) {
    const int i = static_cast<int>(node % grid.nx());
    const int j = static_cast<int>((node / grid.nx()) % grid.ny());
    const int k = static_cast<int>(node / (static_cast<size_t>(grid.nx()) * grid.ny()));
    const Vec3 p = grid.node_position(i, j, k);
    for (size_t view = 0; view < depths.size(); ++view) {
      const Camera& cam = cameras[view];
      const auto px = cam.project(p);
      if (!px) continue;
      const int xi = static_cast<int>(std::floor(px->first));
      const int yi = static_cast<int>(std::floor(px->second));
      if (xi < 0 || yi < 0 || xi >= cam.width() || yi >= cam.height()) continue;
      if (alphas[view].at(xi, yi, 0) <= config.alpha_threshold) continue;
      const double surface = depths[view].at(xi, yi, 0);  // distance along the pixel ray
      const double sdf = surface - cam.ray_depth(p);      // + in front of the surface
      if (sdf < -trunc) continue;  // far behind the surface: occluded, unknown
      grid.integrate(node, clamp(sdf / trunc, -1.0, 1.0), 1.0);
    }
  });
  return grid;
}

TriangleMesh marching_cubes(const TsdfGrid& grid, double iso) {
  TriangleMesh mesh;
  // one shared vertex per lattice edge with a sign change
  std::map<std::pair<size_t, size_t>, uint32_t> edge_vertex;

  auto vertex_on_edge = [&](int ai, int aj, int ak, int bi, int bj, int bk) -> uint32_t {
    size_t a = grid.node_index(ai, aj, ak);
    size_t b = grid.node_index(bi, bj, bk);
    Vec3 pa = grid.node_position(ai, aj, ak);
    Vec3 pb = grid.node_position(bi, bj, bk);
    double va = grid.field(ai, aj, ak);
    double vb = grid.field(bi, bj, bk);
    if (a > b) {
      std::swap(a, b);
      std::swap(pa, pb);
      std::swap(va, vb);
    }
    const auto key = std::make_pair(a, b);
    const auto it = edge_vertex.find(key);
    if (it != edge_vertex.end()) return it->second;
    const double denom = vb - va;
    const double f = denom == 0.0 ? 0.5 : clamp((iso - va) / denom, 0.0, 1.0);
    const uint32_t id = static_cast<uint32_t>(mesh.vertices.size());
    mesh.vertices.push_back(pa + f * (pb - pa));
    edge_vertex.emplace(key, id);
    return id;
  };

  // central-difference field gradient at a lattice node (clamped stencil)
  auto grad_at = [&](int i, int j, int k) -> Vec3 {
    auto sample = [&](int a, int b, int c) {
      return grid.field(std::clamp(a, 0, grid.nx() - 1), std::clamp(b, 0, grid.ny() - 1),
                        std::clamp(c, 0, grid.nz() - 1));
    };
    return {sample(i + 1, j, k) - sample(i - 1, j, k), sample(i, j + 1, k) - sample(i, j - 1, k),
            sample(i, j, k + 1) - sample(i, j, k - 1)};
  };

  for (int k = 0; k + 1 < grid.nz(); ++k)
    for (int j = 0; j + 1 < grid.ny(); ++j)
      for (int i = 0; i + 1 < grid.nx(); ++i) {
        // Only extract between observed nodes: unobserved ones default to
        // "outside" and would otherwise spawn ghost shells along the fusion
        // frontier (e.g. around the occluded interior of a fused object).
        int mask = 0;
        bool observed = true;
        for (int c = 0; c < 8; ++c) {
          const int ci = i + mc::kCornerOffset[c][0];
          const int cj = j + mc::kCornerOffset[c][1];
          const int ck = k + mc::kCornerOffset[c][2];
          if (grid.weight(ci, cj, ck) <= 0.0) {
            observed = false;
            break;
          }
          if (grid.field(ci, cj, ck) < iso) mask |= 1 << c;
        }
        if (!observed || mask == 0 || mask == 255) continue;

        const int8_t* row = mc::kTriTable[mask];
        for (int e = 0; row[e] != -1; e += 3) {
          uint32_t ids[3];
          for (int c = 0; c < 3; ++c) {
            const int8_t* corners = mc::kEdgeCorners[row[e + c]];
            const int8_t* ca = mc::kCornerOffset[corners[0]];
            const int8_t* cb = mc::kCornerOffset[corners[1]];
            ids[c] = vertex_on_edge(i + ca[0], j + ca[1], k + ca[2], i + cb[0], j + cb[1],
                                    k + cb[2]);
          }
          if (ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2]) continue;
          // orient the face along the field gradient (toward the outside)
          const Vec3 fn = cross(mesh.vertices[ids[1]] - mesh.vertices[ids[0]],
                                mesh.vertices[ids[2]] - mesh.vertices[ids[0]]);
          Vec3 g;
          for (int c = 0; c < 8; ++c) {
            g += grad_at(i + mc::kCornerOffset[c][0], j + mc::kCornerOffset[c][1],
                         k + mc::kCornerOffset[c][2]);
          }
          if (dot(fn, g) < 0) {
            mesh.triangles.push_back({ids[0], ids[2], ids[1]});
          } else {
            mesh.triangles.push_back({ids[0], ids[1], ids[2]});
          }
        }
      }

  mesh.finalize();
  return mesh;
}

std::vector<SurfaceSample> sample_surface(const TriangleMesh& mesh, size_t n, uint64_t seed,
                                          bool area_weighted) {
  if (mesh.empty()) throw std::invalid_argument("sample_surface: empty mesh");
  std::vector<double> cdf;
  if (area_weighted) {
    cdf.resize(mesh.triangle_count());
    double acc = 0;
    for (size_t i = 0; i < mesh.triangle_count(); ++i) {
      acc += mesh.triangle_area(i);
      cdf[i] = acc;
    }
    for (double& c : cdf) c /= acc;
  }

  std::vector<SurfaceSample> out(n);
  for (size_t s = 0; s < n; ++s) {
    DetRng rng(seed, s, 0, 0, /*salt=*/0x5a);
    size_t tri;
    if (area_weighted) {
      const double u = rng.uniform();
      tri = std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin();
      tri = std::min(tri, mesh.triangle_count() - 1);
    } else {
      tri = rng.below(mesh.triangle_count());
    }
    // uniform point in the triangle via sqrt parameterization
    const double r1 = rng.uniform(), r2 = rng.uniform();
    const double su = std::sqrt(r1);
    const double b0 = 1.0 - su, b1 = su * (1.0 - r2);

    SurfaceSample smp;
    smp.tri = static_cast<uint32_t>(tri);
    smp.point = mesh.point_at(tri, b0, b1);
    smp.normal = mesh.face_normals[tri];
    // uniform hemisphere about the normal
    const double z = rng.uniform();
    const double phi = kTwoPi * rng.uniform();
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    Vec3 t, b;
    orthonormal_basis(UnitVec3::from_unit(smp.normal), t, b);
    smp.dir = r * std::cos(phi) * t + r * std::sin(phi) * b + z * smp.normal;
    out[s] = smp;
  }
  return out;
}

void save_obj(const std::string& path, const TriangleMesh& mesh) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_obj: cannot open " + path);
  f.precision(17);
  for (const Vec3& v : mesh.vertices) f << "v " << v.x << " " << v.y << " " << v.z << "\n";
  for (const auto& t : mesh.triangles)
    f << "f " << t[0] + 1 << " " << t[1] + 1 << " " << t[2] + 1 << "\n";
  if (!f) throw std::runtime_error("save_obj: write failed: " + path);
}

TriangleMesh load_obj(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_obj: cannot open " + path);
  TriangleMesh mesh;
  std::string line;
  while (std::getline(f, line)) {
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "v") {
      Vec3 v;
      ss >> v.x >> v.y >> v.z;
      mesh.vertices.push_back(v);
    } else if (tag == "f") {
      std::array<uint32_t, 3> tri;
      for (int c = 0; c < 3; ++c) {
        std::string tok;
        ss >> tok;
        tri[c] = static_cast<uint32_t>(std::stoul(tok.substr(0, tok.find('/')))) - 1;
      }
      mesh.triangles.push_back(tri);
    }
  }
  mesh.finalize();
  return mesh;
}

void save_tsdf(const std::string& path, const TsdfGrid& grid) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_tsdf: cannot open " + path);
  f << "tsdf " << grid.nx() << " " << grid.ny() << " " << grid.nz() << " " << grid.voxel_size()
    << " " << grid.origin().x << " " << grid.origin().y << " " << grid.origin().z << "\n";
  std::vector<float> buf;
  buf.reserve(static_cast<size_t>(grid.nx()) * grid.ny() * grid.nz());
  for (int k = 0; k < grid.nz(); ++k)
    for (int j = 0; j < grid.ny(); ++j)
      for (int i = 0; i < grid.nx(); ++i) buf.push_back(static_cast<float>(grid.field(i, j, k)));
  f.write(reinterpret_cast<const char*>(buf.data()), buf.size() * sizeof(float));
}

}  // namespace rotir
