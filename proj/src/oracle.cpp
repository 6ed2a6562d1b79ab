#include "rotir/oracle.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <utility>

#include <json.hpp>

#include "rotir/image_io.h"
#include "rotir/parallel.h"
#include "rotir/ray.h"
#include "rotir/rng.h"

namespace rotir {

namespace {

constexpr uint64_t kSaltPath = 0x70;
constexpr uint64_t kSaltGt = 0x71;
constexpr uint64_t kSaltAo = 0x73;
constexpr double kOracleF0 = 0.04;
constexpr double kOrbitFov = 0.9;  // radians, horizontal

void push_quad(TriangleMesh& m, uint32_t a, uint32_t b, uint32_t c, uint32_t d) {
  m.triangles.push_back({a, b, c});
  m.triangles.push_back({a, c, d});
}

uint64_t mix_seed(uint64_t seed, uint64_t frame) {
  return seed ^ (0x9e3779b97f4a7c15ULL * (frame + 1));
}

UnitVec3 hemisphere_dir(const Vec3& n, double u1, double u2) {
  const double z = u1;
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  const double phi = kTwoPi * u2;
  Vec3 t, b;
  const UnitVec3 nu = UnitVec3::from_unit(n);
  orthonormal_basis(nu, t, b);
  return UnitVec3(r * std::cos(phi) * t + r * std::sin(phi) * b + z * n);
}

}  // namespace

TriangleMesh make_plane_mesh(double half_x, double half_z, double y) {
  if (!(half_x > 0) || !(half_z > 0)) {
    throw std::invalid_argument("make_plane_mesh: extents must be positive");
  }
  TriangleMesh m;
  m.vertices = {{-half_x, y, -half_z},
                {half_x, y, -half_z},
                {half_x, y, half_z},
                {-half_x, y, half_z}};
  m.triangles = {{0, 2, 1}, {0, 3, 2}};  // +y winding
  m.finalize();
  return m;
}

TriangleMesh make_box_mesh(const Vec3& lo, const Vec3& hi, bool skip_top, bool skip_bottom) {
  if (!(lo.x < hi.x && lo.y < hi.y && lo.z < hi.z)) {
    throw std::invalid_argument("make_box_mesh: lo must be strictly below hi");
  }
  TriangleMesh m;
  for (int i = 0; i < 8; ++i) {
    m.vertices.push_back({(i & 1) ? hi.x : lo.x, (i & 2) ? hi.y : lo.y, (i & 4) ? hi.z : lo.z});
  }
  if (!skip_bottom) push_quad(m, 0, 1, 5, 4);  // -y
  if (!skip_top) push_quad(m, 2, 6, 7, 3);     // +y
  push_quad(m, 0, 2, 3, 1);                    // -z
  push_quad(m, 4, 5, 7, 6);                    // +z
  push_quad(m, 0, 4, 6, 2);                    // -x
  push_quad(m, 1, 3, 7, 5);                    // +x
  m.finalize();
  return m;
}

TriangleMesh make_icosphere_mesh(const Vec3& center, double radius, int subdivisions) {
  if (!(radius > 0) || subdivisions < 0 || subdivisions > 6) {
    throw std::invalid_argument("make_icosphere_mesh: bad radius or subdivision count");
  }
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> verts = {{-1, t, 0}, {1, t, 0},   {-1, -t, 0}, {1, -t, 0},
                             {0, -1, t}, {0, 1, t},   {0, -1, -t}, {0, 1, -t},
                             {t, 0, -1}, {t, 0, 1},   {-t, 0, -1}, {-t, 0, 1}};
  for (Vec3& v : verts) v = normalize(v);
  std::vector<std::array<uint32_t, 3>> faces = {
      {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
      {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
      {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
      {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int level = 0; level < subdivisions; ++level) {
    std::map<std::pair<uint32_t, uint32_t>, uint32_t> midpoint;
    auto mid = [&](uint32_t a, uint32_t b) {
      const auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      const uint32_t idx = static_cast<uint32_t>(verts.size());
      verts.push_back(normalize(verts[a] + verts[b]));
      midpoint.emplace(key, idx);
      return idx;
    };
    std::vector<std::array<uint32_t, 3>> next;
    next.reserve(faces.size() * 4);
    for (const auto& f : faces) {
      const uint32_t ab = mid(f[0], f[1]), bc = mid(f[1], f[2]), ca = mid(f[2], f[0]);
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    faces = std::move(next);
  }
  TriangleMesh m;
  m.vertices.reserve(verts.size());
  for (const Vec3& v : verts) m.vertices.push_back(center + radius * v);
  m.triangles = std::move(faces);
  m.finalize();
  return m;
}

void SceneDescription::finalize() {
  if (objects.empty()) {
    throw std::invalid_argument("SceneDescription: no objects");
  }
  merged = {};
  tri_object.clear();
  for (size_t oi = 0; oi < objects.size(); ++oi) {
    TriangleMesh& src = objects[oi].mesh;
    src.finalize();  // drop degenerates per object, before indices are merged
    const uint32_t base = static_cast<uint32_t>(merged.vertices.size());
    merged.vertices.insert(merged.vertices.end(), src.vertices.begin(), src.vertices.end());
    for (const auto& tri : src.triangles) {
      merged.triangles.push_back({tri[0] + base, tri[1] + base, tri[2] + base});
      tri_object.push_back(static_cast<uint32_t>(oi));
    }
  }
  merged.finalize();
  if (merged.triangle_count() != tri_object.size()) {
    throw std::logic_error("SceneDescription: merge dropped triangles");
  }
  accel = build_mesh_bvh(merged);
  extent = merged.bounds().max_extent();
}

LightAngleTable SceneDescription::angle_table() const {
  std::vector<double> rad;
  rad.reserve(light_angles_deg.size());
  for (double deg : light_angles_deg) rad.push_back(deg * kPi / 180.0);
  return LightAngleTable(std::move(rad));
}

Material SceneDescription::material_at(uint32_t tri, const Vec3& point) const {
  const SceneObject& obj = objects.at(tri_object.at(tri));
  if (!obj.checker) return obj.material;
  const long long cx = static_cast<long long>(std::floor(point.x / obj.checker_scale));
  const long long cz = static_cast<long long>(std::floor(point.z / obj.checker_scale));
  const bool odd = ((cx + cz) % 2 + 2) % 2 == 1;
  return Material(odd ? obj.albedo2 : obj.material.albedo, obj.material.roughness);
}

EnvironmentMap make_gt_env() {
  const int h = 16, w = 32;
  ImageBuffer img(w, h, 3);
  const Vec3 sun_dir = normalize({0.45, 0.55, -0.7});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double u = (x + 0.5) / w;
      const double v = (y + 0.5) / h;
      const double theta = kPi * v;
      const double phi = (u - 0.5) * kTwoPi;
      const Vec3 dir{std::sin(phi) * std::sin(theta), std::cos(theta),
                     -std::cos(phi) * std::sin(theta)};
      const double base = 0.18 + 0.5 * (1.0 - v);
      Vec3 c{base * (0.75 + 0.25 * std::sin(phi)), base * (0.8 + 0.2 * std::cos(2.0 * phi + 1.0)),
             base * (0.85 + 0.15 * std::sin(phi + 2.0))};
      const double sun = std::exp((dot(dir, sun_dir) - 1.0) / 0.015);
      c = c + sun * Vec3{4.2, 3.8, 3.1};
      img.set_rgb(x, y, c);
    }
  }
  return EnvironmentMap::from_radiance(img);
}

SceneDescription make_scene(const std::string& name) {
  SceneDescription scene;
  scene.env = make_gt_env();
  scene.light_angles_deg = {0.0, 120.0, 240.0};

  SceneObject floor;
  floor.name = "floor";
  floor.mesh = make_plane_mesh(1.5, 1.5, 0.0);
  floor.material = Material({0.72, 0.70, 0.66}, 0.8);
  floor.checker = true;
  floor.albedo2 = {0.22, 0.24, 0.28};
  floor.checker_scale = 0.5;

  if (name == "shadow-box") {
    SceneObject box;
    box.name = "box";
    box.mesh = make_box_mesh({-0.35, 0.0, -0.35}, {0.35, 0.7, 0.35}, /*skip_top=*/true,
                             /*skip_bottom=*/true);
    box.material = Material({0.62, 0.30, 0.18}, 0.5);
    scene.objects = {floor, box};
  } else if (name == "sphere-plane") {
    SceneObject ball;
    ball.name = "sphere";
    ball.mesh = make_icosphere_mesh({0.0, 0.5, 0.0}, 0.5, 3);
    ball.material = Material({0.60, 0.65, 0.75}, 0.4);
    scene.objects = {floor, ball};
  } else if (name == "two-box-cavity") {
    SceneObject a, b;
    a.name = "box_a";
    a.mesh = make_box_mesh({-0.5, 0.0, -0.3}, {-0.1, 0.6, 0.3}, false, /*skip_bottom=*/true);
    a.material = Material({0.70, 0.45, 0.20}, 0.6);
    b.name = "box_b";
    b.mesh = make_box_mesh({0.1, 0.0, -0.3}, {0.5, 0.6, 0.3}, false, /*skip_bottom=*/true);
    b.material = Material({0.25, 0.45, 0.70}, 0.6);
    scene.objects = {floor, a, b};
  } else {
    throw std::invalid_argument("make_scene: unknown scene '" + name + "'");
  }
  scene.finalize();
  return scene;
}

Camera make_orbit_camera(int index, int split, int resolution) {
  if (index < 0 || resolution < 2) {
    throw std::invalid_argument("make_orbit_camera: bad index or resolution");
  }
  const double golden = 0.6180339887498949;
  const double plastic = 0.7548776662466927;
  auto frac = [](double x) { return x - std::floor(x); };
  const double az = kTwoPi * frac(index * golden + (split ? 0.5 * golden : 0.0));
  const double elev = 0.26 + 0.75 * frac(index * plastic + (split ? 0.31 : 0.13));
  const double radius = 2.8;
  const Vec3 eye{radius * std::cos(elev) * std::sin(az), radius * std::sin(elev),
                 radius * std::cos(elev) * std::cos(az)};
  const Vec3 focus{0.0, 0.35, 0.0};
  return Camera::from_fov_x(resolution, resolution, kOrbitFov,
                            look_at_rotation(eye, focus, {0.0, 1.0, 0.0}), eye);
}

Vec3 oracle_brdf(const Material& mat, const UnitVec3& n, const UnitVec3& omega_i,
                 const UnitVec3& omega_o) {
  const double ni = dot(n.vec(), omega_i.vec());
  const double no = dot(n.vec(), omega_o.vec());
  if (!(ni > 0.0) || !(no > 0.0)) return {};
  const Vec3 h = normalize(omega_i.vec() + omega_o.vec());
  const double nh = dot(n.vec(), h);
  const double hi = clamp(dot(h, omega_i.vec()), 0.0, 1.0);
  const double s = sqr(sqr(mat.roughness));
  const double q = nh * nh * (s - 1.0) + 1.0;
  const double d = s / (kPi * q * q);
  const double g1i = 2.0 * ni / (ni + std::sqrt(s + (1.0 - s) * ni * ni));
  const double g1o = 2.0 * no / (no + std::sqrt(s + (1.0 - s) * no * no));
  const double f = kOracleF0 + (1.0 - kOracleF0) * std::pow(1.0 - hi, 5.0);
  const double spec = d * g1i * g1o * f / (4.0 * ni * no);
  return mat.albedo / kPi + Vec3{spec, spec, spec};
}

ImageBuffer path_trace(const SceneDescription& scene, const Camera& camera, int k, int spp,
                       int max_bounces, uint64_t seed) {
  if (spp < 1 || max_bounces < 1) {
    throw std::invalid_argument("path_trace: spp and max_bounces must be >= 1");
  }
  const LightAngleTable table = scene.angle_table();
  if (k < 0 || k >= table.count()) {
    throw std::invalid_argument("path_trace: light index out of range");
  }
  if (!scene.objects.empty() && scene.merged.empty()) {
    throw std::logic_error("path_trace: scene not finalized");
  }
  const bool has_geo = !scene.merged.empty();
  const double t_min = 1e-6 * (scene.extent > 0 ? scene.extent : 1.0);
  const int w = camera.width(), h = camera.height();
  ImageBuffer img(w, h, 4);
  parallel_for(static_cast<size_t>(w) * h, [&](size_t pix) {
    const int px = static_cast<int>(pix % w), py = static_cast<int>(pix / w);
    Vec3 acc{};
    double acc_alpha = 0.0;
    for (int s = 0; s < spp; ++s) {
      DetRng rng(seed, pix, static_cast<uint64_t>(s), static_cast<uint64_t>(k), kSaltPath);
      Ray ray = camera.ray_for_pixel(px + rng.uniform(), py + rng.uniform());
      Vec3 throughput{1.0, 1.0, 1.0};
      for (int bounce = 0;; ++bounce) {
        std::optional<MeshHit> hit;
        if (has_geo) hit = ray_mesh_intersect(scene.accel, scene.merged, ray);
        if (!hit) {
          acc = acc + throughput * env_lookup_rotated(scene.env, ray.dir, k, table);
          break;
        }
        if (bounce == 0) acc_alpha += 1.0;
        if (bounce >= max_bounces) break;
        Vec3 n = hit->normal;
        if (dot(n, ray.dir.vec()) > 0.0) n = -1.0 * n;
        const UnitVec3 omega_o = -ray.dir;
        const Material mat = scene.material_at(hit->tri, hit->point);
        const double u1 = rng.uniform(), u2 = rng.uniform();
        const UnitVec3 omega_i = hemisphere_dir(n, u1, u2);
        const Vec3 f = oracle_brdf(mat, UnitVec3::from_unit(n), omega_i, omega_o);
        throughput = throughput * (f * (u1 * kTwoPi));
        const double t_max = std::max({throughput.x, throughput.y, throughput.z});
        if (!(t_max > 0.0)) break;
        if (bounce >= 3) {
          const double p = std::min(1.0, t_max);
          if (rng.uniform() >= p) break;
          throughput = throughput / p;
        }
        ray = Ray(hit->point, omega_i, t_min);
      }
    }
    const double inv = 1.0 / spp;
    img.at(px, py, 0) = acc.x * inv;
    img.at(px, py, 1) = acc.y * inv;
    img.at(px, py, 2) = acc.z * inv;
    img.at(px, py, 3) = acc_alpha * inv;
  });
  return img;
}

double oracle_ao(const SceneDescription& scene, const Vec3& x, const UnitVec3& n, int n_samples,
                 uint64_t seed, uint64_t key) {
  if (n_samples < 1) throw std::invalid_argument("oracle_ao: n_samples must be >= 1");
  const double t_min = 1e-6 * (scene.extent > 0 ? scene.extent : 1.0);
  double open = 0.0;
  for (int s = 0; s < n_samples; ++s) {
    DetRng rng(seed, key, static_cast<uint64_t>(s), 0, kSaltAo);
    const UnitVec3 dir = hemisphere_dir(n.vec(), rng.uniform(), rng.uniform());
    if (!ray_mesh_intersect(scene.accel, scene.merged, Ray(x, dir, t_min))) open += 1.0;
  }
  return open / n_samples;
}

GtMaps render_gt_maps(const SceneDescription& scene, const Camera& camera, int spp,
                      int ao_samples, uint64_t seed) {
  if (spp < 1) throw std::invalid_argument("render_gt_maps: spp must be >= 1");
  const int w = camera.width(), h = camera.height();
  GtMaps maps{ImageBuffer(w, h, 4), ImageBuffer(w, h, 1), ImageBuffer(w, h, 3),
              ImageBuffer(w, h, 1)};
  parallel_for(static_cast<size_t>(w) * h, [&](size_t pix) {
    const int px = static_cast<int>(pix % w), py = static_cast<int>(pix / w);
    Vec3 alb{}, nrm{};
    double rough = 0.0, ao = 0.0;
    int hits = 0;
    for (int s = 0; s < spp; ++s) {
      DetRng rng(seed, pix, static_cast<uint64_t>(s), 0, kSaltGt);
      const Ray ray = camera.ray_for_pixel(px + rng.uniform(), py + rng.uniform());
      const auto hit = ray_mesh_intersect(scene.accel, scene.merged, ray);
      if (!hit) continue;
      ++hits;
      Vec3 n = hit->normal;
      if (dot(n, ray.dir.vec()) > 0.0) n = -1.0 * n;
      const Material mat = scene.material_at(hit->tri, hit->point);
      alb = alb + mat.albedo;
      rough += mat.roughness;
      nrm = nrm + n;
      ao += oracle_ao(scene, hit->point, UnitVec3::from_unit(n), ao_samples, seed,
                      pix * static_cast<uint64_t>(spp) + s);
    }
    if (hits > 0) {
      const double inv = 1.0 / hits;
      maps.albedo.set_rgb(px, py, alb * inv);
      maps.roughness.at(px, py, 0) = rough * inv;
      const Vec3 mean_n = nrm * inv;
      const double len = norm(mean_n);
      if (len > 0.0) {
        const Vec3 unit_n = mean_n / len;
        maps.normal.at(px, py, 0) = unit_n.x;
        maps.normal.at(px, py, 1) = unit_n.y;
        maps.normal.at(px, py, 2) = unit_n.z;
      }
      maps.ao.at(px, py, 0) = ao * inv;
    }
    maps.albedo.at(px, py, 3) = static_cast<double>(hits) / spp;
  });
  return maps;
}

namespace {

nlohmann::json camera_json(const Camera& cam, double angle_deg, const std::string& file_path) {
  nlohmann::json mat = nlohmann::json::array();
  const Mat3& r = cam.rotation();
  const Vec3& c = cam.center();
  for (int row = 0; row < 3; ++row) {
    mat.push_back({r(row, 0), r(row, 1), r(row, 2), c[row]});
  }
  mat.push_back({0.0, 0.0, 0.0, 1.0});
  return {{"file_path", file_path}, {"transform_matrix", mat}, {"light_angle_deg", angle_deg}};
}

std::string frame_name(int view, int k) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "r_%03d_k%d", view, k);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("gen_dataset: cannot open " + path.string());
  out << text;
  if (!out) throw std::runtime_error("gen_dataset: write failed for " + path.string());
}

}  // namespace

void gen_dataset(const DatasetConfig& cfg, const std::string& out_dir) {
  const int K = static_cast<int>(cfg.angles_deg.size());
  if (K < 1 || cfg.n_train < 1 || cfg.n_test < 0 || cfg.resolution < 8 || cfg.spp < 1 ||
      cfg.gt_spp < 1 || cfg.ao_samples < 1) {
    throw std::invalid_argument("gen_dataset: bad config");
  }
  SceneDescription scene = make_scene(cfg.scene);
  scene.light_angles_deg = cfg.angles_deg;

  namespace fs = std::filesystem;
  const fs::path root(out_dir);
  fs::create_directories(root / "train");
  fs::create_directories(root / "test");

  const double fov_x = 2.0 * std::atan(0.5 * cfg.resolution /
                                       make_orbit_camera(0, 0, cfg.resolution).fx());

  nlohmann::json train_frames = nlohmann::json::array();
  for (int v = 0; v < cfg.n_train; ++v) {
    const Camera cam = make_orbit_camera(v, 0, cfg.resolution);
    for (int k = 0; k < K; ++k) {
      const std::string name = frame_name(v, k);
      const uint64_t frame_seed = mix_seed(cfg.seed, static_cast<uint64_t>(v) * K + k);
      const ImageBuffer img =
          path_trace(scene, cam, k, cfg.spp, cfg.max_bounces, frame_seed);
      save_pfm((root / "train" / (name + ".pfm")).string(), img);
      save_png((root / "train" / (name + ".png")).string(), img);
      train_frames.push_back(camera_json(cam, cfg.angles_deg[k], "./train/" + name));
    }
  }
  nlohmann::json train_root = {{"camera_angle_x", fov_x}, {"frames", train_frames}};
  write_text(root / "transforms_train.json", train_root.dump(2) + "\n");

  nlohmann::json test_frames = nlohmann::json::array();
  for (int v = 0; v < cfg.n_test; ++v) {
    const Camera cam = make_orbit_camera(v, 1, cfg.resolution);
    const int k = v % K;
    const std::string name = frame_name(v, k);
    const uint64_t frame_seed = mix_seed(cfg.seed, 1000000 + static_cast<uint64_t>(v));
    const ImageBuffer img = path_trace(scene, cam, k, cfg.spp, cfg.max_bounces, frame_seed);
    save_pfm((root / "test" / (name + ".pfm")).string(), img);
    save_png((root / "test" / (name + ".png")).string(), img);
    test_frames.push_back(camera_json(cam, cfg.angles_deg[k], "./test/" + name));

    const GtMaps gt = render_gt_maps(scene, cam, cfg.gt_spp, cfg.ao_samples,
                                     mix_seed(cfg.seed, 2000000 + static_cast<uint64_t>(v)));
    char idx[16];
    std::snprintf(idx, sizeof(idx), "%03d", v);
    save_pfm((root / "test" / ("gt_albedo_" + std::string(idx) + ".pfm")).string(), gt.albedo);
    save_pfm((root / "test" / ("gt_roughness_" + std::string(idx) + ".pfm")).string(),
             gt.roughness);
    save_pfm((root / "test" / ("gt_normal_" + std::string(idx) + ".pfm")).string(), gt.normal);
    save_pfm((root / "test" / ("gt_ao_" + std::string(idx) + ".pfm")).string(), gt.ao);
  }
  nlohmann::json test_root = {{"camera_angle_x", fov_x}, {"frames", test_frames}};
  write_text(root / "transforms_test.json", test_root.dump(2) + "\n");

  save_obj((root / "gt_mesh.obj").string(), scene.merged);
  save_env((root / "gt_env.pfm").string(), scene.env);
}

}  // namespace rotir
