#include "rotir/gsplat.h"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "rotir/parallel.h"

namespace rotir {

void GaussianScene::push_back(const Gaussian2D& g) {
  const size_t want = static_cast<size_t>(sh_basis()) * 3;
  if (g.sh.size() != want) throw std::invalid_argument("GaussianScene: sh coefficient count");
  mu.push_back(g.mu);
  quat.push_back(g.quat);
  log_su.push_back(g.log_su);
  log_sv.push_back(g.log_sv);
  opacity_logit.push_back(g.opacity_logit);
  albedo_logit.push_back(g.albedo_logit);
  roughness_logit.push_back(g.roughness_logit);
  sh.insert(sh.end(), g.sh.begin(), g.sh.end());
}

Gaussian2D GaussianScene::gaussian(size_t i) const {
  Gaussian2D g;
  g.mu = mu[i];
  g.quat = quat[i];
  g.log_su = log_su[i];
  g.log_sv = log_sv[i];
  g.opacity_logit = opacity_logit[i];
  g.albedo_logit = albedo_logit[i];
  g.roughness_logit = roughness_logit[i];
  const size_t b = static_cast<size_t>(sh_basis()) * 3;
  g.sh.assign(sh.begin() + i * b, sh.begin() + (i + 1) * b);
  return g;
}

Aabb GaussianScene::disk_bounds(size_t i) const {
  Vec3 tu, tv, n;
  quat_frame(quat[i], tu, tv, n);
  const double su = std::exp(log_su[i]), sv = std::exp(log_sv[i]);
  // 3-sigma ellipse extent per axis: 3*sqrt((su*tu_k)^2 + (sv*tv_k)^2)
  Vec3 ext;
  for (int k = 0; k < 3; ++k) ext[k] = 3.0 * std::sqrt(sqr(su * tu[k]) + sqr(sv * tv[k]));
  return {mu[i] - ext, mu[i] + ext};
}

Aabb GaussianScene::scene_bounds() const {
  Aabb b;
  for (size_t i = 0; i < size(); ++i) b.expand(disk_bounds(i));
  return b;
}

void quat_frame(const std::array<double, 4>& q, Vec3& t_u, Vec3& t_v, Vec3& n) {
  const double len = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  const double w = q[0] / len, x = q[1] / len, y = q[2] / len, z = q[3] / len;
  t_u = {1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)};
  t_v = {2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)};
  n = {2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)};
}

std::array<double, 4> quat_frame_backward(const std::array<double, 4>& q, const Vec3& d_tu,
                                          const Vec3& d_tv, const Vec3& d_n) {
  const double len = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  const double w = q[0] / len, x = q[1] / len, y = q[2] / len, z = q[3] / len;

  // Gradients w.r.t. the normalized components.
  double gw = 0, gx = 0, gy = 0, gz = 0;
  // t_u = (1-2(yy+zz), 2(xy+wz), 2(xz-wy))
  gy += -4 * y * d_tu.x;  gz += -4 * z * d_tu.x;
  gw += 2 * z * d_tu.y;   gx += 2 * y * d_tu.y;  gy += 2 * x * d_tu.y;  gz += 2 * w * d_tu.y;
  gw += -2 * y * d_tu.z;  gx += 2 * z * d_tu.z;  gy += -2 * w * d_tu.z; gz += 2 * x * d_tu.z;
  // t_v = (2(xy-wz), 1-2(xx+zz), 2(yz+wx))
  gw += -2 * z * d_tv.x;  gx += 2 * y * d_tv.x;  gy += 2 * x * d_tv.x;  gz += -2 * w * d_tv.x;
  gx += -4 * x * d_tv.y;  gz += -4 * z * d_tv.y;
  gw += 2 * x * d_tv.z;   gx += 2 * w * d_tv.z;  gy += 2 * z * d_tv.z;  gz += 2 * y * d_tv.z;
  // n = (2(xz+wy), 2(yz-wx), 1-2(xx+yy))
  gw += 2 * y * d_n.x;    gx += 2 * z * d_n.x;   gy += 2 * w * d_n.x;   gz += 2 * x * d_n.x;
  gw += -2 * x * d_n.y;   gx += -2 * w * d_n.y;  gy += 2 * z * d_n.y;   gz += 2 * y * d_n.y;
  gx += -4 * x * d_n.z;   gy += -4 * y * d_n.z;

  // Through normalization: dq = (I - qn qn^T) g / len.
  const double proj = w * gw + x * gx + y * gy + z * gz;
  return {(gw - w * proj) / len, (gx - x * proj) / len, (gy - y * proj) / len,
          (gz - z * proj) / len};
}

double gauss_value(double u, double v) {
  const double rho = u * u + v * v;
  if (rho > 9.0) return 0.0;
  return std::exp(-0.5 * rho);
}

std::optional<GaussHit> ray_gaussian_hit(const Ray& ray, const GaussianScene& scene, size_t i) {
  Vec3 tu, tv, n;
  quat_frame(scene.quat[i], tu, tv, n);
  const Vec3& d = ray.dir.vec();
  const double denom = dot(d, n);
  if (std::abs(denom) < 1e-9) return std::nullopt;
  const double t = dot(scene.mu[i] - ray.origin, n) / denom;
  if (t <= ray.t_min) return std::nullopt;
  const Vec3 local = ray.at(t) - scene.mu[i];
  const double u = dot(local, tu) / std::exp(scene.log_su[i]);
  const double v = dot(local, tv) / std::exp(scene.log_sv[i]);
  const double g = gauss_value(u, v);
  const double weight = scene.opacity(i) * g;
  if (weight < 1.0 / 255.0) return std::nullopt;
  return GaussHit{static_cast<uint32_t>(i), t, u, v, weight};
}

GaussAccel::GaussAccel(const GaussianScene& scene) {
  std::vector<Aabb> bounds(scene.size());
  for (size_t i = 0; i < scene.size(); ++i) bounds[i] = scene.disk_bounds(i);
  bvh_.build(bounds);
}

std::vector<GaussHit> collect_hits(const Ray& ray, const GaussianScene& scene,
                                   const GaussAccel* accel) {
  std::vector<GaussHit> hits;
  if (accel) {
    accel->bvh().traverse(ray, kInf, [&](uint32_t i, double t_max) {
      if (auto h = ray_gaussian_hit(ray, scene, i)) hits.push_back(*h);
      return t_max;  // need every overlapped disk, no pruning
    });
  } else {
    for (size_t i = 0; i < scene.size(); ++i)
      if (auto h = ray_gaussian_hit(ray, scene, i)) hits.push_back(*h);
  }
  std::sort(hits.begin(), hits.end(), [](const GaussHit& a, const GaussHit& b) {
    return a.t < b.t || (a.t == b.t && a.index < b.index);
  });
  return hits;
}

namespace {

// sign making the disk normal face the ray origin
inline double flip_sign(const Vec3& n, const Vec3& ray_dir) {
  return dot(n, ray_dir) > 0.0 ? -1.0 : 1.0;
}

}  // namespace

RayBlend blend_hits(const Ray& ray, const GaussianScene& scene, const Vec3& view_dir,
                    const std::vector<GaussHit>& hits) {
  RayBlend out;
  double transmittance = 1.0;
  Vec3 sum_color, sum_normal, sum_albedo;
  double sum_alpha = 0, sum_depth = 0, sum_rough = 0;
  const int basis = scene.sh_basis();

  for (const GaussHit& h : hits) {
    const double w = h.weight * transmittance;
    const Vec3 color = sh_eval(&scene.sh[h.index * basis * 3], scene.sh_degree, view_dir);
    Vec3 tu, tv, n;
    quat_frame(scene.quat[h.index], tu, tv, n);
    sum_color += w * color;
    sum_alpha += w;
    sum_depth += w * h.t;
    sum_normal += w * flip_sign(n, ray.dir.vec()) * n;
    sum_albedo += w * scene.albedo(h.index);
    sum_rough += w * scene.roughness(h.index);
    transmittance *= 1.0 - h.weight;
    if (transmittance < 1e-4) break;
  }

  out.color = sum_color;
  out.alpha = sum_alpha;
  if (sum_alpha > 0) {
    out.depth = sum_depth / sum_alpha;
    out.albedo = sum_albedo / sum_alpha;
    out.roughness = sum_rough / sum_alpha;
    const Vec3 nn = sum_normal / sum_alpha;
    out.normal = norm(nn) > 0 ? normalize(nn) : -ray.dir.vec();
  }
  return out;
}

RayBlend blend_along_ray(const Ray& ray, const GaussianScene& scene, const Vec3& view_dir,
                         const GaussAccel* accel) {
  return blend_hits(ray, scene, view_dir, collect_hits(ray, scene, accel));
}

RenderMaps render_maps(const Camera& camera, const GaussianScene& scene,
                       const GaussAccel* accel) {
  const int w = camera.width(), h = camera.height();
  RenderMaps maps{ImageBuffer(w, h, 3), ImageBuffer(w, h, 1), ImageBuffer(w, h, 1),
                  ImageBuffer(w, h, 3), ImageBuffer(w, h, 3), ImageBuffer(w, h, 1)};
  parallel_for(static_cast<size_t>(w) * h, [&](size_t pix) {
    const int x = static_cast<int>(pix % w), y = static_cast<int>(pix / w);
    const Ray ray = camera.ray_for_pixel(x + 0.5, y + 0.5);
    const RayBlend b = blend_along_ray(ray, scene, ray.dir.vec(), accel);
    maps.color.set_rgb(x, y, b.color);
    maps.alpha.at(x, y, 0) = b.alpha;
    // invalid pixels hold zeros so the buffers stay finite
    maps.depth.at(x, y, 0) = b.valid() ? b.depth : 0.0;
    maps.normal.set_rgb(x, y, b.valid() ? b.normal : Vec3());
    maps.albedo.set_rgb(x, y, b.valid() ? b.albedo : Vec3());
    maps.roughness.at(x, y, 0) = b.valid() ? b.roughness : 0.0;
  });
  return maps;
}

GaussTrace trace_gaussians(const Vec3& origin, const UnitVec3& dir, double offset_factor,
                           double scene_extent, const GaussianScene& scene,
                           const GaussAccel* accel) {
  if (offset_factor < 0) throw std::invalid_argument("trace_gaussians: offset_factor < 0");
  const Ray ray(origin, dir, offset_factor * scene_extent);
  const RayBlend b = blend_along_ray(ray, scene, ray.dir.vec(), accel);
  return {b.color, b.alpha, b.valid() ? b.depth : kInf};
}

// --- spherical harmonics ---------------------------------------------------

namespace {
constexpr double kSh0 = 0.28209479177387814;
constexpr double kSh1 = 0.4886025119029199;
constexpr double kSh2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                            -1.0925484305920792, 0.5462742152960396};
constexpr double kSh3[7] = {-0.5900435899266435, 2.890611442640554,  -0.4570457994644658,
                            0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                            -0.5900435899266435};

int sh_basis_values(int degree, const Vec3& d, double* b) {
  b[0] = kSh0;
  if (degree < 1) return 1;
  const double x = d.x, y = d.y, z = d.z;
  b[1] = -kSh1 * y;
  b[2] = kSh1 * z;
  b[3] = -kSh1 * x;
  if (degree < 2) return 4;
  const double xx = x * x, yy = y * y, zz = z * z;
  b[4] = kSh2[0] * x * y;
  b[5] = kSh2[1] * y * z;
  b[6] = kSh2[2] * (2 * zz - xx - yy);
  b[7] = kSh2[3] * x * z;
  b[8] = kSh2[4] * (xx - yy);
  if (degree < 3) return 9;
  b[9] = kSh3[0] * y * (3 * xx - yy);
  b[10] = kSh3[1] * x * y * z;
  b[11] = kSh3[2] * y * (4 * zz - xx - yy);
  b[12] = kSh3[3] * z * (2 * zz - 3 * xx - 3 * yy);
  b[13] = kSh3[4] * x * (4 * zz - xx - yy);
  b[14] = kSh3[5] * z * (xx - yy);
  b[15] = kSh3[6] * x * (xx - yy);
  return 16;
}
}  // namespace

Vec3 sh_eval(const double* coeffs, int degree, const Vec3& dir) {
  double b[16];
  const int n = sh_basis_values(degree, dir, b);
  Vec3 out(0.5, 0.5, 0.5);
  for (int i = 0; i < n; ++i) {
    out.x += b[i] * coeffs[i * 3 + 0];
    out.y += b[i] * coeffs[i * 3 + 1];
    out.z += b[i] * coeffs[i * 3 + 2];
  }
  return max(out, Vec3());
}

void sh_eval_backward(const double* coeffs, int degree, const Vec3& dir, const Vec3& d_color,
                      double* d_coeffs) {
  double b[16];
  const int n = sh_basis_values(degree, dir, b);
  Vec3 raw(0.5, 0.5, 0.5);
  for (int i = 0; i < n; ++i) {
    raw.x += b[i] * coeffs[i * 3 + 0];
    raw.y += b[i] * coeffs[i * 3 + 1];
    raw.z += b[i] * coeffs[i * 3 + 2];
  }
  // clamp subgradient: zero where the channel was clipped
  const Vec3 g(raw.x > 0 ? d_color.x : 0.0, raw.y > 0 ? d_color.y : 0.0,
               raw.z > 0 ? d_color.z : 0.0);
  for (int i = 0; i < n; ++i) {
    d_coeffs[i * 3 + 0] += b[i] * g.x;
    d_coeffs[i * 3 + 1] += b[i] * g.y;
    d_coeffs[i * 3 + 2] += b[i] * g.z;
  }
}

// --- checkpoints -------------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'R', 'O', 'T', 'I', 'R', 'G', 'S', '1'};
}

void save_gaussians(const std::string& path, const GaussianScene& scene) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_gaussians: cannot open " + path);
  f.write(kMagic, sizeof(kMagic));
  const uint64_t n = scene.size();
  const int32_t deg = scene.sh_degree;
  f.write(reinterpret_cast<const char*>(&n), sizeof(n));
  f.write(reinterpret_cast<const char*>(&deg), sizeof(deg));
  auto wd = [&](const double* p, size_t cnt) {
    f.write(reinterpret_cast<const char*>(p), cnt * sizeof(double));
  };
  for (size_t i = 0; i < n; ++i) {
    wd(&scene.mu[i].x, 3);
    wd(scene.quat[i].data(), 4);
    wd(&scene.log_su[i], 1);
    wd(&scene.log_sv[i], 1);
    wd(&scene.opacity_logit[i], 1);
    wd(scene.albedo_logit[i].data(), 3);
    wd(&scene.roughness_logit[i], 1);
    wd(&scene.sh[i * scene.sh_basis() * 3], scene.sh_basis() * 3);
  }
  if (!f) throw std::runtime_error("save_gaussians: write failed: " + path);
}

GaussianScene load_gaussians(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_gaussians: cannot open " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("load_gaussians: bad header: " + path);
  }
  uint64_t n = 0;
  int32_t deg = 0;
  f.read(reinterpret_cast<char*>(&n), sizeof(n));
  f.read(reinterpret_cast<char*>(&deg), sizeof(deg));
  if (!f || deg < 0 || deg > 3) throw std::runtime_error("load_gaussians: bad header: " + path);

  GaussianScene scene;
  scene.sh_degree = deg;
  Gaussian2D g;
  g.sh.resize(static_cast<size_t>(sh_coeff_count(deg)) * 3);
  auto rd = [&](double* p, size_t cnt) {
    f.read(reinterpret_cast<char*>(p), cnt * sizeof(double));
  };
  for (uint64_t i = 0; i < n; ++i) {
    rd(&g.mu.x, 3);
    rd(g.quat.data(), 4);
    rd(&g.log_su, 1);
    rd(&g.log_sv, 1);
    rd(&g.opacity_logit, 1);
    rd(g.albedo_logit.data(), 3);
    rd(&g.roughness_logit, 1);
    rd(g.sh.data(), g.sh.size());
    if (!f) throw std::runtime_error("load_gaussians: truncated: " + path);
    scene.push_back(g);
  }
  return scene;
}

}  // namespace rotir
