#include "rotir/shading.h"

#include <cmath>

#include "rotir/rng.h"

namespace rotir {

namespace {

constexpr double kF0 = 0.04;
constexpr uint64_t kSaltShade = 0x31;
constexpr uint64_t kSaltAo = 0x32;

struct GgxTerms {
  double ni, no, nh, hi;
  double q, d;        // GGX normal distribution
  double ki, ko;      // Smith G1 radicals
  double g1i, g1o, f; // masking terms and Fresnel
  double spec;
  bool lit;
};

GgxTerms ggx_terms(const Material& m, const UnitVec3& n, const UnitVec3& omega_i,
                   const UnitVec3& omega_o) {
  GgxTerms t{};
  t.ni = dot(n.vec(), omega_i.vec());
  t.no = dot(n.vec(), omega_o.vec());
  t.lit = t.ni > 0 && t.no > 0;
  if (!t.lit) return t;
  const Vec3 h = normalize(omega_i.vec() + omega_o.vec());
  t.nh = dot(n.vec(), h);
  t.hi = clamp(dot(h, omega_i.vec()), 0.0, 1.0);
  const double s = sqr(sqr(m.roughness));  // alpha^2, alpha = roughness^2
  t.q = t.nh * t.nh * (s - 1.0) + 1.0;
  t.d = s / (kPi * t.q * t.q);
  t.ki = std::sqrt(s + (1.0 - s) * t.ni * t.ni);
  t.ko = std::sqrt(s + (1.0 - s) * t.no * t.no);
  t.g1i = 2.0 * t.ni / (t.ni + t.ki);
  t.g1o = 2.0 * t.no / (t.no + t.ko);
  t.f = kF0 + (1.0 - kF0) * std::pow(1.0 - t.hi, 5.0);
  t.spec = t.d * t.g1i * t.g1o * t.f / (4.0 * t.ni * t.no);
  return t;
}

// (sx, sy) strata grid with sx * sy == n, as square as n's factors allow.
std::pair<int, int> strata_shape(int n) {
  int sx = static_cast<int>(std::floor(std::sqrt(static_cast<double>(n))));
  while (sx > 1 && n % sx != 0) --sx;
  return {sx, n / sx};
}

// Stratum s of the uniform hemisphere about n: z stratified over sx bins,
// azimuth over sy bins, jittered by the sample's own rng.
UnitVec3 hemisphere_sample(const UnitVec3& n, int s, int sx, int sy, DetRng& rng) {
  const int i = s / sy, j = s % sy;
  const double z = (i + rng.uniform()) / sx;
  const double phi = kTwoPi * (j + rng.uniform()) / sy;
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  Vec3 t, b;
  orthonormal_basis(n, t, b);
  return UnitVec3(r * std::cos(phi) * t + r * std::sin(phi) * b + z * n.vec());
}

}  // namespace

Vec3 brdf_eval(const Material& m, const UnitVec3& n, const UnitVec3& omega_i,
               const UnitVec3& omega_o) {
  const GgxTerms t = ggx_terms(m, n, omega_i, omega_o);
  if (!t.lit) return {};
  return m.albedo / kPi + Vec3(t.spec, t.spec, t.spec);
}

BrdfGrad brdf_backward(const Material& m, const UnitVec3& n, const UnitVec3& omega_i,
                       const UnitVec3& omega_o, const Vec3& dl_df) {
  BrdfGrad g;
  const GgxTerms t = ggx_terms(m, n, omega_i, omega_o);
  if (!t.lit) return g;
  g.d_albedo = dl_df / kPi;

  const double s = sqr(sqr(m.roughness));
  const double dd_ds = (t.q - 2.0 * s * t.nh * t.nh) / (kPi * t.q * t.q * t.q);
  const double dki_ds = (1.0 - t.ni * t.ni) / (2.0 * t.ki);
  const double dko_ds = (1.0 - t.no * t.no) / (2.0 * t.ko);
  const double dg1i_ds = -2.0 * t.ni / sqr(t.ni + t.ki) * dki_ds;
  const double dg1o_ds = -2.0 * t.no / sqr(t.no + t.ko) * dko_ds;
  const double dspec_ds = (dd_ds * t.g1i * t.g1o + t.d * dg1i_ds * t.g1o + t.d * t.g1i * dg1o_ds) *
                          t.f / (4.0 * t.ni * t.no);
  const double ds_dr = 4.0 * m.roughness * sqr(m.roughness);
  g.d_roughness = (dl_df.x + dl_df.y + dl_df.z) * dspec_ds * ds_dr;
  return g;
}

GaussianBackend::GaussianBackend(const GaussianScene& scene, const GaussAccel* accel,
                                 const EnvironmentMap& env, const LightAngleTable& table,
                                 double offset_factor)
    : scene_(scene), accel_(accel), env_(env), table_(table), offset_(offset_factor) {
  extent_ = scene.size() == 0 ? 1.0 : scene.scene_bounds().max_extent();
}

Vec3 GaussianBackend::incident(const Vec3& x, const UnitVec3& dir, int k) const {
  const GaussTrace tr = trace_gaussians(x, dir, offset_, extent_, scene_, accel_);
  return tr.color + (1.0 - tr.alpha) * env_lookup_rotated(env_, dir, k, table_);
}

double GaussianBackend::visibility(const Vec3& x, const UnitVec3& dir) const {
  return 1.0 - trace_gaussians(x, dir, offset_, extent_, scene_, accel_).alpha;
}

void GaussianBackend::incident_backward(const Vec3& x, const UnitVec3& dir, int k,
                                        const Vec3& dl_drgb) const {
  if (!env_grad_) return;
  const GaussTrace tr = trace_gaussians(x, dir, offset_, extent_, scene_, accel_);
  env_lookup_rotated_backward(env_, dir, k, table_, (1.0 - tr.alpha) * dl_drgb, *env_grad_);
}

MeshBackend::MeshBackend(const TriangleMesh& mesh, const Bvh& bvh, const EnvironmentMap& env,
                         const LightAngleTable& table, CacheQuery cache, double t_min_scale)
    : mesh_(mesh), bvh_(bvh), env_(env), table_(table), cache_(std::move(cache)) {
  const double extent = mesh.empty() ? 1.0 : mesh.bounds().max_extent();
  t_min_ = t_min_scale * extent;
}

Vec3 MeshBackend::incident(const Vec3& x, const UnitVec3& dir, int k) const {
  const Ray ray(x, dir, t_min_);
  if (const auto hit = ray_mesh_intersect(bvh_, mesh_, ray)) {
    return cache_(hit->point, -dir, k);
  }
  return env_lookup_rotated(env_, dir, k, table_);
}

double MeshBackend::visibility(const Vec3& x, const UnitVec3& dir) const {
  return ray_mesh_intersect(bvh_, mesh_, Ray(x, dir, t_min_)) ? 0.0 : 1.0;
}

void MeshBackend::incident_backward(const Vec3& x, const UnitVec3& dir, int k,
                                    const Vec3& dl_drgb) const {
  const Ray ray(x, dir, t_min_);
  if (const auto hit = ray_mesh_intersect(bvh_, mesh_, ray)) {
    if (cache_grad_) cache_grad_(hit->point, -dir, k, dl_drgb);
  } else if (env_grad_) {
    env_lookup_rotated_backward(env_, dir, k, table_, dl_drgb, *env_grad_);
  }
}

Vec3 shade(const ShadePoint& sp, const IncidentBackend& backend, int n_samples, uint64_t seed,
           uint64_t key) {
  if (n_samples < 1) throw std::invalid_argument("shade: n_samples must be >= 1");
  if (dot(sp.n.vec(), sp.omega_o.vec()) <= 0) return {};
  const auto [sx, sy] = strata_shape(n_samples);
  Vec3 sum;
  for (int s = 0; s < n_samples; ++s) {
    DetRng rng(seed, key, static_cast<uint64_t>(s), 0, kSaltShade);
    const UnitVec3 omega_i = hemisphere_sample(sp.n, s, sx, sy, rng);
    const double cos_i = dot(sp.n.vec(), omega_i.vec());
    const Vec3 f = brdf_eval(sp.material, sp.n, omega_i, sp.omega_o);
    if (f.x == 0 && f.y == 0 && f.z == 0) continue;
    const Vec3 li = backend.incident(sp.x_m, omega_i, sp.k);
    sum += f * li * cos_i;
  }
  return sum * (kTwoPi / n_samples);  // pdf = 1/2pi
}

ShadeGrad shade_backward(const ShadePoint& sp, const IncidentBackend& backend, int n_samples,
                         uint64_t seed, uint64_t key, const Vec3& dl_dout) {
  ShadeGrad g;
  if (n_samples < 1) throw std::invalid_argument("shade_backward: n_samples must be >= 1");
  if (dot(sp.n.vec(), sp.omega_o.vec()) <= 0) return g;
  const auto [sx, sy] = strata_shape(n_samples);
  const double scale = kTwoPi / n_samples;
  for (int s = 0; s < n_samples; ++s) {
    DetRng rng(seed, key, static_cast<uint64_t>(s), 0, kSaltShade);
    const UnitVec3 omega_i = hemisphere_sample(sp.n, s, sx, sy, rng);
    const double cos_i = dot(sp.n.vec(), omega_i.vec());
    const Vec3 f = brdf_eval(sp.material, sp.n, omega_i, sp.omega_o);
    if (f.x == 0 && f.y == 0 && f.z == 0) continue;
    const Vec3 li = backend.incident(sp.x_m, omega_i, sp.k);
    const double w = cos_i * scale;
    const BrdfGrad bg = brdf_backward(sp.material, sp.n, omega_i, sp.omega_o, dl_dout * li * w);
    g.d_albedo += bg.d_albedo;
    g.d_roughness += bg.d_roughness;
    backend.incident_backward(sp.x_m, omega_i, sp.k, dl_dout * f * w);
  }
  return g;
}

double ambient_occlusion(const IncidentBackend& backend, const Vec3& x_m, const UnitVec3& n,
                         int n_samples, uint64_t seed, uint64_t key) {
  if (n_samples < 1) throw std::invalid_argument("ambient_occlusion: n_samples must be >= 1");
  const auto [sx, sy] = strata_shape(n_samples);
  double sum = 0;
  for (int s = 0; s < n_samples; ++s) {
    DetRng rng(seed, key, static_cast<uint64_t>(s), 0, kSaltAo);
    sum += backend.visibility(x_m, hemisphere_sample(n, s, sx, sy, rng));
  }
  return sum / n_samples;
}

}  // namespace rotir
