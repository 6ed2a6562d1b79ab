#pragma once

#include <functional>

#include "rotir/envlight.h"
#include "rotir/gsplat.h"
#include "rotir/meshproxy.h"

namespace rotir {

struct Material {
  Vec3 albedo;       // [0, 1] per channel
  double roughness;  // [0.04, 1]

  Material() : albedo(0.5, 0.5, 0.5), roughness(0.5) {}
  Material(const Vec3& a, double r) : albedo(clamp(a, 0.0, 1.0)), roughness(clamp(r, 0.04, 1.0)) {}
};

// Lambertian diffuse + GGX/Smith/Schlick specular with fixed F0 = 0.04 and
// alpha = roughness^2. Zero when either direction is at or below the horizon;
// symmetric in (omega_i, omega_o).
Vec3 brdf_eval(const Material& m, const UnitVec3& n, const UnitVec3& omega_i,
               const UnitVec3& omega_o);

struct BrdfGrad {
  Vec3 d_albedo;
  double d_roughness = 0;
};
BrdfGrad brdf_backward(const Material& m, const UnitVec3& n, const UnitVec3& omega_i,
                       const UnitVec3& omega_o, const Vec3& dl_df);

// Incident-radiance supplier for the reflection integral: who answers "how
// much light arrives at x from direction dir under light index k".
class IncidentBackend {
 public:
  virtual ~IncidentBackend() = default;
  virtual Vec3 incident(const Vec3& x, const UnitVec3& dir, int k) const = 0;
  // Environment visibility along (x, dir): 1 clear, 0 blocked (fractional for
  // the gaussian tracer's soft alpha).
  virtual double visibility(const Vec3& x, const UnitVec3& dir) const = 0;
  // Backward of incident() into the owned light representation (environment
  // raw parameters, cache weights); no-op by default for stub backends.
  virtual void incident_backward(const Vec3& x, const UnitVec3& dir, int k,
                                 const Vec3& dl_drgb) const {
    (void)x; (void)dir; (void)k; (void)dl_drgb;
  }
};

// Traces the gaussians themselves: incident = c_rt + (1 - alpha_rt) * E_k(dir)
// with the blend started offset_factor * extent along the ray.
class GaussianBackend : public IncidentBackend {
 public:
  GaussianBackend(const GaussianScene& scene, const GaussAccel* accel, const EnvironmentMap& env,
                  const LightAngleTable& table, double offset_factor = 0.05);

  Vec3 incident(const Vec3& x, const UnitVec3& dir, int k) const override;
  double visibility(const Vec3& x, const UnitVec3& dir) const override;
  void incident_backward(const Vec3& x, const UnitVec3& dir, int k,
                         const Vec3& dl_drgb) const override;
  void set_env_grad_sink(std::vector<double>* grad) { env_grad_ = grad; }

 private:
  const GaussianScene& scene_;
  const GaussAccel* accel_;
  const EnvironmentMap& env_;
  const LightAngleTable& table_;
  double offset_;
  double extent_;
  std::vector<double>* env_grad_ = nullptr;
};

// Answers a radiance query at a mesh point toward a direction under light k.
using CacheQuery = std::function<Vec3(const Vec3& point, const UnitVec3& toward, int k)>;
// Backward counterpart: routes dl/drgb into the cache's own parameters.
using CacheGradSink =
    std::function<void(const Vec3& point, const UnitVec3& toward, int k, const Vec3& dl_drgb)>;

// Traces the opaque proxy mesh: a hit at y answers cache_k(y, -dir); a miss
// answers the rotated environment. t_min = t_min_scale * extent keeps rays
// from re-hitting their own triangle.
class MeshBackend : public IncidentBackend {
 public:
  MeshBackend(const TriangleMesh& mesh, const Bvh& bvh, const EnvironmentMap& env,
              const LightAngleTable& table, CacheQuery cache, double t_min_scale = 1e-4);

  Vec3 incident(const Vec3& x, const UnitVec3& dir, int k) const override;
  double visibility(const Vec3& x, const UnitVec3& dir) const override;
  void incident_backward(const Vec3& x, const UnitVec3& dir, int k,
                         const Vec3& dl_drgb) const override;
  void set_env_grad_sink(std::vector<double>* grad) { env_grad_ = grad; }
  void set_cache_grad_sink(CacheGradSink sink) { cache_grad_ = std::move(sink); }

 private:
  const TriangleMesh& mesh_;
  const Bvh& bvh_;
  const EnvironmentMap& env_;
  const LightAngleTable& table_;
  CacheQuery cache_;
  double t_min_;
  std::vector<double>* env_grad_ = nullptr;
  CacheGradSink cache_grad_;
};

struct ShadePoint {
  Vec3 x;             // splatted surface point (carries the material/normal)
  Vec3 x_m;           // mesh hit point; incident queries start here
  UnitVec3 n;         // splatted shading normal
  UnitVec3 omega_o;   // toward the viewer
  Material material;
  int k = 0;          // light index
};

// Monte Carlo estimate of the reflection integral with stratified uniform
// hemisphere sampling about n (pdf 1/2pi). Sample s of n_samples is driven by
// DetRng(seed, key, s, ...), so the estimate is independent of evaluation
// order and reproducible across runs. Backfacing omega_o returns 0.
Vec3 shade(const ShadePoint& sp, const IncidentBackend& backend, int n_samples, uint64_t seed,
           uint64_t key);

struct ShadeGrad {
  Vec3 d_albedo;
  double d_roughness = 0;
};

// Replays the forward samples and accumulates d loss / d material; per-sample
// d loss / d incident is pushed through backend.incident_backward.
ShadeGrad shade_backward(const ShadePoint& sp, const IncidentBackend& backend, int n_samples,
                         uint64_t seed, uint64_t key, const Vec3& dl_dout);

// Mean environment visibility over the stratified hemisphere about n.
double ambient_occlusion(const IncidentBackend& backend, const Vec3& x_m, const UnitVec3& n,
                         int n_samples, uint64_t seed, uint64_t key);

}  // namespace rotir
