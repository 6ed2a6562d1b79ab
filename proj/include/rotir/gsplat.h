#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "rotir/bvh.h"
#include "rotir/camera.h"
#include "rotir/image.h"
#include "rotir/ray.h"

namespace rotir {

// Raw (unconstrained) parameters of one 2D Gaussian primitive. Effective
// values: s_u/s_v = exp(log_s*), opacity = sigmoid(opacity_logit), albedo =
// sigmoid(albedo_logit), roughness = 0.04 + 0.96 * sigmoid(roughness_logit).
// The quaternion (w, x, y, z) orients the disk: t_u, t_v span the plane and
// n = t_u x t_v is its normal; it is renormalized inside every evaluation.
struct Gaussian2D {
  Vec3 mu;
  std::array<double, 4> quat{1, 0, 0, 0};
  double log_su = 0, log_sv = 0;
  double opacity_logit = 0;
  std::array<double, 3> albedo_logit{0, 0, 0};
  double roughness_logit = 0;
  std::vector<double> sh;  // (degree+1)^2 coeffs x 3 channels, coeff-major
};

constexpr int sh_coeff_count(int degree) { return (degree + 1) * (degree + 1); }

// Structure-of-arrays Gaussian list; the layout the optimizer points into.
// sh is n * basis * 3 doubles, [gaussian][coeff][channel].
struct GaussianScene {
  int sh_degree = 1;
  std::vector<Vec3> mu;
  std::vector<std::array<double, 4>> quat;
  std::vector<double> log_su, log_sv;
  std::vector<double> opacity_logit;
  std::vector<std::array<double, 3>> albedo_logit;
  std::vector<double> roughness_logit;
  std::vector<double> sh;

  size_t size() const { return mu.size(); }
  int sh_basis() const { return sh_coeff_count(sh_degree); }

  void push_back(const Gaussian2D& g);
  Gaussian2D gaussian(size_t i) const;

  double opacity(size_t i) const { return sigmoid(opacity_logit[i]); }
  Vec3 albedo(size_t i) const {
    return {sigmoid(albedo_logit[i][0]), sigmoid(albedo_logit[i][1]),
            sigmoid(albedo_logit[i][2])};
  }
  double roughness(size_t i) const { return 0.04 + 0.96 * sigmoid(roughness_logit[i]); }

  // AABB of the disk's 3-sigma support, for culling.
  Aabb disk_bounds(size_t i) const;
  Aabb scene_bounds() const;
};

// Orthonormal frame from a (possibly unnormalized) quaternion.
void quat_frame(const std::array<double, 4>& q, Vec3& t_u, Vec3& t_v, Vec3& n);
// Chain rule through quat_frame incl. the internal normalization.
std::array<double, 4> quat_frame_backward(const std::array<double, 4>& q, const Vec3& d_tu,
                                          const Vec3& d_tv, const Vec3& d_n);

// exp(-(u^2+v^2)/2) with hard support cutoff at u^2+v^2 > 9.
double gauss_value(double u, double v);

struct GaussHit {
  uint32_t index;
  double t;
  double u, v;
  double weight;  // opacity * gauss_value, >= 1/255
};

// Exact ray/disk-plane intersection. None when near-parallel (|dir.n| < 1e-9),
// t <= ray.t_min, outside the cutoff, or weight below 1/255.
std::optional<GaussHit> ray_gaussian_hit(const Ray& ray, const GaussianScene& scene, size_t i);

// BVH over disk bounds; optional accelerator for the per-ray gather.
class GaussAccel {
 public:
  explicit GaussAccel(const GaussianScene& scene);
  const Bvh& bvh() const { return bvh_; }

 private:
  Bvh bvh_;
};

struct RayBlend {
  Vec3 color;        // composited radiance (not alpha-normalized)
  double alpha = 0;  // in [0, 1]
  // Remaining fields are alpha-normalized and only valid when valid() is true.
  double depth = kInf;
  Vec3 normal;  // unit, faces the ray origin
  Vec3 albedo;
  double roughness = 0;

  bool valid() const { return alpha > 0; }
};

// Sorted front-to-back hits (ties by lower index), also the record the
// backward pass consumes.
std::vector<GaussHit> collect_hits(const Ray& ray, const GaussianScene& scene,
                                   const GaussAccel* accel = nullptr);

// Front-to-back compositing over the sorted hits; early exit when
// transmittance drops below 1e-4.
RayBlend blend_hits(const Ray& ray, const GaussianScene& scene, const Vec3& view_dir,
                    const std::vector<GaussHit>& hits);

RayBlend blend_along_ray(const Ray& ray, const GaussianScene& scene, const Vec3& view_dir,
                         const GaussAccel* accel = nullptr);

// Gradient sink with the same shapes as the scene parameters.
struct GaussGrads {
  std::vector<Vec3> mu;
  std::vector<std::array<double, 4>> quat;
  std::vector<double> log_su, log_sv;
  std::vector<double> opacity_logit;
  std::vector<std::array<double, 3>> albedo_logit;
  std::vector<double> roughness_logit;
  std::vector<double> sh;

  explicit GaussGrads(const GaussianScene& scene);
  void clear();
  void add(const GaussGrads& o);
};

// Upstream gradients for one RayBlend.
struct BlendGrad {
  Vec3 d_color;
  double d_alpha = 0;
  double d_depth = 0;
  Vec3 d_normal;
  Vec3 d_albedo;
  double d_roughness = 0;
};

// Backward through blend_hits; `hits` must be the list the forward used.
void blend_backward(const Ray& ray, const GaussianScene& scene, const Vec3& view_dir,
                    const std::vector<GaussHit>& hits, const BlendGrad& grad, GaussGrads& out);

struct RenderMaps {
  ImageBuffer color;      // 3ch
  ImageBuffer alpha;      // 1ch
  ImageBuffer depth;      // 1ch, +inf where alpha = 0
  ImageBuffer normal;     // 3ch
  ImageBuffer albedo;     // 3ch
  ImageBuffer roughness;  // 1ch
};

// blend_along_ray at every pixel center (x+0.5, y+0.5).
RenderMaps render_maps(const Camera& camera, const GaussianScene& scene,
                       const GaussAccel* accel = nullptr);

struct GaussTrace {
  Vec3 color;
  double alpha = 0;
  double depth = kInf;
};

// Incident-query ablation backend: blend with t_min = offset_factor * extent.
GaussTrace trace_gaussians(const Vec3& origin, const UnitVec3& dir, double offset_factor,
                           double scene_extent, const GaussianScene& scene,
                           const GaussAccel* accel = nullptr);

// Real SH radiance: sum of basis-weighted coeffs + 0.5 DC offset, clamped at 0.
// coeffs: basis-major, 3 channels each; degree in {0..3}.
Vec3 sh_eval(const double* coeffs, int degree, const Vec3& dir);
// d color / d coeffs (3 * basis values) given upstream d_color; respects the
// clamp's zero subgradient. Also returns d color / d dir if wanted (unused
// when the view direction is not optimized).
void sh_eval_backward(const double* coeffs, int degree, const Vec3& dir, const Vec3& d_color,
                      double* d_coeffs);

// Versioned binary checkpoint of raw parameters (field order in README).
void save_gaussians(const std::string& path, const GaussianScene& scene);
GaussianScene load_gaussians(const std::string& path);

}  // namespace rotir
