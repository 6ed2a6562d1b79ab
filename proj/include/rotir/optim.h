#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rotir/cache.h"
#include "rotir/envlight.h"
#include "rotir/image.h"
#include "rotir/shading.h"

namespace rotir {

// Standard bias-corrected Adam over one flat parameter vector. Moments are
// lazily sized on the first step.
struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<double> m, v;
  int64_t t = 0;

  void step(std::vector<double>& params, const std::vector<double>& grad, double lr);
};

// Named flat parameter groups, each with its own learning rate, gradient
// buffer, and Adam state. Every trainable scalar lives in exactly one group.
class ParamStore {
 public:
  struct Group {
    std::string name;
    std::vector<double> value;
    std::vector<double> grad;
    double lr = 1e-3;
    bool trainable = true;
    Adam adam;
  };

  // References stay valid across later add() calls.
  Group& add(const std::string& name, size_t size, double lr, bool trainable = true);
  Group& at(const std::string& name);
  const Group& at(const std::string& name) const;
  bool has(const std::string& name) const;
  size_t group_count() const { return groups_.size(); }
  Group& group(size_t i) { return *groups_[i]; }
  const Group& group(size_t i) const { return *groups_[i]; }

  void zero_grad();
  // One Adam step on every trainable group with its own learning rate.
  void adam_step();

 private:
  std::vector<std::unique_ptr<Group>> groups_;
};

// Minimal reverse-mode scalar tape: the gradient-engine contract in a form
// small enough to verify directly. Module-level backward passes (blend, env,
// cache, shade) are hand-written against the same convention and checked by
// finite differences.
class Tape {
 public:
  int leaf(double v);
  double value(int i) const { return vals_[i]; }

  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int div(int a, int b);
  int neg(int a);
  int sqr(int a);
  int exp_(int a);
  int log_(int a);
  int softplus_(int a);
  int sigmoid_(int a);
  int relu(int a);
  int abs_(int a);  // subgradient 0 at 0

  // Adjoints of every node for d loss / d node; leaves included.
  std::vector<double> backward(int loss) const;

 private:
  struct Rec {
    int a = -1, b = -1;
    double da = 0, db = 0;
    const char* op = "leaf";
  };
  int push(double v, Rec r);
  std::vector<double> vals_;
  std::vector<Rec> recs_;
};

// --- loss stack ----------------------------------------------------------

// Mean absolute error over pixels whose mask value exceeds 0.5 (all pixels
// when mask is null). Empty mask -> 0 with a stderr warning.
double loss_mae(const ImageBuffer& a, const ImageBuffer& b, const ImageBuffer* mask = nullptr);
// d loss / d a, accumulated into d_a (same shape as a).
void loss_mae_backward(const ImageBuffer& a, const ImageBuffer& b, const ImageBuffer* mask,
                       double dl, ImageBuffer& d_a);

// Binary cross-entropy of rendered alpha against a {0,1} ground-truth mask;
// exact 0 when alpha == mask everywhere.
double loss_mask_bce(const ImageBuffer& alpha, const ImageBuffer& gt_mask);
void loss_mask_bce_backward(const ImageBuffer& alpha, const ImageBuffer& gt_mask, double dl,
                            ImageBuffer& d_alpha);

// Edge-aware smoothness: mean over horizontal+vertical neighbor pairs of
// |map difference| * exp(-|guide difference|), channel-averaged.
double loss_smooth(const ImageBuffer& map, const ImageBuffer& guide);
void loss_smooth_backward(const ImageBuffer& map, const ImageBuffer& guide, double dl,
                          ImageBuffer& d_map);

// Mean squared difference of horizontally (wrapped) and vertically (clamped)
// adjacent environment texels, on the softplus radiance.
double loss_light_smooth(const EnvironmentMap& env);
void loss_light_smooth_backward(const EnvironmentMap& env, double dl, std::vector<double>& grad_raw);

// Mean |texel channel - texel mean|: pulls the environment toward gray.
double loss_light_white(const EnvironmentMap& env);
void loss_light_white_backward(const EnvironmentMap& env, double dl, std::vector<double>& grad_raw);

// --- residual constraint -----------------------------------------------------

struct ResidualConfig {
  int n_inner = 16;  // hemisphere samples per surface point
  uint64_t seed = 0;
  bool stop_grad_shading = false;  // ablation: residual gradients reach only the cache
};

using MaterialQuery = std::function<Material(const SurfaceSample&)>;
using MaterialGradSink =
    std::function<void(const SurfaceSample&, const Vec3& d_albedo, double d_roughness)>;

// mean_i,c |R_k(p_i, dir_i) - L_o(p_i, dir_i)| with k drawn uniformly per
// sample and L_o shaded through `backend` (whose incident queries re-enter the
// caches when the backend is wired that way).
double loss_residual(const std::vector<SurfaceSample>& samples,
                     const std::vector<RadianceCache>& caches, const IncidentBackend& backend,
                     const MaterialQuery& material, const ResidualConfig& cfg);

// Adds the direct R_k term into cache_grads[k] and routes shading gradients to
// the material sink; env/cache gradients inside shade flow through whatever
// sinks the caller registered on the backend. stop_grad_shading skips the
// shading backward entirely. Returns the loss.
double loss_residual_backward(const std::vector<SurfaceSample>& samples,
                              const std::vector<RadianceCache>& caches,
                              const IncidentBackend& backend, const MaterialQuery& material,
                              const ResidualConfig& cfg,
                              std::vector<std::vector<double>>& cache_grads,
                              const MaterialGradSink& material_grad);

struct LossWeights {
  double lambda_residual = 10.0;
  double mask = 0.1;
  double albedo_smooth = 0.01;
  double light_smooth = 0.01;
  double rough_smooth = 0.001;
  double light_white = 0.001;
};

struct LossReport {
  double data = 0, cache = 0, residual = 0;
  double mask = 0, albedo_smooth = 0, light_smooth = 0, rough_smooth = 0, light_white = 0;
  double total = 0;

  // total = data + cache + lambda*residual + weighted regularizers
  void finalize(const LossWeights& w) {
    total = data + cache + w.lambda_residual * residual + w.mask * mask +
            w.albedo_smooth * albedo_smooth + w.light_smooth * light_smooth +
            w.rough_smooth * rough_smooth + w.light_white * light_white;
  }
};

// Loss-curve CSV with %.17g fields: identical runs serialize byte-identically.
std::string loss_csv_header();
std::string loss_csv_row(int step, const LossReport& r);

}  // namespace rotir
