#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rotir/cache.h"
#include "rotir/envlight.h"
#include "rotir/gsplat.h"
#include "rotir/image.h"
#include "rotir/meshproxy.h"
#include "rotir/optim.h"
#include "rotir/shading.h"

namespace rotir {

struct Frame {
  ImageBuffer image;  // linear RGB + mask alpha
  Camera camera{8, 8, 4, 4, 4, 4, Mat3::identity(), Vec3{}};
  int k = 0;
  std::string name;
};

struct Dataset {
  std::vector<Frame> frames;
  LightAngleTable light_angles{std::vector<double>{0.0}};
  std::string split;

  int width() const { return frames.empty() ? 0 : frames[0].image.width(); }
  int height() const { return frames.empty() ? 0 : frames[0].image.height(); }
};

// Reads transforms_<split>.json (NeRF-Blender layout, optional per-frame
// light_angle_deg; missing angles default to 0 with a warning). The angle
// table is inferred from the distinct angles across BOTH splits so that k
// indices agree between train and test. Images load from <file_path>.pfm
// (preferred) or .png.
Dataset load_dataset(const std::string& dir, const std::string& split);

// Every knob of the run, JSON-loadable; unknown keys are rejected.
struct RunConfig {
  // experiment
  std::string dataset_dir;
  std::string out_dir = "out";
  uint64_t seed = 0;

  // dataset generation
  std::string scene = "shadow-box";
  std::vector<double> angles_deg = {0.0, 120.0, 240.0};
  int n_train = 32;
  int n_test = 8;
  int resolution = 128;
  int spp = 64;
  int max_bounces = 8;
  int gt_spp = 4;
  int ao_samples = 1024;

  // stage 1: geometry + SH fit
  int stage1_steps = 3000;
  int n_gaussians = 2000;
  int stage1_batch = 2048;  // rays per step
  int sh_degree = 1;
  bool known_geometry = false;
  double hull_bound = 1.8;  // half-extent of the init sampling cube
  double stage1_lr_position = 2e-3;
  double stage1_lr_rotation = 2e-3;
  double stage1_lr_scale = 5e-3;
  double stage1_lr_opacity = 5e-2;
  double stage1_lr_sh = 1e-2;

  // proxy mesh extraction
  int tsdf_resolution = 96;
  double tsdf_truncation = 3.0;  // voxels
  double tsdf_alpha_threshold = 0.5;
  double mesh_pad = 0.05;  // fraction of the splat bounds

  // radiance-cache pretraining
  int cache_steps = 3000;
  int cache_batch = 1024;
  double cache_lr = 1e-2;
  int cache_levels = 8;
  int cache_table_size = 1 << 14;
  int cache_features = 2;
  int cache_base_resolution = 16;
  double cache_growth = 1.5;
  int cache_n_freq = 4;
  int cache_hidden = 64;
  double cache_box_pad = 0.05;

  // stage 2: material / light / cache decomposition
  int stage2_steps = 2000;
  int stage2_batch = 128;  // shaded pixels per step
  int shade_samples = 32;
  int residual_points = 32;
  int residual_inner = 16;
  int stage2_tile = 12;  // side of the smoothness crop
  std::string backend = "mesh";   // or "gaussian"
  double gaussian_offset = 0.05;  // trace offset factor for the ablation
  int env_height = 16;
  double env_init = 0.5;
  double lr_albedo = 5e-2;
  double lr_roughness = 5e-2;
  double lr_env = 5e-2;
  double lr_cache = 1e-3;
  double lambda_residual = 10.0;
  double w_mask = 0.1;
  double w_albedo_smooth = 0.01;
  double w_light_smooth = 0.01;
  double w_rough_smooth = 0.001;
  double w_light_white = 0.001;
  bool use_residual = true;
  bool stop_grad_shading = false;
  int checkpoint_every = 0;  // 0 = final only

  // relight / render
  int relight_samples = 64;
  int relight_bounce_samples = 16;

  void validate() const;  // throws std::invalid_argument
  LossWeights loss_weights() const;
};

RunConfig load_run_config(const std::string& json_path);
std::string run_config_json(const RunConfig& cfg);  // round-trippable echo

// Fits Gaussian geometry + SH color with L1 photometric + mask BCE on random
// ray batches; fixed primitive count (no densification). Needs >= 8 views.
// known_mesh switches to known-geometry mode: Gaussians are seeded on the
// mesh, geometry is frozen, and only SH color trains. NaN loss aborts with
// the step index.
GaussianScene stage1_fit(const Dataset& train, const RunConfig& cfg,
                         const TriangleMesh* known_mesh = nullptr);

struct ProxyMesh {
  TriangleMesh mesh;
  Bvh bvh;
  uint64_t hash = 0;
};

uint64_t mesh_content_hash(const TriangleMesh& mesh);
ProxyMesh proxy_from_mesh(TriangleMesh mesh);  // known-geometry passthrough

// Splat depth/alpha from every camera -> TSDF fusion -> marching cubes.
// Throws if the surface comes out empty (suggests grid/threshold changes).
ProxyMesh extract_proxy_mesh(const GaussianScene& scene, const std::vector<Camera>& cameras,
                             const RunConfig& cfg);

struct Stage2Result {
  EnvironmentMap env{1, 0.5};
  std::vector<LossReport> history;  // one finalized report per step
};

// Optimizes per-Gaussian albedo/roughness, the environment, and the caches
// under L_data + L_cache + lambda * L_residual + regularizers. Geometry and
// SH stay frozen; the proxy mesh hash is asserted unchanged at the end.
// Mutates `scene` materials and `caches` in place.
Stage2Result stage2_decompose(const Dataset& train, GaussianScene& scene, const ProxyMesh& proxy,
                              std::vector<RadianceCache>& caches, const RunConfig& cfg);

// Stage-2-style forward render of one view (shaded rgb + splat alpha).
ImageBuffer render_shaded(const GaussianScene& scene, const ProxyMesh& proxy,
                          const EnvironmentMap& env, const std::vector<RadianceCache>& caches,
                          const LightAngleTable& table, int k, const Camera& camera,
                          const RunConfig& cfg);

// Renders under a new environment: direct light from new_env plus one
// direct-lit bounce at mesh hit points (the caches encode the training light
// and are not consulted).
ImageBuffer relight(const GaussianScene& scene, const ProxyMesh& proxy,
                    const EnvironmentMap& new_env, const Camera& camera, const RunConfig& cfg);

// Ambient-occlusion map through the configured incident backend; pixels with
// splat alpha <= 0.5 stay 0.
ImageBuffer render_ao_map(const GaussianScene& scene, const ProxyMesh* proxy,
                          const Camera& camera, const std::string& backend, double offset_factor,
                          int n_samples, uint64_t seed);

struct ViewMetrics {
  double albedo_psnr = 0;
  double albedo_ssim = 0;
  double albedo_psnr_aligned = 0;
  double albedo_ssim_aligned = 0;
  double roughness_mse = 0;
};

struct MetricsReport {
  std::vector<ViewMetrics> views;
  ViewMetrics aggregate;  // PSNR/MSE pooled over all masked pixels, SSIM averaged
};

// Masked metric primitives. PSNR caps at 100 dB; SSIM uses an 11x11 Gaussian
// window, sigma 1.5, k1 0.01 / k2 0.03 at data range 1. Empty masks throw.
double masked_psnr(const ImageBuffer& pred, const ImageBuffer& gt, const ImageBuffer& mask);
double masked_mse(const ImageBuffer& pred, const ImageBuffer& gt, const ImageBuffer& mask);
double masked_ssim(const ImageBuffer& pred, const ImageBuffer& gt, const ImageBuffer& mask);
// Per-channel least-squares scale fitting pred to gt over the mask.
Vec3 albedo_alignment_scale(const ImageBuffer& pred, const ImageBuffer& gt,
                            const ImageBuffer& mask);
ImageBuffer apply_channel_scale(const ImageBuffer& img, const Vec3& scale);

MetricsReport compute_metrics(const std::vector<ImageBuffer>& pred_albedo,
                              const std::vector<ImageBuffer>& gt_albedo,
                              const std::vector<ImageBuffer>& pred_roughness,
                              const std::vector<ImageBuffer>& gt_roughness,
                              const std::vector<ImageBuffer>& masks);
std::string metrics_csv(const MetricsReport& report);

uint64_t content_hash(const void* data, size_t bytes);
uint64_t file_content_hash(const std::string& path);

}  // namespace rotir
