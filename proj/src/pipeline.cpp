#include "rotir/pipeline.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "rotir/image_io.h"
#include "rotir/parallel.h"
#include "rotir/ray.h"
#include "rotir/rng.h"
#include "pipeline_detail.h"

namespace rotir {

namespace fs = std::filesystem;
using nlohmann::json;

// --- hashing -----------------------------------------------------------------

namespace {
constexpr uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr uint64_t kFnvPrime = 1099511628211ULL;

uint64_t fnv_extend(uint64_t h, const void* data, size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}
}  // namespace

uint64_t content_hash(const void* data, size_t bytes) {
  return fnv_extend(kFnvOffset, data, bytes);
}

uint64_t file_content_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("file_content_hash: cannot open " + path);
  uint64_t h = kFnvOffset;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    h = fnv_extend(h, buf, static_cast<size_t>(in.gcount()));
  }
  return h;
}

uint64_t mesh_content_hash(const TriangleMesh& mesh) {
  uint64_t h = kFnvOffset;
  h = fnv_extend(h, mesh.vertices.data(), mesh.vertices.size() * sizeof(Vec3));
  h = fnv_extend(h, mesh.triangles.data(), mesh.triangles.size() * sizeof(std::array<uint32_t, 3>));
  return h;
}

namespace detail {

uint64_t geometry_sh_hash(const GaussianScene& s) {
  uint64_t h = kFnvOffset;
  h = fnv_extend(h, &s.sh_degree, sizeof(s.sh_degree));
  h = fnv_extend(h, s.mu.data(), s.mu.size() * sizeof(Vec3));
  h = fnv_extend(h, s.quat.data(), s.quat.size() * sizeof(std::array<double, 4>));
  h = fnv_extend(h, s.log_su.data(), s.log_su.size() * sizeof(double));
  h = fnv_extend(h, s.log_sv.data(), s.log_sv.size() * sizeof(double));
  h = fnv_extend(h, s.opacity_logit.data(), s.opacity_logit.size() * sizeof(double));
  h = fnv_extend(h, s.sh.data(), s.sh.size() * sizeof(double));
  return h;
}

void add_scene_groups(ParamStore& store, const GaussianScene& scene, const GaussLrs& lrs,
                      const GaussTrainFlags& flags) {
  const size_t n = scene.size();
  store.add("mu", 3 * n, lrs.mu, flags.geometry);
  store.add("quat", 4 * n, lrs.quat, flags.geometry);
  store.add("log_su", n, lrs.scale, flags.geometry);
  store.add("log_sv", n, lrs.scale, flags.geometry);
  store.add("opacity_logit", n, lrs.opacity, flags.geometry);
  store.add("sh", scene.sh.size(), lrs.sh, flags.sh);
  store.add("albedo_logit", 3 * n, lrs.albedo, flags.material);
  store.add("roughness_logit", n, lrs.roughness, flags.material);

  auto& mu = store.at("mu").value;
  auto& quat = store.at("quat").value;
  for (size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) mu[3 * i + c] = scene.mu[i][c];
    for (int c = 0; c < 4; ++c) quat[4 * i + c] = scene.quat[i][c];
    for (int c = 0; c < 3; ++c) store.at("albedo_logit").value[3 * i + c] = scene.albedo_logit[i][c];
  }
  store.at("log_su").value = scene.log_su;
  store.at("log_sv").value = scene.log_sv;
  store.at("opacity_logit").value = scene.opacity_logit;
  store.at("sh").value = scene.sh;
  store.at("roughness_logit").value = scene.roughness_logit;
}

void store_to_scene(const ParamStore& store, GaussianScene& scene) {
  const size_t n = scene.size();
  const auto& mu = store.at("mu").value;
  const auto& quat = store.at("quat").value;
  const auto& alb = store.at("albedo_logit").value;
  for (size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) scene.mu[i][c] = mu[3 * i + c];
    for (int c = 0; c < 4; ++c) scene.quat[i][c] = quat[4 * i + c];
    for (int c = 0; c < 3; ++c) scene.albedo_logit[i][c] = alb[3 * i + c];
  }
  scene.log_su = store.at("log_su").value;
  scene.log_sv = store.at("log_sv").value;
  scene.opacity_logit = store.at("opacity_logit").value;
  scene.sh = store.at("sh").value;
  scene.roughness_logit = store.at("roughness_logit").value;
}

void grads_to_store(const GaussGrads& g, ParamStore& store) {
  const size_t n = g.mu.size();
  auto& mu = store.at("mu").grad;
  auto& quat = store.at("quat").grad;
  auto& alb = store.at("albedo_logit").grad;
  for (size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) mu[3 * i + c] += g.mu[i][c];
    for (int c = 0; c < 4; ++c) quat[4 * i + c] += g.quat[i][c];
    for (int c = 0; c < 3; ++c) alb[3 * i + c] += g.albedo_logit[i][c];
  }
  auto axpy = [](const std::vector<double>& src, std::vector<double>& dst) {
    for (size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
  };
  axpy(g.log_su, store.at("log_su").grad);
  axpy(g.log_sv, store.at("log_sv").grad);
  axpy(g.opacity_logit, store.at("opacity_logit").grad);
  axpy(g.sh, store.at("sh").grad);
  axpy(g.roughness_logit, store.at("roughness_logit").grad);
}

MaterialProbe probe_material(const GaussianScene& scene, const GaussAccel* accel,
                             const Vec3& point, const Vec3& normal, double extent) {
  MaterialProbe probe;
  const double lift = 0.03 * extent;
  Vec3 n = normal;
  const double len = norm(n);
  if (!(len > 1e-12)) return probe;
  n /= len;
  probe.ray = Ray(point + lift * n, UnitVec3(-n), 0.0);
  probe.view_dir = probe.ray.dir.vec();
  probe.hits = collect_hits(probe.ray, scene, accel);
  const RayBlend blend = blend_hits(probe.ray, scene, probe.view_dir, probe.hits);
  if (blend.alpha > 1e-4) {
    probe.material = Material(blend.albedo, blend.roughness);
    probe.valid = true;
  }
  return probe;
}

}  // namespace detail

// --- dataset -----------------------------------------------------------------

namespace {

json read_json_file(const std::string& path, const char* who) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument(std::string(who) + ": cannot open " + path);
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string(who) + ": " + path + ": " + e.what());
  }
}

void collect_angles(const json& j, const std::string& path, std::vector<double>& angles_deg,
                    bool& warned) {
  if (!j.contains("frames") || !j.at("frames").is_array() || j.at("frames").empty()) {
    throw std::invalid_argument("load_dataset: " + path + " has no frames");
  }
  for (const auto& f : j.at("frames")) {
    if (f.contains("light_angle_deg")) {
      angles_deg.push_back(f.at("light_angle_deg").get<double>());
    } else {
      if (!warned) {
        std::fprintf(stderr, "load_dataset: frames without light_angle_deg in %s, assuming 0\n",
                     path.c_str());
        warned = true;
      }
      angles_deg.push_back(0.0);
    }
  }
}

}  // namespace

Dataset load_dataset(const std::string& dir, const std::string& split) {
  if (split != "train" && split != "test") {
    throw std::invalid_argument("load_dataset: split must be 'train' or 'test'");
  }
  const std::string main_path = dir + "/transforms_" + split + ".json";
  const json j = read_json_file(main_path, "load_dataset");

  bool warned = false;
  std::vector<double> angles_deg;
  collect_angles(j, main_path, angles_deg, warned);
  const std::string other = split == "train" ? "test" : "train";
  const std::string other_path = dir + "/transforms_" + other + ".json";
  if (fs::exists(other_path)) {
    collect_angles(read_json_file(other_path, "load_dataset"), other_path, angles_deg, warned);
  }
  std::sort(angles_deg.begin(), angles_deg.end());
  angles_deg.erase(std::unique(angles_deg.begin(), angles_deg.end()), angles_deg.end());

  Dataset ds;
  ds.split = split;
  std::vector<double> rad(angles_deg.size());
  for (size_t i = 0; i < angles_deg.size(); ++i) rad[i] = angles_deg[i] * kPi / 180.0;
  ds.light_angles = LightAngleTable(rad);

  if (!j.contains("camera_angle_x")) {
    throw std::invalid_argument("load_dataset: " + main_path + " lacks camera_angle_x");
  }
  const double fov = j.at("camera_angle_x").get<double>();
  if (!(fov > 0 && fov < kPi)) {
    throw std::invalid_argument("load_dataset: camera_angle_x out of range");
  }

  for (const auto& f : j.at("frames")) {
    Frame frame;
    std::string rel = f.at("file_path").get<std::string>();
    if (rel.rfind("./", 0) == 0) rel = rel.substr(2);
    const std::string base = dir + "/" + rel;
    if (fs::exists(base + ".pfm")) {
      frame.image = load_image(base + ".pfm");
    } else if (fs::exists(base + ".png")) {
      frame.image = load_image(base + ".png");
    } else {
      throw std::invalid_argument("load_dataset: no image (.pfm/.png) for " + base);
    }
    const size_t slash = rel.find_last_of('/');
    frame.name = slash == std::string::npos ? rel : rel.substr(slash + 1);

    const auto& m = f.at("transform_matrix");
    if (!m.is_array() || m.size() != 4) {
      throw std::invalid_argument("load_dataset: bad transform_matrix for " + rel);
    }
    Mat3 rot;
    Vec3 center;
    for (int r = 0; r < 3; ++r) {
      const auto& row = m.at(r);
      if (!row.is_array() || row.size() != 4) {
        throw std::invalid_argument("load_dataset: bad transform_matrix row for " + rel);
      }
      for (int c = 0; c < 3; ++c) rot(r, c) = row.at(c).get<double>();
      center[r] = row.at(3).get<double>();
    }
    const double deg = f.contains("light_angle_deg") ? f.at("light_angle_deg").get<double>() : 0.0;
    const auto it = std::lower_bound(angles_deg.begin(), angles_deg.end(), deg);
    frame.k = static_cast<int>(it - angles_deg.begin());
    frame.camera = Camera::from_fov_x(frame.image.width(), frame.image.height(), fov, rot, center);
    ds.frames.push_back(std::move(frame));
  }

  for (const auto& frame : ds.frames) {
    if (frame.image.width() != ds.width() || frame.image.height() != ds.height()) {
      throw std::invalid_argument("load_dataset: inconsistent image resolutions in split " + split);
    }
  }
  return ds;
}

// --- run config ----------------------------------------------------------------

namespace {

json cfg_to_json(const RunConfig& c) {
  json j;
  j["dataset_dir"] = c.dataset_dir;
  j["out_dir"] = c.out_dir;
  j["seed"] = c.seed;
  j["scene"] = c.scene;
  j["angles_deg"] = c.angles_deg;
  j["n_train"] = c.n_train;
  j["n_test"] = c.n_test;
  j["resolution"] = c.resolution;
  j["spp"] = c.spp;
  j["max_bounces"] = c.max_bounces;
  j["gt_spp"] = c.gt_spp;
  j["ao_samples"] = c.ao_samples;
  j["stage1_steps"] = c.stage1_steps;
  j["n_gaussians"] = c.n_gaussians;
  j["stage1_batch"] = c.stage1_batch;
  j["sh_degree"] = c.sh_degree;
  j["known_geometry"] = c.known_geometry;
  j["hull_bound"] = c.hull_bound;
  j["stage1_lr_position"] = c.stage1_lr_position;
  j["stage1_lr_rotation"] = c.stage1_lr_rotation;
  j["stage1_lr_scale"] = c.stage1_lr_scale;
  j["stage1_lr_opacity"] = c.stage1_lr_opacity;
  j["stage1_lr_sh"] = c.stage1_lr_sh;
  j["tsdf_resolution"] = c.tsdf_resolution;
  j["tsdf_truncation"] = c.tsdf_truncation;
  j["tsdf_alpha_threshold"] = c.tsdf_alpha_threshold;
  j["mesh_pad"] = c.mesh_pad;
  j["cache_steps"] = c.cache_steps;
  j["cache_batch"] = c.cache_batch;
  j["cache_lr"] = c.cache_lr;
  j["cache_levels"] = c.cache_levels;
  j["cache_table_size"] = c.cache_table_size;
  j["cache_features"] = c.cache_features;
  j["cache_base_resolution"] = c.cache_base_resolution;
  j["cache_growth"] = c.cache_growth;
  j["cache_n_freq"] = c.cache_n_freq;
  j["cache_hidden"] = c.cache_hidden;
  j["cache_box_pad"] = c.cache_box_pad;
  j["stage2_steps"] = c.stage2_steps;
  j["stage2_batch"] = c.stage2_batch;
  j["shade_samples"] = c.shade_samples;
  j["residual_points"] = c.residual_points;
  j["residual_inner"] = c.residual_inner;
  j["stage2_tile"] = c.stage2_tile;
  j["backend"] = c.backend;
  j["gaussian_offset"] = c.gaussian_offset;
  j["env_height"] = c.env_height;
  j["env_init"] = c.env_init;
  j["lr_albedo"] = c.lr_albedo;
  j["lr_roughness"] = c.lr_roughness;
  j["lr_env"] = c.lr_env;
  j["lr_cache"] = c.lr_cache;
  j["lambda_residual"] = c.lambda_residual;
  j["w_mask"] = c.w_mask;
  j["w_albedo_smooth"] = c.w_albedo_smooth;
  j["w_light_smooth"] = c.w_light_smooth;
  j["w_rough_smooth"] = c.w_rough_smooth;
  j["w_light_white"] = c.w_light_white;
  j["use_residual"] = c.use_residual;
  j["stop_grad_shading"] = c.stop_grad_shading;
  j["checkpoint_every"] = c.checkpoint_every;
  j["relight_samples"] = c.relight_samples;
  j["relight_bounce_samples"] = c.relight_bounce_samples;
  return j;
}

RunConfig cfg_from_json(const json& j) {
  RunConfig c;
  const json known = cfg_to_json(c);
  for (const auto& item : j.items()) {
    if (!known.contains(item.key())) {
      throw std::invalid_argument("run config: unknown key '" + item.key() + "'");
    }
  }
  c.dataset_dir = j.value("dataset_dir", c.dataset_dir);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.seed = j.value("seed", c.seed);
  c.scene = j.value("scene", c.scene);
  c.angles_deg = j.value("angles_deg", c.angles_deg);
  c.n_train = j.value("n_train", c.n_train);
  c.n_test = j.value("n_test", c.n_test);
  c.resolution = j.value("resolution", c.resolution);
  c.spp = j.value("spp", c.spp);
  c.max_bounces = j.value("max_bounces", c.max_bounces);
  c.gt_spp = j.value("gt_spp", c.gt_spp);
  c.ao_samples = j.value("ao_samples", c.ao_samples);
  c.stage1_steps = j.value("stage1_steps", c.stage1_steps);
  c.n_gaussians = j.value("n_gaussians", c.n_gaussians);
  c.stage1_batch = j.value("stage1_batch", c.stage1_batch);
  c.sh_degree = j.value("sh_degree", c.sh_degree);
  c.known_geometry = j.value("known_geometry", c.known_geometry);
  c.hull_bound = j.value("hull_bound", c.hull_bound);
  c.stage1_lr_position = j.value("stage1_lr_position", c.stage1_lr_position);
  c.stage1_lr_rotation = j.value("stage1_lr_rotation", c.stage1_lr_rotation);
  c.stage1_lr_scale = j.value("stage1_lr_scale", c.stage1_lr_scale);
  c.stage1_lr_opacity = j.value("stage1_lr_opacity", c.stage1_lr_opacity);
  c.stage1_lr_sh = j.value("stage1_lr_sh", c.stage1_lr_sh);
  c.tsdf_resolution = j.value("tsdf_resolution", c.tsdf_resolution);
  c.tsdf_truncation = j.value("tsdf_truncation", c.tsdf_truncation);
  c.tsdf_alpha_threshold = j.value("tsdf_alpha_threshold", c.tsdf_alpha_threshold);
  c.mesh_pad = j.value("mesh_pad", c.mesh_pad);
  c.cache_steps = j.value("cache_steps", c.cache_steps);
  c.cache_batch = j.value("cache_batch", c.cache_batch);
  c.cache_lr = j.value("cache_lr", c.cache_lr);
  c.cache_levels = j.value("cache_levels", c.cache_levels);
  c.cache_table_size = j.value("cache_table_size", c.cache_table_size);
  c.cache_features = j.value("cache_features", c.cache_features);
  c.cache_base_resolution = j.value("cache_base_resolution", c.cache_base_resolution);
  c.cache_growth = j.value("cache_growth", c.cache_growth);
  c.cache_n_freq = j.value("cache_n_freq", c.cache_n_freq);
  c.cache_hidden = j.value("cache_hidden", c.cache_hidden);
  c.cache_box_pad = j.value("cache_box_pad", c.cache_box_pad);
  c.stage2_steps = j.value("stage2_steps", c.stage2_steps);
  c.stage2_batch = j.value("stage2_batch", c.stage2_batch);
  c.shade_samples = j.value("shade_samples", c.shade_samples);
  c.residual_points = j.value("residual_points", c.residual_points);
  c.residual_inner = j.value("residual_inner", c.residual_inner);
  c.stage2_tile = j.value("stage2_tile", c.stage2_tile);
  c.backend = j.value("backend", c.backend);
  c.gaussian_offset = j.value("gaussian_offset", c.gaussian_offset);
  c.env_height = j.value("env_height", c.env_height);
  c.env_init = j.value("env_init", c.env_init);
  c.lr_albedo = j.value("lr_albedo", c.lr_albedo);
  c.lr_roughness = j.value("lr_roughness", c.lr_roughness);
  c.lr_env = j.value("lr_env", c.lr_env);
  c.lr_cache = j.value("lr_cache", c.lr_cache);
  c.lambda_residual = j.value("lambda_residual", c.lambda_residual);
  c.w_mask = j.value("w_mask", c.w_mask);
  c.w_albedo_smooth = j.value("w_albedo_smooth", c.w_albedo_smooth);
  c.w_light_smooth = j.value("w_light_smooth", c.w_light_smooth);
  c.w_rough_smooth = j.value("w_rough_smooth", c.w_rough_smooth);
  c.w_light_white = j.value("w_light_white", c.w_light_white);
  c.use_residual = j.value("use_residual", c.use_residual);
  c.stop_grad_shading = j.value("stop_grad_shading", c.stop_grad_shading);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.relight_samples = j.value("relight_samples", c.relight_samples);
  c.relight_bounce_samples = j.value("relight_bounce_samples", c.relight_bounce_samples);
  c.validate();
  return c;
}

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("run config: ") + what);
}

}  // namespace

void RunConfig::validate() const {
  require(!angles_deg.empty(), "angles_deg must not be empty");
  for (double a : angles_deg) require(std::isfinite(a), "angles_deg must be finite");
  require(n_train > 0, "n_train must be positive");
  require(n_test >= 0, "n_test must be non-negative");
  require(resolution > 0, "resolution must be positive");
  require(spp > 0, "spp must be positive");
  require(max_bounces >= 1, "max_bounces must be >= 1");
  require(gt_spp > 0, "gt_spp must be positive");
  require(ao_samples > 0, "ao_samples must be positive");
  require(stage1_steps >= 0, "stage1_steps must be non-negative");
  require(n_gaussians > 0, "n_gaussians must be positive");
  require(stage1_batch > 0, "stage1_batch must be positive");
  require(sh_degree >= 0 && sh_degree <= 3, "sh_degree must be in [0, 3]");
  require(hull_bound > 0, "hull_bound must be positive");
  require(stage1_lr_position > 0 && stage1_lr_rotation > 0 && stage1_lr_scale > 0 &&
              stage1_lr_opacity > 0 && stage1_lr_sh > 0,
          "stage-1 learning rates must be positive");
  require(tsdf_resolution >= 8, "tsdf_resolution must be >= 8");
  require(tsdf_truncation > 0, "tsdf_truncation must be positive");
  require(tsdf_alpha_threshold > 0 && tsdf_alpha_threshold < 1,
          "tsdf_alpha_threshold must be in (0, 1)");
  require(mesh_pad >= 0, "mesh_pad must be non-negative");
  require(cache_steps >= 0, "cache_steps must be non-negative");
  require(cache_batch > 0, "cache_batch must be positive");
  require(cache_lr > 0, "cache_lr must be positive");
  HashGridConfig grid;
  grid.levels = cache_levels;
  grid.table_size = static_cast<uint32_t>(cache_table_size);
  grid.features = cache_features;
  grid.base_resolution = cache_base_resolution;
  grid.growth = cache_growth;
  grid.validate();
  require(cache_n_freq >= 1, "cache_n_freq must be >= 1");
  require(cache_hidden > 0, "cache_hidden must be positive");
  require(cache_box_pad >= 0, "cache_box_pad must be non-negative");
  require(stage2_steps >= 0, "stage2_steps must be non-negative");
  require(stage2_batch > 0, "stage2_batch must be positive");
  require(shade_samples > 0, "shade_samples must be positive");
  require(residual_points >= 0, "residual_points must be non-negative");
  require(!use_residual || residual_points > 0,
          "use_residual needs residual_points > 0");
  require(residual_inner > 0, "residual_inner must be positive");
  require(stage2_tile >= 2, "stage2_tile must be >= 2");
  require(backend == "mesh" || backend == "gaussian", "backend must be 'mesh' or 'gaussian'");
  require(gaussian_offset > 0, "gaussian_offset must be positive");
  require(env_height >= 2, "env_height must be >= 2");
  require(env_init > 0, "env_init must be positive");
  require(lr_albedo > 0 && lr_roughness > 0 && lr_env > 0 && lr_cache > 0,
          "stage-2 learning rates must be positive");
  require(lambda_residual >= 0, "lambda_residual must be non-negative");
  require(w_mask >= 0 && w_albedo_smooth >= 0 && w_light_smooth >= 0 && w_rough_smooth >= 0 &&
              w_light_white >= 0,
          "loss weights must be non-negative");
  require(checkpoint_every >= 0, "checkpoint_every must be non-negative");
  require(relight_samples > 0, "relight_samples must be positive");
  require(relight_bounce_samples > 0, "relight_bounce_samples must be positive");
}

LossWeights RunConfig::loss_weights() const {
  LossWeights w;
  w.lambda_residual = lambda_residual;
  w.mask = w_mask;
  w.albedo_smooth = w_albedo_smooth;
  w.light_smooth = w_light_smooth;
  w.rough_smooth = w_rough_smooth;
  w.light_white = w_light_white;
  return w;
}

RunConfig load_run_config(const std::string& json_path) {
  return cfg_from_json(read_json_file(json_path, "load_run_config"));
}

std::string run_config_json(const RunConfig& cfg) { return cfg_to_json(cfg).dump(2) + "\n"; }

// --- stage 1 -------------------------------------------------------------------

namespace {

constexpr uint64_t kSaltHull = 0x31;
constexpr uint64_t kSaltInit = 0x32;
constexpr uint64_t kSaltBatch = 0x33;

std::array<double, 4> quat_from_normal(const Vec3& n) {
  // Rotates +z onto n; antiparallel flips about +x.
  const double w = 1.0 + n.z;
  if (w < 1e-12) return {0.0, 1.0, 0.0, 0.0};
  const Vec3 axis = cross(Vec3{0, 0, 1}, n);
  const double inv = 1.0 / std::sqrt(w * w + norm2(axis));
  return {w * inv, axis.x * inv, axis.y * inv, axis.z * inv};
}

std::vector<Vec3> visual_hull_seeds(const Dataset& train, const RunConfig& cfg) {
  const size_t n = static_cast<size_t>(cfg.n_gaussians);
  const int m = std::max(2, static_cast<int>(std::ceil(std::cbrt(4.0 * static_cast<double>(n)))));
  const double lo = -cfg.hull_bound;
  const double cell = 2.0 * cfg.hull_bound / m;
  std::vector<Vec3> seeds;
  seeds.reserve(n);
  for (int pass = 0; pass < 200 && seeds.size() < n; ++pass) {
    for (int idx = 0; idx < m * m * m && seeds.size() < n; ++idx) {
      DetRng rng(cfg.seed, static_cast<uint64_t>(pass), static_cast<uint64_t>(idx), 0, kSaltHull);
      const int ix = idx % m, iy = (idx / m) % m, iz = idx / (m * m);
      const Vec3 p{lo + (ix + rng.uniform()) * cell, lo + (iy + rng.uniform()) * cell,
                   lo + (iz + rng.uniform()) * cell};
      bool inside = true;
      for (const Frame& f : train.frames) {
        const auto proj = f.camera.project(p);
        if (!proj) {
          inside = false;
          break;
        }
        const int px = static_cast<int>(std::floor(proj->first));
        const int py = static_cast<int>(std::floor(proj->second));
        if (px < 0 || py < 0 || px >= f.image.width() || py >= f.image.height()) {
          inside = false;
          break;
        }
        const double a = f.image.channels() >= 4 ? f.image.at(px, py, 3) : 1.0;
        if (a <= 0.5) {
          inside = false;
          break;
        }
      }
      if (inside) seeds.push_back(p);
    }
  }
  if (seeds.size() < n) {
    throw std::runtime_error("stage1_fit: visual hull found only " + std::to_string(seeds.size()) +
                             " of " + std::to_string(n) +
                             " seeds; check masks or widen hull_bound");
  }
  return seeds;
}

GaussianScene init_scene(const Dataset& train, const RunConfig& cfg,
                         const TriangleMesh* known_mesh) {
  GaussianScene scene;
  scene.sh_degree = cfg.sh_degree;
  const size_t n = static_cast<size_t>(cfg.n_gaussians);
  const int basis = scene.sh_basis();

  Gaussian2D g;
  g.sh.assign(3 * basis, 0.0);  // sh_eval's DC offset makes this mid-gray
  g.albedo_logit = {0, 0, 0};
  g.roughness_logit = 0;

  if (known_mesh) {
    const auto samples = sample_surface(*known_mesh, n, cfg.seed, /*area_weighted=*/true);
    if (samples.size() < n) throw std::runtime_error("stage1_fit: mesh sampling came up short");
    const double s0 = 0.7 * std::sqrt(known_mesh->surface_area() / static_cast<double>(n));
    g.log_su = g.log_sv = std::log(std::max(s0, 1e-6));
    g.opacity_logit = logit(0.95);
    for (size_t i = 0; i < n; ++i) {
      g.mu = samples[i].point;
      g.quat = quat_from_normal(samples[i].normal);
      scene.push_back(g);
    }
  } else {
    const auto seeds = visual_hull_seeds(train, cfg);
    const int m = std::max(2, static_cast<int>(std::ceil(std::cbrt(4.0 * static_cast<double>(n)))));
    const double s0 = 0.5 * (2.0 * cfg.hull_bound / m);
    g.log_su = g.log_sv = std::log(std::max(s0, 1e-6));
    g.opacity_logit = logit(0.1);
    for (size_t i = 0; i < n; ++i) {
      DetRng rng(cfg.seed, i, 0, 0, kSaltInit);
      Vec3 axis{rng.uniform() * 2 - 1, rng.uniform() * 2 - 1, rng.uniform() * 2 - 1};
      double w = rng.uniform() * 2 - 1;
      const double qn = std::sqrt(w * w + norm2(axis));
      if (qn > 1e-6) {
        w /= qn;
        axis /= qn;
      } else {
        w = 1;
        axis = {0, 0, 0};
      }
      g.mu = seeds[i];
      g.quat = {w, axis.x, axis.y, axis.z};
      scene.push_back(g);
    }
  }
  return scene;
}

}  // namespace

GaussianScene stage1_fit(const Dataset& train, const RunConfig& cfg,
                         const TriangleMesh* known_mesh) {
  if (train.frames.size() < 8) {
    throw std::invalid_argument("stage1_fit: needs at least 8 views, got " +
                                std::to_string(train.frames.size()));
  }
  for (const Frame& f : train.frames) {
    if (f.k != train.frames[0].k) {
      throw std::invalid_argument("stage1_fit: expects a single light angle across views");
    }
  }
  if (known_mesh && known_mesh->empty()) {
    throw std::invalid_argument("stage1_fit: known mesh is empty");
  }

  GaussianScene scene = init_scene(train, cfg, known_mesh);

  ParamStore store;
  detail::GaussLrs lrs;
  lrs.mu = cfg.stage1_lr_position;
  lrs.quat = cfg.stage1_lr_rotation;
  lrs.scale = cfg.stage1_lr_scale;
  lrs.opacity = cfg.stage1_lr_opacity;
  lrs.sh = cfg.stage1_lr_sh;
  detail::GaussTrainFlags flags;
  flags.geometry = known_mesh == nullptr;
  flags.sh = true;
  flags.material = false;
  detail::add_scene_groups(store, scene, lrs, flags);

  const int W = train.width(), H = train.height();
  const int B = cfg.stage1_batch;
  const double inv3b = 1.0 / (3.0 * B);
  const double invb = 1.0 / B;

  struct ChunkAcc {
    GaussGrads grads;
    double data = 0, mask = 0;
    explicit ChunkAcc(const GaussianScene& s) : grads(s) {}
  };

  std::vector<int> ids(B);
  for (int step = 0; step < cfg.stage1_steps; ++step) {
    detail::store_to_scene(store, scene);
    const GaussAccel accel(scene);

    DetRng pick(cfg.seed, static_cast<uint64_t>(step), 0, 0, kSaltBatch);
    const Frame& fr = train.frames[pick.below(train.frames.size())];
    for (int b = 0; b < B; ++b) ids[b] = static_cast<int>(pick.below(static_cast<size_t>(W) * H));

    const auto chunks = make_chunks(static_cast<size_t>(B), 256);
    std::vector<ChunkAcc> accs;
    accs.reserve(chunks.size());
    for (size_t i = 0; i < chunks.size(); ++i) accs.emplace_back(scene);

    parallel_chunks(
        static_cast<size_t>(B),
        [&](const ChunkRange& ch) {
          ChunkAcc& acc = accs[ch.index];
          for (size_t i = ch.begin; i < ch.end; ++i) {
            const int px = ids[i] % W, py = ids[i] / W;
            const Ray ray = fr.camera.ray_for_pixel(px + 0.5, py + 0.5);
            const auto hits = collect_hits(ray, scene, &accel);
            const RayBlend blend = blend_hits(ray, scene, ray.dir.vec(), hits);

            const double ga = fr.image.channels() >= 4 ? fr.image.at(px, py, 3) : 1.0;
            BlendGrad bg;
            for (int c = 0; c < 3; ++c) {
              const double d = blend.color[c] - fr.image.at(px, py, c) * ga;
              acc.data += std::abs(d);
              bg.d_color[c] = (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) * inv3b;
            }
            const double a = ga > 0.5 ? 1.0 : 0.0;
            const double p = blend.alpha;
            acc.mask += -(a * std::log(std::max(p, 1e-12)) +
                          (1.0 - a) * std::log(std::max(1.0 - p, 1e-12)));
            // Gradient clamp keeps early all-transparent pixels from blowing up.
            const double pc = clamp(p, 1e-3, 1.0 - 1e-3);
            bg.d_alpha = cfg.w_mask * (pc - a) / (pc * (1.0 - pc)) * invb;
            if (!hits.empty()) blend_backward(ray, scene, ray.dir.vec(), hits, bg, acc.grads);
          }
        },
        256);

    store.zero_grad();
    double data = 0, mask = 0;
    for (size_t i = 1; i < accs.size(); ++i) accs[0].grads.add(accs[i].grads);
    for (const ChunkAcc& acc : accs) {
      data += acc.data;
      mask += acc.mask;
    }
    const double loss = data * inv3b + cfg.w_mask * mask * invb;
    if (!std::isfinite(loss)) {
      throw std::runtime_error("stage1_fit: non-finite loss at step " + std::to_string(step));
    }
    detail::grads_to_store(accs[0].grads, store);
    store.adam_step();
  }
  detail::store_to_scene(store, scene);
  return scene;
}

// --- proxy mesh ------------------------------------------------------------------

ProxyMesh proxy_from_mesh(TriangleMesh mesh) {
  ProxyMesh p;
  p.mesh = std::move(mesh);
  p.mesh.finalize();
  if (p.mesh.empty()) throw std::invalid_argument("proxy_from_mesh: empty mesh");
  p.bvh = build_mesh_bvh(p.mesh);
  p.hash = mesh_content_hash(p.mesh);
  return p;
}

ProxyMesh extract_proxy_mesh(const GaussianScene& scene, const std::vector<Camera>& cameras,
                             const RunConfig& cfg) {
  if (scene.size() == 0) throw std::invalid_argument("extract_proxy_mesh: empty scene");
  if (cameras.empty()) throw std::invalid_argument("extract_proxy_mesh: no cameras");
  const GaussAccel accel(scene);
  std::vector<ImageBuffer> depths, alphas;
  depths.reserve(cameras.size());
  alphas.reserve(cameras.size());
  for (const Camera& cam : cameras) {
    RenderMaps maps = render_maps(cam, scene, &accel);
    depths.push_back(std::move(maps.depth));
    alphas.push_back(std::move(maps.alpha));
  }
  TsdfConfig tc;
  tc.resolution = cfg.tsdf_resolution;
  tc.truncation_voxels = cfg.tsdf_truncation;
  tc.alpha_threshold = cfg.tsdf_alpha_threshold;
  const Aabb sb = scene.scene_bounds();
  tc.bounds = sb.padded(cfg.mesh_pad * sb.max_extent());
  const TsdfGrid grid = tsdf_fuse(depths, alphas, cameras, tc);
  TriangleMesh mesh = marching_cubes(grid);
  mesh.finalize();
  if (mesh.empty()) {
    throw std::runtime_error(
        "extract_proxy_mesh: no surface extracted; raise tsdf_resolution, lower "
        "tsdf_alpha_threshold, or check stage-1 coverage");
  }
  ProxyMesh p;
  p.mesh = std::move(mesh);
  p.bvh = build_mesh_bvh(p.mesh);
  p.hash = mesh_content_hash(p.mesh);
  return p;
}

// --- ambient occlusion map -----------------------------------------------------

ImageBuffer render_ao_map(const GaussianScene& scene, const ProxyMesh* proxy,
                          const Camera& camera, const std::string& backend,
                          double offset_factor, int n_samples, uint64_t seed) {
  if (backend != "mesh" && backend != "gaussian") {
    throw std::invalid_argument("render_ao_map: backend must be 'mesh' or 'gaussian'");
  }
  const bool use_mesh = backend == "mesh";
  if (use_mesh && (!proxy || proxy->mesh.empty())) {
    throw std::invalid_argument("render_ao_map: mesh backend needs a proxy mesh");
  }
  if (n_samples <= 0) throw std::invalid_argument("render_ao_map: n_samples must be positive");

  const GaussAccel accel(scene);
  const EnvironmentMap env(2, 1.0);
  const LightAngleTable table(std::vector<double>{0.0});
  const auto zero_cache = [](const Vec3&, const UnitVec3&, int) { return Vec3{}; };
  std::unique_ptr<IncidentBackend> inc;
  if (use_mesh) {
    inc = std::make_unique<MeshBackend>(proxy->mesh, proxy->bvh, env, table, zero_cache);
  } else {
    inc = std::make_unique<GaussianBackend>(scene, &accel, env, table, offset_factor);
  }

  const int W = camera.width(), H = camera.height();
  ImageBuffer out(W, H, 1);
  parallel_for(static_cast<size_t>(W) * H, [&](size_t pix) {
    const int px = static_cast<int>(pix) % W, py = static_cast<int>(pix) / W;
    const Ray ray = camera.ray_for_pixel(px + 0.5, py + 0.5);
    const RayBlend blend = blend_along_ray(ray, scene, ray.dir.vec(), &accel);
    if (blend.alpha <= 0.5) return;
    Vec3 x = ray.at(blend.depth);
    if (use_mesh) {
      const auto hit = ray_mesh_intersect(proxy->bvh, proxy->mesh, ray);
      if (hit) x = hit->point;
    }
    const double nl = norm(blend.normal);
    if (!(nl > 1e-9)) return;
    out.at(px, py, 0) =
        ambient_occlusion(*inc, x, UnitVec3(blend.normal), n_samples, seed, pix);
  });
  return out;
}

// --- metrics ---------------------------------------------------------------------

namespace {

int color_channels(const ImageBuffer& img) { return img.channels() >= 3 ? 3 : 1; }

bool mask_on(const ImageBuffer& mask, int x, int y) {
  const int c = mask.channels() >= 4 ? 3 : 0;
  return mask.at(x, y, c) > 0.5;
}

void check_metric_shapes(const ImageBuffer& pred, const ImageBuffer& gt, const ImageBuffer& mask,
                         const char* who) {
  if (pred.width() != gt.width() || pred.height() != gt.height() ||
      pred.width() != mask.width() || pred.height() != mask.height()) {
    throw std::invalid_argument(std::string(who) + ": image sizes differ");
  }
  if (color_channels(pred) != color_channels(gt)) {
    throw std::invalid_argument(std::string(who) + ": channel counts differ");
  }
}

size_t masked_count(const ImageBuffer& mask) {
  size_t n = 0;
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      if (mask_on(mask, x, y)) ++n;
    }
  }
  return n;
}

double psnr_from_mse(double mse) {
  if (mse <= 0) return 100.0;
  return std::min(100.0, -10.0 * std::log10(mse));
}

}  // namespace

double masked_mse(const ImageBuffer& pred, const ImageBuffer& gt, const ImageBuffer& mask) {
  check_metric_shapes(pred, gt, mask, "masked_mse");
  const int cc = color_channels(pred);
  double sum = 0;
  size_t n = 0;
  for (int y = 0; y < pred.height(); ++y) {
    for (int x = 0; x < pred.width(); ++x) {
      if (!mask_on(mask, x, y)) continue;
      for (int c = 0; c < cc; ++c) sum += sqr(pred.at(x, y, c) - gt.at(x, y, c));
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("masked_mse: empty mask");
  return sum / (static_cast<double>(n) * cc);
}

double masked_psnr(const ImageBuffer& pred, const ImageBuffer& gt, const ImageBuffer& mask) {
  return psnr_from_mse(masked_mse(pred, gt, mask));
}

double masked_ssim(const ImageBuffer& pred, const ImageBuffer& gt, const ImageBuffer& mask) {
  check_metric_shapes(pred, gt, mask, "masked_ssim");
  constexpr int R = 5;  // 11x11 window
  constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
  double w[2 * R + 1][2 * R + 1];
  for (int dy = -R; dy <= R; ++dy) {
    for (int dx = -R; dx <= R; ++dx) {
      w[dy + R][dx + R] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
    }
  }
  const int W = pred.width(), H = pred.height();
  const int cc = color_channels(pred);
  double total = 0;
  size_t n = 0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      if (!mask_on(mask, x, y)) continue;
      double per_px = 0;
      for (int c = 0; c < cc; ++c) {
        double sw = 0, sp = 0, sg = 0, spp = 0, sgg = 0, spg = 0;
        for (int dy = -R; dy <= R; ++dy) {
          const int yy = y + dy;
          if (yy < 0 || yy >= H) continue;
          for (int dx = -R; dx <= R; ++dx) {
            const int xx = x + dx;
            if (xx < 0 || xx >= W) continue;
            const double wi = w[dy + R][dx + R];
            const double pv = pred.at(xx, yy, c), gv = gt.at(xx, yy, c);
            sw += wi;
            sp += wi * pv;
            sg += wi * gv;
            spp += wi * pv * pv;
            sgg += wi * gv * gv;
            spg += wi * pv * gv;
          }
        }
        const double mp = sp / sw, mg = sg / sw;
        const double vp = std::max(0.0, spp / sw - mp * mp);
        const double vg = std::max(0.0, sgg / sw - mg * mg);
        const double cov = spg / sw - mp * mg;
        per_px += ((2 * mp * mg + kC1) * (2 * cov + kC2)) /
                  ((mp * mp + mg * mg + kC1) * (vp + vg + kC2));
      }
      total += per_px / cc;
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("masked_ssim: empty mask");
  return total / static_cast<double>(n);
}

Vec3 albedo_alignment_scale(const ImageBuffer& pred, const ImageBuffer& gt,
                            const ImageBuffer& mask) {
  check_metric_shapes(pred, gt, mask, "albedo_alignment_scale");
  const int cc = color_channels(pred);
  Vec3 num{}, den{};
  size_t n = 0;
  for (int y = 0; y < pred.height(); ++y) {
    for (int x = 0; x < pred.width(); ++x) {
      if (!mask_on(mask, x, y)) continue;
      ++n;
      for (int c = 0; c < cc; ++c) {
        num[c] += pred.at(x, y, c) * gt.at(x, y, c);
        den[c] += sqr(pred.at(x, y, c));
      }
    }
  }
  if (n == 0) throw std::invalid_argument("albedo_alignment_scale: empty mask");
  Vec3 scale{1, 1, 1};
  for (int c = 0; c < cc; ++c) scale[c] = den[c] > 0 ? num[c] / den[c] : 1.0;
  return scale;
}

ImageBuffer apply_channel_scale(const ImageBuffer& img, const Vec3& scale) {
  ImageBuffer out = img;
  const int cc = color_channels(img);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < cc; ++c) out.at(x, y, c) = img.at(x, y, c) * scale[c];
    }
  }
  return out;
}

MetricsReport compute_metrics(const std::vector<ImageBuffer>& pred_albedo,
                              const std::vector<ImageBuffer>& gt_albedo,
                              const std::vector<ImageBuffer>& pred_roughness,
                              const std::vector<ImageBuffer>& gt_roughness,
                              const std::vector<ImageBuffer>& masks) {
  const size_t V = pred_albedo.size();
  if (V == 0 || gt_albedo.size() != V || pred_roughness.size() != V ||
      gt_roughness.size() != V || masks.size() != V) {
    throw std::invalid_argument("compute_metrics: view list sizes differ or are empty");
  }
  MetricsReport rep;
  double alb_se = 0, alb_se_aligned = 0, rough_se = 0;
  size_t alb_n = 0, rough_n = 0;
  double ssim_sum = 0, ssim_aligned_sum = 0;
  for (size_t v = 0; v < V; ++v) {
    ViewMetrics vm;
    const double mse = masked_mse(pred_albedo[v], gt_albedo[v], masks[v]);
    vm.albedo_psnr = psnr_from_mse(mse);
    vm.albedo_ssim = masked_ssim(pred_albedo[v], gt_albedo[v], masks[v]);
    const Vec3 scale = albedo_alignment_scale(pred_albedo[v], gt_albedo[v], masks[v]);
    const ImageBuffer aligned = apply_channel_scale(pred_albedo[v], scale);
    const double mse_aligned = masked_mse(aligned, gt_albedo[v], masks[v]);
    vm.albedo_psnr_aligned = psnr_from_mse(mse_aligned);
    vm.albedo_ssim_aligned = masked_ssim(aligned, gt_albedo[v], masks[v]);
    vm.roughness_mse = masked_mse(pred_roughness[v], gt_roughness[v], masks[v]);
    rep.views.push_back(vm);

    const size_t nm = masked_count(masks[v]);
    alb_se += mse * static_cast<double>(nm);
    alb_se_aligned += mse_aligned * static_cast<double>(nm);
    rough_se += vm.roughness_mse * static_cast<double>(nm);
    alb_n += nm;
    rough_n += nm;
    ssim_sum += vm.albedo_ssim;
    ssim_aligned_sum += vm.albedo_ssim_aligned;
  }
  rep.aggregate.albedo_psnr = psnr_from_mse(alb_se / static_cast<double>(alb_n));
  rep.aggregate.albedo_psnr_aligned = psnr_from_mse(alb_se_aligned / static_cast<double>(alb_n));
  rep.aggregate.albedo_ssim = ssim_sum / static_cast<double>(V);
  rep.aggregate.albedo_ssim_aligned = ssim_aligned_sum / static_cast<double>(V);
  rep.aggregate.roughness_mse = rough_se / static_cast<double>(rough_n);
  return rep;
}

std::string metrics_csv(const MetricsReport& report) {
  std::ostringstream os;
  os << "view,albedo_psnr,albedo_ssim,albedo_psnr_aligned,albedo_ssim_aligned,roughness_mse\n";
  char line[512];
  for (size_t v = 0; v < report.views.size(); ++v) {
    const ViewMetrics& m = report.views[v];
    std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", v, m.albedo_psnr,
                  m.albedo_ssim, m.albedo_psnr_aligned, m.albedo_ssim_aligned, m.roughness_mse);
    os << line;
  }
  const ViewMetrics& a = report.aggregate;
  std::snprintf(line, sizeof(line), "aggregate,%.17g,%.17g,%.17g,%.17g,%.17g\n", a.albedo_psnr,
                a.albedo_ssim, a.albedo_psnr_aligned, a.albedo_ssim_aligned, a.roughness_mse);
  os << line;
  return os.str();
}

}  // namespace rotir
