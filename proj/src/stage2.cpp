#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>

#include "rotir/parallel.h"
#include "rotir/pipeline.h"
#include "rotir/ray.h"
#include "rotir/rng.h"
#include "pipeline_detail.h"

namespace rotir {

namespace fs = std::filesystem;

namespace {

constexpr uint64_t kSaltPick = 0x41;

uint64_t mix_seed(uint64_t seed, uint64_t fold) {
  return seed ^ (0x9e3779b97f4a7c15ULL * (fold + 1));
}

double sgn(double d) { return d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0); }

// Shared between the trainer and the renderers so train-time and render-time
// shading see identical surface points.
bool make_shade_point(const Ray& ray, const RayBlend& blend, const ProxyMesh* proxy,
                      bool use_mesh, int k, ShadePoint& sp) {
  if (!(blend.alpha > 0.5)) return false;
  if (!std::isfinite(blend.depth)) return false;
  if (!(norm(blend.normal) > 1e-9)) return false;
  const Vec3 x = ray.at(blend.depth);
  Vec3 x_m = x;
  if (use_mesh && proxy) {
    const auto mh = ray_mesh_intersect(proxy->bvh, proxy->mesh, ray);
    if (mh) x_m = mh->point;
  }
  sp.x = x;
  sp.x_m = x_m;
  sp.n = UnitVec3(blend.normal);
  sp.omega_o = UnitVec3(-ray.dir.vec());
  sp.material = Material(blend.albedo, blend.roughness);
  sp.k = k;
  return true;
}

std::unique_ptr<IncidentBackend> make_shading_backend(
    const RunConfig& cfg, const GaussianScene& scene, const GaussAccel* accel,
    const ProxyMesh& proxy, const EnvironmentMap& env, const LightAngleTable& table,
    const std::vector<RadianceCache>* caches, std::vector<double>* env_grad,
    CacheGradSink cache_sink) {
  if (cfg.backend == "mesh") {
    CacheQuery query = [caches](const Vec3& p, const UnitVec3& d, int k) {
      return cache_query((*caches)[k], p, d);
    };
    auto mb = std::make_unique<MeshBackend>(proxy.mesh, proxy.bvh, env, table, std::move(query));
    if (env_grad) mb->set_env_grad_sink(env_grad);
    if (cache_sink) mb->set_cache_grad_sink(std::move(cache_sink));
    return mb;
  }
  auto gb = std::make_unique<GaussianBackend>(scene, accel, env, table, cfg.gaussian_offset);
  if (env_grad) gb->set_env_grad_sink(env_grad);
  return gb;
}

void sync_stage2_params(const ParamStore& store, GaussianScene& scene, EnvironmentMap& env) {
  const auto& alb = store.at("albedo_logit").value;
  const auto& rough = store.at("roughness_logit").value;
  for (size_t i = 0; i < scene.size(); ++i) {
    for (int c = 0; c < 3; ++c) scene.albedo_logit[i][c] = alb[3 * i + c];
    scene.roughness_logit[i] = rough[i];
  }
  env.raw() = store.at("env").value;
}

}  // namespace

Stage2Result stage2_decompose(const Dataset& train, GaussianScene& scene, const ProxyMesh& proxy,
                              std::vector<RadianceCache>& caches, const RunConfig& cfg) {
  const LightAngleTable& table = train.light_angles;
  const int K = table.count();
  if (train.frames.empty()) throw std::invalid_argument("stage2_decompose: no training frames");
  if (scene.size() == 0) throw std::invalid_argument("stage2_decompose: empty scene");
  if (proxy.mesh.empty()) throw std::invalid_argument("stage2_decompose: empty proxy mesh");
  if (static_cast<int>(caches.size()) != K) {
    throw std::invalid_argument("stage2_decompose: need one radiance cache per light angle");
  }
  for (int k = 0; k < K; ++k) {
    if (caches[k].light_index() != k) {
      throw std::invalid_argument("stage2_decompose: cache light indices out of order");
    }
  }
  for (const Frame& f : train.frames) {
    if (f.k < 0 || f.k >= K) {
      throw std::logic_error("stage2_decompose: frame light index outside the angle table");
    }
  }
  if (proxy.hash != mesh_content_hash(proxy.mesh)) {
    throw std::logic_error("stage2_decompose: proxy mesh hash mismatch at entry");
  }
  const uint64_t geo_hash = detail::geometry_sh_hash(scene);

  const GaussAccel accel(scene);
  const bool use_mesh = cfg.backend == "mesh";
  const double extent = std::max(scene.scene_bounds().max_extent(), 1e-6);

  Stage2Result result;
  result.env = EnvironmentMap(cfg.env_height, cfg.env_init);
  EnvironmentMap& env = result.env;

  ParamStore store;
  const size_t n = scene.size();
  store.add("albedo_logit", 3 * n, cfg.lr_albedo);
  store.add("roughness_logit", n, cfg.lr_roughness);
  store.add("env", env.raw().size(), cfg.lr_env);
  {
    auto& alb = store.at("albedo_logit").value;
    auto& rough = store.at("roughness_logit").value;
    for (size_t i = 0; i < n; ++i) {
      for (int c = 0; c < 3; ++c) alb[3 * i + c] = scene.albedo_logit[i][c];
      rough[i] = scene.roughness_logit[i];
    }
    store.at("env").value = env.raw();
  }
  std::vector<Adam> cache_adams(K);

  const int W = train.width(), H = train.height();
  const int B = cfg.stage2_batch;
  const int T = std::min({cfg.stage2_tile, W, H});
  const double inv3b = 1.0 / (3.0 * B);
  const double invb = 1.0 / B;
  const LossWeights weights = cfg.loss_weights();

  if (cfg.checkpoint_every > 0) fs::create_directories(cfg.out_dir);

  struct ShadeChunk {
    GaussGrads grads;
    std::vector<double> env_grad;
    std::vector<double> cache_grad;  // the batch frame's light only
    double data = 0, cache = 0, mask = 0;
    std::unique_ptr<IncidentBackend> backend;
    ShadeChunk(const GaussianScene& s, size_t env_params, size_t cache_params)
        : grads(s), env_grad(env_params, 0.0), cache_grad(cache_params, 0.0) {}
  };

  std::vector<int> ids(B);
  for (int step = 0; step < cfg.stage2_steps; ++step) {
    sync_stage2_params(store, scene, env);

    DetRng pick(cfg.seed, static_cast<uint64_t>(step), 0, 0, kSaltPick);
    const Frame& fr = train.frames[pick.below(train.frames.size())];
    const int fk = fr.k;
    if (fk < 0 || fk >= K) {
      throw std::logic_error("stage2_decompose: batch light index out of range");
    }
    for (int b = 0; b < B; ++b) ids[b] = static_cast<int>(pick.below(static_cast<size_t>(W) * H));
    const int tx = static_cast<int>(pick.below(static_cast<uint64_t>(W - T + 1)));
    const int ty = static_cast<int>(pick.below(static_cast<uint64_t>(H - T + 1)));

    // --- photometric + cache batch, chunked for thread-count independence ---
    const auto chunks = make_chunks(static_cast<size_t>(B), 16);
    std::vector<ShadeChunk> accs;
    accs.reserve(chunks.size());
    for (size_t i = 0; i < chunks.size(); ++i) {
      accs.emplace_back(scene, env.raw().size(), caches[fk].param_count());
      ShadeChunk& cb = accs.back();
      CacheGradSink sink = [&caches, &cb, fk](const Vec3& p, const UnitVec3& d, int k,
                                              const Vec3& dl) {
        if (k != fk) throw std::logic_error("stage2_decompose: cache gradient for foreign light");
        cache_query_backward(caches[k], p, d, dl, cb.cache_grad);
      };
      cb.backend = make_shading_backend(cfg, scene, &accel, proxy, env, table, &caches,
                                        &cb.env_grad,
                                        use_mesh ? std::move(sink) : CacheGradSink{});
    }

    const uint64_t shade_seed = mix_seed(cfg.seed, static_cast<uint64_t>(step));
    parallel_chunks(
        static_cast<size_t>(B),
        [&](const ChunkRange& ch) {
          ShadeChunk& acc = accs[ch.index];
          for (size_t i = ch.begin; i < ch.end; ++i) {
            const int px = ids[i] % W, py = ids[i] / W;
            const Ray ray = fr.camera.ray_for_pixel(px + 0.5, py + 0.5);
            const auto hits = collect_hits(ray, scene, &accel);
            const RayBlend blend = blend_hits(ray, scene, ray.dir.vec(), hits);

            const double ga = fr.image.channels() >= 4 ? fr.image.at(px, py, 3) : 1.0;
            const double a = ga > 0.5 ? 1.0 : 0.0;
            const double p = blend.alpha;
            acc.mask += -(a * std::log(std::max(p, 1e-12)) +
                          (1.0 - a) * std::log(std::max(1.0 - p, 1e-12)));

            BlendGrad bg;
            ShadePoint sp;
            if (a > 0.5 && make_shade_point(ray, blend, &proxy, use_mesh, fk, sp)) {
              const Vec3 lo = shade(sp, *acc.backend, cfg.shade_samples, shade_seed, i);
              Vec3 dl_shade;
              for (int c = 0; c < 3; ++c) {
                const double d = lo[c] - fr.image.at(px, py, c);
                acc.data += std::abs(d);
                dl_shade[c] = sgn(d) * inv3b;
              }
              const ShadeGrad sg =
                  shade_backward(sp, *acc.backend, cfg.shade_samples, shade_seed, i, dl_shade);
              bg.d_albedo = sg.d_albedo;
              bg.d_roughness = sg.d_roughness;

              // L_cache: the cache itself must match the image at the surface.
              Vec3 dl_cache;
              const Vec3 rk = cache_query(caches[fk], sp.x_m, sp.omega_o);
              for (int c = 0; c < 3; ++c) {
                const double d = rk[c] - fr.image.at(px, py, c);
                acc.cache += std::abs(d);
                dl_cache[c] = sgn(d) * inv3b;
              }
              cache_query_backward(caches[fk], sp.x_m, sp.omega_o, dl_cache, acc.cache_grad);
              if (!hits.empty()) blend_backward(ray, scene, ray.dir.vec(), hits, bg, acc.grads);
            }
          }
        },
        16);

    // --- smoothness tile (serial) ---
    ImageBuffer tile_alb(T, T, 3), tile_rough(T, T, 1), guide(T, T, 3);
    std::vector<Ray> tile_rays(static_cast<size_t>(T) * T);
    std::vector<std::vector<GaussHit>> tile_hits(static_cast<size_t>(T) * T);
    for (int yy = 0; yy < T; ++yy) {
      for (int xx = 0; xx < T; ++xx) {
        const size_t ti = static_cast<size_t>(yy) * T + xx;
        tile_rays[ti] = fr.camera.ray_for_pixel(tx + xx + 0.5, ty + yy + 0.5);
        tile_hits[ti] = collect_hits(tile_rays[ti], scene, &accel);
        const RayBlend b = blend_hits(tile_rays[ti], scene, tile_rays[ti].dir.vec(), tile_hits[ti]);
        tile_alb.set_rgb(xx, yy, b.albedo);
        tile_rough.at(xx, yy, 0) = b.roughness;
        guide.set_rgb(xx, yy, Vec3{fr.image.at(tx + xx, ty + yy, 0), fr.image.at(tx + xx, ty + yy, 1),
                                   fr.image.at(tx + xx, ty + yy, 2)});
      }
    }
    const double albedo_smooth = loss_smooth(tile_alb, guide);
    const double rough_smooth = loss_smooth(tile_rough, guide);
    ImageBuffer d_alb(T, T, 3), d_rough(T, T, 1);
    loss_smooth_backward(tile_alb, guide, weights.albedo_smooth, d_alb);
    loss_smooth_backward(tile_rough, guide, weights.rough_smooth, d_rough);
    GaussGrads tile_grads(scene);
    for (int yy = 0; yy < T; ++yy) {
      for (int xx = 0; xx < T; ++xx) {
        const size_t ti = static_cast<size_t>(yy) * T + xx;
        if (tile_hits[ti].empty()) continue;
        BlendGrad bg;
        bg.d_albedo = Vec3{d_alb.at(xx, yy, 0), d_alb.at(xx, yy, 1), d_alb.at(xx, yy, 2)};
        bg.d_roughness = d_rough.at(xx, yy, 0);
        blend_backward(tile_rays[ti], scene, tile_rays[ti].dir.vec(), tile_hits[ti], bg,
                       tile_grads);
      }
    }

    // --- radiosity residual (serial) ---
    double residual = 0;
    GaussGrads res_grads(scene);
    std::vector<double> res_env_grad(env.raw().size(), 0.0);
    std::vector<std::vector<double>> res_cache_grads(K);
    const double lambda = weights.lambda_residual;
    if (cfg.use_residual && lambda > 0) {
      for (int k = 0; k < K; ++k) res_cache_grads[k].assign(caches[k].param_count(), 0.0);
      CacheGradSink res_sink = [&caches, &res_cache_grads](const Vec3& p, const UnitVec3& d, int k,
                                                           const Vec3& dl) {
        cache_query_backward(caches[k], p, d, dl, res_cache_grads[k]);
      };
      const auto backend =
          make_shading_backend(cfg, scene, &accel, proxy, env, table, &caches, &res_env_grad,
                               use_mesh ? res_sink : CacheGradSink{});
      const auto samples = sample_surface(proxy.mesh, static_cast<size_t>(cfg.residual_points),
                                          mix_seed(cfg.seed, 4000000 + step), true);
      MaterialQuery mq = [&scene, &accel, extent](const SurfaceSample& s) {
        const auto probe = detail::probe_material(scene, &accel, s.point, s.normal, extent);
        return probe.valid ? probe.material : Material();
      };
      MaterialGradSink msink = [&scene, &accel, extent, lambda, &res_grads](
                                   const SurfaceSample& s, const Vec3& da, double dr) {
        const auto probe = detail::probe_material(scene, &accel, s.point, s.normal, extent);
        if (!probe.valid) return;
        BlendGrad bg;
        bg.d_albedo = lambda * da;
        bg.d_roughness = lambda * dr;
        blend_backward(probe.ray, scene, probe.view_dir, probe.hits, bg, res_grads);
      };
      ResidualConfig rc;
      rc.n_inner = cfg.residual_inner;
      rc.seed = mix_seed(cfg.seed, 5000000 + step);
      rc.stop_grad_shading = cfg.stop_grad_shading;
      residual = loss_residual_backward(samples, caches, *backend, mq, rc, res_cache_grads, msink);
    }

    // --- environment regularizers ---
    const double light_smooth = loss_light_smooth(env);
    const double light_white = loss_light_white(env);

    // --- merge (fixed order: batch chunks, tile, residual, light terms) ---
    store.zero_grad();
    double data = 0, cache_term = 0, mask = 0;
    for (size_t i = 1; i < accs.size(); ++i) accs[0].grads.add(accs[i].grads);
    accs[0].grads.add(tile_grads);
    accs[0].grads.add(res_grads);
    for (const ShadeChunk& acc : accs) {
      data += acc.data;
      cache_term += acc.cache;
      mask += acc.mask;
    }
    {
      auto& alb_g = store.at("albedo_logit").grad;
      auto& rough_g = store.at("roughness_logit").grad;
      for (size_t i = 0; i < n; ++i) {
        for (int c = 0; c < 3; ++c) alb_g[3 * i + c] += accs[0].grads.albedo_logit[i][c];
        rough_g[i] += accs[0].grads.roughness_logit[i];
      }
      auto& env_g = store.at("env").grad;
      for (const ShadeChunk& acc : accs) {
        for (size_t j = 0; j < env_g.size(); ++j) env_g[j] += acc.env_grad[j];
      }
      for (size_t j = 0; j < env_g.size(); ++j) env_g[j] += lambda * res_env_grad[j];
      loss_light_smooth_backward(env, weights.light_smooth, env_g);
      loss_light_white_backward(env, weights.light_white, env_g);
    }

    LossReport report;
    report.data = data * inv3b;
    report.cache = cache_term * inv3b;
    report.mask = mask * invb;
    report.residual = residual;
    report.albedo_smooth = albedo_smooth;
    report.rough_smooth = rough_smooth;
    report.light_smooth = light_smooth;
    report.light_white = light_white;
    report.finalize(weights);
    if (!std::isfinite(report.total)) {
      char msg[512];
      std::snprintf(msg, sizeof(msg),
                    "stage2_decompose: non-finite loss at step %d (data=%g cache=%g residual=%g "
                    "mask=%g albedo_smooth=%g light_smooth=%g rough_smooth=%g light_white=%g)",
                    step, report.data, report.cache, report.residual, report.mask,
                    report.albedo_smooth, report.light_smooth, report.rough_smooth,
                    report.light_white);
      throw std::runtime_error(msg);
    }
    result.history.push_back(report);

    store.adam_step();
    for (int k = 0; k < K; ++k) {
      std::vector<double> cg(caches[k].param_count(), 0.0);
      if (k == fk) {
        for (const ShadeChunk& acc : accs) {
          for (size_t j = 0; j < cg.size(); ++j) cg[j] += acc.cache_grad[j];
        }
      }
      if (cfg.use_residual && lambda > 0) {
        for (size_t j = 0; j < cg.size(); ++j) cg[j] += lambda * res_cache_grads[k][j];
      }
      cache_adams[k].step(caches[k].params(), cg, cfg.lr_cache);
    }

    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      sync_stage2_params(store, scene, env);
      char stem[64];
      std::snprintf(stem, sizeof(stem), "ckpt_%06d", step + 1);
      const std::string base = cfg.out_dir + "/" + stem;
      save_gaussians(base + "_scene.bin", scene);
      save_env(base + "_env.pfm", env);
      for (int k = 0; k < K; ++k) {
        save_cache(base + "_cache" + std::to_string(k) + ".bin", caches[k]);
      }
    }
  }
  sync_stage2_params(store, scene, env);

  if (detail::geometry_sh_hash(scene) != geo_hash) {
    throw std::logic_error("stage2_decompose: frozen geometry changed");
  }
  if (proxy.hash != mesh_content_hash(proxy.mesh)) {
    throw std::logic_error("stage2_decompose: proxy mesh changed during optimization");
  }
  return result;
}

// --- renderers -------------------------------------------------------------------

ImageBuffer render_shaded(const GaussianScene& scene, const ProxyMesh& proxy,
                          const EnvironmentMap& env, const std::vector<RadianceCache>& caches,
                          const LightAngleTable& table, int k, const Camera& camera,
                          const RunConfig& cfg) {
  if (k < 0 || k >= table.count()) {
    throw std::invalid_argument("render_shaded: light index out of range");
  }
  const bool use_mesh = cfg.backend == "mesh";
  if (use_mesh && static_cast<int>(caches.size()) != table.count()) {
    throw std::invalid_argument("render_shaded: need one cache per light angle");
  }
  if (use_mesh && proxy.mesh.empty()) {
    throw std::invalid_argument("render_shaded: empty proxy mesh");
  }
  const GaussAccel accel(scene);
  const auto backend =
      make_shading_backend(cfg, scene, &accel, proxy, env, table, &caches, nullptr, nullptr);

  const int W = camera.width(), H = camera.height();
  ImageBuffer out(W, H, 4);
  const uint64_t seed = mix_seed(cfg.seed, 7000000 + static_cast<uint64_t>(k));
  parallel_for(static_cast<size_t>(W) * H, [&](size_t pix) {
    const int px = static_cast<int>(pix) % W, py = static_cast<int>(pix) / W;
    const Ray ray = camera.ray_for_pixel(px + 0.5, py + 0.5);
    const RayBlend blend = blend_along_ray(ray, scene, ray.dir.vec(), &accel);
    out.at(px, py, 3) = blend.alpha;
    ShadePoint sp;
    if (!make_shade_point(ray, blend, &proxy, use_mesh, k, sp)) return;
    out.set_rgb(px, py, shade(sp, *backend, cfg.shade_samples, seed, pix));
  });
  return out;
}

namespace {

// Incident supplier for relighting: direct environment light plus one
// direct-lit bounce off the proxy mesh. The light-specific caches stay out of
// the picture entirely.
class BounceBackend : public IncidentBackend {
 public:
  BounceBackend(const GaussianScene& scene, const GaussAccel* accel, const ProxyMesh& proxy,
                const EnvironmentMap& env, int bounce_samples, uint64_t seed)
      : scene_(scene),
        accel_(accel),
        proxy_(proxy),
        env_(env),
        table_(std::vector<double>{0.0}),
        direct_(proxy.mesh, proxy.bvh, env, table_,
                [](const Vec3&, const UnitVec3&, int) { return Vec3{}; }),
        bounce_samples_(bounce_samples),
        seed_(seed),
        extent_(std::max(scene.scene_bounds().max_extent(), 1e-6)) {}

  Vec3 incident(const Vec3& x, const UnitVec3& dir, int) const override {
    const Ray ray(x, dir, 1e-4 * extent_);
    const auto hit = ray_mesh_intersect(proxy_.bvh, proxy_.mesh, ray);
    if (!hit) return env_lookup(env_, dir);
    Vec3 nrm = hit->normal;
    if (dot(nrm, dir.vec()) > 0) nrm = -nrm;
    const auto probe = detail::probe_material(scene_, accel_, hit->point, nrm, extent_);
    ShadePoint sp;
    sp.x = hit->point;
    sp.x_m = hit->point;
    sp.n = UnitVec3(nrm);
    sp.omega_o = UnitVec3(-dir.vec());
    sp.material = probe.valid ? probe.material : Material();
    sp.k = 0;
    double key_src[6] = {x.x, x.y, x.z, dir.x(), dir.y(), dir.z()};
    return shade(sp, direct_, bounce_samples_, seed_, content_hash(key_src, sizeof(key_src)));
  }

  double visibility(const Vec3& x, const UnitVec3& dir) const override {
    const Ray ray(x, dir, 1e-4 * extent_);
    return ray_mesh_intersect(proxy_.bvh, proxy_.mesh, ray) ? 0.0 : 1.0;
  }

 private:
  const GaussianScene& scene_;
  const GaussAccel* accel_;
  const ProxyMesh& proxy_;
  const EnvironmentMap& env_;
  LightAngleTable table_;
  MeshBackend direct_;
  int bounce_samples_;
  uint64_t seed_;
  double extent_;
};

}  // namespace

ImageBuffer relight(const GaussianScene& scene, const ProxyMesh& proxy,
                    const EnvironmentMap& new_env, const Camera& camera, const RunConfig& cfg) {
  if (proxy.mesh.empty()) throw std::invalid_argument("relight: empty proxy mesh");
  const GaussAccel accel(scene);
  const BounceBackend backend(scene, &accel, proxy, new_env, cfg.relight_bounce_samples,
                              mix_seed(cfg.seed, 9000000));
  const uint64_t seed = mix_seed(cfg.seed, 9100000);

  const int W = camera.width(), H = camera.height();
  ImageBuffer out(W, H, 4);
  parallel_for(static_cast<size_t>(W) * H, [&](size_t pix) {
    const int px = static_cast<int>(pix) % W, py = static_cast<int>(pix) / W;
    const Ray ray = camera.ray_for_pixel(px + 0.5, py + 0.5);
    const RayBlend blend = blend_along_ray(ray, scene, ray.dir.vec(), &accel);
    out.at(px, py, 3) = blend.alpha;
    ShadePoint sp;
    if (!make_shade_point(ray, blend, &proxy, /*use_mesh=*/true, 0, sp)) return;
    out.set_rgb(px, py, shade(sp, backend, cfg.relight_samples, seed, pix));
  });
  return out;
}

}  // namespace rotir
