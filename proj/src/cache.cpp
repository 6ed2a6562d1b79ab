#include "rotir/cache.h"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "rotir/optim.h"
#include "rotir/rng.h"

namespace rotir {

namespace {
constexpr uint64_t kSaltInit = 0x6c;
constexpr uint64_t kSaltStep = 0x6e;
constexpr char kMagic[8] = {'R', 'C', 'A', 'C', 'H', 'E', '0', '1'};
}  // namespace

void HashGridConfig::validate() const {
  if (levels < 1) throw std::invalid_argument("HashGridConfig: levels must be >= 1");
  if (table_size == 0 || (table_size & (table_size - 1)) != 0) {
    throw std::invalid_argument("HashGridConfig: table_size must be a power of two");
  }
  if (features < 1) throw std::invalid_argument("HashGridConfig: features must be >= 1");
  if (base_resolution < 1) throw std::invalid_argument("HashGridConfig: base_resolution must be >= 1");
  if (!(growth > 0.0)) throw std::invalid_argument("HashGridConfig: growth must be positive");
}

int HashGridConfig::level_resolution(int level) const {
  const double r = base_resolution * std::pow(growth, level);
  return std::max(1, static_cast<int>(std::floor(r)));
}

uint32_t hash_grid_index(uint32_t ix, uint32_t iy, uint32_t iz, uint32_t table_size) {
  return (ix * 1u ^ iy * 2654435761u ^ iz * 805459861u) & (table_size - 1u);
}

namespace {

struct CornerWeights {
  uint32_t i0[3];
  double f[3];
};

CornerWeights corner_weights(const Vec3& x, int resolution) {
  CornerWeights cw;
  const double xc[3] = {clamp(x.x, 0.0, 1.0), clamp(x.y, 0.0, 1.0), clamp(x.z, 0.0, 1.0)};
  for (int a = 0; a < 3; ++a) {
    const double p = xc[a] * resolution;
    double i = std::floor(p);
    if (i > resolution - 1) i = resolution - 1;  // x = 1 lands on the last cell
    cw.i0[a] = static_cast<uint32_t>(i);
    cw.f[a] = p - i;
  }
  return cw;
}

}  // namespace

void encode_position(const HashGridConfig& cfg, const double* tables, const Vec3& x, double* out) {
  const int F = cfg.features;
  for (int l = 0; l < cfg.levels; ++l) {
    const CornerWeights cw = corner_weights(x, cfg.level_resolution(l));
    const double* level_table = tables + static_cast<size_t>(l) * cfg.table_size * F;
    double* feat = out + static_cast<size_t>(l) * F;
    for (int f = 0; f < F; ++f) feat[f] = 0.0;
    for (int c = 0; c < 8; ++c) {
      const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
      const double w = (dx ? cw.f[0] : 1.0 - cw.f[0]) * (dy ? cw.f[1] : 1.0 - cw.f[1]) *
                       (dz ? cw.f[2] : 1.0 - cw.f[2]);
      if (w == 0.0) continue;
      const uint32_t h =
          hash_grid_index(cw.i0[0] + dx, cw.i0[1] + dy, cw.i0[2] + dz, cfg.table_size);
      const double* entry = level_table + static_cast<size_t>(h) * F;
      for (int f = 0; f < F; ++f) feat[f] += w * entry[f];
    }
  }
}

void encode_position_backward(const HashGridConfig& cfg, const Vec3& x, const double* dl_dout,
                              double* grad_tables) {
  const int F = cfg.features;
  for (int l = 0; l < cfg.levels; ++l) {
    const CornerWeights cw = corner_weights(x, cfg.level_resolution(l));
    double* level_grad = grad_tables + static_cast<size_t>(l) * cfg.table_size * F;
    const double* dl = dl_dout + static_cast<size_t>(l) * F;
    for (int c = 0; c < 8; ++c) {
      const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
      const double w = (dx ? cw.f[0] : 1.0 - cw.f[0]) * (dy ? cw.f[1] : 1.0 - cw.f[1]) *
                       (dz ? cw.f[2] : 1.0 - cw.f[2]);
      if (w == 0.0) continue;
      const uint32_t h =
          hash_grid_index(cw.i0[0] + dx, cw.i0[1] + dy, cw.i0[2] + dz, cfg.table_size);
      double* entry = level_grad + static_cast<size_t>(h) * F;
      for (int f = 0; f < F; ++f) entry[f] += w * dl[f];
    }
  }
}

void encode_direction(const UnitVec3& d, int n_freq, double* out) {
  const double dc[3] = {d.x(), d.y(), d.z()};
  for (int j = 0; j < n_freq; ++j) {
    const double f = kPi * std::ldexp(1.0, j);
    for (int c = 0; c < 3; ++c) {
      out[6 * j + c] = std::sin(f * dc[c]);
      out[6 * j + 3 + c] = std::cos(f * dc[c]);
    }
  }
}

RadianceCache::RadianceCache(int k, const Aabb& box, const HashGridConfig& grid, int n_freq,
                             int hidden, uint64_t seed)
    : k_(k), box_(box), grid_(grid), n_freq_(n_freq), hidden_(hidden) {
  grid_.validate();
  if (k < 0) throw std::invalid_argument("RadianceCache: negative light index");
  if (n_freq < 1) throw std::invalid_argument("RadianceCache: n_freq must be >= 1");
  if (hidden < 1) throw std::invalid_argument("RadianceCache: hidden width must be >= 1");
  const Vec3 e = box.extent();
  if (!(e.x > 0.0) || !(e.y > 0.0) || !(e.z > 0.0)) {
    throw std::invalid_argument("RadianceCache: scene box must have positive extent");
  }
  params_.assign(off_b3() + 3, 0.0);

  DetRng rng(seed, static_cast<uint64_t>(k), 0, 0, kSaltInit);
  for (size_t i = 0; i < grid_.param_count(); ++i) {
    params_[i] = 2e-4 * rng.uniform() - 1e-4;
  }
  const double a1 = std::sqrt(6.0 / enc_dim());
  for (size_t i = off_w1(); i < off_b1(); ++i) params_[i] = a1 * (2.0 * rng.uniform() - 1.0);
  const double a2 = std::sqrt(6.0 / hidden_);
  for (size_t i = off_w2(); i < off_b2(); ++i) params_[i] = a2 * (2.0 * rng.uniform() - 1.0);
  // last layer zero so a fresh cache outputs softplus(b3) = 0.1 dim uniform
  for (int c = 0; c < 3; ++c) params_[off_b3() + c] = softplus_inv(0.1);
}

Vec3 RadianceCache::normalize_point(const Vec3& x) const {
  const Vec3 e = box_.extent();
  return {clamp((x.x - box_.lo.x) / e.x, 0.0, 1.0), clamp((x.y - box_.lo.y) / e.y, 0.0, 1.0),
          clamp((x.z - box_.lo.z) / e.z, 0.0, 1.0)};
}

namespace {

// Forward pass with retained activations; shared by query and backward.
struct CacheForward {
  std::vector<double> enc, s1, h1, s2, h2;
  double out_pre[3];
  Vec3 rgb;
};

void cache_forward(const RadianceCache& cache, const Vec3& x, const UnitVec3& d, CacheForward& fw) {
  const int E = cache.enc_dim(), H = cache.hidden();
  const int feat_dim = cache.grid().feature_dim();
  const std::vector<double>& p = cache.params();

  fw.enc.resize(E);
  encode_position(cache.grid(), p.data(), cache.normalize_point(x), fw.enc.data());
  encode_direction(d, cache.n_freq(), fw.enc.data() + feat_dim);

  fw.s1.resize(H);
  fw.h1.resize(H);
  const double* w1 = p.data() + cache.off_w1();
  const double* b1 = p.data() + cache.off_b1();
  for (int i = 0; i < H; ++i) {
    double s = b1[i];
    const double* row = w1 + static_cast<size_t>(i) * E;
    for (int j = 0; j < E; ++j) s += row[j] * fw.enc[j];
    fw.s1[i] = s;
    fw.h1[i] = s > 0.0 ? s : 0.0;
  }

  fw.s2.resize(H);
  fw.h2.resize(H);
  const double* w2 = p.data() + cache.off_w2();
  const double* b2 = p.data() + cache.off_b2();
  for (int i = 0; i < H; ++i) {
    double s = b2[i];
    const double* row = w2 + static_cast<size_t>(i) * H;
    for (int j = 0; j < H; ++j) s += row[j] * fw.h1[j];
    fw.s2[i] = s;
    fw.h2[i] = s > 0.0 ? s : 0.0;
  }

  const double* w3 = p.data() + cache.off_w3();
  const double* b3 = p.data() + cache.off_b3();
  double rgb[3];
  for (int c = 0; c < 3; ++c) {
    double s = b3[c];
    const double* row = w3 + static_cast<size_t>(c) * H;
    for (int j = 0; j < H; ++j) s += row[j] * fw.h2[j];
    fw.out_pre[c] = s;
    rgb[c] = softplus(s);
  }
  fw.rgb = {rgb[0], rgb[1], rgb[2]};
  if (!std::isfinite(fw.rgb.x) || !std::isfinite(fw.rgb.y) || !std::isfinite(fw.rgb.z)) {
    throw std::runtime_error("cache_query: non-finite output (bad parameters?)");
  }
}

}  // namespace

Vec3 cache_query(const RadianceCache& cache, const Vec3& x, const UnitVec3& d) {
  CacheForward fw;
  cache_forward(cache, x, d, fw);
  return fw.rgb;
}

Vec3 cache_query_backward(const RadianceCache& cache, const Vec3& x, const UnitVec3& d,
                          const Vec3& dl_drgb, std::vector<double>& grad) {
  if (grad.size() != cache.param_count()) {
    throw std::invalid_argument("cache_query_backward: grad size mismatch");
  }
  CacheForward fw;
  cache_forward(cache, x, d, fw);

  const int E = cache.enc_dim(), H = cache.hidden();
  const int feat_dim = cache.grid().feature_dim();
  const std::vector<double>& p = cache.params();

  const double dl[3] = {dl_drgb.x, dl_drgb.y, dl_drgb.z};
  double d_out[3];
  for (int c = 0; c < 3; ++c) d_out[c] = dl[c] * sigmoid(fw.out_pre[c]);

  std::vector<double> d_h2(H, 0.0);
  const double* w3 = p.data() + cache.off_w3();
  for (int c = 0; c < 3; ++c) {
    grad[cache.off_b3() + c] += d_out[c];
    double* gw3 = grad.data() + cache.off_w3() + static_cast<size_t>(c) * H;
    const double* row = w3 + static_cast<size_t>(c) * H;
    for (int j = 0; j < H; ++j) {
      gw3[j] += d_out[c] * fw.h2[j];
      d_h2[j] += d_out[c] * row[j];
    }
  }

  std::vector<double> d_h1(H, 0.0);
  const double* w2 = p.data() + cache.off_w2();
  for (int i = 0; i < H; ++i) {
    if (fw.s2[i] <= 0.0) continue;
    const double ds = d_h2[i];
    grad[cache.off_b2() + i] += ds;
    double* gw2 = grad.data() + cache.off_w2() + static_cast<size_t>(i) * H;
    const double* row = w2 + static_cast<size_t>(i) * H;
    for (int j = 0; j < H; ++j) {
      gw2[j] += ds * fw.h1[j];
      d_h1[j] += ds * row[j];
    }
  }

  std::vector<double> d_enc(E, 0.0);
  const double* w1 = p.data() + cache.off_w1();
  for (int i = 0; i < H; ++i) {
    if (fw.s1[i] <= 0.0) continue;
    const double ds = d_h1[i];
    grad[cache.off_b1() + i] += ds;
    double* gw1 = grad.data() + cache.off_w1() + static_cast<size_t>(i) * E;
    const double* row = w1 + static_cast<size_t>(i) * E;
    for (int j = 0; j < E; ++j) {
      gw1[j] += ds * fw.enc[j];
      d_enc[j] += ds * row[j];
    }
  }

  // only the position half of the encoding is trainable
  encode_position_backward(cache.grid(), cache.normalize_point(x), d_enc.data(), grad.data());
  (void)feat_dim;
  return fw.rgb;
}

// --- pretraining -------------------------------------------------------------

PretrainResult pretrain_caches(const std::vector<CacheTrainView>& views, const TriangleMesh& mesh,
                               const Bvh& bvh, int n_lights, const HashGridConfig& grid,
                               const PretrainConfig& cfg) {
  if (views.empty()) throw std::invalid_argument("pretrain_caches: no views");
  if (n_lights < 1) throw std::invalid_argument("pretrain_caches: n_lights must be >= 1");
  if (mesh.triangle_count() == 0) throw std::invalid_argument("pretrain_caches: empty mesh");
  if (cfg.steps < 1 || cfg.batch_pixels < 1) {
    throw std::invalid_argument("pretrain_caches: steps and batch_pixels must be >= 1");
  }
  for (const auto& v : views) {
    if (v.image == nullptr) throw std::invalid_argument("pretrain_caches: view without image");
    if (v.k < 0 || v.k >= n_lights) throw std::invalid_argument("pretrain_caches: view k out of range");
    if (v.image->width() != v.camera.width() || v.image->height() != v.camera.height()) {
      throw std::invalid_argument("pretrain_caches: image/camera size mismatch");
    }
  }

  Aabb box = mesh.bounds();
  const double pad = cfg.box_pad * box.max_extent();
  if (!(pad > 0.0)) throw std::invalid_argument("pretrain_caches: degenerate mesh bounds");
  box = box.padded(pad);

  PretrainResult res;
  res.caches.reserve(n_lights);
  for (int k = 0; k < n_lights; ++k) {
    res.caches.emplace_back(k, box, grid, cfg.n_freq, cfg.hidden, cfg.seed);
  }
  std::vector<Adam> opts(n_lights);
  std::vector<double> grad(res.caches[0].param_count(), 0.0);
  res.mse_curve.reserve(cfg.steps);

  struct HitSample {
    Vec3 y;
    UnitVec3 toward;
    Vec3 target;
  };
  std::vector<HitSample> hits;
  hits.reserve(cfg.batch_pixels);

  for (int step = 0; step < cfg.steps; ++step) {
    DetRng rng(cfg.seed, static_cast<uint64_t>(step), 0, 0, kSaltStep);
    const CacheTrainView& view = views[rng.below(views.size())];
    RadianceCache& cache = res.caches[view.k];

    hits.clear();
    for (int b = 0; b < cfg.batch_pixels; ++b) {
      const int px = static_cast<int>(rng.below(static_cast<uint64_t>(view.camera.width())));
      const int py = static_cast<int>(rng.below(static_cast<uint64_t>(view.camera.height())));
      const Ray ray = view.camera.ray_for_pixel(px + 0.5, py + 0.5);
      const auto hit = ray_mesh_intersect(bvh, mesh, ray);
      if (!hit) continue;
      hits.push_back({hit->point, -ray.dir, view.image->rgb(px, py)});
    }
    if (hits.empty()) {
      throw std::runtime_error("pretrain_caches: a training step found zero mesh hits");
    }

    grad.assign(grad.size(), 0.0);
    const double inv_n = 1.0 / (3.0 * static_cast<double>(hits.size()));
    double mse = 0.0;
    for (const HitSample& h : hits) {
      const Vec3 rgb = cache_query(cache, h.y, h.toward);
      const Vec3 d = rgb - h.target;
      mse += dot(d, d) * inv_n;
      cache_query_backward(cache, h.y, h.toward, 2.0 * inv_n * d, grad);
    }
    res.mse_curve.push_back(mse);
    opts[view.k].step(cache.params(), grad, cfg.lr);
  }
  return res;
}

// --- checkpoints --------------------------------------------------------------

void save_cache(const std::string& path, const RadianceCache& cache) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_cache: cannot open " + path);
  out.write(kMagic, 8);
  auto w32 = [&](int32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  auto wu32 = [&](uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  auto wf64 = [&](double v) { out.write(reinterpret_cast<const char*>(&v), 8); };
  w32(cache.light_index());
  w32(cache.grid().levels);
  wu32(cache.grid().table_size);
  w32(cache.grid().features);
  w32(cache.grid().base_resolution);
  wf64(cache.grid().growth);
  w32(cache.n_freq());
  w32(cache.hidden());
  const Aabb& b = cache.box();
  for (double v : {b.lo.x, b.lo.y, b.lo.z, b.hi.x, b.hi.y, b.hi.z}) wf64(v);
  const uint64_t n = cache.param_count();
  out.write(reinterpret_cast<const char*>(&n), 8);
  out.write(reinterpret_cast<const char*>(cache.params().data()),
            static_cast<std::streamsize>(n * sizeof(double)));
  if (!out) throw std::runtime_error("save_cache: write failed for " + path);
}

RadianceCache load_cache(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_cache: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("load_cache: bad magic in " + path);
  }
  auto r32 = [&]() { int32_t v; in.read(reinterpret_cast<char*>(&v), 4); return v; };
  auto ru32 = [&]() { uint32_t v; in.read(reinterpret_cast<char*>(&v), 4); return v; };
  auto rf64 = [&]() { double v; in.read(reinterpret_cast<char*>(&v), 8); return v; };
  const int k = r32();
  HashGridConfig grid;
  grid.levels = r32();
  grid.table_size = ru32();
  grid.features = r32();
  grid.base_resolution = r32();
  grid.growth = rf64();
  const int n_freq = r32();
  const int hidden = r32();
  Aabb box;
  box.lo = {rf64(), rf64(), rf64()};
  box.hi = {rf64(), rf64(), rf64()};
  uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), 8);
  if (!in) throw std::runtime_error("load_cache: truncated header in " + path);
  RadianceCache cache(k, box, grid, n_freq, hidden, 0);
  if (n != cache.param_count()) throw std::runtime_error("load_cache: parameter count mismatch");
  in.read(reinterpret_cast<char*>(cache.params().data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw std::runtime_error("load_cache: truncated parameters in " + path);
  return cache;
}

}  // namespace rotir
