#include "rotir/optim.h"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "rotir/rng.h"

namespace rotir {

void Adam::step(std::vector<double>& params, const std::vector<double>& grad, double lr) {
  if (params.size() != grad.size()) throw std::invalid_argument("Adam: size mismatch");
  if (m.empty()) {
    m.assign(params.size(), 0.0);
    v.assign(params.size(), 0.0);
  }
  if (m.size() != params.size()) throw std::invalid_argument("Adam: state size mismatch");
  ++t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
    const double mh = m[i] / c1;
    const double vh = v[i] / c2;
    params[i] -= lr * mh / (std::sqrt(vh) + eps);
  }
}

ParamStore::Group& ParamStore::add(const std::string& name, size_t size, double lr,
                                   bool trainable) {
  if (has(name)) throw std::invalid_argument("ParamStore: duplicate group " + name);
  auto g = std::make_unique<Group>();
  g->name = name;
  g->value.assign(size, 0.0);
  g->grad.assign(size, 0.0);
  g->lr = lr;
  g->trainable = trainable;
  groups_.push_back(std::move(g));
  return *groups_.back();
}

ParamStore::Group& ParamStore::at(const std::string& name) {
  for (auto& g : groups_)
    if (g->name == name) return *g;
  throw std::out_of_range("ParamStore: no group " + name);
}

const ParamStore::Group& ParamStore::at(const std::string& name) const {
  for (const auto& g : groups_)
    if (g->name == name) return *g;
  throw std::out_of_range("ParamStore: no group " + name);
}

bool ParamStore::has(const std::string& name) const {
  for (const auto& g : groups_)
    if (g->name == name) return true;
  return false;
}

void ParamStore::zero_grad() {
  for (auto& g : groups_) g->grad.assign(g->grad.size(), 0.0);
}

void ParamStore::adam_step() {
  for (auto& g : groups_) {
    if (!g->trainable) continue;
    g->adam.step(g->value, g->grad, g->lr);
  }
}

// --- tape -----------------------------------------------------------------

int Tape::push(double v, Rec r) {
  if (!std::isfinite(v)) {
    throw std::runtime_error(std::string("Tape: non-finite value from op ") + r.op);
  }
  vals_.push_back(v);
  recs_.push_back(r);
  return static_cast<int>(vals_.size()) - 1;
}

int Tape::leaf(double v) { return push(v, Rec{}); }

int Tape::add(int a, int b) { return push(vals_[a] + vals_[b], {a, b, 1.0, 1.0, "add"}); }
int Tape::sub(int a, int b) { return push(vals_[a] - vals_[b], {a, b, 1.0, -1.0, "sub"}); }
int Tape::mul(int a, int b) {
  return push(vals_[a] * vals_[b], {a, b, vals_[b], vals_[a], "mul"});
}
int Tape::div(int a, int b) {
  const double vb = vals_[b];
  return push(vals_[a] / vb, {a, b, 1.0 / vb, -vals_[a] / (vb * vb), "div"});
}
int Tape::neg(int a) { return push(-vals_[a], {a, -1, -1.0, 0.0, "neg"}); }
int Tape::sqr(int a) { return push(vals_[a] * vals_[a], {a, -1, 2.0 * vals_[a], 0.0, "sqr"}); }
int Tape::exp_(int a) {
  const double e = std::exp(vals_[a]);
  return push(e, {a, -1, e, 0.0, "exp"});
}
int Tape::log_(int a) { return push(std::log(vals_[a]), {a, -1, 1.0 / vals_[a], 0.0, "log"}); }
int Tape::softplus_(int a) {
  return push(softplus(vals_[a]), {a, -1, sigmoid(vals_[a]), 0.0, "softplus"});
}
int Tape::sigmoid_(int a) {
  const double s = sigmoid(vals_[a]);
  return push(s, {a, -1, s * (1.0 - s), 0.0, "sigmoid"});
}
int Tape::relu(int a) {
  const double x = vals_[a];
  return push(x > 0.0 ? x : 0.0, {a, -1, x > 0.0 ? 1.0 : 0.0, 0.0, "relu"});
}
int Tape::abs_(int a) {
  const double x = vals_[a];
  return push(std::fabs(x), {a, -1, x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0), 0.0, "abs"});
}

std::vector<double> Tape::backward(int loss) const {
  std::vector<double> adj(vals_.size(), 0.0);
  adj[loss] = 1.0;
  for (int i = static_cast<int>(recs_.size()) - 1; i >= 0; --i) {
    const Rec& r = recs_[i];
    if (adj[i] == 0.0) continue;
    if (r.a >= 0) adj[r.a] += adj[i] * r.da;
    if (r.b >= 0) adj[r.b] += adj[i] * r.db;
  }
  return adj;
}

// --- losses ----------------------------------------------------------------

namespace {

void check_same_shape(const ImageBuffer& a, const ImageBuffer& b, const char* what) {
  if (a.width() != b.width() || a.height() != b.height()) {
    throw std::invalid_argument(std::string(what) + ": image size mismatch");
  }
}

bool mask_on(const ImageBuffer* mask, int x, int y) {
  return mask == nullptr || mask->at(x, y, 0) > 0.5;
}

}  // namespace

double loss_mae(const ImageBuffer& a, const ImageBuffer& b, const ImageBuffer* mask) {
  check_same_shape(a, b, "loss_mae");
  if (a.channels() != b.channels()) throw std::invalid_argument("loss_mae: channel mismatch");
  if (mask) check_same_shape(a, *mask, "loss_mae mask");
  double sum = 0.0;
  size_t n = 0;
  for (int y = 0; y < a.height(); ++y) {
    for (int x = 0; x < a.width(); ++x) {
      if (!mask_on(mask, x, y)) continue;
      for (int c = 0; c < a.channels(); ++c) {
        sum += std::fabs(a.at(x, y, c) - b.at(x, y, c));
        ++n;
      }
    }
  }
  if (n == 0) {
    std::fprintf(stderr, "warning: loss_mae over empty mask, returning 0\n");
    return 0.0;
  }
  return sum / static_cast<double>(n);
}

void loss_mae_backward(const ImageBuffer& a, const ImageBuffer& b, const ImageBuffer* mask,
                       double dl, ImageBuffer& d_a) {
  check_same_shape(a, d_a, "loss_mae_backward");
  size_t n = 0;
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x)
      if (mask_on(mask, x, y)) n += a.channels();
  if (n == 0) return;
  const double w = dl / static_cast<double>(n);
  for (int y = 0; y < a.height(); ++y) {
    for (int x = 0; x < a.width(); ++x) {
      if (!mask_on(mask, x, y)) continue;
      for (int c = 0; c < a.channels(); ++c) {
        const double d = a.at(x, y, c) - b.at(x, y, c);
        d_a.at(x, y, c) += w * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
      }
    }
  }
}

double loss_mask_bce(const ImageBuffer& alpha, const ImageBuffer& gt_mask) {
  check_same_shape(alpha, gt_mask, "loss_mask_bce");
  constexpr double kEps = 1e-12;
  double sum = 0.0;
  for (int y = 0; y < alpha.height(); ++y) {
    for (int x = 0; x < alpha.width(); ++x) {
      const double a = alpha.at(x, y, alpha.channels() == 4 ? 3 : 0);
      const double m = gt_mask.at(x, y, 0);
      // One-sided clamps keep the perfect-match loss exactly zero.
      sum -= m * std::log(a > kEps ? a : kEps) + (1.0 - m) * std::log(1.0 - a > kEps ? 1.0 - a : kEps);
    }
  }
  return sum / static_cast<double>(alpha.pixel_count());
}

void loss_mask_bce_backward(const ImageBuffer& alpha, const ImageBuffer& gt_mask, double dl,
                            ImageBuffer& d_alpha) {
  check_same_shape(alpha, d_alpha, "loss_mask_bce_backward");
  constexpr double kEps = 1e-12;
  const double w = dl / static_cast<double>(alpha.pixel_count());
  const int ac = alpha.channels() == 4 ? 3 : 0;
  for (int y = 0; y < alpha.height(); ++y) {
    for (int x = 0; x < alpha.width(); ++x) {
      const double a = alpha.at(x, y, ac);
      const double m = gt_mask.at(x, y, 0);
      double g = 0.0;
      if (m > 0.0) g -= m / (a > kEps ? a : kEps);
      if (m < 1.0) g += (1.0 - m) / (1.0 - a > kEps ? 1.0 - a : kEps);
      d_alpha.at(x, y, ac) += w * g;
    }
  }
}

namespace {

double channel_abs_diff(const ImageBuffer& img, int x0, int y0, int x1, int y1) {
  double s = 0.0;
  for (int c = 0; c < img.channels(); ++c)
    s += std::fabs(img.at(x1, y1, c) - img.at(x0, y0, c));
  return s / img.channels();
}

}  // namespace

double loss_smooth(const ImageBuffer& map, const ImageBuffer& guide) {
  check_same_shape(map, guide, "loss_smooth");
  double sum = 0.0;
  size_t n = 0;
  for (int y = 0; y < map.height(); ++y) {
    for (int x = 0; x < map.width(); ++x) {
      if (x + 1 < map.width()) {
        sum += channel_abs_diff(map, x, y, x + 1, y) *
               std::exp(-channel_abs_diff(guide, x, y, x + 1, y));
        ++n;
      }
      if (y + 1 < map.height()) {
        sum += channel_abs_diff(map, x, y, x, y + 1) *
               std::exp(-channel_abs_diff(guide, x, y, x, y + 1));
        ++n;
      }
    }
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

void loss_smooth_backward(const ImageBuffer& map, const ImageBuffer& guide, double dl,
                          ImageBuffer& d_map) {
  check_same_shape(map, d_map, "loss_smooth_backward");
  size_t n = 0;
  if (map.width() > 1) n += static_cast<size_t>(map.width() - 1) * map.height();
  if (map.height() > 1) n += static_cast<size_t>(map.height() - 1) * map.width();
  if (n == 0) return;
  const double w = dl / static_cast<double>(n) / map.channels();
  auto pair_grad = [&](int x0, int y0, int x1, int y1) {
    const double ew = std::exp(-channel_abs_diff(guide, x0, y0, x1, y1));
    for (int c = 0; c < map.channels(); ++c) {
      const double d = map.at(x1, y1, c) - map.at(x0, y0, c);
      const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
      d_map.at(x1, y1, c) += w * ew * s;
      d_map.at(x0, y0, c) -= w * ew * s;
    }
  };
  for (int y = 0; y < map.height(); ++y) {
    for (int x = 0; x < map.width(); ++x) {
      if (x + 1 < map.width()) pair_grad(x, y, x + 1, y);
      if (y + 1 < map.height()) pair_grad(x, y, x, y + 1);
    }
  }
}

double loss_light_smooth(const EnvironmentMap& env) {
  const int w = env.width(), h = env.height();
  double sum = 0.0;
  size_t n = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Vec3 c = env.radiance_texel(x, y);
      {
        const Vec3 r = env.radiance_texel((x + 1) % w, y);  // horizontal wrap
        const Vec3 d = r - c;
        sum += dot(d, d);
        n += 3;
      }
      if (y + 1 < h) {
        const Vec3 d = env.radiance_texel(x, y + 1) - c;
        sum += dot(d, d);
        n += 3;
      }
    }
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

void loss_light_smooth_backward(const EnvironmentMap& env, double dl, std::vector<double>& grad_raw) {
  if (grad_raw.size() != env.param_count()) {
    throw std::invalid_argument("loss_light_smooth_backward: grad size mismatch");
  }
  const int w = env.width(), h = env.height();
  size_t n = static_cast<size_t>(w) * h * 3;            // horizontal pairs
  if (h > 1) n += static_cast<size_t>(w) * (h - 1) * 3; // vertical pairs
  const double s = dl / static_cast<double>(n);
  const std::vector<double>& raw = env.raw();
  auto pair_grad = [&](int x0, int y0, int x1, int y1) {
    const size_t o0 = env.texel_offset(x0, y0), o1 = env.texel_offset(x1, y1);
    const Vec3 d = env.radiance_texel(x1, y1) - env.radiance_texel(x0, y0);
    const double dc[3] = {d.x, d.y, d.z};
    for (int c = 0; c < 3; ++c) {
      const double g = s * 2.0 * dc[c];
      grad_raw[o1 + c] += g * sigmoid(raw[o1 + c]);
      grad_raw[o0 + c] -= g * sigmoid(raw[o0 + c]);
    }
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      pair_grad(x, y, (x + 1) % w, y);
      if (y + 1 < h) pair_grad(x, y, x, y + 1);
    }
  }
}

namespace {

constexpr uint64_t kSaltResidualK = 0x52;

int residual_light_index(const ResidualConfig& cfg, size_t i, size_t n_caches) {
  DetRng rng(cfg.seed, i, 0, 0, kSaltResidualK);
  return static_cast<int>(rng.below(n_caches));
}

ShadePoint residual_shade_point(const SurfaceSample& s, const Material& mat, int k) {
  ShadePoint sp;
  sp.x = s.point;
  sp.x_m = s.point;
  sp.n = UnitVec3(s.normal);
  sp.omega_o = UnitVec3(s.dir);
  sp.material = mat;
  sp.k = k;
  return sp;
}

}  // namespace

double loss_residual(const std::vector<SurfaceSample>& samples,
                     const std::vector<RadianceCache>& caches, const IncidentBackend& backend,
                     const MaterialQuery& material, const ResidualConfig& cfg) {
  if (samples.empty()) throw std::invalid_argument("loss_residual: no surface samples");
  if (caches.empty()) throw std::invalid_argument("loss_residual: no caches");
  if (cfg.n_inner < 1) throw std::invalid_argument("loss_residual: n_inner must be >= 1");
  double sum = 0.0;
  for (size_t i = 0; i < samples.size(); ++i) {
    const int k = residual_light_index(cfg, i, caches.size());
    const ShadePoint sp = residual_shade_point(samples[i], material(samples[i]), k);
    const Vec3 r = cache_query(caches[k], sp.x, sp.omega_o);
    const Vec3 lo = shade(sp, backend, cfg.n_inner, cfg.seed, i);
    const Vec3 d = r - lo;
    sum += std::fabs(d.x) + std::fabs(d.y) + std::fabs(d.z);
  }
  return sum / (3.0 * static_cast<double>(samples.size()));
}

double loss_residual_backward(const std::vector<SurfaceSample>& samples,
                              const std::vector<RadianceCache>& caches,
                              const IncidentBackend& backend, const MaterialQuery& material,
                              const ResidualConfig& cfg,
                              std::vector<std::vector<double>>& cache_grads,
                              const MaterialGradSink& material_grad) {
  if (cache_grads.size() != caches.size()) {
    throw std::invalid_argument("loss_residual_backward: cache_grads size mismatch");
  }
  if (samples.empty()) throw std::invalid_argument("loss_residual: no surface samples");
  if (caches.empty()) throw std::invalid_argument("loss_residual: no caches");
  const double inv_n = 1.0 / (3.0 * static_cast<double>(samples.size()));
  double sum = 0.0;
  for (size_t i = 0; i < samples.size(); ++i) {
    const int k = residual_light_index(cfg, i, caches.size());
    const ShadePoint sp = residual_shade_point(samples[i], material(samples[i]), k);
    const Vec3 r = cache_query(caches[k], sp.x, sp.omega_o);
    const Vec3 lo = shade(sp, backend, cfg.n_inner, cfg.seed, i);
    const Vec3 d = r - lo;
    sum += std::fabs(d.x) + std::fabs(d.y) + std::fabs(d.z);
    const Vec3 sign(d.x > 0 ? 1.0 : (d.x < 0 ? -1.0 : 0.0), d.y > 0 ? 1.0 : (d.y < 0 ? -1.0 : 0.0),
                    d.z > 0 ? 1.0 : (d.z < 0 ? -1.0 : 0.0));
    cache_query_backward(caches[k], sp.x, sp.omega_o, inv_n * sign, cache_grads[k]);
    if (!cfg.stop_grad_shading) {
      const ShadeGrad g = shade_backward(sp, backend, cfg.n_inner, cfg.seed, i, -inv_n * sign);
      if (material_grad) material_grad(samples[i], g.d_albedo, g.d_roughness);
    }
  }
  return sum / (3.0 * static_cast<double>(samples.size()));
}

double loss_light_white(const EnvironmentMap& env) {
  const int w = env.width(), h = env.height();
  double sum = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Vec3 c = env.radiance_texel(x, y);
      const double m = mean(c);
      sum += std::fabs(c.x - m) + std::fabs(c.y - m) + std::fabs(c.z - m);
    }
  }
  return sum / (static_cast<double>(w) * h * 3.0);
}

void loss_light_white_backward(const EnvironmentMap& env, double dl, std::vector<double>& grad_raw) {
  if (grad_raw.size() != env.param_count()) {
    throw std::invalid_argument("loss_light_white_backward: grad size mismatch");
  }
  const int w = env.width(), h = env.height();
  const double s = dl / (static_cast<double>(w) * h * 3.0);
  const std::vector<double>& raw = env.raw();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const size_t o = env.texel_offset(x, y);
      const Vec3 c = env.radiance_texel(x, y);
      const double m = mean(c);
      const double cc[3] = {c.x, c.y, c.z};
      double sg[3], sg_sum = 0.0;
      for (int i = 0; i < 3; ++i) {
        const double d = cc[i] - m;
        sg[i] = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        sg_sum += sg[i];
      }
      // d|c_i - m|/dc_j = sign_i * (delta_ij - 1/3)
      for (int j = 0; j < 3; ++j) {
        const double g = sg[j] - sg_sum / 3.0;
        grad_raw[o + j] += s * g * sigmoid(raw[o + j]);
      }
    }
  }
}

std::string loss_csv_header() {
  return "step,data,cache,residual,mask,albedo_smooth,light_smooth,rough_smooth,light_white,total\n";
}

std::string loss_csv_row(int step, const LossReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", step, r.data,
                r.cache, r.residual, r.mask, r.albedo_smooth, r.light_smooth, r.rough_smooth,
                r.light_white, r.total);
  return buf;
}

}  // namespace rotir
