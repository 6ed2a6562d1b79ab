#include <doctest.h>

#include <cmath>

#include "rotir/optim.h"
#include "rotir/rng.h"

using namespace rotir;

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  std::vector<double> p = {1.5, -2.0, 0.0};
  const std::vector<double> g(3, 0.0);
  Adam opt;
  for (int i = 0; i < 10; ++i) opt.step(p, g, 0.1);
  CHECK(p[0] == 1.5);
  CHECK(p[1] == -2.0);
  CHECK(p[2] == 0.0);
}

TEST_CASE("adam: first-step magnitude is approximately the learning rate") {
  for (double g0 : {0.37, -12.0, 1e-3}) {
    std::vector<double> p = {0.0};
    Adam opt;
    opt.step(p, {g0}, 0.05);
    // bias-corrected first step: lr * g / (|g| + eps)
    CHECK(std::fabs(p[0]) == doctest::Approx(0.05).epsilon(1e-4));
    CHECK((p[0] < 0.0) == (g0 > 0.0));
  }
}

TEST_CASE("adam: minimizes theta^2 to |theta| < 1e-3 in 500 steps at lr 0.1") {
  std::vector<double> p = {3.0};
  Adam opt;
  for (int i = 0; i < 500; ++i) opt.step(p, {2.0 * p[0]}, 0.1);
  CHECK(std::fabs(p[0]) < 1e-3);
}

TEST_CASE("adam: size mismatch throws") {
  std::vector<double> p = {1.0, 2.0};
  Adam opt;
  CHECK_THROWS_AS(opt.step(p, {1.0}, 0.1), std::invalid_argument);
}

TEST_CASE("param store: named groups, per-group lr, frozen groups stay put") {
  ParamStore store;
  auto& mat = store.add("materials", 4, 5e-3);
  store.add("geometry", 2, 1e-2, /*trainable=*/false);
  CHECK_THROWS_AS(store.add("materials", 1, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(store.at("nope"), std::out_of_range);
  CHECK(store.has("geometry"));

  mat.value = {1.0, 1.0, 1.0, 1.0};
  store.at("geometry").value = {7.0, -7.0};
  store.zero_grad();
  store.at("materials").grad = {1.0, -1.0, 0.0, 2.0};
  store.at("geometry").grad = {5.0, 5.0};
  store.adam_step();

  // frozen group untouched even with nonzero grads
  CHECK(store.at("geometry").value[0] == 7.0);
  CHECK(store.at("geometry").value[1] == -7.0);
  // trainable group moved by ~lr in the right directions
  CHECK(store.at("materials").value[0] == doctest::Approx(1.0 - 5e-3).epsilon(1e-4));
  CHECK(store.at("materials").value[1] == doctest::Approx(1.0 + 5e-3).epsilon(1e-4));
  CHECK(store.at("materials").value[2] == 1.0);
}

TEST_CASE("tape: d(theta^2)/dtheta = 6 at theta = 3") {
  Tape t;
  const int th = t.leaf(3.0);
  const int loss = t.sqr(th);
  const auto adj = t.backward(loss);
  CHECK(adj[th] == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("tape: d softplus/dx = 0.5 at x = 0") {
  Tape t;
  const int x = t.leaf(0.0);
  const int y = t.softplus_(x);
  CHECK(t.value(y) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  const auto adj = t.backward(y);
  CHECK(adj[x] == doctest::Approx(0.5).epsilon(1e-15));
}

namespace {

// f(x, y) built from most tape ops; returns loss node.
int tape_expr(Tape& t, int x, int y) {
  const int a = t.mul(t.sigmoid_(x), t.softplus_(y));
  const int b = t.div(x, t.add(t.sqr(y), t.leaf(1.0)));
  const int c = t.log_(t.add(t.exp_(x), t.sqr(y)));
  const int d = t.relu(t.sub(x, y));
  const int e = t.abs_(t.neg(y));
  return t.add(t.add(a, b), t.add(c, t.mul(d, e)));
}

double tape_expr_value(double xv, double yv) {
  Tape t;
  return t.value(tape_expr(t, t.leaf(xv), t.leaf(yv)));
}

}  // namespace

TEST_CASE("tape: chained expression gradients match finite differences") {
  DetRng rng(99, 0, 0, 0, 0x70);
  for (int trial = 0; trial < 20; ++trial) {
    const double xv = rng.uniform() * 4.0 - 2.0;
    const double yv = rng.uniform() * 4.0 - 2.0;
    if (std::fabs(xv - yv) < 1e-3 || std::fabs(yv) < 1e-3) continue;  // kinks
    Tape t;
    const int x = t.leaf(xv), y = t.leaf(yv);
    const auto adj = t.backward(tape_expr(t, x, y));
    const double h = 1e-6;
    const double fx = (tape_expr_value(xv + h, yv) - tape_expr_value(xv - h, yv)) / (2 * h);
    const double fy = (tape_expr_value(xv, yv + h) - tape_expr_value(xv, yv - h)) / (2 * h);
    CHECK(adj[x] == doctest::Approx(fx).epsilon(1e-5));
    CHECK(adj[y] == doctest::Approx(fy).epsilon(1e-5));
  }
}

TEST_CASE("tape: non-finite forward values are flagged with the op") {
  Tape t;
  const int z = t.leaf(0.0);
  CHECK_THROWS_WITH_AS(t.div(t.leaf(1.0), z), "Tape: non-finite value from op div",
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(t.log_(t.leaf(-1.0)), "Tape: non-finite value from op log",
                       std::runtime_error);
}

// --- losses ----------------------------------------------------------------

namespace {

ImageBuffer random_image(int w, int h, int c, uint64_t salt, double lo = 0.0, double hi = 1.0) {
  ImageBuffer img(w, h, c);
  DetRng rng(7, salt, 0, 0, 0x71);
  for (double& v : img.data()) v = lo + (hi - lo) * rng.uniform();
  return img;
}

}  // namespace

TEST_CASE("loss_mae: identities and masking") {
  const ImageBuffer a = random_image(6, 5, 3, 1);
  CHECK(loss_mae(a, a) == 0.0);

  ImageBuffer b = a;
  for (double& v : b.data()) v += 0.1;
  CHECK(loss_mae(a, b) == doctest::Approx(0.1).epsilon(1e-12));

  // mask restricted to one pixel -> just that pixel's mean abs diff
  ImageBuffer mask(6, 5, 1, 0.0);
  mask.at(2, 3, 0) = 1.0;
  ImageBuffer c = a;
  c.at(2, 3, 0) += 0.3;
  c.at(0, 0, 0) += 100.0;  // outside mask, must not contribute
  CHECK(loss_mae(a, c, &mask) == doctest::Approx(0.1).epsilon(1e-12));

  const ImageBuffer empty_mask(6, 5, 1, 0.0);
  CHECK(loss_mae(a, c, &empty_mask) == 0.0);
}

TEST_CASE("loss_mae: backward matches finite differences") {
  ImageBuffer a = random_image(4, 3, 3, 2);
  const ImageBuffer b = random_image(4, 3, 3, 3);
  ImageBuffer mask(4, 3, 1, 1.0);
  mask.at(1, 1, 0) = 0.0;
  ImageBuffer d_a(4, 3, 3, 0.0);
  loss_mae_backward(a, b, &mask, 2.0, d_a);
  const double h = 1e-7;
  for (size_t i = 0; i < a.data().size(); i += 5) {
    const double keep = a.data()[i];
    a.data()[i] = keep + h;
    const double up = loss_mae(a, b, &mask);
    a.data()[i] = keep - h;
    const double dn = loss_mae(a, b, &mask);
    a.data()[i] = keep;
    const double fd = 2.0 * (up - dn) / (2 * h);
    CHECK(d_a.data()[i] == doctest::Approx(fd).epsilon(1e-5));
  }
}

TEST_CASE("loss_mask_bce: exact zero on perfect match, scripted value otherwise") {
  ImageBuffer alpha(3, 2, 1);
  ImageBuffer gt(3, 2, 1);
  DetRng rng(11, 0, 0, 0, 0x72);
  for (size_t i = 0; i < alpha.data().size(); ++i) {
    const double m = rng.uniform() < 0.5 ? 0.0 : 1.0;
    gt.data()[i] = m;
    alpha.data()[i] = m;
  }
  CHECK(loss_mask_bce(alpha, gt) == 0.0);

  ImageBuffer a1(1, 1, 1, 0.7), m1(1, 1, 1, 1.0);
  CHECK(loss_mask_bce(a1, m1) == doctest::Approx(-std::log(0.7)).epsilon(1e-12));
  ImageBuffer m0(1, 1, 1, 0.0);
  CHECK(loss_mask_bce(a1, m0) == doctest::Approx(-std::log(0.3)).epsilon(1e-12));

  // 4-channel render: alpha channel is used
  ImageBuffer rgba(1, 1, 4, 0.0);
  rgba.at(0, 0, 3) = 0.7;
  CHECK(loss_mask_bce(rgba, m1) == doctest::Approx(-std::log(0.7)).epsilon(1e-12));
}

TEST_CASE("loss_mask_bce: backward matches finite differences") {
  ImageBuffer alpha = random_image(4, 4, 1, 4, 0.1, 0.9);
  ImageBuffer gt(4, 4, 1);
  DetRng rng(12, 0, 0, 0, 0x73);
  for (double& v : gt.data()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
  ImageBuffer d_alpha(4, 4, 1, 0.0);
  loss_mask_bce_backward(alpha, gt, 1.5, d_alpha);
  const double h = 1e-7;
  for (size_t i = 0; i < alpha.data().size(); i += 3) {
    const double keep = alpha.data()[i];
    alpha.data()[i] = keep + h;
    const double up = loss_mask_bce(alpha, gt);
    alpha.data()[i] = keep - h;
    const double dn = loss_mask_bce(alpha, gt);
    alpha.data()[i] = keep;
    const double fd = 1.5 * (up - dn) / (2 * h);
    CHECK(d_alpha.data()[i] == doctest::Approx(fd).epsilon(1e-5));
  }
}

TEST_CASE("loss_smooth: constant map is zero; guide edges downweight") {
  const ImageBuffer flat(5, 4, 3, 0.42);
  const ImageBuffer guide = random_image(5, 4, 3, 5);
  CHECK(loss_smooth(flat, guide) == 0.0);

  // 2x1 single pair: |diff| * exp(-|guide diff|)
  ImageBuffer m(2, 1, 1);
  m.at(0, 0, 0) = 0.2;
  m.at(1, 0, 0) = 0.9;
  ImageBuffer g(2, 1, 1);
  g.at(0, 0, 0) = 0.0;
  g.at(1, 0, 0) = 2.0;
  CHECK(loss_smooth(m, g) == doctest::Approx(0.7 * std::exp(-2.0)).epsilon(1e-12));
}

TEST_CASE("loss_smooth: backward matches finite differences") {
  ImageBuffer m = random_image(4, 3, 3, 6);
  const ImageBuffer g = random_image(4, 3, 3, 7);
  ImageBuffer d_m(4, 3, 3, 0.0);
  loss_smooth_backward(m, g, 0.7, d_m);
  const double h = 1e-7;
  for (size_t i = 0; i < m.data().size(); i += 4) {
    const double keep = m.data()[i];
    m.data()[i] = keep + h;
    const double up = loss_smooth(m, g);
    m.data()[i] = keep - h;
    const double dn = loss_smooth(m, g);
    m.data()[i] = keep;
    const double fd = 0.7 * (up - dn) / (2 * h);
    CHECK(d_m.data()[i] == doctest::Approx(fd).epsilon(2e-5));
  }
}

TEST_CASE("light losses: constant gray environment scores zero on both") {
  const EnvironmentMap env(4, 0.5);
  CHECK(loss_light_smooth(env) == 0.0);
  CHECK(loss_light_white(env) == 0.0);
}

TEST_CASE("loss_light_smooth: matches a direct difference oracle on a checkerboard") {
  EnvironmentMap env(4);
  DetRng rng(21, 0, 0, 0, 0x74);
  for (double& v : env.raw()) v = -1.0 + 2.0 * rng.uniform();
  // independent accumulation straight from the definition
  const int w = env.width(), h = env.height();
  double sum = 0.0;
  size_t n = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Vec3 c = env.radiance_texel(x, y);
      const Vec3 dh = env.radiance_texel((x + 1) % w, y) - c;
      sum += dh.x * dh.x + dh.y * dh.y + dh.z * dh.z;
      n += 3;
      if (y + 1 < h) {
        const Vec3 dv = env.radiance_texel(x, y + 1) - c;
        sum += dv.x * dv.x + dv.y * dv.y + dv.z * dv.z;
        n += 3;
      }
    }
  }
  CHECK(loss_light_smooth(env) == doctest::Approx(sum / n).epsilon(1e-14));

  // horizontal wrap is real: a single bright column must cost on both sides
  EnvironmentMap edge(2);
  for (int y = 0; y < edge.height(); ++y) {
    const size_t o = edge.texel_offset(edge.width() - 1, y);
    edge.raw()[o] = edge.raw()[o + 1] = edge.raw()[o + 2] = 3.0;
  }
  EnvironmentMap mid(2);
  for (int y = 0; y < mid.height(); ++y) {
    const size_t o = mid.texel_offset(1, y);
    mid.raw()[o] = mid.raw()[o + 1] = mid.raw()[o + 2] = 3.0;
  }
  CHECK(loss_light_smooth(edge) == doctest::Approx(loss_light_smooth(mid)).epsilon(1e-14));
}

TEST_CASE("loss_light_white: scripted tinted texel") {
  EnvironmentMap env(1);  // 2x1
  const size_t o = env.texel_offset(0, 0);
  env.raw()[o] = softplus_inv(1.0);
  env.raw()[o + 1] = softplus_inv(0.4);
  env.raw()[o + 2] = softplus_inv(0.4);
  const size_t o2 = env.texel_offset(1, 0);
  env.raw()[o2] = env.raw()[o2 + 1] = env.raw()[o2 + 2] = softplus_inv(0.2);
  // texel 0: mean 0.6, |0.4| + |-0.2| + |-0.2| = 0.8; texel 1: 0. mean over 6 channels.
  CHECK(loss_light_white(env) == doctest::Approx(0.8 / 6.0).epsilon(1e-12));
}

TEST_CASE("light losses: backwards match finite differences") {
  EnvironmentMap env(4);
  DetRng rng(22, 0, 0, 0, 0x75);
  for (double& v : env.raw()) v = -1.0 + 2.0 * rng.uniform();
  std::vector<double> gs(env.param_count(), 0.0), gw(env.param_count(), 0.0);
  loss_light_smooth_backward(env, 1.3, gs);
  loss_light_white_backward(env, 0.9, gw);
  const double h = 1e-6;
  for (size_t i = 0; i < env.param_count(); i += 11) {
    const double keep = env.raw()[i];
    env.raw()[i] = keep + h;
    const double su = loss_light_smooth(env), wu = loss_light_white(env);
    env.raw()[i] = keep - h;
    const double sd = loss_light_smooth(env), wd = loss_light_white(env);
    env.raw()[i] = keep;
    CHECK(gs[i] == doctest::Approx(1.3 * (su - sd) / (2 * h)).epsilon(1e-5));
    const double fdw = 0.9 * (wu - wd) / (2 * h);
    if (std::fabs(fdw) > 1e-9) {
      CHECK(gw[i] == doctest::Approx(fdw).epsilon(1e-5));
    }
  }
}

// --- residual constraint -----------------------------------------------------

namespace {

// Unit-ish box whose triangles wind so face normals point into the interior.
TriangleMesh inward_box() {
  TriangleMesh m;
  m.vertices = {{-1, -1, -1}, {1, -1, -1}, {1, 1, -1}, {-1, 1, -1},
                {-1, -1, 1},  {1, -1, 1},  {1, 1, 1},  {-1, 1, 1}};
  auto quad = [&](int a, int b, int c, int d) {
    m.triangles.push_back({(uint32_t)a, (uint32_t)c, (uint32_t)b});
    m.triangles.push_back({(uint32_t)a, (uint32_t)d, (uint32_t)c});
  };
  quad(0, 3, 2, 1);
  quad(4, 5, 6, 7);
  quad(0, 1, 5, 4);
  quad(2, 3, 7, 6);
  quad(0, 4, 7, 3);
  quad(1, 2, 6, 5);
  m.finalize();
  return m;
}

TriangleMesh plain_quad() {
  TriangleMesh m;
  m.vertices = {{-1, -1, 0}, {1, -1, 0}, {1, 1, 0}, {-1, 1, 0}};
  m.triangles = {{0, 1, 2}, {0, 2, 3}};
  m.finalize();
  return m;
}

HashGridConfig tiny_grid() {
  HashGridConfig g;
  g.levels = 1;
  g.table_size = 64;
  g.features = 2;
  g.base_resolution = 2;
  g.growth = 1.5;
  return g;
}

RadianceCache constant_cache(int k, const Aabb& box, double c) {
  RadianceCache cache(k, box, tiny_grid(), 1, 8, 1);
  for (int i = 0; i < 3; ++i) cache.params()[cache.off_b3() + i] = softplus_inv(c);
  return cache;
}

// Importance-sampled specular directional-hemispherical reflectance of the
// implemented BRDF (albedo 0), used to build an analytically consistent
// furnace: half vectors drawn from the GGX normal distribution.
double spec_reflectance(double roughness, const UnitVec3& n, const UnitVec3& wo, int n_samples,
                        DetRng& rng) {
  const double alpha = roughness * roughness;
  const double s = alpha * alpha;
  Vec3 t, b;
  orthonormal_basis(n, t, b);
  const Material black(Vec3(0, 0, 0), roughness);
  double acc = 0.0;
  for (int i = 0; i < n_samples; ++i) {
    const double u1 = rng.uniform(), u2 = rng.uniform();
    const double c2 = (1.0 - u1) / (1.0 + (s - 1.0) * u1);
    const double ch = std::sqrt(c2), sh = std::sqrt(std::max(0.0, 1.0 - c2));
    const double ph = kTwoPi * u2;
    const Vec3 h = ch * n.vec() + sh * (std::cos(ph) * t + std::sin(ph) * b);
    const double ho = dot(h, wo.vec());
    if (ho <= 0.0) continue;
    const Vec3 wi = 2.0 * ho * h - wo.vec();
    const double ni = dot(n.vec(), wi);
    if (ni <= 0.0) continue;
    const double q = c2 * (s - 1.0) + 1.0;
    const double pdf = (s / (kPi * q * q)) * ch / (4.0 * ho);
    acc += brdf_eval(black, n, UnitVec3(wi), wo).x * ni / pdf;
  }
  return acc / n_samples;
}

}  // namespace

TEST_CASE("loss_residual: near-zero cache in a lit scene equals mean rendered radiance") {
  const TriangleMesh mesh = plain_quad();
  const Bvh bvh = build_mesh_bvh(mesh);
  const EnvironmentMap env = [] {
    ImageBuffer img(4, 2, 3, 1.3);
    return EnvironmentMap::from_radiance(img);
  }();
  const LightAngleTable table({0.0, 2.1});

  std::vector<RadianceCache> caches;
  const Aabb box = mesh.bounds().padded(0.1);
  caches.push_back(constant_cache(0, box, 1e-12));
  caches.push_back(constant_cache(1, box, 1e-12));

  MeshBackend backend(mesh, bvh, env, table, [&](const Vec3& p, const UnitVec3& d, int k) {
    return cache_query(caches[k], p, d);
  });
  const auto samples = sample_surface(mesh, 40, 17);
  const Material mat(Vec3(0.6, 0.4, 0.2), 0.3);
  ResidualConfig cfg;
  cfg.n_inner = 16;
  cfg.seed = 4;

  const double loss =
      loss_residual(samples, caches, backend, [&](const SurfaceSample&) { return mat; }, cfg);

  // replay: with R ~ 1e-12 the loss is the mean shaded radiance
  double expect = 0.0;
  for (size_t i = 0; i < samples.size(); ++i) {
    DetRng kr(cfg.seed, i, 0, 0, 0x52);
    const int k = static_cast<int>(kr.below(caches.size()));
    ShadePoint sp;
    sp.x = sp.x_m = samples[i].point;
    sp.n = UnitVec3(samples[i].normal);
    sp.omega_o = UnitVec3(samples[i].dir);
    sp.material = mat;
    sp.k = k;
    const Vec3 lo = shade(sp, backend, cfg.n_inner, cfg.seed, i);
    expect += std::fabs(lo.x) + std::fabs(lo.y) + std::fabs(lo.z);
  }
  expect /= 3.0 * samples.size();
  CHECK(expect > 0.1);  // the scene really is lit
  CHECK(loss == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("loss_residual: dark closed furnace scores zero") {
  const TriangleMesh box = inward_box();
  const Bvh bvh = build_mesh_bvh(box);
  const EnvironmentMap env(2, 1e-12);
  const LightAngleTable table({0.0});
  std::vector<RadianceCache> caches;
  caches.push_back(constant_cache(0, box.bounds().padded(0.1), 1e-12));
  MeshBackend backend(box, bvh, env, table, [&](const Vec3& p, const UnitVec3& d, int k) {
    return cache_query(caches[k], p, d);
  });
  const auto samples = sample_surface(box, 50, 18);
  ResidualConfig cfg;
  cfg.n_inner = 8;
  cfg.seed = 5;
  const double loss = loss_residual(
      samples, caches, backend, [](const SurfaceSample&) { return Material(Vec3(1, 1, 1), 0.5); },
      cfg);
  CHECK(loss >= 0.0);
  CHECK(loss < 1e-9);
}

TEST_CASE("loss_residual: analytically consistent closed furnace is zero within MC noise") {
  // Constant radiance C solves the rendering equation when every wall reflects
  // exactly 1: per-sample albedo = 1 - specular reflectance(omega_o). Outgoing
  // cones are kept at n.omega_o >= 0.75, where that albedo stays inside [0,1].
  const TriangleMesh box = inward_box();
  const Bvh bvh = build_mesh_bvh(box);
  const EnvironmentMap env(2, 1e-12);
  const LightAngleTable table({0.0});
  const double c = 0.8, roughness = 0.6;
  std::vector<RadianceCache> caches;
  caches.push_back(constant_cache(0, box.bounds().padded(0.1), c));
  MeshBackend backend(box, bvh, env, table, [&](const Vec3& p, const UnitVec3& d, int k) {
    return cache_query(caches[k], p, d);
  });

  auto samples = sample_surface(box, 200, 77);
  DetRng rng(78, 0, 0, 0, 0x90);
  std::vector<double> albedos(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    SurfaceSample& s = samples[i];
    const UnitVec3 n(s.normal);
    Vec3 t, b;
    orthonormal_basis(n, t, b);
    const double z = 0.75 + 0.25 * rng.uniform();
    const double phi = kTwoPi * rng.uniform();
    const double r = std::sqrt(1.0 - z * z);
    s.dir = z * n.vec() + r * std::cos(phi) * t + r * std::sin(phi) * b;
    albedos[i] = 1.0 - spec_reflectance(roughness, n, UnitVec3(s.dir), 1 << 13, rng);
    REQUIRE(albedos[i] > 0.0);
    REQUIRE(albedos[i] < 1.0);
  }

  ResidualConfig cfg;
  cfg.n_inner = 1024;
  cfg.seed = 3;
  const double loss = loss_residual(
      samples, caches, backend,
      [&](const SurfaceSample& s) {
        const size_t i = static_cast<size_t>(&s - samples.data());
        return Material(Vec3(albedos[i], albedos[i], albedos[i]), roughness);
      },
      cfg);
  CHECK(loss / c < 0.02);  // pure Monte Carlo noise once the bias cancels
}

TEST_CASE("loss_residual_backward: finite differences across cache, env, material") {
  const TriangleMesh mesh = plain_quad();
  const Bvh bvh = build_mesh_bvh(mesh);
  EnvironmentMap env(4);
  for (size_t i = 0; i < env.raw().size(); ++i) env.raw()[i] = -0.8 + 0.17 * (i % 13);
  const LightAngleTable table({0.0, 2.1});

  const Aabb box = mesh.bounds().padded(0.1);
  std::vector<RadianceCache> caches;
  caches.emplace_back(0, box, tiny_grid(), 1, 8, 21);
  caches.emplace_back(1, box, tiny_grid(), 1, 8, 22);
  DetRng prng(23, 0, 0, 0, 0x91);
  for (auto& cache : caches)
    for (double& v : cache.params()) v = 1.6 * prng.uniform() - 0.8;

  MeshBackend backend(mesh, bvh, env, table, [&](const Vec3& p, const UnitVec3& d, int k) {
    return cache_query(caches[k], p, d);
  });
  std::vector<double> env_grad(env.param_count(), 0.0);
  backend.set_env_grad_sink(&env_grad);
  std::vector<std::vector<double>> cache_grads(2);
  for (int k = 0; k < 2; ++k) cache_grads[k].assign(caches[k].param_count(), 0.0);
  backend.set_cache_grad_sink([&](const Vec3& p, const UnitVec3& toward, int k, const Vec3& dl) {
    cache_query_backward(caches[k], p, toward, dl, cache_grads[k]);
  });

  double theta = 1.0;
  const auto material = [&](const SurfaceSample&) {
    return Material(Vec3(0.6 * theta, 0.45 * theta, 0.3 * theta), 0.3 + 0.1 * theta);
  };
  const auto samples = sample_surface(mesh, 6, 19);
  ResidualConfig cfg;
  cfg.n_inner = 8;
  cfg.seed = 6;

  double theta_grad = 0.0;
  const MaterialGradSink sink = [&](const SurfaceSample&, const Vec3& da, double dr) {
    theta_grad += 0.6 * da.x + 0.45 * da.y + 0.3 * da.z + 0.1 * dr;
  };

  const double loss0 = loss_residual(samples, caches, backend, material, cfg);
  const double loss_b =
      loss_residual_backward(samples, caches, backend, material, cfg, cache_grads, sink);
  CHECK(loss_b == loss0);

  const double h = 1e-6;
  const auto fd_loss = [&] { return loss_residual(samples, caches, backend, material, cfg); };

  // material scale
  theta = 1.0 + h;
  const double up_t = fd_loss();
  theta = 1.0 - h;
  const double dn_t = fd_loss();
  theta = 1.0;
  const double fd_t = (up_t - dn_t) / (2 * h);
  CHECK(theta_grad == doctest::Approx(fd_t).epsilon(1e-5));

  // environment raw parameters
  int checked_env = 0;
  for (size_t i = 0; i < env.param_count(); i += 17) {
    const double keep = env.raw()[i];
    env.raw()[i] = keep + h;
    const double up = fd_loss();
    env.raw()[i] = keep - h;
    const double dn = fd_loss();
    env.raw()[i] = keep;
    const double fd = (up - dn) / (2 * h);
    if (std::fabs(fd) < 1e-12) continue;
    CHECK(env_grad[i] == doctest::Approx(fd).epsilon(1e-4));
    ++checked_env;
  }
  CHECK(checked_env > 3);

  // cache parameters of both caches (direct term + incident re-entry)
  for (int k = 0; k < 2; ++k) {
    int checked = 0;
    for (size_t i = 0; i < caches[k].param_count(); i += 7) {
      const double keep = caches[k].params()[i];
      caches[k].params()[i] = keep + h;
      const double up = fd_loss();
      caches[k].params()[i] = keep - h;
      const double dn = fd_loss();
      caches[k].params()[i] = keep;
      const double fd = (up - dn) / (2 * h);
      if (std::fabs(fd) < 1e-12) {
        CHECK(std::fabs(cache_grads[k][i]) < 1e-9);
      } else {
        CHECK(cache_grads[k][i] == doctest::Approx(fd).epsilon(1e-4));
        ++checked;
      }
    }
    CHECK(checked > 3);
  }

  // stop-grad ablation: only the caches receive gradients
  std::vector<std::vector<double>> cg2(2);
  for (int k = 0; k < 2; ++k) cg2[k].assign(caches[k].param_count(), 0.0);
  std::vector<double> env_grad2(env.param_count(), 0.0);
  backend.set_env_grad_sink(&env_grad2);
  bool material_touched = false;
  ResidualConfig ablate = cfg;
  ablate.stop_grad_shading = true;
  const double loss_ab = loss_residual_backward(
      samples, caches, backend, material, ablate, cg2,
      [&](const SurfaceSample&, const Vec3&, double) { material_touched = true; });
  CHECK(loss_ab == loss0);
  CHECK_FALSE(material_touched);
  for (double v : env_grad2) CHECK(v == 0.0);
  double cache_mag = 0.0;
  for (double v : cg2[0]) cache_mag += std::fabs(v);
  CHECK(cache_mag > 0.0);
}

TEST_CASE("loss report: total is the exact weighted sum of its components") {
  LossReport r;
  r.data = 0.371;
  r.cache = 0.0521;
  r.residual = 0.0133;
  r.mask = 0.245;
  r.albedo_smooth = 0.017;
  r.light_smooth = 0.0042;
  r.rough_smooth = 0.031;
  r.light_white = 0.088;
  const LossWeights w;
  r.finalize(w);
  const double expect = r.data + r.cache + w.lambda_residual * r.residual + w.mask * r.mask +
                        w.albedo_smooth * r.albedo_smooth + w.light_smooth * r.light_smooth +
                        w.rough_smooth * r.rough_smooth + w.light_white * r.light_white;
  CHECK(r.total == expect);  // bitwise
  CHECK(w.lambda_residual == 10.0);
  CHECK(w.mask == 0.1);
  CHECK(w.albedo_smooth == 0.01);
  CHECK(w.light_smooth == 0.01);
  CHECK(w.rough_smooth == 0.001);
  CHECK(w.light_white == 0.001);
}
