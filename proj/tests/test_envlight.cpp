#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "rotir/envlight.h"
#include "rotir/image_io.h"
#include "rotir/rng.h"

using namespace rotir;

namespace {

EnvironmentMap random_env(int height, uint64_t seed, double lo = -2.0, double hi = 3.0) {
  EnvironmentMap env(height);
  DetRng rng(seed);
  for (double& v : env.raw()) v = lo + rng.uniform() * (hi - lo);
  return env;
}

UnitVec3 random_dir(DetRng& rng) {
  // rejection-free: z uniform, azimuth uniform
  const double z = 2.0 * rng.uniform() - 1.0;
  const double a = kTwoPi * rng.uniform();
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  return UnitVec3(Vec3(r * std::cos(a), r * std::sin(a), z));
}

// Independent interpolation oracle: evaluate the equirect mapping and gather
// the four nearest texels by hand.
Vec3 bilinear_oracle(const EnvironmentMap& env, const Vec3& d) {
  const int W = env.width(), H = env.height();
  const double u = 0.5 + std::atan2(d.x, -d.z) / kTwoPi;
  const double v = std::acos(clamp(d.y, -1.0, 1.0)) / kPi;
  const double fx = u * W - 0.5, fy = v * H - 0.5;
  const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
  const double ax = fx - x0, ay = fy - y0;
  Vec3 out;
  for (int dy = 0; dy <= 1; ++dy)
    for (int dx = 0; dx <= 1; ++dx) {
      const int x = ((x0 + dx) % W + W) % W;
      const int y = std::clamp(y0 + dy, 0, H - 1);
      const double w = (dx ? ax : 1 - ax) * (dy ? ay : 1 - ay);
      out += w * env.radiance_texel(x, y);
    }
  return out;
}

}  // namespace

TEST_CASE("rot_y basics") {
  const Mat3 id = rot_y(0.0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(id(i, j) == doctest::Approx(i == j ? 1.0 : 0.0));

  const Vec3 r = rot_y(kPi / 2) * Vec3(1, 0, 0);
  CHECK(r.x == doctest::Approx(0.0));
  CHECK(r.y == doctest::Approx(0.0));
  CHECK(r.z == doctest::Approx(-1.0));
}

TEST_CASE("rot_y composes as a group") {
  DetRng rng(3);
  for (int t = 0; t < 50; ++t) {
    const double a = (rng.uniform() - 0.5) * 20.0;
    const double b = (rng.uniform() - 0.5) * 20.0;
    const Mat3 ab = rot_y(a) * rot_y(b);
    const Mat3 sum = rot_y(a + b);
    for (int i = 0; i < 9; ++i) CHECK(std::abs(ab.m[i] - sum.m[i]) < 1e-12);
  }
  CHECK(is_orthonormal(rot_y(1.234)));
  const Mat3 m = rot_y(0.77);
  const double det = dot(m.col(0), cross(m.col(1), m.col(2)));
  CHECK(det == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("constant map looks constant from every direction") {
  EnvironmentMap env(8, 0.37);
  DetRng rng(11);
  for (int t = 0; t < 100; ++t) {
    const Vec3 r = env_lookup(env, random_dir(rng));
    CHECK(r.x == doctest::Approx(0.37).epsilon(1e-9));
    CHECK(r.y == doctest::Approx(0.37).epsilon(1e-9));
    CHECK(r.z == doctest::Approx(0.37).epsilon(1e-9));
  }
}

TEST_CASE("poles average the end rows") {
  EnvironmentMap env = random_env(6, 21);
  Vec3 top, bottom;
  for (int x = 0; x < env.width(); ++x) {
    top += env.radiance_texel(x, 0);
    bottom += env.radiance_texel(x, env.height() - 1);
  }
  top /= env.width();
  bottom /= env.width();
  const Vec3 up = env_lookup(env, UnitVec3(Vec3(0, 1, 0)));
  const Vec3 down = env_lookup(env, UnitVec3(Vec3(0, -1, 0)));
  CHECK(norm(up - top) < 1e-12);
  CHECK(norm(down - bottom) < 1e-12);
}

TEST_CASE("lookup matches the independent bilinear oracle") {
  EnvironmentMap env = random_env(16, 33);
  DetRng rng(34);
  for (int t = 0; t < 500; ++t) {
    const UnitVec3 d = random_dir(rng);
    const Vec3 got = env_lookup(env, d);
    const Vec3 want = bilinear_oracle(env, d.vec());
    CHECK(norm(got - want) < 1e-6);
    CHECK(got.x >= 0.0);
    CHECK(got.y >= 0.0);
    CHECK(got.z >= 0.0);
  }
  // seam directions (+z, -z, +/-x) and near-pole
  for (const Vec3& v : {Vec3(0, 0, 1), Vec3(0, 0, -1), Vec3(1, 0, 0), Vec3(-1, 0, 0),
                        Vec3(1e-3, 0.999, 0)}) {
    const UnitVec3 d(v);
    CHECK(norm(env_lookup(env, d) - bilinear_oracle(env, d.vec())) < 1e-6);
  }
}

TEST_CASE("rotated lookup is lookup after rot_y, bitwise") {
  EnvironmentMap env = random_env(8, 55);
  const LightAngleTable table({0.0, kTwoPi / 3, 2 * kTwoPi / 3});
  DetRng rng(56);
  for (int t = 0; t < 300; ++t) {
    const UnitVec3 d = random_dir(rng);
    for (int k = 0; k < table.count(); ++k) {
      const Vec3 a = env_lookup_rotated(env, d, k, table);
      const Vec3 b = env_lookup(env, UnitVec3::from_unit(rot_y(table.angle(k)) * d.vec()));
      CHECK(std::memcmp(&a, &b, sizeof(Vec3)) == 0);
    }
  }
}

TEST_CASE("angle zero reduces to the plain lookup and constants ignore rotation") {
  EnvironmentMap env = random_env(8, 70);
  const LightAngleTable table({0.0, 1.1});
  EnvironmentMap flat(8, 1.25);
  DetRng rng(71);
  for (int t = 0; t < 100; ++t) {
    const UnitVec3 d = random_dir(rng);
    const Vec3 a = env_lookup_rotated(env, d, 0, table);
    const Vec3 b = env_lookup(env, d);
    CHECK(std::memcmp(&a, &b, sizeof(Vec3)) == 0);
    CHECK(norm(env_lookup_rotated(flat, d, 1, table) - Vec3(1.25, 1.25, 1.25)) < 1e-9);
  }
}

TEST_CASE("three rotations give three distinct samples of a varying map") {
  EnvironmentMap env = random_env(8, 80);
  const LightAngleTable table({0.0, kTwoPi / 3, 2 * kTwoPi / 3});
  const UnitVec3 d(Vec3(1, 0.2, 0.3));
  const Vec3 r0 = env_lookup_rotated(env, d, 0, table);
  const Vec3 r1 = env_lookup_rotated(env, d, 1, table);
  const Vec3 r2 = env_lookup_rotated(env, d, 2, table);
  CHECK(norm(r0 - r1) > 1e-6);
  CHECK(norm(r1 - r2) > 1e-6);
  CHECK(norm(r0 - r2) > 1e-6);
}

TEST_CASE("light index out of range throws") {
  EnvironmentMap env(4);
  const LightAngleTable table({0.0, 2.0});
  CHECK_THROWS_AS(env_lookup_rotated(env, UnitVec3(Vec3(1, 0, 0)), 2, table), std::out_of_range);
  CHECK_THROWS_AS(env_lookup_rotated(env, UnitVec3(Vec3(1, 0, 0)), -1, table), std::out_of_range);
  CHECK_THROWS_AS(LightAngleTable({}), std::invalid_argument);
  // angles wrap into [0, 2pi)
  const LightAngleTable wrapped({-1.0, 7.0});
  CHECK(wrapped.angle(0) == doctest::Approx(kTwoPi - 1.0));
  CHECK(wrapped.angle(1) == doctest::Approx(7.0 - kTwoPi));
}

TEST_CASE("radiance stays positive for arbitrary raw parameters") {
  EnvironmentMap extreme = random_env(6, 89, -40.0, 40.0);
  for (int y = 0; y < extreme.height(); ++y)
    for (int x = 0; x < extreme.width(); ++x) {
      const Vec3 r = extreme.radiance_texel(x, y);
      CHECK(r.x >= 0.0);
      CHECK(r.y >= 0.0);
      CHECK(r.z >= 0.0);
      CHECK(is_finite(r));
    }
}

TEST_CASE("lookup gradients match finite differences") {
  EnvironmentMap env = random_env(6, 90, -6.0, 5.0);
  DetRng rng(91);
  const Vec3 g(0.7, -1.3, 0.4);  // upstream gradient
  for (int t = 0; t < 20; ++t) {
    const UnitVec3 d = random_dir(rng);
    std::vector<double> grad(env.param_count(), 0.0);
    env_lookup_backward(env, d, g, grad);

    double checked = 0;
    for (size_t i = 0; i < grad.size(); ++i) {
      if (grad[i] == 0.0) continue;
      const double h = 1e-5;
      const double orig = env.raw()[i];
      env.raw()[i] = orig + h;
      const double fp = dot(g, env_lookup(env, d));
      env.raw()[i] = orig - h;
      const double fm = dot(g, env_lookup(env, d));
      env.raw()[i] = orig;
      const double fd = (fp - fm) / (2 * h);
      CHECK(std::abs(grad[i] - fd) / std::max(1e-8, std::abs(fd)) < 1e-4);
      ++checked;
    }
    CHECK(checked > 0);
  }
}

TEST_CASE("environment maps round-trip through pfm") {
  const auto dir = std::filesystem::temp_directory_path() / "rotir_env_test";
  std::filesystem::create_directories(dir);
  EnvironmentMap env = random_env(8, 100);
  const std::string path = (dir / "env.pfm").string();
  save_env(path, env);
  const EnvironmentMap back = load_env(path);
  REQUIRE(back.height() == 8);
  REQUIRE(back.width() == 16);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 16; ++x) {
      const Vec3 a = env.radiance_texel(x, y), b = back.radiance_texel(x, y);
      CHECK(norm(a - b) < 1e-5 * std::max(1.0, norm(a)));  // float32 storage
    }
  CHECK_THROWS_AS(EnvironmentMap::from_radiance(ImageBuffer(8, 8, 3)), std::invalid_argument);
  std::filesystem::remove_all(dir);
}
