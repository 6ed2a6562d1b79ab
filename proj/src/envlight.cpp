#include "rotir/envlight.h"

#include <cmath>
#include <stdexcept>

#include "rotir/image_io.h"

namespace rotir {

Mat3 rot_y(double phi) {
  const double c = std::cos(phi), s = std::sin(phi);
  Mat3 r;
  r.m = {c, 0, s, 0, 1, 0, -s, 0, c};
  return r;
}

LightAngleTable::LightAngleTable(std::vector<double> angles_rad) : angles_(std::move(angles_rad)) {
  if (angles_.empty()) throw std::invalid_argument("LightAngleTable: need at least one angle");
  for (double& a : angles_) {
    if (!std::isfinite(a)) throw std::invalid_argument("LightAngleTable: non-finite angle");
    a = std::fmod(a, kTwoPi);
    if (a < 0) a += kTwoPi;
  }
}

double LightAngleTable::angle(int k) const {
  if (k < 0 || k >= count()) throw std::out_of_range("LightAngleTable: light index out of range");
  return angles_[k];
}

EnvironmentMap::EnvironmentMap(int height, double init_radiance) : height_(height) {
  if (height < 1) throw std::invalid_argument("EnvironmentMap: height must be >= 1");
  raw_.assign(static_cast<size_t>(height_) * width() * 3, softplus_inv(init_radiance));
}

EnvironmentMap EnvironmentMap::from_radiance(const ImageBuffer& img) {
  if (img.width() != 2 * img.height() || img.channels() != 3) {
    throw std::invalid_argument("EnvironmentMap: image must be W = 2H with 3 channels");
  }
  EnvironmentMap env(img.height());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      const size_t o = env.texel_offset(x, y);
      for (int c = 0; c < 3; ++c) {
        // softplus_inv needs a strictly positive argument
        env.raw_[o + c] = softplus_inv(std::max(img.at(x, y, c), 1e-8));
      }
    }
  return env;
}

ImageBuffer EnvironmentMap::to_image() const {
  ImageBuffer img(width(), height_, 3);
  for (int y = 0; y < height_; ++y)
    for (int x = 0; x < width(); ++x) img.set_rgb(x, y, radiance_texel(x, y));
  return img;
}

namespace {

// The four texels and weights of a bilinear tap; count = W for the pole case.
struct EnvTap {
  int x[4];
  int y[4];
  double w[4];
  int pole_row = -1;  // >= 0: average this entire row instead
};

EnvTap env_tap(const EnvironmentMap& env, const Vec3& d) {
  EnvTap tap;
  const double ycl = clamp(d.y, -1.0, 1.0);
  if (ycl == 1.0 || ycl == -1.0) {
    tap.pole_row = (ycl == 1.0) ? 0 : env.height() - 1;
    return tap;
  }
  const int W = env.width(), H = env.height();
  const double u = 0.5 + std::atan2(d.x, -d.z) / kTwoPi;
  const double v = std::acos(ycl) / kPi;

  const double fx = u * W - 0.5;
  const double fy = v * H - 0.5;
  double x0 = std::floor(fx), y0 = std::floor(fy);
  const double ax = fx - x0, ay = fy - y0;

  auto wrap_x = [W](int x) { return ((x % W) + W) % W; };
  const int xi0 = wrap_x(static_cast<int>(x0)), xi1 = wrap_x(static_cast<int>(x0) + 1);
  const int yi0 = static_cast<int>(clamp(y0, 0.0, H - 1.0));
  const int yi1 = static_cast<int>(clamp(y0 + 1, 0.0, H - 1.0));

  tap.x[0] = xi0; tap.y[0] = yi0; tap.w[0] = (1 - ax) * (1 - ay);
  tap.x[1] = xi1; tap.y[1] = yi0; tap.w[1] = ax * (1 - ay);
  tap.x[2] = xi0; tap.y[2] = yi1; tap.w[2] = (1 - ax) * ay;
  tap.x[3] = xi1; tap.y[3] = yi1; tap.w[3] = ax * ay;
  return tap;
}

Vec3 lookup_impl(const EnvironmentMap& env, const Vec3& d) {
  const EnvTap tap = env_tap(env, d);
  if (tap.pole_row >= 0) {
    Vec3 sum;
    for (int x = 0; x < env.width(); ++x) sum += env.radiance_texel(x, tap.pole_row);
    return sum / env.width();
  }
  Vec3 out;
  for (int i = 0; i < 4; ++i) out += tap.w[i] * env.radiance_texel(tap.x[i], tap.y[i]);
  return out;
}

void backward_impl(const EnvironmentMap& env, const Vec3& d, const Vec3& dl_drgb,
                   std::vector<double>& grad) {
  const EnvTap tap = env_tap(env, d);
  const auto scatter = [&](int x, int y, double w) {
    const size_t o = env.texel_offset(x, y);
    for (int c = 0; c < 3; ++c) {
      // d softplus(raw) / d raw = sigmoid(raw)
      grad[o + c] += w * dl_drgb[c] * sigmoid(env.raw()[o + c]);
    }
  };
  if (tap.pole_row >= 0) {
    const double w = 1.0 / env.width();
    for (int x = 0; x < env.width(); ++x) scatter(x, tap.pole_row, w);
    return;
  }
  for (int i = 0; i < 4; ++i) scatter(tap.x[i], tap.y[i], tap.w[i]);
}

}  // namespace

Vec3 env_lookup(const EnvironmentMap& env, const UnitVec3& dir) {
  return lookup_impl(env, dir.vec());
}

Vec3 env_lookup_rotated(const EnvironmentMap& env, const UnitVec3& dir, int k,
                        const LightAngleTable& table) {
  return lookup_impl(env, rot_y(table.angle(k)) * dir.vec());
}

void env_lookup_backward(const EnvironmentMap& env, const UnitVec3& dir, const Vec3& dl_drgb,
                         std::vector<double>& grad) {
  backward_impl(env, dir.vec(), dl_drgb, grad);
}

void env_lookup_rotated_backward(const EnvironmentMap& env, const UnitVec3& dir, int k,
                                 const LightAngleTable& table, const Vec3& dl_drgb,
                                 std::vector<double>& grad) {
  backward_impl(env, rot_y(table.angle(k)) * dir.vec(), dl_drgb, grad);
}

void save_env(const std::string& path, const EnvironmentMap& env) {
  save_pfm(path, env.to_image());
}

EnvironmentMap load_env(const std::string& path) {
  return EnvironmentMap::from_radiance(load_pfm(path));
}

}  // namespace rotir
