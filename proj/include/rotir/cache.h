#pragma once

#include <string>
#include <vector>

#include "rotir/aabb.h"
#include "rotir/camera.h"
#include "rotir/image.h"
#include "rotir/meshproxy.h"
#include "rotir/vec.h"

namespace rotir {

// Multi-resolution hash grid shape. Tables are stored externally as one flat
// array, level-major: offset = (level * table_size + entry) * features + f.
struct HashGridConfig {
  int levels = 8;
  uint32_t table_size = 1u << 14;  // must be a power of two
  int features = 2;
  int base_resolution = 16;
  double growth = 1.5;

  void validate() const;  // throws std::invalid_argument
  int level_resolution(int level) const;
  size_t param_count() const {
    return static_cast<size_t>(levels) * table_size * features;
  }
  int feature_dim() const { return levels * features; }
};

// Spatial hash of integer lattice coords, instant-ngp primes, table_size a
// power of two.
uint32_t hash_grid_index(uint32_t ix, uint32_t iy, uint32_t iz, uint32_t table_size);

// Per-level trilinear interpolation of hashed corner features, concatenated
// across levels. x is normalized to [0,1]^3 (clamped). out has feature_dim().
void encode_position(const HashGridConfig& cfg, const double* tables, const Vec3& x, double* out);
// Accumulates dL/dtables for the same lookup.
void encode_position_backward(const HashGridConfig& cfg, const Vec3& x, const double* dl_dout,
                              double* grad_tables);

// [sin(2^j pi d_c), cos(2^j pi d_c)]: per frequency a sin block over (x,y,z)
// then a cos block; dimension 6 * n_freq.
void encode_direction(const UnitVec3& d, int n_freq, double* out);

// One per light angle: hash-grid + directional encoding into a
// [enc -> H -> H -> 3] ReLU MLP with softplus output. All trainable scalars
// live in one flat vector: [tables | W1 | b1 | W2 | b2 | W3 | b3], weights
// row-major [out][in].
class RadianceCache {
 public:
  RadianceCache(int k, const Aabb& box, const HashGridConfig& grid, int n_freq = 4,
                int hidden = 256, uint64_t seed = 0);

  int light_index() const { return k_; }
  const Aabb& box() const { return box_; }
  const HashGridConfig& grid() const { return grid_; }
  int n_freq() const { return n_freq_; }
  int hidden() const { return hidden_; }
  int enc_dim() const { return grid_.feature_dim() + 6 * n_freq_; }

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  size_t param_count() const { return params_.size(); }

  // flat-vector layout
  size_t off_tables() const { return 0; }
  size_t off_w1() const { return grid_.param_count(); }
  size_t off_b1() const { return off_w1() + static_cast<size_t>(hidden_) * enc_dim(); }
  size_t off_w2() const { return off_b1() + hidden_; }
  size_t off_b2() const { return off_w2() + static_cast<size_t>(hidden_) * hidden_; }
  size_t off_w3() const { return off_b2() + hidden_; }
  size_t off_b3() const { return off_w3() + static_cast<size_t>(3) * hidden_; }

  // World point normalized to the padded scene box, clamped to [0,1]^3.
  Vec3 normalize_point(const Vec3& x) const;

 private:
  int k_;
  Aabb box_;
  HashGridConfig grid_;
  int n_freq_;
  int hidden_;
  std::vector<double> params_;
};

// softplus(mlp(encode(x, d))); finite and componentwise >= 0, else throws.
Vec3 cache_query(const RadianceCache& cache, const Vec3& x, const UnitVec3& d);
// Backprop of dot(dl_drgb, rgb) into every parameter class; grad has
// param_count() entries and is accumulated into. Returns the forward value.
Vec3 cache_query_backward(const RadianceCache& cache, const Vec3& x, const UnitVec3& d,
                          const Vec3& dl_drgb, std::vector<double>& grad);

// --- pretraining ------------------------------------------------------------

struct CacheTrainView {
  Camera camera;
  const ImageBuffer* image = nullptr;  // linear radiance, 3 or 4 channels
  int k = 0;                           // light index
};

struct PretrainConfig {
  int steps = 20000;
  int batch_pixels = 4096;
  double lr = 1e-3;
  int n_freq = 4;
  int hidden = 256;
  uint64_t seed = 0;
  double box_pad = 0.05;  // padding as a fraction of the mesh max extent
};

struct PretrainResult {
  std::vector<RadianceCache> caches;  // one per light angle, index = k
  std::vector<double> mse_curve;      // per-step batch MSE
};

// Per step: random view, random pixel batch, trace camera rays against the
// proxy mesh; MSE between cache_k(y, toward-camera) and the pixel color over
// hit pixels; Adam on that view's cache. Throws if a step hits nothing.
PretrainResult pretrain_caches(const std::vector<CacheTrainView>& views, const TriangleMesh& mesh,
                               const Bvh& bvh, int n_lights, const HashGridConfig& grid,
                               const PretrainConfig& cfg);

// Versioned binary checkpoint: config + flat parameter vector.
void save_cache(const std::string& path, const RadianceCache& cache);
RadianceCache load_cache(const std::string& path);

}  // namespace rotir
