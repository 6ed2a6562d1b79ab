#include "rotir/gsplat.h"

namespace rotir {

GaussGrads::GaussGrads(const GaussianScene& scene)
    : mu(scene.size()),
      quat(scene.size(), {0, 0, 0, 0}),
      log_su(scene.size(), 0.0),
      log_sv(scene.size(), 0.0),
      opacity_logit(scene.size(), 0.0),
      albedo_logit(scene.size(), {0, 0, 0}),
      roughness_logit(scene.size(), 0.0),
      sh(scene.sh.size(), 0.0) {}

void GaussGrads::clear() {
  std::fill(mu.begin(), mu.end(), Vec3());
  std::fill(quat.begin(), quat.end(), std::array<double, 4>{0, 0, 0, 0});
  std::fill(log_su.begin(), log_su.end(), 0.0);
  std::fill(log_sv.begin(), log_sv.end(), 0.0);
  std::fill(opacity_logit.begin(), opacity_logit.end(), 0.0);
  std::fill(albedo_logit.begin(), albedo_logit.end(), std::array<double, 3>{0, 0, 0});
  std::fill(roughness_logit.begin(), roughness_logit.end(), 0.0);
  std::fill(sh.begin(), sh.end(), 0.0);
}

void GaussGrads::add(const GaussGrads& o) {
  for (size_t i = 0; i < mu.size(); ++i) {
    mu[i] += o.mu[i];
    for (int k = 0; k < 4; ++k) quat[i][k] += o.quat[i][k];
    log_su[i] += o.log_su[i];
    log_sv[i] += o.log_sv[i];
    opacity_logit[i] += o.opacity_logit[i];
    for (int k = 0; k < 3; ++k) albedo_logit[i][k] += o.albedo_logit[i][k];
    roughness_logit[i] += o.roughness_logit[i];
  }
  for (size_t i = 0; i < sh.size(); ++i) sh[i] += o.sh[i];
}

namespace {

struct HitState {
  double w;        // blend weight a_i * T_{i-1}
  double t_before; // transmittance entering this hit
  Vec3 color;      // sh color
  Vec3 normal;     // flipped disk normal
  Vec3 albedo;
  double rough;
  double flip;
};

}  // namespace

// Reverse of blend_hits. Recomputes the forward pass to recover per-hit
// weights, then walks the composite back-to-front with suffix sums:
//   dC/da_k = T_{k-1} x_k - (sum_{i>k} w_i x_i) / (1 - a_k).
void blend_backward(const Ray& ray, const GaussianScene& scene, const Vec3& view_dir,
                    const std::vector<GaussHit>& hits, const BlendGrad& grad, GaussGrads& out) {
  if (hits.empty()) return;
  const int basis = scene.sh_basis();
  const Vec3& d = ray.dir.vec();

  // Forward replay.
  std::vector<HitState> st;
  st.reserve(hits.size());
  double transmittance = 1.0;
  Vec3 sum_color, sum_normal, sum_albedo;
  double sum_alpha = 0, sum_depth = 0, sum_rough = 0;
  for (const GaussHit& h : hits) {
    HitState s;
    s.t_before = transmittance;
    s.w = h.weight * transmittance;
    s.color = sh_eval(&scene.sh[h.index * basis * 3], scene.sh_degree, view_dir);
    Vec3 tu, tv, n;
    quat_frame(scene.quat[h.index], tu, tv, n);
    s.flip = dot(n, d) > 0.0 ? -1.0 : 1.0;
    s.normal = s.flip * n;
    s.albedo = scene.albedo(h.index);
    s.rough = scene.roughness(h.index);
    st.push_back(s);
    sum_color += s.w * s.color;
    sum_alpha += s.w;
    sum_depth += s.w * hits[st.size() - 1].t;
    sum_normal += s.w * s.normal;
    sum_albedo += s.w * s.albedo;
    sum_rough += s.w * s.rough;
    transmittance *= 1.0 - h.weight;
    if (transmittance < 1e-4) break;
  }
  const size_t used = st.size();
  const double A = sum_alpha;
  if (A <= 0) return;

  // Upstream into the raw sums and the total alpha.
  Vec3 dC_color = grad.d_color;
  double dA = grad.d_alpha;

  const double dC_depth = grad.d_depth / A;
  dA -= grad.d_depth * sum_depth / (A * A);

  const Vec3 dC_albedo = grad.d_albedo / A;
  dA -= dot(grad.d_albedo, sum_albedo) / (A * A);

  const double dC_rough = grad.d_roughness / A;
  dA -= grad.d_roughness * sum_rough / (A * A);

  Vec3 dC_normal;
  {
    const Vec3 v = sum_normal / A;
    const double len = norm(v);
    if (len > 0) {
      const Vec3 nn = v / len;
      const Vec3 dv = (grad.d_normal - nn * dot(nn, grad.d_normal)) / len;
      dC_normal = dv / A;
      dA += dot(dv, sum_normal) * (-1.0 / (A * A));
    }
  }

  // Back-to-front suffix sweep.
  Vec3 s_color, s_normal, s_albedo;
  double s_w = 0, s_depth = 0, s_rough = 0;
  for (size_t k = used; k-- > 0;) {
    const GaussHit& h = hits[k];
    const HitState& s = st[k];
    const double one_minus = 1.0 - h.weight;

    // payload gradients
    const Vec3 d_color_k = s.w * dC_color;
    const double d_t_payload = s.w * dC_depth;
    const Vec3 d_normal_k = s.w * dC_normal;
    const Vec3 d_albedo_k = s.w * dC_albedo;
    const double d_rough_k = s.w * dC_rough;

    // d loss / d a_k via every composited channel
    double da = dA * (s.t_before - s_w / one_minus);
    da += dot(dC_color, s.t_before * s.color - s_color / one_minus);
    da += dC_depth * (s.t_before * h.t - s_depth / one_minus);
    da += dot(dC_normal, s.t_before * s.normal - s_normal / one_minus);
    da += dot(dC_albedo, s.t_before * s.albedo - s_albedo / one_minus);
    da += dC_rough * (s.t_before * s.rough - s_rough / one_minus);

    s_w += s.w;
    s_color += s.w * s.color;
    s_depth += s.w * h.t;
    s_normal += s.w * s.normal;
    s_albedo += s.w * s.albedo;
    s_rough += s.w * s.rough;

    const size_t i = h.index;

    // SH color
    sh_eval_backward(&scene.sh[i * basis * 3], scene.sh_degree, view_dir, d_color_k,
                     &out.sh[i * basis * 3]);

    // albedo / roughness logits
    for (int c = 0; c < 3; ++c) {
      const double sa = sigmoid(scene.albedo_logit[i][c]);
      out.albedo_logit[i][c] += d_albedo_k[c] * sa * (1 - sa);
    }
    {
      const double sr = sigmoid(scene.roughness_logit[i]);
      out.roughness_logit[i] += d_rough_k * 0.96 * sr * (1 - sr);
    }

    // a = opacity * G
    const double op = scene.opacity(i);
    const double g_val = h.weight / op;  // gauss_value at the hit
    out.opacity_logit[i] += da * g_val * op * (1 - op);
    const double dG = da * op;

    // G = exp(-rho/2), rho = u^2 + v^2
    const double drho = dG * (-0.5 * g_val);
    const double du = drho * 2.0 * h.u;
    const double dv = drho * 2.0 * h.v;

    // geometry chain
    Vec3 tu, tv, n;
    quat_frame(scene.quat[i], tu, tv, n);
    const double su = std::exp(scene.log_su[i]), sv = std::exp(scene.log_sv[i]);
    const double denom = dot(d, n);
    const Vec3 local = ray.at(h.t) - scene.mu[i];

    out.log_su[i] += -h.u * du;
    out.log_sv[i] += -h.v * dv;

    // t feeds u, v (through the hit point) and the depth payload
    const double dt = d_t_payload + du * dot(d, tu) / su + dv * dot(d, tv) / sv;

    // t = dot(mu - o, n) / dot(d, n)
    out.mu[i] += dt * n / denom - du * tu / su - dv * tv / sv;
    const Vec3 dn_from_t = dt * ((scene.mu[i] - ray.origin) - h.t * d) / denom;

    const Vec3 d_tu = du * local / su;
    const Vec3 d_tv = dv * local / sv;
    const Vec3 d_n = dn_from_t + s.flip * d_normal_k;
    const auto dq = quat_frame_backward(scene.quat[i], d_tu, d_tv, d_n);
    for (int c = 0; c < 4; ++c) out.quat[i][c] += dq[c];
  }
}

}  // namespace rotir
