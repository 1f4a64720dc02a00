#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "nrmvs/camera.hpp"
#include "nrmvs/core.hpp"
#include "nrmvs/defgraph.hpp"
#include "nrmvs/parallel.hpp"
#include "nrmvs/rigid.hpp"

namespace nrmvs {

// Bilateral patch weighting: color sigma on intensity difference to the
// window center, spatial sigma in pixels (default half the window radius).
struct PatchSampler {
  int window = 11;
  double sigma_color = 0.2;
  double sigma_spatial = 2.5;
};

enum class NccStatus : std::uint8_t { kOk, kOutOfBounds, kFlat };

struct NccResult {
  double rho = 0.0;
  NccStatus status = NccStatus::kOk;
};

constexpr double kFlatVariance = 1e-8;

// Reference-side state for one correlation window: intensities, bilateral
// weights and per-pixel viewing rays are fixed by (ref view, level, center),
// so they are computed once and reused across candidate planes and sources.
class PatchContext {
 public:
  // Center the window on the projection of world point x.
  bool bind_point(const CameraView& ref, int level, const PatchSampler& s,
                  const Vec3& x) {
    Vec2 uv;
    if (!try_project(ref, x, level, uv)) return false;
    return bind_pixel(ref, level, s, uv);
  }

  bool bind_pixel(const CameraView& ref, int level, const PatchSampler& s,
                  const Vec2& uv) {
    const Image& im = ref.pyramid[level];
    const int r = s.window / 2;
    if (!im.in_bilinear_domain(uv.x() - r, uv.y() - r) ||
        !im.in_bilinear_domain(uv.x() + r, uv.y() + r))
      return false;

    const int n = s.window * s.window;
    f_.resize(n);
    w_.resize(n);
    dir_.resize(n);
    plane_pt_.resize(n);

    const Mat3 Kl_inv = level_intrinsics(ref.K, level).inverse();
    const Mat3 Rt = ref.R.transpose();
    origin_ = ref.center();

    const float center = im.sample(uv.x(), uv.y());
    const double inv2sc = 1.0 / (2.0 * s.sigma_color * s.sigma_color);
    const double inv2ss = 1.0 / (2.0 * s.sigma_spatial * s.sigma_spatial);

    int idx = 0;
    double wsum = 0, mf = 0, mf2 = 0;
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx, ++idx) {
        const double px = uv.x() + dx;
        const double py = uv.y() + dy;
        const float v = im.sample(px, py);
        const double dc = static_cast<double>(v) - center;
        const double wgt =
            std::exp(-dc * dc * inv2sc) * std::exp(-(dx * dx + dy * dy) * inv2ss);
        f_[idx] = v;
        w_[idx] = wgt;
        dir_[idx] = Rt * (Kl_inv * Vec3(px, py, 1.0));
        wsum += wgt;
        mf += wgt * v;
        mf2 += wgt * static_cast<double>(v) * v;
      }
    wsum_ = wsum;
    mean_f_ = mf / wsum;
    var_f_ = mf2 / wsum - mean_f_ * mean_f_;
    return true;
  }

  // Intersect every window ray with the plane through x with normal n.
  bool set_plane(const Vec3& x, const Vec3& n) {
    anchor_ = x;
    const Vec3 xo = x - origin_;
    for (std::size_t i = 0; i < dir_.size(); ++i) {
      const double denom = n.dot(dir_[i]);
      if (std::abs(denom) < 1e-12) return false;
      const double s = n.dot(xo) / denom;
      if (s <= 0.0) return false;
      plane_pt_[i] = origin_ + s * dir_[i];
    }
    return true;
  }

  // Correlate against src after transporting the plane points with the
  // minimal-twist motion P -> R_a (P - x) + xhat.
  NccResult eval(const CameraView& src, int level, const Mat3& R_a,
                 const Vec3& xhat) const {
    const Image& im = src.pyramid[level];
    NccResult out;
    if (var_f_ < kFlatVariance) {
      out.status = NccStatus::kFlat;
      return out;
    }
    double mg = 0, mg2 = 0, mfg = 0;
    for (std::size_t i = 0; i < plane_pt_.size(); ++i) {
      const Vec3 p = R_a * (plane_pt_[i] - anchor_) + xhat;
      Vec2 uv;
      if (!try_project(src, p, level, uv) ||
          !im.in_bilinear_domain(uv.x(), uv.y())) {
        out.status = NccStatus::kOutOfBounds;
        return out;
      }
      const double g = im.sample(uv.x(), uv.y());
      mg += w_[i] * g;
      mg2 += w_[i] * g * g;
      mfg += w_[i] * f_[i] * g;
    }
    mg /= wsum_;
    mg2 = mg2 / wsum_ - mg * mg;
    mfg = mfg / wsum_ - mean_f_ * mg;
    if (mg2 < kFlatVariance) {
      out.status = NccStatus::kFlat;
      return out;
    }
    out.rho = mfg / std::sqrt(var_f_ * mg2);
    if (out.rho > 1.0) out.rho = 1.0;
    if (out.rho < -1.0) out.rho = -1.0;
    return out;
  }

  bool bound() const { return !f_.empty(); }
  bool flat() const { return var_f_ < kFlatVariance; }

 private:
  Vec3 origin_ = Vec3::Zero();
  Vec3 anchor_ = Vec3::Zero();
  std::vector<float> f_;
  std::vector<double> w_;
  std::vector<Vec3> dir_;
  std::vector<Vec3> plane_pt_;
  double wsum_ = 0, mean_f_ = 0, var_f_ = 0;
};

// Bilaterally weighted NCC between the patch around x in ref and the patch
// around xhat in src, related by the minimal rotation n -> nhat.
inline NccResult ncc_bilateral(const CameraView& ref, const CameraView& src,
                               const Vec3& x, const Vec3& n, const Vec3& xhat,
                               const Vec3& nhat, const PatchSampler& sampler,
                               int level = 0) {
  const double nl = n.norm(), nhl = nhat.norm();
  if (nl < 1e-12 || nhl < 1e-12) throw Error("zero-length patch normal");
  PatchContext ctx;
  NccResult out;
  if (!ctx.bind_point(ref, level, sampler, x) || !ctx.set_plane(x, n / nl)) {
    out.status = NccStatus::kOutOfBounds;
    return out;
  }
  return ctx.eval(src, level, minimal_rotation(n / nl, nhat / nhl), xhat);
}

struct SurfacePoint {
  Vec3 x = Vec3::Zero();
  Vec3 n = Vec3::Zero();
};

using ConsistencyMask = std::vector<std::uint8_t>;

// Dense photometric term of the joint energy. Template points live in the
// canonical frame; the reference patches see the canonical state directly, so
// everything on the reference side is precomputed. Evaluation deforms each
// point into the source views' state and correlates.
class DenseTerm {
 public:
  DenseTerm() = default;

  DenseTerm(std::vector<SurfacePoint> tmpl,
            std::vector<const CameraView*> refs,
            std::vector<const CameraView*> srcs, PatchSampler sampler,
            int level, int threads = 1)
      : template_(std::move(tmpl)),
        refs_(std::move(refs)),
        srcs_(std::move(srcs)),
        sampler_(sampler),
        level_(level) {
    for (SurfacePoint& sp : template_) {
      const double len = sp.n.norm();
      if (len < 1e-12) throw Error("zero-length patch normal");
      sp.n /= len;
    }
    const int p = static_cast<int>(template_.size());
    const int r = static_cast<int>(refs_.size());
    ctx_.resize(static_cast<std::size_t>(p) * r);
    ctx_ok_.assign(static_cast<std::size_t>(p) * r, 0);
    parallel_for(0, p, threads, [&](std::int64_t i) {
      for (int j = 0; j < r; ++j) {
        PatchContext& c = ctx_[i * r + j];
        const SurfacePoint& sp = template_[i];
        if (c.bind_point(*refs_[j], level_, sampler_, sp.x) &&
            c.set_plane(sp.x, sp.n))
          ctx_ok_[i * r + j] = 1;
      }
    });
  }

  int point_count() const { return static_cast<int>(template_.size()); }
  int residuals_per_point() const {
    return static_cast<int>(refs_.size() * srcs_.size());
  }
  int residual_count() const { return point_count() * residuals_per_point(); }
  const std::vector<SurfacePoint>& points() const { return template_; }
  int level() const { return level_; }

  // Residuals (1 - rho) for one template point under the given deformation,
  // written to out[0 .. residuals_per_point). Unusable pairs (out of bounds,
  // reference patch invalid) produce 0. Returns the number of usable pairs.
  int eval_point(const DeformationGraph& graph, int p,
                 const SkinningWeights& sw, double* out) const {
    const SurfacePoint& sp = template_[p];
    const Vec3 xhat = deform_point(sp.x, sw, graph);
    const Vec3 bn = blend_rotation(sw, graph) * sp.n;
    const double bl = bn.norm();
    const int rp = residuals_per_point();
    for (int i = 0; i < rp; ++i) out[i] = 0.0;
    if (bl < 1e-12) return 0;
    const Vec3 nhat = bn / bl;
    const Mat3 Ra = minimal_rotation(sp.n, nhat);
    int usable = 0;
    int idx = 0;
    for (std::size_t r = 0; r < refs_.size(); ++r) {
      if (!ctx_ok_[p * refs_.size() + r]) {
        idx += static_cast<int>(srcs_.size());
        continue;
      }
      for (std::size_t s = 0; s < srcs_.size(); ++s, ++idx) {
        const NccResult res =
            ctx_[p * refs_.size() + r].eval(*srcs_[s], level_, Ra, xhat);
        if (res.status == NccStatus::kOutOfBounds) continue;
        out[idx] = 1.0 - res.rho;  // flat patches correlate at 0
        ++usable;
      }
    }
    return usable;
  }

 private:
  std::vector<SurfacePoint> template_;
  std::vector<const CameraView*> refs_;
  std::vector<const CameraView*> srcs_;
  PatchSampler sampler_;
  int level_ = 0;
  std::vector<PatchContext> ctx_;
  std::vector<std::uint8_t> ctx_ok_;
};

// Free-function form: stacked dense residuals under a mask, point-major.
// Masked points contribute exact zeros.
inline VecX dense_residuals(const DenseTerm& term, const DeformationGraph& graph,
                            const ConsistencyMask& mask, int threads = 1) {
  if (mask.size() != static_cast<std::size_t>(term.point_count()))
    throw Error("mask size does not match template");
  VecX out = VecX::Zero(term.residual_count());
  const int rp = term.residuals_per_point();
  parallel_for(0, term.point_count(), threads, [&](std::int64_t p) {
    if (!mask[p]) return;
    const SkinningWeights sw = skinning_weights(term.points()[p].x, graph);
    term.eval_point(graph, static_cast<int>(p), sw, out.data() + p * rp);
  });
  return out;
}

}  // namespace nrmvs
