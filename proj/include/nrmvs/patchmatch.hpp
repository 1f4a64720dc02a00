#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "nrmvs/camera.hpp"
#include "nrmvs/core.hpp"
#include "nrmvs/defgraph.hpp"
#include "nrmvs/parallel.hpp"
#include "nrmvs/photometric.hpp"
#include "nrmvs/rng.hpp"

namespace nrmvs {

// Per-pixel plane hypotheses for one view. Depth is camera-frame z in world
// units; normals are world-frame unit vectors facing the camera.
struct DepthNormalMap {
  int width = 0, height = 0;
  std::vector<float> depth;
  std::vector<Vec3f> normal;
  std::vector<std::uint8_t> valid;

  DepthNormalMap() = default;
  DepthNormalMap(int w, int h)
      : width(w),
        height(h),
        depth(static_cast<std::size_t>(w) * h, 0.f),
        normal(static_cast<std::size_t>(w) * h, Vec3f::Zero()),
        valid(static_cast<std::size_t>(w) * h, 0) {}

  std::size_t idx(int x, int y) const {
    return static_cast<std::size_t>(y) * width + x;
  }
  bool valid_at(int x, int y) const { return valid[idx(x, y)] != 0; }
};

struct PatchMatchConfig {
  int iterations = 5;
  int random_halvings = 6;
  double depth_min = 0.0;          // 0/0 means derive from support maps
  double depth_max = 0.0;
  int min_consistent_views = 1;    // 0 disables the geometric filter
  double geom_rel_tol = 0.01;      // relative depth agreement
  std::uint64_t seed = 0;
  PatchSampler sampler;
  int threads = 1;
  // Test hook: per-half-step snapshot of the per-pixel best costs.
  std::vector<std::vector<double>>* cost_trace = nullptr;
};

// A support view: its camera, its deformation from the canonical frame, and
// (when already computed) its depth map for geometric cross-checking.
struct SupportView {
  const CameraView* view = nullptr;
  const DeformationGraph* deformation = nullptr;
  const DepthNormalMap* depth = nullptr;
};

namespace detail {

struct PmHypothesis {
  double depth = 0;
  Vec3 normal = Vec3::Zero();  // world frame, target state
};

// Orthonormal basis with w as +z.
inline void basis_from(const Vec3& w, Vec3& u, Vec3& v) {
  u = std::abs(w.x()) < 0.9 ? Vec3(1, 0, 0) : Vec3(0, 1, 0);
  u = (u - u.dot(w) * w).normalized();
  v = w.cross(u);
}

inline Vec3 sample_hemisphere(Rng& rng, const Vec3& toward) {
  const double z = std::max(rng.uniform(), 1e-3);
  const double phi = 2.0 * M_PI * rng.uniform();
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  Vec3 u, v;
  basis_from(toward, u, v);
  return (r * std::cos(phi)) * u + (r * std::sin(phi)) * v + z * toward;
}

inline Vec3 perturb_normal(Rng& rng, const Vec3& n, double max_angle,
                           const Vec3& toward) {
  Vec3 u, v;
  basis_from(n, u, v);
  const double phi = 2.0 * M_PI * rng.uniform();
  const Vec3 axis = std::cos(phi) * u + std::sin(phi) * v;
  const double angle = (2.0 * rng.uniform() - 1.0) * max_angle;
  Vec3 out = Eigen::AngleAxisd(angle, axis) * n;
  if (out.dot(toward) < 1e-3) out = n;  // keep front-facing
  return out;
}

}  // namespace detail

// Photometric half of non-rigid PatchMatch: random init, checkerboard
// propagation and random refinement. Candidate planes live in the target
// view's deformed state; cost pulls the plane point back to the canonical
// frame through the target deformation and pushes it into every support.
inline DepthNormalMap pm_photometric(const CameraView& target,
                                     const DeformationGraph& target_def,
                                     const std::vector<SupportView>& supports,
                                     const PatchMatchConfig& cfg) {
  if (supports.empty()) throw Error("no sources");
  if (cfg.iterations < 1) throw Error("iterations must be >= 1");
  if (!(cfg.depth_max > cfg.depth_min && cfg.depth_min > 0.0))
    throw Error("no depth range");
  const Image& im = target.pyramid[0];
  const int W = im.width, H = im.height;
  const std::size_t N = static_cast<std::size_t>(W) * H;
  const Vec3 center = target.center();
  const Mat3 Kinv = target.K.inverse();
  const Mat3 Rt = target.R.transpose();
  const double inf = std::numeric_limits<double>::infinity();

  std::vector<detail::PmHypothesis> hyp(N);
  std::vector<double> cost(N, inf);

  auto ray_dir = [&](int x, int y) -> Vec3 {
    return (Rt * (Kinv * Vec3(x, y, 1.0))).normalized();
  };

  // Cost of one hypothesis at one pixel. Out-of-bounds supports score the
  // worst possible correlation; a pixel with no usable support is invalid.
  auto eval_cost = [&](int x, int y, const detail::PmHypothesis& h,
                       PatchContext& ctx) -> double {
    if (!(h.depth > cfg.depth_min && h.depth < cfg.depth_max)) return inf;
    const Vec3 x_t = unproject(target, Vec2(x, y), h.depth);
    Vec3 x_c, n_c;
    try {
      x_c = approx_inverse(x_t, target_def);
      n_c = inverse_normal(h.normal, x_c, target_def);
    } catch (const Error&) {
      return inf;
    }
    if (!ctx.set_plane(x_t, h.normal)) return inf;
    double acc = 0;
    int usable = 0;
    for (const SupportView& s : supports) {
      double c = 2.0;
      try {
        const SkinningWeights sw = skinning_weights(x_c, *s.deformation);
        const Vec3 x_k = deform_point(x_c, sw, *s.deformation);
        const Vec3 n_k = deform_normal(n_c, sw, *s.deformation);
        const NccResult r =
            ctx.eval(*s.view, 0, minimal_rotation(h.normal, n_k), x_k);
        if (r.status != NccStatus::kOutOfBounds) {
          c = 1.0 - r.rho;
          ++usable;
        }
      } catch (const Error&) {
        // unreachable support (degenerate blend); treat as out of bounds
      }
      acc += c;
    }
    if (usable == 0) return inf;
    return acc / static_cast<double>(supports.size());
  };

  // Random initialization, counter-keyed per pixel.
  parallel_for(0, static_cast<std::int64_t>(N), cfg.threads, [&](std::int64_t i) {
    const int x = static_cast<int>(i % W);
    const int y = static_cast<int>(i / W);
    Rng rng(rng_key(cfg.seed, 0x1017, x, y));
    detail::PmHypothesis h;
    h.depth = rng.uniform(cfg.depth_min, cfg.depth_max);
    h.normal = detail::sample_hemisphere(rng, -ray_dir(x, y));
    hyp[i] = h;
    PatchContext ctx;
    // A textureless reference patch ranks all hypotheses equally; leave the
    // pixel invalid instead of keeping an arbitrary one.
    if (ctx.bind_pixel(target, 0, cfg.sampler, Vec2(x, y)) && !ctx.flat())
      cost[i] = eval_cost(x, y, h, ctx);
  });
  if (cfg.cost_trace) cfg.cost_trace->push_back(cost);

  const int dx4[4] = {-1, 1, 0, 0};
  const int dy4[4] = {0, 0, -1, 1};

  for (int iter = 1; iter <= cfg.iterations; ++iter) {
    for (int phase = 0; phase < 2; ++phase) {
      parallel_for(0, static_cast<std::int64_t>(N), cfg.threads,
                   [&](std::int64_t i) {
        const int x = static_cast<int>(i % W);
        const int y = static_cast<int>(i / W);
        if (((x + y) & 1) != phase) return;
        PatchContext ctx;
        if (!ctx.bind_pixel(target, 0, cfg.sampler, Vec2(x, y)) || ctx.flat())
          return;
        const Vec3 dir = ray_dir(x, y);
        detail::PmHypothesis best = hyp[i];
        double best_cost = cost[i];

        auto consider = [&](const detail::PmHypothesis& h) {
          const double c = eval_cost(x, y, h, ctx);
          if (c < best_cost) {  // strict improvement only
            best_cost = c;
            best = h;
          }
        };

        // Propagation: intersect this pixel's ray with each neighbor's plane.
        for (int d = 0; d < 4; ++d) {
          const int nx = x + dx4[d], ny = y + dy4[d];
          if (nx < 0 || ny < 0 || nx >= W || ny >= H) continue;
          const std::size_t ni = static_cast<std::size_t>(ny) * W + nx;
          if (!std::isfinite(cost[ni])) continue;
          const detail::PmHypothesis& nh = hyp[ni];
          const Vec3 p_nb = unproject(target, Vec2(nx, ny), nh.depth);
          const double denom = nh.normal.dot(dir);
          if (std::abs(denom) < 1e-12) continue;
          const double s = nh.normal.dot(p_nb - center) / denom;
          if (s <= 0) continue;
          detail::PmHypothesis h;
          h.depth = camera_depth(target, center + s * dir);
          h.normal = nh.normal;
          consider(h);
        }

        // Random refinement with halving search windows, plus one fresh draw.
        Rng rng(rng_key(cfg.seed, 0x5EED, x, y,
                        static_cast<std::uint64_t>(2 * iter + phase)));
        const double range = cfg.depth_max - cfg.depth_min;
        for (int hlv = 1; hlv <= cfg.random_halvings; ++hlv) {
          const double dscale = range / static_cast<double>(1 << hlv);
          const double ascale = 0.5 * M_PI / static_cast<double>(1 << hlv);
          detail::PmHypothesis h;
          h.depth = std::clamp(best.depth + (2.0 * rng.uniform() - 1.0) * dscale,
                               cfg.depth_min, cfg.depth_max);
          h.normal = detail::perturb_normal(rng, best.normal, ascale, -dir);
          consider(h);
        }
        detail::PmHypothesis fresh;
        fresh.depth = rng.uniform(cfg.depth_min, cfg.depth_max);
        fresh.normal = detail::sample_hemisphere(rng, -dir);
        consider(fresh);

        hyp[i] = best;
        cost[i] = best_cost;
      });
      if (cfg.cost_trace) cfg.cost_trace->push_back(cost);
    }
  }

  DepthNormalMap map(W, H);
  for (std::size_t i = 0; i < N; ++i) {
    if (!std::isfinite(cost[i])) continue;
    map.depth[i] = static_cast<float>(hyp[i].depth);
    map.normal[i] = hyp[i].normal.cast<float>();
    map.valid[i] = 1;
  }
  return map;
}

// Geometric consistency filter: a pixel survives when at least
// min_consistent_views supports confirm its reprojected depth within the
// relative tolerance. Supports without maps cannot confirm anything.
inline DepthNormalMap pm_filter(const CameraView& target,
                                const DeformationGraph& target_def,
                                const DepthNormalMap& raw,
                                const std::vector<SupportView>& supports,
                                const PatchMatchConfig& cfg) {
  DepthNormalMap out = raw;
  if (cfg.min_consistent_views <= 0) return out;
  const int W = raw.width, H = raw.height;
  parallel_for(0, static_cast<std::int64_t>(W) * H, cfg.threads,
               [&](std::int64_t i) {
    if (!raw.valid[i]) return;
    const int x = static_cast<int>(i % W);
    const int y = static_cast<int>(i / W);
    int consistent = 0;
    try {
      const Vec3 x_t = unproject(target, Vec2(x, y), raw.depth[i]);
      const Vec3 x_c = approx_inverse(x_t, target_def);
      for (const SupportView& s : supports) {
        if (!s.depth) continue;
        const SkinningWeights sw = skinning_weights(x_c, *s.deformation);
        const Vec3 x_k = deform_point(x_c, sw, *s.deformation);
        Vec2 uv;
        if (!try_project(*s.view, x_k, 0, uv)) continue;
        const int ux = static_cast<int>(std::lround(uv.x()));
        const int uy = static_cast<int>(std::lround(uv.y()));
        if (ux < 0 || uy < 0 || ux >= s.depth->width || uy >= s.depth->height)
          continue;
        if (!s.depth->valid_at(ux, uy)) continue;
        const double d_map = s.depth->depth[s.depth->idx(ux, uy)];
        const double d_proj = camera_depth(*s.view, x_k);
        if (std::abs(d_proj - d_map) <= cfg.geom_rel_tol * d_map) ++consistent;
      }
    } catch (const Error&) {
      consistent = 0;
    }
    if (consistent < cfg.min_consistent_views) {
      out.valid[i] = 0;
      out.depth[i] = 0.f;
      out.normal[i] = Vec3f::Zero();
    }
  });
  return out;
}

namespace detail {

// Depth range for a target view inferred from support depth maps carried
// through the canonical frame.
inline void derive_depth_range(const CameraView& target,
                               const DeformationGraph& target_def,
                               const std::vector<SupportView>& supports,
                               double& dmin, double& dmax) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = 0;
  for (const SupportView& s : supports) {
    if (!s.depth) continue;
    const DepthNormalMap& m = *s.depth;
    for (int y = 0; y < m.height; y += 4)
      for (int x = 0; x < m.width; x += 4) {
        if (!m.valid_at(x, y)) continue;
        try {
          const Vec3 xw = unproject(*s.view, Vec2(x, y), m.depth[m.idx(x, y)]);
          const Vec3 xc = approx_inverse(xw, *s.deformation);
          const double d = camera_depth(target, deform_point(xc, target_def));
          if (d > 0) {
            lo = std::min(lo, d);
            hi = std::max(hi, d);
          }
        } catch (const Error&) {
        }
      }
  }
  if (!(hi > 0) || !std::isfinite(lo)) throw Error("no depth range");
  dmin = 0.8 * lo;
  dmax = 1.2 * hi;
}

}  // namespace detail

// Full non-rigid PatchMatch for one view: photometric passes for the target
// and for any support that lacks a depth map, then the geometric filter.
inline DepthNormalMap nr_patchmatch(const CameraView& target,
                                    const DeformationGraph& target_def,
                                    const std::vector<SupportView>& supports,
                                    const PatchMatchConfig& cfg) {
  if (supports.empty()) throw Error("no sources");
  PatchMatchConfig c = cfg;
  if (!(c.depth_max > c.depth_min && c.depth_min > 0.0))
    detail::derive_depth_range(target, target_def, supports, c.depth_min,
                               c.depth_max);

  const DepthNormalMap raw = pm_photometric(target, target_def, supports, c);
  if (c.min_consistent_views <= 0) return raw;

  // Supports that arrived without maps get their own photometric pass, with
  // the target and the remaining supports as their sources.
  std::vector<DepthNormalMap> computed;
  computed.reserve(supports.size());
  std::vector<SupportView> with_maps = supports;
  for (std::size_t k = 0; k < supports.size(); ++k) {
    if (supports[k].depth) continue;
    std::vector<SupportView> others;
    others.push_back({&target, &target_def, nullptr});
    for (std::size_t j = 0; j < supports.size(); ++j)
      if (j != k) others.push_back(supports[j]);
    PatchMatchConfig ck = c;
    ck.seed = rng_key(c.seed, 0xA11F, k + 1);
    ck.cost_trace = nullptr;
    computed.push_back(
        pm_photometric(*supports[k].view, *supports[k].deformation, others, ck));
    with_maps[k].depth = &computed.back();
  }
  return pm_filter(target, target_def, raw, with_maps, c);
}

struct PointCloud {
  std::vector<Vec3f> xyz;
  std::vector<Vec3f> normal;
  std::vector<std::array<std::uint8_t, 3>> rgb;

  std::size_t size() const { return xyz.size(); }
};

struct FusedClouds {
  std::vector<PointCloud> per_view;
  PointCloud canonical;
};

// Back-project every valid pixel to a per-view cloud, and pull each point to
// the canonical frame through its view's deformation. Per-view and canonical
// clouds stay index-aligned (points that fail the pull are dropped from both).
inline FusedClouds fuse_to_cloud(
    const std::vector<const DepthNormalMap*>& maps,
    const std::vector<const CameraView*>& views,
    const std::vector<const DeformationGraph*>& defs) {
  if (maps.size() != views.size() || maps.size() != defs.size())
    throw Error("fuse_to_cloud: mismatched inputs");
  FusedClouds out;
  out.per_view.resize(maps.size());
  for (std::size_t v = 0; v < maps.size(); ++v) {
    const DepthNormalMap& m = *maps[v];
    const CameraView& cam = *views[v];
    PointCloud& cloud = out.per_view[v];
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x) {
        if (!m.valid_at(x, y)) continue;
        const std::size_t i = m.idx(x, y);
        const Vec3 xw = unproject(cam, Vec2(x, y), m.depth[i]);
        Vec3 xc, nc;
        try {
          xc = approx_inverse(xw, *defs[v]);
          nc = inverse_normal(m.normal[i].cast<double>(), xc, *defs[v]);
        } catch (const Error&) {
          continue;
        }
        const float gray = cam.image.empty() ? 0.5f : cam.image.at(x, y);
        const auto byte = static_cast<std::uint8_t>(
            std::clamp(std::lround(gray * 255.f), 0l, 255l));
        cloud.xyz.push_back(xw.cast<float>());
        cloud.normal.push_back(m.normal[i]);
        cloud.rgb.push_back({byte, byte, byte});
        out.canonical.xyz.push_back(xc.cast<float>());
        out.canonical.normal.push_back(nc.cast<float>());
        out.canonical.rgb.push_back({byte, byte, byte});
      }
  }
  return out;
}

// Shared by reconstruction and interpolation outputs: deform a float32
// canonical cloud by one graph. Deliberately not inlined so both binaries run
// the exact same compiled math and produce bit-identical clouds.
[[gnu::noinline]] inline PointCloud propagate_cloud(const PointCloud& canonical,
                                                    const DeformationGraph& g) {
  PointCloud out = canonical;
  for (std::size_t i = 0; i < canonical.size(); ++i) {
    const Vec3 x = canonical.xyz[i].cast<double>();
    const SkinningWeights sw = skinning_weights(x, g);
    out.xyz[i] = deform_point(x, sw, g).cast<float>();
    out.normal[i] =
        deform_normal(canonical.normal[i].cast<double>(), sw, g).cast<float>();
  }
  return out;
}

}  // namespace nrmvs
