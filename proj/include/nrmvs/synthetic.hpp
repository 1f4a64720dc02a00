#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "nrmvs/camera.hpp"
#include "nrmvs/core.hpp"
#include "nrmvs/defgraph.hpp"
#include "nrmvs/parallel.hpp"
#include "nrmvs/patchmatch.hpp"
#include "nrmvs/pipeline.hpp"
#include "nrmvs/rigid.hpp"
#include "nrmvs/rng.hpp"

namespace nrmvs {

// Procedurally generated deforming scene with exact ground truth. The surface
// is a textured height field over the xy plane: a flat sheet plus a few
// Gaussian bumps whose amplitudes change per frame. Frames 0 and 1 share one
// set of amplitudes, so that pair is rigid by construction; every other frame
// pair is forced apart by a minimum coefficient distance.
struct SyntheticConfig {
  int width = 160, height = 120;
  int frames = 6;
  int pyramid_levels = 3;
  double side = 6.0;            // surface spans [-side/2, side/2]^2
  double distance = 12.0;       // camera distance from the origin
  double arc_degrees = 60.0;    // azimuth span of the camera ring
  double elevation_degrees = 52.0;
  int bumps = 3;
  double amp_max = 0.45;
  double sigma_min = 1.2, sigma_max = 1.6;
  double separation = 0.3;      // min L1 distance between frame amplitudes
  double margin_px = 8.0;       // surface stays this far inside every image
  int landmark_grid = 14;
  std::uint64_t seed = 7;
  bool moving = true;           // false: all frames share frame-0 amplitudes
  bool render = true;           // false: geometry only, no images
  int threads = 1;
};

struct SyntheticScene {
  SyntheticConfig cfg;
  std::vector<CameraView> views;
  std::vector<Image> gt_depth;       // camera-frame z per pixel, 0 on miss
  std::vector<Vec2> bump_center;
  std::vector<double> bump_sigma;
  std::vector<std::vector<double>> amp;  // [frame][bump]
  std::vector<Vec2> landmarks;           // material (u, v) parameters

  double height_at(int frame, double u, double v) const {
    double h = 0;
    for (std::size_t b = 0; b < bump_center.size(); ++b) {
      const double du = u - bump_center[b].x(), dv = v - bump_center[b].y();
      h += amp[frame][b] *
           std::exp(-0.5 * (du * du + dv * dv) / (bump_sigma[b] * bump_sigma[b]));
    }
    return h;
  }

  Vec2 height_gradient(int frame, double u, double v) const {
    Vec2 g = Vec2::Zero();
    for (std::size_t b = 0; b < bump_center.size(); ++b) {
      const double s2 = bump_sigma[b] * bump_sigma[b];
      const double du = u - bump_center[b].x(), dv = v - bump_center[b].y();
      const double e = amp[frame][b] * std::exp(-0.5 * (du * du + dv * dv) / s2);
      g.x() += e * (-du / s2);
      g.y() += e * (-dv / s2);
    }
    return g;
  }

  Vec3 surface_point(int frame, double u, double v) const {
    return Vec3(u, v, height_at(frame, u, v));
  }

  Vec3 surface_normal(int frame, double u, double v) const {
    const Vec2 g = height_gradient(frame, u, v);
    return Vec3(-g.x(), -g.y(), 1.0).normalized();
  }

  bool on_surface(double u, double v) const {
    const double half = 0.5 * cfg.side;
    return u >= -half && u <= half && v >= -half && v <= half;
  }

  // Multi-octave value noise in surface parameters, smooth and deterministic.
  double albedo(double u, double v) const {
    auto lattice = [&](int octave, std::int64_t i, std::int64_t j) {
      const std::uint64_t h =
          rng_key(cfg.seed, 0x7E57, static_cast<std::uint64_t>(octave),
                  static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j));
      return static_cast<double>(h >> 11) * 0x1.0p-53;
    };
    auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
    double value = 0, wsum = 0, freq = 2.0, w = 1.0;
    for (int o = 0; o < 4; ++o) {
      const double x = (u + 10.0) * freq, y = (v + 10.0) * freq;
      const auto i = static_cast<std::int64_t>(std::floor(x));
      const auto j = static_cast<std::int64_t>(std::floor(y));
      const double fx = smooth(x - i), fy = smooth(y - j);
      const double v00 = lattice(o, i, j), v10 = lattice(o, i + 1, j);
      const double v01 = lattice(o, i, j + 1), v11 = lattice(o, i + 1, j + 1);
      value += w * ((1 - fy) * ((1 - fx) * v00 + fx * v10) +
                    fy * ((1 - fx) * v01 + fx * v11));
      wsum += w;
      freq *= 2.0;
      w *= 0.5;
    }
    return 0.25 + 0.6 * (value / wsum);
  }

  double shade(int frame, double u, double v) const {
    static const Vec3 light = Vec3(0.3, 0.2, 1.0).normalized();
    const double lambert = std::max(0.0, surface_normal(frame, u, v).dot(light));
    return albedo(u, v) * (0.55 + 0.45 * lambert);
  }

  // First surface hit along a ray, as distance from the origin of the ray.
  // March across the slab containing the surface, then bisect.
  std::optional<double> trace(int frame, const Vec3& origin, const Vec3& dir) const {
    const double zmax = 1.5, zmin = -1.5;
    if (std::abs(dir.z()) < 1e-9) return std::nullopt;
    double s0 = (zmax - origin.z()) / dir.z();
    double s1 = (zmin - origin.z()) / dir.z();
    if (s1 < s0) std::swap(s0, s1);
    if (s1 <= 0) return std::nullopt;
    s0 = std::max(s0, 0.0);

    auto above = [&](double s, double& f) {
      const Vec3 p = origin + s * dir;
      f = p.z() - height_at(frame, p.x(), p.y());
      return on_surface(p.x(), p.y());
    };

    const int steps = 256;
    const double ds = (s1 - s0) / steps;
    double f_prev = 0;
    bool have_prev = false;
    for (int i = 0; i <= steps; ++i) {
      const double s = s0 + i * ds;
      double f;
      if (!above(s, f)) {
        have_prev = false;
        continue;
      }
      if (have_prev && f_prev > 0 && f <= 0) {
        double lo = s - ds, hi = s;
        for (int it = 0; it < 60; ++it) {
          const double mid = 0.5 * (lo + hi);
          double fm;
          above(mid, fm);
          (fm > 0 ? lo : hi) = mid;
        }
        return 0.5 * (lo + hi);
      }
      f_prev = f;
      have_prev = true;
    }
    return std::nullopt;
  }
};

namespace detail {

inline Mat3 look_at_rotation(const Vec3& center, const Vec3& target) {
  const Vec3 z = (target - center).normalized();     // camera forward
  Vec3 up(0, 0, 1);
  Vec3 x = up.cross(z);
  if (x.norm() < 1e-6) x = Vec3(1, 0, 0);
  x.normalize();
  const Vec3 y = z.cross(x);
  Mat3 R;  // world -> camera rows
  R.row(0) = x.transpose();
  R.row(1) = y.transpose();
  R.row(2) = z.transpose();
  return R;
}

}  // namespace detail

inline SyntheticScene make_scene(const SyntheticConfig& cfg) {
  if (cfg.frames < 2) throw Error("scene needs at least two frames");
  if (cfg.bumps < 1) throw Error("scene needs at least one bump");
  SyntheticScene s;
  s.cfg = cfg;

  // Bump centers: separated draws inside the central region.
  Rng geom(rng_key(cfg.seed, 0x6E0A));
  for (int b = 0; b < cfg.bumps; ++b) {
    Vec2 c;
    bool ok = false;
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
      c = Vec2(geom.uniform(-1.8, 1.8), geom.uniform(-1.8, 1.8));
      ok = true;
      for (const Vec2& prev : s.bump_center)
        if ((c - prev).norm() < 1.2) ok = false;
    }
    if (!ok) throw Error("bump placement did not converge");
    s.bump_center.push_back(c);
    s.bump_sigma.push_back(geom.uniform(cfg.sigma_min, cfg.sigma_max));
  }

  // Per-frame amplitudes. Frames 0 and 1 share one draw; later frames are
  // redrawn until they sit far enough from every earlier frame.
  auto draw_amps = [&](Rng& rng) {
    std::vector<double> a(cfg.bumps);
    for (double& v : a) v = rng.uniform(-cfg.amp_max, cfg.amp_max);
    return a;
  };
  auto l1_dist = [](const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
    return d;
  };
  Rng amps(rng_key(cfg.seed, 0xA407));
  s.amp.push_back(draw_amps(amps));
  s.amp.push_back(s.amp[0]);
  for (int f = 2; f < cfg.frames; ++f) {
    if (!cfg.moving) {
      s.amp.push_back(s.amp[0]);
      continue;
    }
    std::vector<double> a;
    bool ok = false;
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
      a = draw_amps(amps);
      ok = true;
      for (int e = 0; e < f; ++e)
        if (l1_dist(a, s.amp[e]) < cfg.separation) ok = false;
    }
    if (!ok) throw Error("frame amplitude sampling did not converge");
    s.amp.push_back(std::move(a));
  }
  if (!cfg.moving)
    while (static_cast<int>(s.amp.size()) < cfg.frames) s.amp.push_back(s.amp[0]);

  // Camera ring: azimuths across the arc at fixed elevation, looking at the
  // origin. Shared intrinsics, focal fitted so the whole surface (under every
  // frame's amplitudes) projects inside the pixel margin in every view.
  const double el = cfg.elevation_degrees * M_PI / 180.0;
  std::vector<Mat3> Rs(cfg.frames);
  std::vector<Vec3> centers(cfg.frames);
  for (int f = 0; f < cfg.frames; ++f) {
    const double span = cfg.arc_degrees * M_PI / 180.0;
    const double az = cfg.frames > 1
                          ? -0.5 * span + span * f / (cfg.frames - 1)
                          : 0.0;
    centers[f] = cfg.distance * Vec3(std::cos(el) * std::sin(az),
                                     std::cos(el) * std::cos(az),
                                     std::sin(el));
    Rs[f] = detail::look_at_rotation(centers[f], Vec3::Zero());
  }

  const double cx = 0.5 * (cfg.width - 1), cy = 0.5 * (cfg.height - 1);
  double focal = std::numeric_limits<double>::infinity();
  const double half = 0.5 * cfg.side;
  const int fit_n = 24;
  for (int f = 0; f < cfg.frames; ++f)
    for (int state = 0; state < cfg.frames; ++state)
      for (int gi = 0; gi <= fit_n; ++gi)
        for (int gj = 0; gj <= fit_n; ++gj) {
          const double u = -half + cfg.side * gi / fit_n;
          const double v = -half + cfg.side * gj / fit_n;
          const Vec3 p = s.surface_point(state, u, v);
          const Vec3 pc = Rs[f] * (p - centers[f]);
          if (pc.z() <= 0.1) throw Error("surface behind camera");
          const double lim_u =
              std::abs(pc.x()) > 1e-9
                  ? (pc.x() > 0 ? (cfg.width - 1 - cfg.margin_px - cx)
                                : (cfg.margin_px - cx)) *
                        pc.z() / pc.x()
                  : std::numeric_limits<double>::infinity();
          const double lim_v =
              std::abs(pc.y()) > 1e-9
                  ? (pc.y() > 0 ? (cfg.height - 1 - cfg.margin_px - cy)
                                : (cfg.margin_px - cy)) *
                        pc.z() / pc.y()
                  : std::numeric_limits<double>::infinity();
          focal = std::min({focal, lim_u, lim_v});
        }
  if (!(focal > 1.0)) throw Error("could not fit focal length");
  focal *= 0.98;
  Mat3 K = Mat3::Identity();
  K(0, 0) = K(1, 1) = focal;
  K(0, 2) = cx;
  K(1, 2) = cy;

  // Render each frame: trace through every pixel, shade hits, record depth.
  s.gt_depth.resize(cfg.frames);
  for (int f = 0; f < cfg.frames; ++f) {
    const Vec3 t = -Rs[f] * centers[f];
    Image im, depth(cfg.width, cfg.height, 0.f);
    if (cfg.render) {
      im = Image(cfg.width, cfg.height, 0.f);
      const Mat3 Kinv = K.inverse();
      const Mat3 Rt = Rs[f].transpose();
      parallel_for(0, static_cast<std::int64_t>(cfg.height), cfg.threads,
                   [&](std::int64_t y) {
        for (int x = 0; x < cfg.width; ++x) {
          const Vec3 dir =
              (Rt * (Kinv * Vec3(x, static_cast<double>(y), 1.0))).normalized();
          const auto hit = s.trace(f, centers[f], dir);
          if (!hit) continue;
          const Vec3 p = centers[f] + *hit * dir;
          im.at(x, static_cast<int>(y)) =
              static_cast<float>(std::clamp(s.shade(f, p.x(), p.y()), 0.0, 1.0));
          depth.at(x, static_cast<int>(y)) =
              static_cast<float>((Rs[f] * p + t).z());
        }
      });
    }
    s.views.push_back(make_view(K, Rs[f], t, std::move(im), cfg.pyramid_levels,
                                "view_" + std::to_string(f)));
    s.gt_depth[f] = std::move(depth);
  }

  // Landmarks: jittered grid in surface parameters, kept off the rim.
  const double lm_half = half - 0.4;
  const int G = cfg.landmark_grid;
  for (int i = 0; i < G; ++i)
    for (int j = 0; j < G; ++j) {
      Rng jit(rng_key(cfg.seed, 0x7A61, static_cast<std::uint64_t>(i),
                      static_cast<std::uint64_t>(j)));
      const double step = 2.0 * lm_half / (G - 1);
      s.landmarks.emplace_back(
          -lm_half + step * i + jit.uniform(-0.35, 0.35) * step,
          -lm_half + step * j + jit.uniform(-0.35, 0.35) * step);
    }
  return s;
}

// Clean projection of landmark l into frame f, empty when it is outside the
// image margin or occluded.
inline std::optional<Vec2> observe_landmark(const SyntheticScene& s, int l,
                                            int f) {
  const Vec2& uv = s.landmarks[l];
  const Vec3 p = s.surface_point(f, uv.x(), uv.y());
  const CameraView& view = s.views[f];
  Vec2 pix;
  if (!try_project(view, p, 0, pix)) return std::nullopt;
  const double m = 1.5;
  if (pix.x() < m || pix.y() < m || pix.x() > s.cfg.width - 1 - m ||
      pix.y() > s.cfg.height - 1 - m)
    return std::nullopt;
  const Vec3 center = view.center();
  const Vec3 dir = (p - center).normalized();
  const auto hit = s.trace(f, center, dir);
  if (!hit || std::abs(*hit - (p - center).norm()) > 1e-3) return std::nullopt;
  return pix;
}

// Pairwise matches over all frame pairs. Noise and corruption are drawn once
// per (landmark, frame) observation so the same pixel appears in every pair,
// which keeps honest tracks intact through ingestion. A corrupted observation
// is moved to a random spot far from the true pixel, modelling a mislocalized
// feature; the sparse filter is expected to reject the matches it produces.
inline std::vector<PairMatches> make_matches(const SyntheticScene& s,
                                             double noise_px = 0.0,
                                             double outlier_fraction = 0.0,
                                             std::uint64_t seed = 1) {
  const int F = s.cfg.frames;
  const int L = static_cast<int>(s.landmarks.size());
  std::vector<std::vector<std::optional<Vec2>>> obs(
      L, std::vector<std::optional<Vec2>>(F));
  for (int l = 0; l < L; ++l)
    for (int f = 0; f < F; ++f) {
      auto o = observe_landmark(s, l, f);
      if (!o) continue;
      Rng rng(rng_key(seed, 0x4059, static_cast<std::uint64_t>(l),
                      static_cast<std::uint64_t>(f)));
      Vec2 pix = *o;
      if (outlier_fraction > 0 && rng.uniform() < outlier_fraction) {
        for (int attempt = 0; attempt < 100; ++attempt) {
          Vec2 cand(rng.uniform(s.cfg.margin_px, s.cfg.width - 1 - s.cfg.margin_px),
                    rng.uniform(s.cfg.margin_px, s.cfg.height - 1 - s.cfg.margin_px));
          if ((cand - *o).norm() >= 25.0) {
            pix = cand;
            break;
          }
        }
      } else if (noise_px > 0) {
        pix += noise_px * Vec2(rng.normal(), rng.normal());
      }
      obs[l][f] = pix;
    }

  std::vector<PairMatches> out;
  for (int a = 0; a < F; ++a)
    for (int b = a + 1; b < F; ++b) {
      PairMatches pm;
      pm.image_a = a;
      pm.image_b = b;
      for (int l = 0; l < L; ++l)
        if (obs[l][a] && obs[l][b])
          pm.pairs.push_back({obs[l][a]->x(), obs[l][a]->y(), obs[l][b]->x(),
                              obs[l][b]->y()});
      out.push_back(std::move(pm));
    }
  return out;
}

// Ground-truth deformation taking the canonical (frame 0) surface to the
// given frame: nodes sampled on the canonical surface, translations from the
// height change, rotations from the normal change.
inline DeformationGraph gt_graph(const SyntheticScene& s, int frame,
                                 int target_nodes = 48, int k = 4) {
  const double half = 0.5 * s.cfg.side - 0.1;
  std::vector<Vec3> pts;
  const int G = 24;
  for (int i = 0; i <= G; ++i)
    for (int j = 0; j <= G; ++j) {
      const double u = -half + 2 * half * i / G;
      const double v = -half + 2 * half * j / G;
      pts.push_back(s.surface_point(0, u, v));
    }
  DeformationGraph g = sample_nodes(pts, target_nodes, k);
  for (GraphNode& n : g.nodes) {
    const double u = n.g.x(), v = n.g.y();
    n.R = minimal_rotation(s.surface_normal(0, u, v),
                           s.surface_normal(frame, u, v));
    n.t = s.surface_point(frame, u, v) - n.g;
  }
  return g;
}

struct EvalResult {
  double mre = std::numeric_limits<double>::quiet_NaN();  // percent
  double completeness = 0;                                // percent
  double mre_unfiltered = std::numeric_limits<double>::quiet_NaN();
  std::int64_t compared = 0;
  std::int64_t gt_valid = 0;
};

// Mean relative depth error (percent) over pixels valid in both maps;
// completeness is the percentage of ground-truth-visible pixels that carry
// reconstructed depth. mre_unfiltered is left for callers holding a map from
// a filter-disabled run.
inline EvalResult evaluate_depth(const DepthNormalMap& map, const Image& gt) {
  if (map.width != gt.width || map.height != gt.height)
    throw Error("evaluate_depth: size mismatch");
  EvalResult r;
  double acc = 0;
  for (int y = 0; y < gt.height; ++y)
    for (int x = 0; x < gt.width; ++x) {
      const double g = gt.at(x, y);
      if (!(g > 0)) continue;
      ++r.gt_valid;
      if (!map.valid_at(x, y)) continue;
      ++r.compared;
      acc += std::abs(map.depth[map.idx(x, y)] - g) / g;
    }
  if (r.compared > 0) r.mre = 100.0 * acc / static_cast<double>(r.compared);
  if (r.gt_valid > 0)
    r.completeness =
        100.0 * static_cast<double>(r.compared) / static_cast<double>(r.gt_valid);
  return r;
}

}  // namespace nrmvs
