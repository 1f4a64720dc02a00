#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "nrmvs/camera.hpp"
#include "nrmvs/core.hpp"
#include "nrmvs/defgraph.hpp"
#include "nrmvs/optimize.hpp"
#include "nrmvs/patchmatch.hpp"
#include "nrmvs/rng.hpp"

namespace nrmvs {

// Pairwise keypoint matches as they appear in the matches file.
struct PairMatches {
  int image_a = 0;
  int image_b = 0;
  std::vector<std::array<double, 4>> pairs;  // ua_x, ua_y, ub_x, ub_y
};

struct FeatureTrack {
  std::int64_t id = -1;
  std::map<int, Vec2> obs;  // image index -> pixel
};

namespace detail {

struct Dsu {
  std::vector<int> parent;
  int add() {
    parent.push_back(static_cast<int>(parent.size()));
    return parent.back();
  }
  int find(int a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

struct KeypointKey {
  int image;
  std::uint64_t xb, yb;
  bool operator==(const KeypointKey& o) const {
    return image == o.image && xb == o.xb && yb == o.yb;
  }
};

struct KeypointKeyHash {
  std::size_t operator()(const KeypointKey& k) const {
    return static_cast<std::size_t>(
        mix64(mix64(static_cast<std::uint64_t>(k.image)) ^ k.xb) ^ k.yb);
  }
};

}  // namespace detail

// Union-find over pairwise matches. A connected component becomes a track
// unless it links two distinct keypoints inside one image, in which case the
// whole component is rejected as inconsistent.
inline std::vector<FeatureTrack> ingest_tracks(
    const std::vector<PairMatches>& matches) {
  detail::Dsu dsu;
  std::unordered_map<detail::KeypointKey, int, detail::KeypointKeyHash> ids;
  std::vector<std::pair<int, Vec2>> keypoints;  // (image, pixel) per node

  auto intern = [&](int image, double x, double y) {
    detail::KeypointKey key{image, std::bit_cast<std::uint64_t>(x),
                            std::bit_cast<std::uint64_t>(y)};
    auto it = ids.find(key);
    if (it != ids.end()) return it->second;
    const int id = dsu.add();
    ids.emplace(key, id);
    keypoints.emplace_back(image, Vec2(x, y));
    return id;
  };

  for (const PairMatches& pm : matches)
    for (const auto& p : pm.pairs)
      dsu.unite(intern(pm.image_a, p[0], p[1]),
                intern(pm.image_b, p[2], p[3]));

  // Components keyed by root; the root is the smallest node id in the
  // component, so iteration order (and track ids) follow first appearance.
  std::map<int, std::vector<int>> components;
  for (int n = 0; n < static_cast<int>(keypoints.size()); ++n)
    components[dsu.find(n)].push_back(n);

  std::vector<FeatureTrack> tracks;
  std::int64_t next_id = 0;
  for (auto& [root, nodes] : components) {
    FeatureTrack t;
    bool consistent = true;
    for (int n : nodes) {
      const auto& [image, uv] = keypoints[n];
      auto it = t.obs.find(image);
      if (it != t.obs.end()) {
        consistent = false;  // two distinct keypoints of one image linked
        break;
      }
      t.obs.emplace(image, uv);
    }
    if (!consistent || t.obs.size() < 2) continue;
    t.id = next_id++;
    tracks.push_back(std::move(t));
  }
  return tracks;
}

struct CanonicalSelection {
  int i = -1, j = -1;
  Eigen::MatrixXd ratio;      // static-inlier ratio per unordered pair
  Eigen::MatrixXi counts;     // matches per pair
  Eigen::MatrixXi inliers;    // sub-pixel triangulations per pair
};

// Static-inlier ratio per view pair: a match is an inlier when two-view
// triangulation reprojects below 1 px in both images. The pair with the
// highest ratio bounds the mutual deformation and becomes canonical.
inline CanonicalSelection select_canonical_views(
    const std::vector<CameraView>& views,
    const std::vector<FeatureTrack>& tracks, int min_pair_matches = 8) {
  const int V = static_cast<int>(views.size());
  if (V < 2) throw BootstrapError("cannot bootstrap: need at least two views");
  CanonicalSelection sel;
  sel.ratio = Eigen::MatrixXd::Zero(V, V);
  sel.counts = Eigen::MatrixXi::Zero(V, V);
  sel.inliers = Eigen::MatrixXi::Zero(V, V);

  for (int a = 0; a < V; ++a)
    for (int b = a + 1; b < V; ++b) {
      int count = 0, inl = 0;
      for (const FeatureTrack& t : tracks) {
        auto ia = t.obs.find(a);
        auto ib = t.obs.find(b);
        if (ia == t.obs.end() || ib == t.obs.end()) continue;
        ++count;
        try {
          const Triangulation tri = triangulate({&views[a], &views[b]},
                                                {ia->second, ib->second});
          if (tri.max_reprojection_error < 1.0) ++inl;
        } catch (const Error&) {
          // degenerate or behind a camera: not an inlier
        }
      }
      sel.counts(a, b) = sel.counts(b, a) = count;
      sel.inliers(a, b) = sel.inliers(b, a) = inl;
      if (count > 0)
        sel.ratio(a, b) = sel.ratio(b, a) =
            static_cast<double>(inl) / static_cast<double>(count);
    }

  double best_ratio = -1;
  int best_inl = -1;
  for (int a = 0; a < V; ++a)
    for (int b = a + 1; b < V; ++b) {
      if (sel.counts(a, b) < min_pair_matches) continue;
      const double r = sel.ratio(a, b);
      if (r > best_ratio || (r == best_ratio && sel.inliers(a, b) > best_inl)) {
        best_ratio = r;
        best_inl = sel.inliers(a, b);
        sel.i = a;
        sel.j = b;
      }
    }
  if (sel.i < 0)
    throw BootstrapError("cannot bootstrap: no view pair with enough matches");
  return sel;
}

// A processed view's contribution to lifting: camera, filtered depth, and the
// deformation taking the canonical frame to that view's state.
struct ProcessedView {
  int index = -1;
  const CameraView* view = nullptr;
  const DepthNormalMap* depth = nullptr;
  const DeformationGraph* deformation = nullptr;
};

// Lift each track to the canonical frame: back-project its pixel in every
// processed view that has depth there, pull through that view's deformation,
// and average the estimates.
inline std::map<std::int64_t, Vec3> lift_keypoints(
    const std::vector<FeatureTrack>& tracks,
    const std::vector<ProcessedView>& processed) {
  std::map<std::int64_t, Vec3> lifted;
  for (const FeatureTrack& t : tracks) {
    Vec3 acc = Vec3::Zero();
    int n = 0;
    for (const ProcessedView& pv : processed) {
      auto it = t.obs.find(pv.index);
      if (it == t.obs.end()) continue;
      const Vec2& uv = it->second;
      const int px = static_cast<int>(std::lround(uv.x()));
      const int py = static_cast<int>(std::lround(uv.y()));
      if (px < 0 || py < 0 || px >= pv.depth->width || py >= pv.depth->height)
        continue;
      if (!pv.depth->valid_at(px, py)) continue;
      const double d = pv.depth->depth[pv.depth->idx(px, py)];
      try {
        const Vec3 xw = unproject(*pv.view, uv, d);
        acc += approx_inverse(xw, *pv.deformation);
        ++n;
      } catch (const Error&) {
      }
    }
    if (n > 0) lifted.emplace(t.id, acc / n);
  }
  return lifted;
}

// Sparse 3D-3D association for view l: move each lifted canonical point by
// the current deformation estimate and drop it onto its keypoint ray.
inline std::vector<SparseMatch> associate(
    const std::map<std::int64_t, Vec3>& lifted,
    const std::vector<FeatureTrack>& tracks, const CameraView& view_l,
    int index_l, const DeformationGraph& d_l) {
  std::vector<SparseMatch> out;
  for (const FeatureTrack& t : tracks) {
    auto lit = lifted.find(t.id);
    if (lit == lifted.end()) continue;
    auto oit = t.obs.find(index_l);
    if (oit == t.obs.end()) continue;
    try {
      const Vec3 xhat = deform_point(lit->second, d_l);
      const Ray ray = keypoint_ray(view_l, oit->second);
      out.push_back({lit->second, project_to_ray(xhat, ray), t.id});
    } catch (const Error&) {
    }
  }
  return out;
}

struct PipelineConfig {
  EnergyWeights weights;
  double d_max = 0.01;
  double rho_max = 0.9;
  double tau = 0.9;
  int k = 4;
  int num_nodes = 150;
  int pyramid_levels = 3;
  int assoc_iters = 5;  // N
  int pm_iterations = 5;
  int random_halvings = 6;
  int min_consistent_views = 1;
  int template_target = 2000;
  double depth_pad = 0.2;  // fractional padding on derived depth ranges
  std::uint64_t seed = 0;
  int threads = 1;
  bool verbose = false;
};

inline void validate_config(const PipelineConfig& c) {
  if (c.weights.w_sparse < 0 || c.weights.w_dense < 0 || c.weights.w_reg < 0)
    throw Error("weights must be nonnegative");
  if (c.weights.w_sparse == 0 && c.weights.w_dense == 0 && c.weights.w_reg == 0)
    throw Error("at least one weight must be positive");
  if (!(c.tau > 0 && c.tau < 1)) throw Error("tau must be in (0, 1)");
  if (!(c.rho_max > 0 && c.rho_max < 2)) throw Error("rho_max must be in (0, 2)");
  if (c.d_max <= 0) throw Error("d_max must be positive");
  if (c.k < 1 || c.k > kMaxSkinK) throw Error("skinning k out of range");
  if (c.num_nodes < c.k + 1) throw Error("num_nodes below k+1");
  if (c.pyramid_levels < 1) throw Error("pyramid_levels must be >= 1");
  if (c.assoc_iters < 1) throw Error("assoc_iters must be >= 1");
  if (c.pm_iterations < 1) throw Error("pm_iterations must be >= 1");
  if (c.template_target < c.k + 1) throw Error("template_target below k+1");
}

struct ViewRecord {
  int index = -1;
  bool processed = false;
  bool canonical = false;
  DeformationGraph deformation;
  DepthNormalMap raw_map;  // photometric pass only
  DepthNormalMap map;      // after geometric filtering
  SolveReport report;      // last joint solve
  int matches_in = 0;
  int matches_kept = 0;
  std::string note;
};

struct PipelineResult {
  int canonical_i = -1, canonical_j = -1;
  CanonicalSelection selection;
  std::vector<ViewRecord> views;
  std::vector<SurfacePoint> tmpl;
  PointCloud canonical_cloud;
  std::vector<PointCloud> view_clouds;  // index-aligned with views
  std::vector<PointCloud> propagated;   // canonical cloud under each view's state
};

namespace detail {

// Deterministic voxel thinning: first point wins its cell; the cell grows
// until the kept count fits the target.
inline std::vector<SurfacePoint> thin_points(const std::vector<SurfacePoint>& pts,
                                             int target) {
  if (static_cast<int>(pts.size()) <= target) return pts;
  Vec3 lo = pts[0].x, hi = pts[0].x;
  for (const SurfacePoint& p : pts) {
    lo = lo.cwiseMin(p.x);
    hi = hi.cwiseMax(p.x);
  }
  double cell = 0.5 * (hi - lo).norm() / std::sqrt(static_cast<double>(target));
  for (int round = 0; round < 64; ++round) {
    std::unordered_map<std::uint64_t, int> occupied;
    std::vector<SurfacePoint> kept;
    for (const SurfacePoint& p : pts) {
      const auto cx = static_cast<std::int64_t>(std::floor((p.x.x() - lo.x()) / cell));
      const auto cy = static_cast<std::int64_t>(std::floor((p.x.y() - lo.y()) / cell));
      const auto cz = static_cast<std::int64_t>(std::floor((p.x.z() - lo.z()) / cell));
      const std::uint64_t key =
          mix64(mix64(static_cast<std::uint64_t>(cx) ^
                      mix64(static_cast<std::uint64_t>(cy))) ^
                static_cast<std::uint64_t>(cz));
      if (occupied.emplace(key, 1).second) kept.push_back(p);
    }
    if (static_cast<int>(kept.size()) <= target) return kept;
    cell *= 1.25;
  }
  throw Error("template thinning did not converge");
}

// Identity deformation covering the given points: nodes on the bounding box
// corners, all transforms identity. Deforms everything to itself exactly.
inline DeformationGraph identity_graph(const std::vector<Vec3>& pts, int k) {
  Vec3 lo = pts.at(0), hi = pts.at(0);
  for (const Vec3& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const Vec3 pad = 0.1 * (hi - lo) + Vec3::Constant(1e-3);
  lo -= pad;
  hi += pad;
  DeformationGraph g;
  g.k = k;
  for (int c = 0; c < 8; ++c) {
    GraphNode n;
    n.g = Vec3(c & 1 ? hi.x() : lo.x(), c & 2 ? hi.y() : lo.y(),
               c & 4 ? hi.z() : lo.z());
    g.nodes.push_back(n);
  }
  g.neighbors.assign(8, {});
  for (int a = 0; a < 8; ++a)
    for (int b = 0; b < 8; ++b)
      if (a != b) g.neighbors[a].push_back(b);
  return g;
}

inline DeformationGraph with_identity_transforms(const DeformationGraph& g) {
  DeformationGraph out = g;
  for (GraphNode& n : out.nodes) {
    n.R = Mat3::Identity();
    n.t = Vec3::Zero();
  }
  return out;
}

// Depth range of a point set seen from a view, padded.
inline void depth_range_of(const CameraView& view, const std::vector<Vec3>& pts,
                           double pad, double& dmin, double& dmax) {
  double lo = std::numeric_limits<double>::infinity(), hi = 0;
  for (const Vec3& p : pts) {
    const double d = camera_depth(view, p);
    if (d > 0) {
      lo = std::min(lo, d);
      hi = std::max(hi, d);
    }
  }
  if (!(hi > 0)) throw Error("no depth range");
  dmin = (1.0 - pad) * lo;
  dmax = (1.0 + pad) * hi;
}

}  // namespace detail

// Full reconstruction per the published pipeline: canonical bootstrap,
// per-view association / filtering / joint solves, per-view depth, and the
// final all-view recomputation.
inline PipelineResult run(const std::vector<CameraView>& views,
                          const std::vector<FeatureTrack>& tracks,
                          const PipelineConfig& cfg) {
  validate_config(cfg);
  const int V = static_cast<int>(views.size());
  PipelineResult res;
  res.views.resize(V);
  for (int v = 0; v < V; ++v) res.views[v].index = v;

  auto log = [&](const std::string& msg) {
    if (cfg.verbose) std::fprintf(stderr, "[nrmvs] %s\n", msg.c_str());
  };

  // Canonical pair selection from static-inlier ratios.
  res.selection = select_canonical_views(views, tracks);
  const int ci = res.selection.i, cj = res.selection.j;
  res.canonical_i = ci;
  res.canonical_j = cj;
  log("canonical pair: " + std::to_string(ci) + ", " + std::to_string(cj));

  // Triangulated static inliers of the canonical pair seed the depth ranges
  // and the identity graph's extent.
  std::vector<Vec3> seed_points;
  for (const FeatureTrack& t : tracks) {
    auto ia = t.obs.find(ci);
    auto ib = t.obs.find(cj);
    if (ia == t.obs.end() || ib == t.obs.end()) continue;
    try {
      const Triangulation tri =
          triangulate({&views[ci], &views[cj]}, {ia->second, ib->second});
      if (tri.max_reprojection_error < 1.0) seed_points.push_back(tri.point);
    } catch (const Error&) {
    }
  }
  if (seed_points.size() < 8)
    throw BootstrapError("cannot bootstrap: too few static inliers");

  const DeformationGraph id_graph = detail::identity_graph(seed_points, cfg.k);
  res.views[ci].deformation = id_graph;
  res.views[cj].deformation = id_graph;
  res.views[ci].canonical = res.views[cj].canonical = true;

  PatchMatchConfig pm;
  pm.iterations = cfg.pm_iterations;
  pm.random_halvings = cfg.random_halvings;
  pm.min_consistent_views = cfg.min_consistent_views;
  pm.threads = cfg.threads;

  // Bootstrap: plain (identity-deformation) PatchMatch on the canonical pair,
  // cross-filtered against each other.
  auto bootstrap_pass = [&](int target, int other) {
    PatchMatchConfig c = pm;
    c.seed = rng_key(cfg.seed, 0xB007, static_cast<std::uint64_t>(target));
    detail::depth_range_of(views[target], seed_points, cfg.depth_pad,
                           c.depth_min, c.depth_max);
    return pm_photometric(views[target], id_graph,
                          {{&views[other], &id_graph, nullptr}}, c);
  };
  log("bootstrap patchmatch");
  res.views[ci].raw_map = bootstrap_pass(ci, cj);
  res.views[cj].raw_map = bootstrap_pass(cj, ci);
  res.views[ci].map =
      pm_filter(views[ci], id_graph, res.views[ci].raw_map,
                {{&views[cj], &id_graph, &res.views[cj].raw_map}}, pm);
  res.views[cj].map =
      pm_filter(views[cj], id_graph, res.views[cj].raw_map,
                {{&views[ci], &id_graph, &res.views[ci].raw_map}}, pm);

  // Canonical template from the fused bootstrap clouds.
  std::vector<SurfacePoint> canon;
  for (int v : {ci, cj}) {
    const DepthNormalMap& m = res.views[v].map;
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x) {
        if (!m.valid_at(x, y)) continue;
        SurfacePoint sp;
        sp.x = unproject(views[v], Vec2(x, y), m.depth[m.idx(x, y)]);
        sp.n = m.normal[m.idx(x, y)].cast<double>();
        canon.push_back(sp);
      }
  }
  if (static_cast<int>(canon.size()) < cfg.k + 1)
    throw BootstrapError("cannot bootstrap: canonical depth empty");
  res.tmpl = detail::thin_points(canon, std::min(cfg.template_target, 20000));
  log("template points: " + std::to_string(res.tmpl.size()));

  std::vector<Vec3> tmpl_pos(res.tmpl.size());
  for (std::size_t i = 0; i < res.tmpl.size(); ++i) tmpl_pos[i] = res.tmpl[i].x;
  const DeformationGraph graph0 = sample_nodes(tmpl_pos, cfg.num_nodes, cfg.k);
  log("graph nodes: " + std::to_string(graph0.nodes.size()));

  // Canonical views share the template's graph with identity transforms so
  // later stages can interpolate between any pair of views.
  res.views[ci].deformation = graph0;
  res.views[cj].deformation = graph0;

  std::vector<int> processed = {ci, cj};

  // Pending views closest to the canonical pair first.
  std::vector<int> pending;
  for (int v = 0; v < V; ++v)
    if (v != ci && v != cj) pending.push_back(v);
  std::sort(pending.begin(), pending.end(), [&](int a, int b) {
    const double ra = std::max(res.selection.ratio(a, ci), res.selection.ratio(a, cj));
    const double rb = std::max(res.selection.ratio(b, ci), res.selection.ratio(b, cj));
    if (ra != rb) return ra > rb;
    return a < b;
  });

  LmOptions lm;
  lm.threads = cfg.threads;

  DenseViews dviews;
  dviews.refs = {&views[ci], &views[cj]};

  for (int l : pending) {
    log("view " + std::to_string(l));
    try {
      std::vector<ProcessedView> pvs;
      for (int q : processed)
        pvs.push_back({q, &views[q], &res.views[q].map, &res.views[q].deformation});
      const std::map<std::int64_t, Vec3> lifted = lift_keypoints(tracks, pvs);

      DeformationGraph d_l = detail::with_identity_transforms(graph0);
      dviews.srcs = {&views[l]};
      SolveReport last;
      int m_in = 0, m_kept = 0;
      for (int m = 1; m <= cfg.assoc_iters; ++m) {
        const std::vector<SparseMatch> raw_matches =
            associate(lifted, tracks, views[l], l, d_l);
        m_in = static_cast<int>(raw_matches.size());
        SolveReport frep;
        const std::vector<SparseMatch> kept = filter_sparse(
            d_l, raw_matches, cfg.d_max, cfg.tau, cfg.weights, lm, &frep);
        m_kept = static_cast<int>(kept.size());
        JointResult jr =
            solve_joint(d_l, kept, res.tmpl, dviews, cfg.rho_max, cfg.tau,
                        cfg.pyramid_levels, cfg.weights, pm.sampler, lm);
        d_l = std::move(jr.graph);
        last = std::move(jr.report);
        last.rejected_sparse = frep.rejected_sparse;
      }
      res.views[l].deformation = d_l;
      res.views[l].report = std::move(last);
      res.views[l].matches_in = m_in;
      res.views[l].matches_kept = m_kept;

      // Depth for the new view with all processed views as supports.
      PatchMatchConfig c = pm;
      c.seed = rng_key(cfg.seed, 0xDE44, static_cast<std::uint64_t>(l));
      std::vector<Vec3> state_pts(res.tmpl.size());
      for (std::size_t i = 0; i < res.tmpl.size(); ++i)
        state_pts[i] = deform_point(res.tmpl[i].x, d_l);
      detail::depth_range_of(views[l], state_pts, cfg.depth_pad, c.depth_min,
                             c.depth_max);
      std::vector<SupportView> supports;
      for (int q : processed)
        supports.push_back(
            {&views[q], &res.views[q].deformation, &res.views[q].map});
      res.views[l].raw_map = pm_photometric(views[l], d_l, supports, c);
      res.views[l].map =
          pm_filter(views[l], d_l, res.views[l].raw_map, supports, pm);
      res.views[l].processed = true;
      processed.push_back(l);
    } catch (const Error& e) {
      res.views[l].note = e.what();
      std::fprintf(stderr, "[nrmvs] warning: view %d skipped: %s\n", l,
                   e.what());
    }
  }
  res.views[ci].processed = res.views[cj].processed = true;

  // Final pass: recompute every processed view's depth against all others,
  // then cross-filter the fresh raw maps.
  log("final depth recomputation");
  std::vector<DepthNormalMap> final_raw(V);
  for (int q : processed) {
    PatchMatchConfig c = pm;
    c.seed = rng_key(cfg.seed, 0xF17A, static_cast<std::uint64_t>(q));
    std::vector<Vec3> state_pts(res.tmpl.size());
    for (std::size_t i = 0; i < res.tmpl.size(); ++i)
      state_pts[i] = deform_point(res.tmpl[i].x, res.views[q].deformation);
    detail::depth_range_of(views[q], state_pts, cfg.depth_pad, c.depth_min,
                           c.depth_max);
    std::vector<SupportView> supports;
    for (int o : processed)
      if (o != q)
        supports.push_back({&views[o], &res.views[o].deformation, nullptr});
    final_raw[q] = pm_photometric(views[q], res.views[q].deformation, supports, c);
  }
  for (int q : processed) {
    std::vector<SupportView> supports;
    for (int o : processed)
      if (o != q)
        supports.push_back(
            {&views[o], &res.views[o].deformation, &final_raw[o]});
    res.views[q].raw_map = final_raw[q];
    res.views[q].map = pm_filter(views[q], res.views[q].deformation,
                                 final_raw[q], supports, pm);
  }

  // Fused clouds: per-view plus canonical, then the canonical cloud pushed
  // into every view's state (float32 path shared with interpolation).
  std::vector<const DepthNormalMap*> fmaps;
  std::vector<const CameraView*> fviews;
  std::vector<const DeformationGraph*> fdefs;
  for (int q : processed) {
    fmaps.push_back(&res.views[q].map);
    fviews.push_back(&views[q]);
    fdefs.push_back(&res.views[q].deformation);
  }
  FusedClouds fused = fuse_to_cloud(fmaps, fviews, fdefs);
  res.canonical_cloud = std::move(fused.canonical);
  res.view_clouds.resize(V);
  for (std::size_t qi = 0; qi < processed.size(); ++qi)
    res.view_clouds[processed[qi]] = std::move(fused.per_view[qi]);
  res.propagated.resize(V);
  for (int q : processed)
    res.propagated[q] = propagate_cloud(res.canonical_cloud,
                                        res.views[q].deformation);
  return res;
}

}  // namespace nrmvs
