#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "nrmvs/core.hpp"
#include "nrmvs/rigid.hpp"

namespace nrmvs {

// One graph node: rest position g and the local rigid transform (R, t) acting
// about g, i.e. x -> R (x - g) + g + t.
struct GraphNode {
  Vec3 g = Vec3::Zero();
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();
};

struct DeformationGraph {
  int k = 4;  // skinning neighborhood size
  std::vector<GraphNode> nodes;
  std::vector<std::vector<int>> neighbors;  // symmetric, sorted per node
  double sampling_radius = 0.0;             // rejection radius used by sample_nodes
};

// Fixed-capacity skinning support: k nearest nodes plus their normalized
// weights. k is capped so the struct stays allocation free in inner loops.
constexpr int kMaxSkinK = 8;

struct SkinningWeights {
  int count = 0;
  int index[kMaxSkinK];
  double w[kMaxSkinK];
};

namespace detail {

struct Neighbor {
  double d2;
  int index;
};

// m nearest positions to p, ordered by (distance, index). Brute force: node
// counts are small enough that a spatial index would cost more than it saves.
inline int nearest_m(const std::vector<Vec3>& pts, const Vec3& p, int m,
                     Neighbor* out) {
  int filled = 0;
  for (int i = 0; i < static_cast<int>(pts.size()); ++i) {
    const double d2 = (pts[i] - p).squaredNorm();
    if (filled == m && d2 > out[m - 1].d2) continue;
    if (filled == m && d2 == out[m - 1].d2 && i > out[m - 1].index) continue;
    int j = std::min(filled, m - 1);
    while (j > 0 && (out[j - 1].d2 > d2 ||
                     (out[j - 1].d2 == d2 && out[j - 1].index > i))) {
      out[j] = out[j - 1];
      --j;
    }
    out[j] = {d2, i};
    if (filled < m) ++filled;
  }
  return filled;
}

inline std::vector<Vec3> node_positions(const DeformationGraph& graph,
                                        bool deformed) {
  std::vector<Vec3> p(graph.nodes.size());
  for (std::size_t i = 0; i < graph.nodes.size(); ++i)
    p[i] = deformed ? Vec3(graph.nodes[i].g + graph.nodes[i].t) : graph.nodes[i].g;
  return p;
}

// Shared by skinning_weights and approx_inverse: weights against an arbitrary
// set of anchor positions.
inline SkinningWeights weights_against(const std::vector<Vec3>& anchors,
                                       const Vec3& v, int k) {
  if (k < 1 || k > kMaxSkinK) throw Error("skinning k out of range");
  if (static_cast<int>(anchors.size()) < k + 1)
    throw Error("graph needs at least k+1 nodes");
  Neighbor nn[kMaxSkinK + 1];
  nearest_m(anchors, v, k + 1, nn);
  const double d_last = std::sqrt(nn[k].d2);
  if (d_last <= 0.0) throw Error("degenerate weights: all support nodes coincide");
  SkinningWeights sw;
  sw.count = k;
  double sum = 0.0;
  for (int i = 0; i < k; ++i) {
    sw.index[i] = nn[i].index;
    const double u = 1.0 - std::sqrt(nn[i].d2) / d_last;
    sw.w[i] = u * u;
    sum += sw.w[i];
  }
  if (sum <= 0.0) {
    for (int i = 0; i < k; ++i) sw.w[i] = 1.0 / k;  // all k at equal distance
  } else {
    for (int i = 0; i < k; ++i) sw.w[i] /= sum;
  }
  return sw;
}

}  // namespace detail

// Weights against node rest positions: w_i proportional to
// (1 - |v - g_i| / |v - g_{k+1}|)^2, normalized over the k nearest.
inline SkinningWeights skinning_weights(const Vec3& v,
                                        const DeformationGraph& graph) {
  return detail::weights_against(detail::node_positions(graph, false), v, graph.k);
}

inline Vec3 deform_point(const Vec3& v, const SkinningWeights& sw,
                         const DeformationGraph& graph) {
  Vec3 out = Vec3::Zero();
  for (int i = 0; i < sw.count; ++i) {
    const GraphNode& n = graph.nodes[sw.index[i]];
    out += sw.w[i] * (n.R * (v - n.g) + n.g + n.t);
  }
  return out;
}

inline Vec3 deform_point(const Vec3& v, const DeformationGraph& graph) {
  return deform_point(v, skinning_weights(v, graph), graph);
}

inline Mat3 blend_rotation(const SkinningWeights& sw,
                           const DeformationGraph& graph) {
  Mat3 B = Mat3::Zero();
  for (int i = 0; i < sw.count; ++i) B += sw.w[i] * graph.nodes[sw.index[i]].R;
  return B;
}

inline Vec3 deform_normal(const Vec3& n, const SkinningWeights& sw,
                          const DeformationGraph& graph) {
  const Vec3 b = blend_rotation(sw, graph) * n;
  const double len = b.norm();
  if (len < 1e-12) throw Error("degenerate normal blend");
  return b / len;
}

inline Vec3 deform_normal(const Vec3& n, const Vec3& v,
                          const DeformationGraph& graph) {
  return deform_normal(n, skinning_weights(v, graph), graph);
}

namespace detail {

inline Vec3 invert_with_weights(const Vec3& vhat, const SkinningWeights& sw,
                                const DeformationGraph& graph) {
  Mat3 B = Mat3::Zero();
  Vec3 c = Vec3::Zero();
  for (int i = 0; i < sw.count; ++i) {
    const GraphNode& n = graph.nodes[sw.index[i]];
    B += sw.w[i] * n.R;
    c += sw.w[i] * (n.R * n.g - n.g - n.t);
  }
  Eigen::JacobiSVD<Mat3> svd(B, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const double smin = svd.singularValues()(2);
  const double smax = svd.singularValues()(0);
  if (smin <= 0.0 || smax / smin >= 1e8)
    throw Error("singular rotation blend");
  return svd.solve(vhat + c);
}

}  // namespace detail

// Exact inverse of the forward map for a point whose skinning weights (in the
// rest pose) are already known.
inline Vec3 exact_inverse(const Vec3& vhat, const SkinningWeights& sw,
                          const DeformationGraph& graph) {
  return detail::invert_with_weights(vhat, sw, graph);
}

// Approximate inverse: weights are measured against the deformed node
// positions g_i + t_i, then the same algebraic inverse is applied. Good to
// well under the node spacing for smooth fields; see exact_inverse when the
// rest-pose weights are available.
inline Vec3 approx_inverse(const Vec3& vhat, const DeformationGraph& graph) {
  const SkinningWeights sw =
      detail::weights_against(detail::node_positions(graph, true), vhat, graph.k);
  return detail::invert_with_weights(vhat, sw, graph);
}

// Pull a normal back through the graph: inverse of the blend at the
// recovered rest-pose location.
inline Vec3 inverse_normal(const Vec3& nhat, const Vec3& v_rest,
                           const DeformationGraph& graph) {
  const Mat3 B = blend_rotation(skinning_weights(v_rest, graph), graph);
  const Vec3 n = B.inverse() * nhat;
  const double len = n.norm();
  if (len < 1e-12) throw Error("degenerate normal blend");
  return n / len;
}

struct RegEdge {
  int j, k;  // directed: residual anchored at node j toward neighbor k
};

inline std::vector<RegEdge> reg_edges(const DeformationGraph& graph) {
  std::vector<RegEdge> edges;
  for (int j = 0; j < static_cast<int>(graph.neighbors.size()); ++j)
    for (int k : graph.neighbors[j]) edges.push_back({j, k});
  return edges;
}

// Per-edge smoothness residual: node j's transform applied to neighbor k's
// rest position must agree with where node k itself moved.
inline Vec3 reg_residual(const DeformationGraph& graph, const RegEdge& e) {
  const GraphNode& a = graph.nodes[e.j];
  const GraphNode& b = graph.nodes[e.k];
  return a.R * (b.g - a.g) + a.g + a.t - (b.g + b.t);
}

inline VecX regularizer_residuals(const DeformationGraph& graph) {
  const std::vector<RegEdge> edges = reg_edges(graph);
  VecX r(3 * edges.size());
  for (std::size_t i = 0; i < edges.size(); ++i)
    r.segment<3>(3 * i) = reg_residual(graph, edges[i]);
  return r;
}

struct SampleStats {
  int iterations = 0;
  double radius = 0.0;
};

// Greedy radius thinning in input order: a point becomes a node if it is at
// least r away from every node kept so far; r grows 10% until the count fits.
inline DeformationGraph sample_nodes(const std::vector<Vec3>& points,
                                     int target_count, int k = 4,
                                     SampleStats* stats = nullptr) {
  if (points.empty()) throw Error("empty input: no points to sample nodes from");
  if (k < 1 || k > kMaxSkinK) throw Error("skinning k out of range");
  if (target_count < k + 1) throw Error("target node count below k+1");

  std::vector<Vec3> kept;
  double radius = 0.0;
  int iterations = 0;

  if (static_cast<int>(points.size()) <= target_count) {
    kept = points;
    iterations = 1;
  } else {
    Vec3 lo = points[0], hi = points[0];
    for (const Vec3& p : points) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    const double diag = (hi - lo).norm();
    if (diag <= 0.0) throw Error("degenerate weights: all points coincide");
    radius = 0.35 * diag / std::sqrt(static_cast<double>(target_count));
    for (;;) {
      ++iterations;
      if (iterations > 100) throw Error("node sampling did not converge");
      kept.clear();
      const double r2 = radius * radius;
      for (const Vec3& p : points) {
        bool free_spot = true;
        for (const Vec3& q : kept)
          if ((p - q).squaredNorm() < r2) {
            free_spot = false;
            break;
          }
        if (free_spot) kept.push_back(p);
      }
      if (static_cast<int>(kept.size()) <= target_count) break;
      radius *= 1.1;
    }
  }

  if (static_cast<int>(kept.size()) < k + 1)
    throw Error("graph needs at least k+1 nodes");

  DeformationGraph graph;
  graph.k = k;
  graph.sampling_radius = radius;
  graph.nodes.resize(kept.size());
  for (std::size_t i = 0; i < kept.size(); ++i) graph.nodes[i].g = kept[i];

  // k-nearest connectivity, symmetrized.
  const int n = static_cast<int>(kept.size());
  graph.neighbors.assign(n, {});
  std::vector<detail::Neighbor> nn(k + 1);
  for (int i = 0; i < n; ++i) {
    detail::nearest_m(kept, kept[i], k + 1, nn.data());
    for (int j = 0; j < k + 1; ++j) {
      if (nn[j].index == i) continue;
      graph.neighbors[i].push_back(nn[j].index);
      if (static_cast<int>(graph.neighbors[i].size()) == k) break;
    }
  }
  for (int i = 0; i < n; ++i)
    for (int j : graph.neighbors[i])
      if (std::find(graph.neighbors[j].begin(), graph.neighbors[j].end(), i) ==
          graph.neighbors[j].end())
        graph.neighbors[j].push_back(i);
  for (auto& list : graph.neighbors) std::sort(list.begin(), list.end());

  if (stats) {
    stats->iterations = iterations;
    stats->radius = radius;
  }
  return graph;
}

inline bool same_structure(const DeformationGraph& a, const DeformationGraph& b) {
  if (a.k != b.k || a.nodes.size() != b.nodes.size()) return false;
  for (std::size_t i = 0; i < a.nodes.size(); ++i)
    if (a.nodes[i].g != b.nodes[i].g) return false;
  return a.neighbors == b.neighbors;
}

// Dual-quaternion interpolation between two deformation states of the same
// graph. Endpoints are returned verbatim so alpha 0/1 round-trips exactly.
inline DeformationGraph interpolate(const DeformationGraph& a,
                                    const DeformationGraph& b, double alpha) {
  if (!same_structure(a, b)) throw Error("incompatible graphs");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("alpha must be in [0, 1]");
  if (alpha == 0.0) return a;
  if (alpha == 1.0) return b;
  DeformationGraph out = a;
  for (std::size_t i = 0; i < a.nodes.size(); ++i) {
    const GraphNode& na = a.nodes[i];
    const GraphNode& nb = b.nodes[i];
    // World-frame translation of the about-g transform: T = g + t - R g.
    const DualQuat qa = dq_from_rigid(na.R, na.g + na.t - na.R * na.g);
    const DualQuat qb = dq_from_rigid(nb.R, nb.g + nb.t - nb.R * nb.g);
    const DualQuat q = dq_blend(qa, qb, alpha);
    Mat3 R;
    Vec3 T;
    dq_to_rigid(q, R, T);
    out.nodes[i].R = R;
    out.nodes[i].t = T - na.g + R * na.g;
  }
  return out;
}

}  // namespace nrmvs
