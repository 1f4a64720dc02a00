#pragma once

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "nrmvs/core.hpp"
#include "nrmvs/defgraph.hpp"
#include "nrmvs/parallel.hpp"
#include "nrmvs/photometric.hpp"
#include "nrmvs/rigid.hpp"

namespace nrmvs {

// One sparse 3D-3D correspondence: the canonical-frame point paired with its
// target-frame location on the keypoint ray.
struct SparseMatch {
  Vec3 x_canonical = Vec3::Zero();
  Vec3 x_target = Vec3::Zero();
  std::int64_t track_id = -1;
};

struct EnergyWeights {
  double w_sparse = 1000.0;
  double w_dense = 0.01;
  double w_reg = 10.0;
};

struct LevelTrace {
  int level = 0;                 // pyramid level (0 = finest)
  std::vector<double> energies;  // initial + accepted energies, all inner solves
  std::vector<double> rho_cuts;  // rejection thresholds as applied
  std::vector<int> rejected;     // dense points cut per rejection round
};

struct SolveReport {
  int iterations = 0;
  double final_energy = 0.0;
  double e_sparse = 0.0, e_dense = 0.0, e_reg = 0.0;  // raw term sums
  int rejected_sparse = 0;
  int rejected_dense = 0;
  std::string status = "ok";
  std::vector<LevelTrace> levels;
};

struct LmOptions {
  int max_iters = 50;
  double tol_rel_energy = 1e-6;
  double tol_gradient = 1e-8;
  double lambda_init = 1e-3;
  double lambda_max = 1e12;
  int threads = 1;
};

struct DenseViews {
  std::vector<const CameraView*> refs;  // canonical pair
  std::vector<const CameraView*> srcs;  // views being solved against
};

// Stacked nonlinear least-squares system over the graph's 6m parameters
// (axis-angle + translation per node). Residual order: sparse matches, dense
// photometric, regularizer; every block pre-scaled by sqrt of its weight.
class JointSystem {
 public:
  JointSystem(const DeformationGraph& graph,
              std::vector<SparseMatch> matches, const DenseTerm* dense,
              const ConsistencyMask* mask, EnergyWeights weights,
              int threads = 1)
      : base_(graph),
        matches_(std::move(matches)),
        dense_(dense),
        weights_(weights),
        threads_(threads),
        edges_(reg_edges(graph)) {
    match_sw_.resize(matches_.size());
    for (std::size_t i = 0; i < matches_.size(); ++i)
      match_sw_[i] = skinning_weights(matches_[i].x_canonical, base_);
    if (dense_) {
      if (!mask) throw Error("dense term requires a mask");
      mask_ = *mask;
      if (mask_.size() != static_cast<std::size_t>(dense_->point_count()))
        throw Error("mask size does not match template");
      point_sw_.resize(dense_->point_count());
      for (int p = 0; p < dense_->point_count(); ++p)
        point_sw_[p] = skinning_weights(dense_->points()[p].x, base_);
    }
    sqrt_ws_ = std::sqrt(weights_.w_sparse);
    sqrt_wd_ = std::sqrt(weights_.w_dense);
    sqrt_wr_ = std::sqrt(weights_.w_reg);
  }

  int node_count() const { return static_cast<int>(base_.nodes.size()); }
  int param_count() const { return 6 * node_count(); }
  int sparse_rows() const { return 3 * static_cast<int>(matches_.size()); }
  int dense_rows() const {
    return dense_ ? dense_->residual_count() : 0;
  }
  int reg_rows() const { return 3 * static_cast<int>(edges_.size()); }
  int residual_count() const {
    return sparse_rows() + dense_rows() + reg_rows();
  }
  const std::vector<SparseMatch>& matches() const { return matches_; }
  const DeformationGraph& base_graph() const { return base_; }

  VecX initial_params() const {
    VecX theta(param_count());
    for (int j = 0; j < node_count(); ++j) {
      theta.segment<3>(6 * j) = so3_log(base_.nodes[j].R);
      theta.segment<3>(6 * j + 3) = base_.nodes[j].t;
    }
    return theta;
  }

  DeformationGraph graph_with(const VecX& theta) const {
    DeformationGraph g = base_;
    apply_params(theta, g);
    return g;
  }

  // Returns false when any residual is non-finite.
  bool residuals(const VecX& theta, VecX& f) const {
    const DeformationGraph g = graph_with(theta);
    f.resize(residual_count());
    for (std::size_t i = 0; i < matches_.size(); ++i)
      f.segment<3>(3 * i) =
          sqrt_ws_ *
          (deform_point(matches_[i].x_canonical, match_sw_[i], g) -
           matches_[i].x_target);
    if (dense_) {
      double* out = f.data() + sparse_rows();
      const int rp = dense_->residuals_per_point();
      parallel_for(0, dense_->point_count(), threads_, [&](std::int64_t p) {
        double* row = out + p * rp;
        if (!mask_[p]) {
          for (int i = 0; i < rp; ++i) row[i] = 0.0;
          return;
        }
        dense_->eval_point(g, static_cast<int>(p), point_sw_[p], row);
        for (int i = 0; i < rp; ++i) row[i] *= sqrt_wd_;
      });
    }
    double* rr = f.data() + sparse_rows() + dense_rows();
    for (std::size_t e = 0; e < edges_.size(); ++e) {
      Eigen::Map<Vec3>(rr + 3 * e) = sqrt_wr_ * reg_residual(g, edges_[e]);
    }
    return f.allFinite();
  }

  // Analytic blocks for sparse and regularizer terms; central finite
  // differences (step 1e-4) per supporting node for the dense term.
  Eigen::SparseMatrix<double> jacobian(const VecX& theta) const {
    const DeformationGraph g = graph_with(theta);
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(residual_count()) * 6);

    for (std::size_t i = 0; i < matches_.size(); ++i) {
      const SkinningWeights& sw = match_sw_[i];
      const int row = 3 * static_cast<int>(i);
      for (int s = 0; s < sw.count; ++s) {
        const int j = sw.index[s];
        const Vec3 w = theta.segment<3>(6 * j);
        const Mat3 dR = sw.w[s] * rotation_point_jacobian(
                                      g.nodes[j].R, w,
                                      matches_[i].x_canonical - g.nodes[j].g);
        for (int a = 0; a < 3; ++a)
          for (int b = 0; b < 3; ++b) {
            trip.emplace_back(row + a, 6 * j + b, sqrt_ws_ * dR(a, b));
            if (a == b)
              trip.emplace_back(row + a, 6 * j + 3 + b, sqrt_ws_ * sw.w[s]);
          }
      }
    }

    if (dense_) {
      const int rp = dense_->residuals_per_point();
      const int base_row = sparse_rows();
      const double h = 1e-4;
      // Each point's rows depend only on its own k supporting nodes, so the
      // FD loop parallelizes over points.
      std::vector<std::vector<Eigen::Triplet<double>>> per_point(
          dense_->point_count());
      parallel_for(0, dense_->point_count(), threads_, [&](std::int64_t p) {
        if (!mask_[p]) return;
        DeformationGraph scratch = g;
        const SkinningWeights& sw = point_sw_[p];
        std::vector<double> rplus(rp), rminus(rp);
        for (int s = 0; s < sw.count; ++s) {
          const int j = sw.index[s];
          const GraphNode saved = scratch.nodes[j];
          for (int q = 0; q < 6; ++q) {
            VecX::Scalar tq = theta(6 * j + q);
            set_node(scratch, j, theta, 6 * j + q, tq + h);
            dense_->eval_point(scratch, static_cast<int>(p), sw, rplus.data());
            set_node(scratch, j, theta, 6 * j + q, tq - h);
            dense_->eval_point(scratch, static_cast<int>(p), sw, rminus.data());
            scratch.nodes[j] = saved;
            for (int r = 0; r < rp; ++r) {
              const double d = sqrt_wd_ * (rplus[r] - rminus[r]) / (2.0 * h);
              if (d != 0.0)
                per_point[p].emplace_back(base_row + p * rp + r, 6 * j + q, d);
            }
          }
        }
      });
      for (auto& v : per_point)
        trip.insert(trip.end(), v.begin(), v.end());
    }

    const int reg_base = sparse_rows() + dense_rows();
    for (std::size_t e = 0; e < edges_.size(); ++e) {
      const int j = edges_[e].j;
      const int k = edges_[e].k;
      const int row = reg_base + 3 * static_cast<int>(e);
      const Vec3 w = theta.segment<3>(6 * j);
      const Mat3 dR = rotation_point_jacobian(g.nodes[j].R, w,
                                              g.nodes[k].g - g.nodes[j].g);
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) {
          trip.emplace_back(row + a, 6 * j + b, sqrt_wr_ * dR(a, b));
          if (a == b) {
            trip.emplace_back(row + a, 6 * j + 3 + b, sqrt_wr_);
            trip.emplace_back(row + a, 6 * k + 3 + b, -sqrt_wr_);
          }
        }
    }

    Eigen::SparseMatrix<double> J(residual_count(), param_count());
    J.setFromTriplets(trip.begin(), trip.end());
    return J;
  }

 private:
  static void set_node(DeformationGraph& g, int j, const VecX& theta,
                       int flat_index, double value) {
    Eigen::Matrix<double, 6, 1> p;
    p.head<3>() = theta.segment<3>(6 * j);
    p.tail<3>() = theta.segment<3>(6 * j + 3);
    p(flat_index - 6 * j) = value;
    g.nodes[j].R = so3_exp(p.head<3>());
    g.nodes[j].t = p.tail<3>();
  }

  void apply_params(const VecX& theta, DeformationGraph& g) const {
    for (int j = 0; j < node_count(); ++j) {
      g.nodes[j].R = so3_exp(theta.segment<3>(6 * j));
      g.nodes[j].t = theta.segment<3>(6 * j + 3);
    }
  }

  DeformationGraph base_;
  std::vector<SparseMatch> matches_;
  const DenseTerm* dense_ = nullptr;
  ConsistencyMask mask_;
  EnergyWeights weights_;
  int threads_ = 1;
  std::vector<RegEdge> edges_;
  std::vector<SkinningWeights> match_sw_;
  std::vector<SkinningWeights> point_sw_;
  double sqrt_ws_ = 0, sqrt_wd_ = 0, sqrt_wr_ = 0;
};

struct LmOutcome {
  VecX params;
  int iterations = 0;
  double final_energy = 0.0;
  std::vector<double> energies;  // initial energy followed by accepted steps
  std::string status = "ok";
};

// Levenberg-Marquardt with diagonal damping on the normal equations.
inline LmOutcome lm_minimize(const JointSystem& sys, const LmOptions& opt) {
  LmOutcome out;
  out.params = sys.initial_params();
  VecX f;
  if (!sys.residuals(out.params, f)) {
    out.status = "diverged";
    return out;
  }
  double energy = f.squaredNorm();
  out.energies.push_back(energy);
  out.final_energy = energy;
  double lambda = opt.lambda_init;

  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> chol;
  for (int iter = 0; iter < opt.max_iters; ++iter) {
    const Eigen::SparseMatrix<double> J = sys.jacobian(out.params);
    const VecX grad = J.transpose() * f;
    if (grad.lpNorm<Eigen::Infinity>() < opt.tol_gradient) {
      out.status = "gradient";
      return out;
    }
    Eigen::SparseMatrix<double> H = (J.transpose() * J).pruned();
    VecX diag(sys.param_count());
    for (int i = 0; i < sys.param_count(); ++i)
      diag(i) = std::max(H.coeff(i, i), 1e-10);

    bool accepted = false;
    VecX trial, ft;
    double et = 0;
    while (!accepted) {
      Eigen::SparseMatrix<double> Hd = H;
      for (int i = 0; i < sys.param_count(); ++i)
        Hd.coeffRef(i, i) = H.coeff(i, i) + lambda * diag(i);
      chol.compute(Hd);
      if (chol.info() == Eigen::Success) {
        const VecX delta = chol.solve(-grad);
        trial = out.params + delta;
        if (sys.residuals(trial, ft)) {
          et = ft.squaredNorm();
          if (et < energy) accepted = true;
        }
      }
      if (!accepted) {
        lambda *= 10.0;
        if (lambda > opt.lambda_max) {
          out.status = "stalled";
          return out;
        }
      }
    }
    const double rel = (energy - et) / std::max(energy, 1e-300);
    out.params = trial;
    f = ft;
    energy = et;
    out.final_energy = energy;
    out.energies.push_back(energy);
    ++out.iterations;
    lambda = std::max(lambda / 10.0, 1e-12);
    if (rel < opt.tol_rel_energy) {
      out.status = "converged";
      return out;
    }
  }
  out.status = "max_iters";
  return out;
}

// Raw (unweighted) term sums and the weighted total of Eq-style energy.
struct EnergyBreakdown {
  double total = 0, sparse = 0, dense = 0, reg = 0;
};

inline EnergyBreakdown energy(const DeformationGraph& graph,
                              const std::vector<SparseMatch>& matches,
                              const DenseTerm* dense,
                              const ConsistencyMask* mask,
                              const EnergyWeights& w, int threads = 1) {
  EnergyBreakdown out;
  std::vector<double> parts;
  parts.reserve(matches.size());
  for (const SparseMatch& m : matches)
    parts.push_back((deform_point(m.x_canonical, graph) - m.x_target).squaredNorm());
  out.sparse = pairwise_sum(parts);
  if (dense) {
    if (!mask) throw Error("dense term requires a mask");
    const VecX r = dense_residuals(*dense, graph, *mask, threads);
    std::vector<double> sq(r.size());
    for (int i = 0; i < r.size(); ++i) sq[i] = r(i) * r(i);
    out.dense = pairwise_sum(sq);
  }
  const VecX rr = regularizer_residuals(graph);
  std::vector<double> rsq(rr.size() / 3);
  for (std::size_t e = 0; e < rsq.size(); ++e)
    rsq[e] = rr.segment<3>(3 * e).squaredNorm();
  out.reg = pairwise_sum(rsq);
  out.total = w.w_sparse * out.sparse + w.w_dense * out.dense + w.w_reg * out.reg;
  return out;
}

// Free-function energy taking the raw ingredients; builds the dense term on
// the fly when template and views are provided.
inline EnergyBreakdown energy(const DeformationGraph& graph,
                              const std::vector<SparseMatch>& matches,
                              const std::vector<SurfacePoint>& tmpl,
                              const DenseViews& views,
                              const ConsistencyMask& mask,
                              const EnergyWeights& w,
                              const PatchSampler& sampler = {}, int level = 0,
                              int threads = 1) {
  if (tmpl.empty() || views.refs.empty() || views.srcs.empty())
    return energy(graph, matches, nullptr, nullptr, w, threads);
  DenseTerm term(tmpl, views.refs, views.srcs, sampler, level, threads);
  return energy(graph, matches, &term, &mask, w, threads);
}

inline std::pair<DeformationGraph, SolveReport> lm_solve(
    const DeformationGraph& graph, const std::vector<SparseMatch>& matches,
    const DenseTerm* dense, const ConsistencyMask* mask,
    const EnergyWeights& weights, const LmOptions& opt = {}) {
  JointSystem sys(graph, matches, dense, mask, weights, opt.threads);
  const LmOutcome lm = lm_minimize(sys, opt);
  SolveReport rep;
  rep.iterations = lm.iterations;
  rep.final_energy = lm.final_energy;
  rep.status = lm.status;
  LevelTrace trace;
  trace.level = dense ? dense->level() : 0;
  trace.energies = lm.energies;
  rep.levels.push_back(std::move(trace));
  const DeformationGraph solved = sys.graph_with(lm.params);
  const EnergyBreakdown eb = energy(solved, matches, dense, mask, weights, opt.threads);
  rep.e_sparse = eb.sparse;
  rep.e_dense = eb.dense;
  rep.e_reg = eb.reg;
  return {solved, std::move(rep)};
}

// Alternating solve / residual-cut loop over sparse matches. The solve always
// restarts from the given graph; the retained set shrinks until the worst
// residual clears d_max.
inline std::vector<SparseMatch> filter_sparse(
    const DeformationGraph& graph, std::vector<SparseMatch> matches,
    double d_max, double tau, const EnergyWeights& weights = {},
    const LmOptions& opt = {}, SolveReport* report = nullptr) {
  if (d_max <= 0.0) throw Error("d_max must be positive");
  if (!(tau > 0.0 && tau < 1.0)) throw Error("tau must be in (0, 1)");
  EnergyWeights w = weights;
  w.w_dense = 0.0;  // sparse-only stage
  SolveReport rep;
  for (;;) {
    auto [solved, srep] = lm_solve(graph, matches, nullptr, nullptr, w, opt);
    rep.iterations += srep.iterations;
    rep.status = srep.status;
    rep.final_energy = srep.final_energy;
    rep.e_sparse = srep.e_sparse;
    rep.e_reg = srep.e_reg;
    std::vector<double> r(matches.size());
    double e_max = 0.0;
    for (std::size_t i = 0; i < matches.size(); ++i) {
      r[i] = (deform_point(matches[i].x_canonical, solved) - matches[i].x_target)
                 .norm();
      e_max = std::max(e_max, r[i]);
    }
    if (e_max < d_max) break;
    const double d_cut = std::max(d_max, tau * e_max);
    std::vector<SparseMatch> kept;
    kept.reserve(matches.size());
    for (std::size_t i = 0; i < matches.size(); ++i)
      if (r[i] < d_cut) kept.push_back(matches[i]);
    rep.rejected_sparse += static_cast<int>(matches.size() - kept.size());
    if (kept.empty()) throw Error("no inliers");
    matches = std::move(kept);
  }
  if (report) *report = std::move(rep);
  return matches;
}

struct JointResult {
  DeformationGraph graph;
  ConsistencyMask mask;
  SolveReport report;
};

// Hierarchical joint solve with dense outlier rejection. Per pyramid level
// (coarse to fine): reset the cut schedule and the mask, then alternate
// solving the joint energy and zeroing points whose photometric residual
// exceeds the decaying cut. The accepted state advances on break, and
// unconditionally on the finest level.
inline JointResult solve_joint(const DeformationGraph& graph,
                               const std::vector<SparseMatch>& matches,
                               const std::vector<SurfacePoint>& tmpl,
                               const DenseViews& views, double rho_max,
                               double tau, int levels,
                               const EnergyWeights& weights = {},
                               const PatchSampler& sampler = {},
                               const LmOptions& opt = {}) {
  if (!(rho_max > 0.0 && rho_max < 2.0)) throw Error("rho_max must be in (0, 2)");
  if (!(tau > 0.0 && tau < 1.0)) throw Error("tau must be in (0, 1)");
  if (levels < 1) throw Error("levels must be >= 1");

  JointResult out;
  out.mask.assign(tmpl.size(), 1);

  // Ablation path: no dense energy means a single sparse+reg solve.
  if (weights.w_dense == 0.0 || tmpl.empty() || views.refs.empty() ||
      views.srcs.empty()) {
    auto [solved, rep] = lm_solve(graph, matches, nullptr, nullptr, weights, opt);
    out.graph = std::move(solved);
    out.report = std::move(rep);
    return out;
  }

  for (const CameraView* v : views.refs)
    if (static_cast<int>(v->pyramid.size()) < levels)
      throw Error("view pyramid shallower than requested levels");
  for (const CameraView* v : views.srcs)
    if (static_cast<int>(v->pyramid.size()) < levels)
      throw Error("view pyramid shallower than requested levels");

  DeformationGraph current = graph;
  SolveReport rep;
  const int P = static_cast<int>(tmpl.size());

  // Skinning weights depend only on rest positions, fixed for the whole solve.
  std::vector<SkinningWeights> sw(P);
  for (int p = 0; p < P; ++p) sw[p] = skinning_weights(tmpl[p].x, current);

  for (int m = 1; m <= levels; ++m) {
    const int level = levels - m;
    DenseTerm term(tmpl, views.refs, views.srcs, sampler, level, opt.threads);
    double rho_cut = 2.0 * tau;
    ConsistencyMask mask(P, 1);
    LevelTrace trace;
    trace.level = level;

    for (int inner = 0; inner < 64; ++inner) {
      JointSystem sys(current, matches, &term, &mask, weights, opt.threads);
      const LmOutcome lm = lm_minimize(sys, opt);
      rep.iterations += lm.iterations;
      rep.status = lm.status;
      trace.energies.insert(trace.energies.end(), lm.energies.begin(),
                            lm.energies.end());
      const DeformationGraph solved = sys.graph_with(lm.params);

      // Per-point photometric residual under the fresh solve; masked points
      // score 0 per the published rejection rule.
      const int rp = term.residuals_per_point();
      std::vector<double> r(P, 0.0);
      std::vector<std::uint8_t> dead(P, 0);  // active but unevaluable
      parallel_for(0, P, opt.threads, [&](std::int64_t p) {
        if (!mask[p]) return;
        std::vector<double> row(rp);
        const int usable =
            term.eval_point(solved, static_cast<int>(p), sw[p], row.data());
        if (usable == 0) {
          dead[p] = 1;
          return;
        }
        double acc = 0;
        for (int i = 0; i < rp; ++i) acc += row[i];
        r[p] = acc / usable;
      });

      double e_max = 0.0;
      for (int p = 0; p < P; ++p) e_max = std::max(e_max, r[p]);

      if (e_max < rho_max) {
        current = solved;
        trace.rho_cuts.push_back(rho_cut);
        break;
      }
      if (m == levels) current = solved;

      // Advance the schedule until it actually cuts something; identical
      // masks would reproduce the identical solve.
      int cut = 0;
      for (;;) {
        for (int p = 0; p < P; ++p)
          if (mask[p] && (dead[p] || r[p] > rho_cut)) ++cut;
        if (cut > 0 || rho_cut <= rho_max) break;
        rho_cut = std::max(rho_max, tau * rho_cut);
      }
      trace.rho_cuts.push_back(rho_cut);
      if (cut == 0) break;  // schedule exhausted at the floor
      for (int p = 0; p < P; ++p)
        if (mask[p] && (dead[p] || r[p] > rho_cut)) mask[p] = 0;
      rep.rejected_dense += cut;
      trace.rejected.push_back(cut);
      rho_cut = std::max(rho_max, tau * rho_cut);
    }
    rep.levels.push_back(std::move(trace));
    if (m == levels) out.mask = mask;
  }

  out.graph = current;
  // Final raw term energies at the finest level.
  DenseTerm term0(tmpl, views.refs, views.srcs, sampler, 0, opt.threads);
  const EnergyBreakdown eb =
      energy(out.graph, matches, &term0, &out.mask, weights, opt.threads);
  rep.final_energy = eb.total;
  rep.e_sparse = eb.sparse;
  rep.e_dense = eb.dense;
  rep.e_reg = eb.reg;
  out.report = std::move(rep);
  return out;
}

}  // namespace nrmvs
