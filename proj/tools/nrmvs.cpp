#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nrmvs/io.hpp"
#include "nrmvs/parallel.hpp"
#include "nrmvs/pipeline.hpp"
#include "nrmvs/synthetic.hpp"

namespace fs = std::filesystem;
using nrmvs::json;

namespace {

std::string numbered(const char* stem, int index, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03d.%s", stem, index, ext);
  return buf;
}

int cmd_synth(const nrmvs::SyntheticConfig& scfg, const fs::path& out,
              double noise_px, double outlier_fraction, std::uint64_t match_seed) {
  fs::create_directories(out);
  nrmvs::SyntheticScene scene = nrmvs::make_scene(scfg);

  std::vector<nrmvs::CameraRecord> cams;
  for (int f = 0; f < scfg.frames; ++f) {
    const std::string name = numbered("image", f, "png");
    nrmvs::write_png_gray(out / name, scene.views[f].image);
    nrmvs::write_pfm(out / numbered("gt_depth", f, "pfm"), scene.gt_depth[f]);
    nrmvs::save_graph(out / numbered("gt_graph", f, "json"),
                      nrmvs::gt_graph(scene, f));
    nrmvs::CameraRecord rec;
    rec.K = scene.views[f].K;
    rec.R = scene.views[f].R;
    rec.t = scene.views[f].t;
    rec.image_path = name;
    cams.push_back(std::move(rec));
  }
  nrmvs::save_cameras(out / "cameras.json", cams);
  nrmvs::save_matches(out / "matches.json",
                      nrmvs::make_matches(scene, noise_px, outlier_fraction,
                                          match_seed));
  return 0;
}

nrmvs::Image depth_image(const nrmvs::DepthNormalMap& m) {
  nrmvs::Image im(m.width, m.height, 0.f);
  for (std::size_t i = 0; i < m.depth.size(); ++i)
    if (m.valid[i]) im.data[i] = m.depth[i];
  return im;
}

json eval_to_json(const nrmvs::EvalResult& e) {
  json j;
  j["mre_percent"] = e.mre;
  j["completeness_percent"] = e.completeness;
  if (std::isfinite(e.mre_unfiltered))
    j["mre_unfiltered_percent"] = e.mre_unfiltered;
  return j;
}

int cmd_reconstruct(const fs::path& input, const fs::path& out,
                    const nrmvs::PipelineConfig& cfg) {
  const fs::path cam_path = input / "cameras.json";
  if (!fs::exists(cam_path))
    throw nrmvs::IoError("missing camera file: " + cam_path.string());
  const std::vector<nrmvs::CameraRecord> cams = nrmvs::load_cameras(cam_path);
  if (cams.empty()) throw nrmvs::IoError("no cameras in " + cam_path.string());

  std::vector<nrmvs::CameraView> views;
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const fs::path img = input / cams[i].image_path;
    views.push_back(nrmvs::make_view(cams[i].K, cams[i].R, cams[i].t,
                                     nrmvs::read_png_gray(img),
                                     cfg.pyramid_levels, cams[i].image_path));
  }

  const std::vector<nrmvs::FeatureTrack> tracks =
      nrmvs::ingest_tracks(nrmvs::load_matches(input / "matches.json"));

  nrmvs::PipelineResult res = nrmvs::run(views, tracks, cfg);

  fs::create_directories(out);
  json report;
  report["canonical"] = json::array({res.canonical_i, res.canonical_j});
  report["config"] = nrmvs::config_to_json(cfg);
  json jviews = json::array();
  for (int v = 0; v < static_cast<int>(views.size()); ++v) {
    const nrmvs::ViewRecord& rec = res.views[v];
    json jv;
    jv["index"] = v;
    jv["processed"] = rec.processed;
    jv["canonical"] = rec.canonical;
    if (!rec.note.empty()) jv["note"] = rec.note;
    if (rec.processed) {
      nrmvs::write_pfm(out / numbered("depth", v, "pfm"), depth_image(rec.map));
      nrmvs::write_ply(out / numbered("points", v, "ply"), res.view_clouds[v]);
      nrmvs::write_ply(out / numbered("propagated", v, "ply"), res.propagated[v]);
      nrmvs::save_graph(out / numbered("graph", v, "json"), rec.deformation);
      jv["matches_in"] = rec.matches_in;
      jv["matches_kept"] = rec.matches_kept;
      if (!rec.canonical) {
        json solver;
        solver["iterations"] = rec.report.iterations;
        solver["final_energy"] = rec.report.final_energy;
        solver["e_sparse"] = rec.report.e_sparse;
        solver["e_dense"] = rec.report.e_dense;
        solver["e_reg"] = rec.report.e_reg;
        solver["rejected_sparse"] = rec.report.rejected_sparse;
        solver["rejected_dense"] = rec.report.rejected_dense;
        solver["status"] = rec.report.status;
        jv["solver"] = std::move(solver);
      }
      // Ground truth travels with synthetic inputs; report accuracy when found.
      const fs::path gt = input / numbered("gt_depth", v, "pfm");
      if (fs::exists(gt)) {
        const nrmvs::Image truth = nrmvs::read_pfm(gt);
        nrmvs::EvalResult e = nrmvs::evaluate_depth(rec.map, truth);
        e.mre_unfiltered = nrmvs::evaluate_depth(rec.raw_map, truth).mre;
        jv["eval"] = eval_to_json(e);
      }
    }
    jviews.push_back(std::move(jv));
  }
  report["views"] = std::move(jviews);
  nrmvs::write_ply(out / "canonical.ply", res.canonical_cloud);
  nrmvs::write_json(out / "report.json", report);
  return 0;
}

int cmd_interpolate(const fs::path& recon, int view_a, int view_b, int steps,
                    const fs::path& out) {
  const nrmvs::PointCloud canonical = nrmvs::read_ply(recon / "canonical.ply");
  const nrmvs::DeformationGraph ga =
      nrmvs::load_graph(recon / numbered("graph", view_a, "json"));
  const nrmvs::DeformationGraph gb =
      nrmvs::load_graph(recon / numbered("graph", view_b, "json"));
  fs::create_directories(out);
  for (int s = 0; s < steps; ++s) {
    const double alpha = static_cast<double>(s) / (steps - 1);
    const nrmvs::DeformationGraph g = nrmvs::interpolate(ga, gb, alpha);
    nrmvs::write_ply(out / numbered("interp", s, "ply"),
                     nrmvs::propagate_cloud(canonical, g));
  }
  return 0;
}

int cmd_evaluate(const fs::path& estimate, const fs::path& truth,
                 const fs::path& unfiltered, const fs::path& report_path) {
  const nrmvs::Image est = nrmvs::read_pfm(estimate);
  const nrmvs::Image gt = nrmvs::read_pfm(truth);
  nrmvs::DepthNormalMap map(est.width, est.height);
  for (std::size_t i = 0; i < est.data.size(); ++i) {
    map.depth[i] = est.data[i];
    map.valid[i] = est.data[i] > 0.f ? 1 : 0;
  }
  nrmvs::EvalResult e = nrmvs::evaluate_depth(map, gt);
  if (!unfiltered.empty()) {
    const nrmvs::Image raw = nrmvs::read_pfm(unfiltered);
    nrmvs::DepthNormalMap rmap(raw.width, raw.height);
    for (std::size_t i = 0; i < raw.data.size(); ++i) {
      rmap.depth[i] = raw.data[i];
      rmap.valid[i] = raw.data[i] > 0.f ? 1 : 0;
    }
    e.mre_unfiltered = nrmvs::evaluate_depth(rmap, gt).mre;
  }
  std::printf("mre_percent %.6f\ncompleteness_percent %.6f\n", e.mre,
              e.completeness);
  if (std::isfinite(e.mre_unfiltered))
    std::printf("mre_unfiltered_percent %.6f\n", e.mre_unfiltered);
  if (!report_path.empty()) nrmvs::write_json(report_path, eval_to_json(e));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"non-rigid multi-view stereo"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "render a synthetic deforming scene");
  nrmvs::SyntheticConfig scfg;
  std::string synth_out;
  double noise_px = 0.0, outlier_fraction = 0.0;
  std::uint64_t match_seed = 1;
  bool static_scene = false;
  int synth_threads = 0;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--seed", scfg.seed, "scene seed");
  synth->add_option("--frames", scfg.frames, "number of views")
      ->check(CLI::Range(2, 16));
  synth->add_option("--width", scfg.width)->check(CLI::Range(32, 320));
  synth->add_option("--height", scfg.height)->check(CLI::Range(32, 240));
  synth->add_option("--pyramid-levels", scfg.pyramid_levels);
  synth->add_option("--noise-px", noise_px, "landmark pixel noise sigma");
  synth->add_option("--outlier-fraction", outlier_fraction,
                    "fraction of corrupted landmark observations");
  synth->add_option("--match-seed", match_seed, "seed for noise/outliers");
  synth->add_flag("--static", static_scene, "freeze all frames at frame 0");
  synth->add_option("--threads", synth_threads, "0 = auto");

  // reconstruct
  auto* rec = app.add_subcommand("reconstruct", "run the full pipeline");
  std::string rec_input, rec_out, config_path;
  nrmvs::PipelineConfig cfg;
  int rec_threads = 0;
  rec->add_option("--input", rec_input, "directory with cameras.json, images, matches.json")
      ->required();
  rec->add_option("--out", rec_out, "output directory")->required();
  rec->add_option("--config", config_path, "JSON config; flags override it");
  auto* o_ws = rec->add_option("--w-sparse", cfg.weights.w_sparse);
  auto* o_wd = rec->add_option("--w-dense", cfg.weights.w_dense);
  auto* o_wr = rec->add_option("--w-reg", cfg.weights.w_reg);
  auto* o_dm = rec->add_option("--d-max", cfg.d_max);
  auto* o_rm = rec->add_option("--rho-max", cfg.rho_max);
  auto* o_tau = rec->add_option("--tau", cfg.tau);
  auto* o_k = rec->add_option("--k", cfg.k);
  auto* o_nn = rec->add_option("--num-nodes", cfg.num_nodes);
  auto* o_pl = rec->add_option("--pyramid-levels", cfg.pyramid_levels);
  auto* o_ai = rec->add_option("--assoc-iters", cfg.assoc_iters);
  auto* o_pm = rec->add_option("--pm-iterations", cfg.pm_iterations);
  auto* o_mc = rec->add_option("--min-consistent-views", cfg.min_consistent_views);
  auto* o_sd = rec->add_option("--seed", cfg.seed);
  rec->add_option("--threads", rec_threads, "0 = auto");
  rec->add_flag("--verbose", cfg.verbose);

  // interpolate
  auto* interp = app.add_subcommand("interpolate",
                                    "blend deformation states between two views");
  std::string interp_recon, interp_out;
  int view_a = 0, view_b = 0, steps = 2;
  interp->add_option("--recon", interp_recon, "reconstruction output directory")
      ->required();
  interp->add_option("--view-a", view_a)->required();
  interp->add_option("--view-b", view_b)->required();
  interp->add_option("--steps", steps)->check(CLI::Range(2, 1000));
  interp->add_option("--out", interp_out, "output directory")->required();

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "compare depth maps");
  std::string eval_est, eval_truth, eval_unfiltered, eval_report;
  eval->add_option("--estimate", eval_est, "estimated depth PFM")->required();
  eval->add_option("--truth", eval_truth, "ground-truth depth PFM")->required();
  eval->add_option("--unfiltered", eval_unfiltered,
                   "filter-disabled depth PFM for mre_unfiltered");
  eval->add_option("--report", eval_report, "write metrics JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (synth->parsed()) {
      scfg.moving = !static_scene;
      scfg.threads = nrmvs::resolve_threads(synth_threads);
      return cmd_synth(scfg, synth_out, noise_px, outlier_fraction, match_seed);
    }
    if (rec->parsed()) {
      // File first, then flags on top; CLI11 already stored flag values, so
      // re-apply the file only for keys the user did not pass.
      if (!config_path.empty()) {
        nrmvs::PipelineConfig file_cfg;
        nrmvs::apply_config_json(nrmvs::parse_json(config_path), file_cfg);
        if (!*o_ws) cfg.weights.w_sparse = file_cfg.weights.w_sparse;
        if (!*o_wd) cfg.weights.w_dense = file_cfg.weights.w_dense;
        if (!*o_wr) cfg.weights.w_reg = file_cfg.weights.w_reg;
        if (!*o_dm) cfg.d_max = file_cfg.d_max;
        if (!*o_rm) cfg.rho_max = file_cfg.rho_max;
        if (!*o_tau) cfg.tau = file_cfg.tau;
        if (!*o_k) cfg.k = file_cfg.k;
        if (!*o_nn) cfg.num_nodes = file_cfg.num_nodes;
        if (!*o_pl) cfg.pyramid_levels = file_cfg.pyramid_levels;
        if (!*o_ai) cfg.assoc_iters = file_cfg.assoc_iters;
        if (!*o_pm) cfg.pm_iterations = file_cfg.pm_iterations;
        if (!*o_mc) cfg.min_consistent_views = file_cfg.min_consistent_views;
        if (!*o_sd) cfg.seed = file_cfg.seed;
      }
      cfg.threads = nrmvs::resolve_threads(rec_threads);
      return cmd_reconstruct(rec_input, rec_out, cfg);
    }
    if (interp->parsed())
      return cmd_interpolate(interp_recon, view_a, view_b, steps, interp_out);
    if (eval->parsed())
      return cmd_evaluate(eval_est, eval_truth, eval_unfiltered, eval_report);
  } catch (const nrmvs::BootstrapError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const nrmvs::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
