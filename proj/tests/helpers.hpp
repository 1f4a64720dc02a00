#pragma once

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "nrmvs/camera.hpp"
#include "nrmvs/defgraph.hpp"
#include "nrmvs/rigid.hpp"
#include "nrmvs/rng.hpp"

namespace testutil {

// Random deformation graph on a jittered grid patch, with transforms drawn as
// small rotations/translations. Well conditioned by construction.
inline nrmvs::DeformationGraph random_graph(nrmvs::Rng& rng, int side = 5,
                                            double spacing = 0.5,
                                            double rot_scale = 0.2,
                                            double trans_scale = 0.1,
                                            int k = 4) {
  std::vector<nrmvs::Vec3> pts;
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j)
      pts.emplace_back(i * spacing + rng.uniform(-0.1, 0.1) * spacing,
                       j * spacing + rng.uniform(-0.1, 0.1) * spacing,
                       rng.uniform(-0.05, 0.05) * spacing);
  nrmvs::DeformationGraph g =
      nrmvs::sample_nodes(pts, static_cast<int>(pts.size()), k);
  for (nrmvs::GraphNode& n : g.nodes) {
    const nrmvs::Vec3 w(rng.normal(), rng.normal(), rng.normal());
    n.R = nrmvs::so3_exp(rot_scale * w);
    n.t = trans_scale * nrmvs::Vec3(rng.normal(), rng.normal(), rng.normal());
  }
  return g;
}

// Node transforms sampled from one smooth low-strain warp: rotation from the
// local field jacobian, translation from the field itself. This is the regime
// the regularizer drives solves toward; independent per-node draws are not.
// Node displacements are rescaled to stay at or below max_disp.
inline nrmvs::DeformationGraph smooth_warp_graph(nrmvs::Rng& rng, int side = 5,
                                                 double spacing = 0.5,
                                                 double max_disp = 0.05,
                                                 int k = 4) {
  nrmvs::DeformationGraph g = random_graph(rng, side, spacing, 0.0, 0.0, k);
  nrmvs::Vec3 centroid = nrmvs::Vec3::Zero();
  for (const nrmvs::GraphNode& n : g.nodes) centroid += n.g;
  centroid /= static_cast<double>(g.nodes.size());

  nrmvs::Mat3 B;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) B(r, c) = rng.uniform(-0.03, 0.03);
  const nrmvs::Vec3 c0(rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02),
                       rng.uniform(-0.02, 0.02));
  const nrmvs::Vec3 amp(rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03),
                        rng.uniform(-0.03, 0.03));
  const nrmvs::Vec3 kappa(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5),
                          rng.uniform(-1.5, 1.5));
  const double phase = rng.uniform(0.0, 2 * M_PI);

  auto disp = [&](const nrmvs::Vec3& x) -> nrmvs::Vec3 {
    const nrmvs::Vec3 d = x - centroid;
    return c0 + B * d + amp * std::sin(kappa.dot(d) + phase);
  };
  double worst = 0;
  for (const nrmvs::GraphNode& n : g.nodes)
    worst = std::max(worst, disp(n.g).norm());
  const double lam = worst > 0 ? std::min(1.0, max_disp / worst) : 1.0;

  for (nrmvs::GraphNode& n : g.nodes) {
    const nrmvs::Vec3 d = n.g - centroid;
    nrmvs::Mat3 J = B;
    J += std::cos(kappa.dot(d) + phase) * (amp * kappa.transpose());
    J *= lam;
    const nrmvs::Mat3 M = nrmvs::Mat3::Identity() + J;
    Eigen::JacobiSVD<nrmvs::Mat3> svd(
        M, Eigen::ComputeFullU | Eigen::ComputeFullV);
    n.R = svd.matrixU() * svd.matrixV().transpose();
    n.t = lam * disp(n.g);
  }
  return g;
}

// A point safely inside the graph's node extent.
inline nrmvs::Vec3 random_interior_point(nrmvs::Rng& rng,
                                         const nrmvs::DeformationGraph& g) {
  nrmvs::Vec3 lo = g.nodes[0].g, hi = g.nodes[0].g;
  for (const nrmvs::GraphNode& n : g.nodes) {
    lo = lo.cwiseMin(n.g);
    hi = hi.cwiseMax(n.g);
  }
  const nrmvs::Vec3 c = 0.5 * (lo + hi), half = 0.35 * (hi - lo);
  return c + nrmvs::Vec3(rng.uniform(-1, 1) * half.x(),
                         rng.uniform(-1, 1) * half.y(),
                         rng.uniform(-1, 1) * half.z());
}

inline double graph_diameter(const nrmvs::DeformationGraph& g) {
  double d = 0;
  for (std::size_t a = 0; a < g.nodes.size(); ++a)
    for (std::size_t b = a + 1; b < g.nodes.size(); ++b)
      d = std::max(d, (g.nodes[a].g - g.nodes[b].g).norm());
  return d;
}

// RAII temp directory under the system temp root.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("nrmvs_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline std::string cli_binary() {
  const char* bin = std::getenv("NRMVS_BIN");
  return bin ? bin : "";
}

struct CliResult {
  int exit_code = -1;
  std::string out, err;
};

// Run the CLI binary with the given argument string, capturing both streams.
inline CliResult run_cli(const std::string& args, const TempDir& tmp) {
  CliResult r;
  const std::filesystem::path out = tmp.path / "cli_stdout.txt";
  const std::filesystem::path err = tmp.path / "cli_stderr.txt";
  const std::string cmd = cli_binary() + " " + args + " > " + out.string() +
                          " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  r.exit_code = status < 0 ? status : WEXITSTATUS(status);
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
  };
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

inline std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

}  // namespace testutil
