#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "nrmvs/core.hpp"
#include "nrmvs/image.hpp"

namespace nrmvs {

// Calibrated pinhole view. Extrinsics map world to camera: x_cam = R x + t.
struct CameraView {
  Mat3 K = Mat3::Identity();
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();
  Image image;
  std::vector<Image> pyramid;  // [0] is full resolution
  std::string name;

  Vec3 center() const { return -R.transpose() * t; }

  const Image& level_image(int level) const { return pyramid[level]; }
};

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit length
};

inline void validate_view(const CameraView& v) {
  if (v.K(0, 0) <= 0 || v.K(1, 1) <= 0) throw Error("focal length must be positive");
  if (v.K(2, 0) != 0 || v.K(2, 1) != 0 || v.K(2, 2) != 1)
    throw Error("intrinsics last row must be [0 0 1]");
  const double ortho = (v.R * v.R.transpose() - Mat3::Identity()).norm();
  if (ortho > 1e-9 || std::abs(v.R.determinant() - 1.0) > 1e-9)
    throw Error("rotation must be orthonormal with determinant +1");
}

inline CameraView make_view(const Mat3& K, const Mat3& R, const Vec3& t,
                            Image image, int pyramid_levels = 1,
                            std::string name = {}) {
  CameraView v;
  v.K = K;
  v.R = R;
  v.t = t;
  v.image = std::move(image);
  v.name = std::move(name);
  validate_view(v);
  if (!v.image.empty()) v.pyramid = build_pyramid(v.image, pyramid_levels);
  return v;
}

// Intrinsics of pyramid level l: full-resolution pixel u maps to u / 2^l.
inline Mat3 level_intrinsics(const Mat3& K, int level) {
  const double s = 1.0 / static_cast<double>(1 << level);
  Mat3 Kl = K;
  Kl.row(0) *= s;
  Kl.row(1) *= s;
  return Kl;
}

// Non-throwing projection; returns false when the point is not strictly in
// front of the camera. Hot paths use this directly.
inline bool try_project(const CameraView& view, const Vec3& x, int level,
                        Vec2& uv) {
  const Vec3 xc = view.R * x + view.t;
  if (xc.z() <= 0.0) return false;
  const Mat3 Kl = level_intrinsics(view.K, level);
  const double iz = 1.0 / xc.z();
  uv.x() = Kl(0, 0) * xc.x() * iz + Kl(0, 1) * xc.y() * iz + Kl(0, 2);
  uv.y() = Kl(1, 1) * xc.y() * iz + Kl(1, 2);
  return true;
}

inline Vec2 project(const CameraView& view, const Vec3& x, int level = 0) {
  Vec2 uv;
  if (!try_project(view, x, level, uv)) throw Error("point behind camera");
  return uv;
}

// Depth here and everywhere else is camera-frame z, not ray length.
inline Vec3 unproject(const CameraView& view, const Vec2& uv, double depth,
                      int level = 0) {
  const Mat3 Kl = level_intrinsics(view.K, level);
  Vec3 d = Kl.inverse() * Vec3(uv.x(), uv.y(), 1.0);
  d *= depth / d.z();
  return view.R.transpose() * (d - view.t);
}

inline double camera_depth(const CameraView& view, const Vec3& x) {
  return (view.R * x + view.t).z();
}

inline Ray keypoint_ray(const CameraView& view, const Vec2& uv) {
  if (!view.image.empty() && !view.image.in_bilinear_domain(uv.x(), uv.y()))
    throw Error("keypoint outside image");
  const Vec3 d_cam = view.K.inverse() * Vec3(uv.x(), uv.y(), 1.0);
  Ray r;
  r.origin = view.center();
  r.dir = (view.R.transpose() * d_cam).normalized();
  return r;
}

// Closest point on the ray (parameter clamped to s >= 0).
inline Vec3 project_to_ray(const Vec3& x, const Ray& ray) {
  const double s = std::max(0.0, (x - ray.origin).dot(ray.dir));
  return ray.origin + s * ray.dir;
}

struct Triangulation {
  Vec3 point;
  double max_reprojection_error;  // pixels, max over views
};

// Linear DLT followed by one Gauss-Newton step on the reprojection error.
inline Triangulation triangulate(const std::vector<const CameraView*>& views,
                                 const std::vector<Vec2>& pixels,
                                 int level = 0) {
  const std::size_t n = views.size();
  if (n < 2 || pixels.size() != n) throw Error("triangulate needs at least two views");

  // All ray directions pairwise parallel means no baseline to intersect.
  std::vector<Vec3> dirs(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Mat3 Kl = level_intrinsics(views[i]->K, level);
    dirs[i] = (views[i]->R.transpose() * (Kl.inverse() * Vec3(pixels[i].x(), pixels[i].y(), 1.0)))
                  .normalized();
  }
  double max_angle = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      max_angle = std::max(max_angle, dirs[i].cross(dirs[j]).norm());
  if (max_angle < 1e-8) throw Error("degenerate triangulation: parallel rays");

  Eigen::MatrixXd A(2 * n, 4);
  for (std::size_t i = 0; i < n; ++i) {
    const Mat3 Kl = level_intrinsics(views[i]->K, level);
    Eigen::Matrix<double, 3, 4> P;
    P.leftCols<3>() = Kl * views[i]->R;
    P.col(3) = Kl * views[i]->t;
    A.row(2 * i) = pixels[i].x() * P.row(2) - P.row(0);
    A.row(2 * i + 1) = pixels[i].y() * P.row(2) - P.row(1);
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::Vector4d h = svd.matrixV().col(3);
  if (std::abs(h(3)) < 1e-14) throw Error("degenerate triangulation: point at infinity");
  Vec3 x = h.head<3>() / h(3);

  // One Gauss-Newton step on sum of squared pixel residuals.
  Mat3 H = Mat3::Zero();
  Vec3 g = Vec3::Zero();
  bool ok = true;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 xc = views[i]->R * x + views[i]->t;
    if (xc.z() <= 0.0) {
      ok = false;
      break;
    }
    const Mat3 Kl = level_intrinsics(views[i]->K, level);
    const double iz = 1.0 / xc.z();
    const Vec2 uv(Kl(0, 0) * xc.x() * iz + Kl(0, 1) * xc.y() * iz + Kl(0, 2),
                  Kl(1, 1) * xc.y() * iz + Kl(1, 2));
    const Vec2 r = uv - pixels[i];
    Eigen::Matrix<double, 2, 3> duv_dxc;
    duv_dxc << Kl(0, 0) * iz, Kl(0, 1) * iz,
        -(Kl(0, 0) * xc.x() + Kl(0, 1) * xc.y()) * iz * iz, 0.0, Kl(1, 1) * iz,
        -Kl(1, 1) * xc.y() * iz * iz;
    const Eigen::Matrix<double, 2, 3> J = duv_dxc * views[i]->R;
    H += J.transpose() * J;
    g += J.transpose() * r;
  }
  if (ok) {
    Eigen::LDLT<Mat3> ldlt(H);
    if (ldlt.info() == Eigen::Success) {
      const Vec3 refined = x - ldlt.solve(g);
      // Keep the refinement only if it did not push the point behind a camera.
      bool front = true;
      for (std::size_t i = 0; i < n; ++i)
        if ((views[i]->R * refined + views[i]->t).z() <= 0.0) front = false;
      if (front) x = refined;
    }
  }

  Triangulation out;
  out.point = x;
  out.max_reprojection_error = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Vec2 uv;
    if (!try_project(*views[i], x, level, uv)) throw Error("point behind camera");
    out.max_reprojection_error =
        std::max(out.max_reprojection_error, (uv - pixels[i]).norm());
  }
  return out;
}

}  // namespace nrmvs
