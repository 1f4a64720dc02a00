#pragma once

#include <Eigen/Geometry>
#include <cmath>

#include "nrmvs/core.hpp"

namespace nrmvs {

inline Mat3 so3_exp(const Vec3& w) {
  const double theta = w.norm();
  if (theta < 1e-12) return Mat3::Identity() + skew(w);
  return Eigen::AngleAxisd(theta, w / theta).toRotationMatrix();
}

inline Vec3 so3_log(const Mat3& R) {
  Eigen::AngleAxisd aa(R);
  return aa.angle() * aa.axis();
}

// Right Jacobian of SO(3): exp(w + dw) ~ exp(w) exp(Jr(w) dw).
inline Mat3 so3_right_jacobian(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const Mat3 W = skew(w);
  if (theta2 < 1e-8)
    return Mat3::Identity() - 0.5 * W + (1.0 / 6.0) * W * W;
  const double theta = std::sqrt(theta2);
  const double a = (1.0 - std::cos(theta)) / theta2;
  const double b = (theta - std::sin(theta)) / (theta2 * theta);
  return Mat3::Identity() - a * W + b * W * W;
}

// d(R(w) p) / dw for the global axis-angle parameterization.
inline Mat3 rotation_point_jacobian(const Mat3& R, const Vec3& w, const Vec3& p) {
  return -R * skew(p) * so3_right_jacobian(w);
}

// Minimal rotation taking unit vector a to unit vector b (identity twist).
inline Mat3 minimal_rotation(const Vec3& a, const Vec3& b) {
  const Vec3 axis = a.cross(b);
  const double s = axis.norm();
  const double c = a.dot(b);
  if (s < 1e-12) {
    if (c > 0.0) return Mat3::Identity();
    // Antiparallel: rotate half a turn about any axis orthogonal to a.
    Vec3 ortho = std::abs(a.x()) < 0.9 ? Vec3(1, 0, 0) : Vec3(0, 1, 0);
    ortho = (ortho - ortho.dot(a) * a).normalized();
    return Eigen::AngleAxisd(M_PI, ortho).toRotationMatrix();
  }
  return Eigen::AngleAxisd(std::atan2(s, c), axis / s).toRotationMatrix();
}

// Unit dual quaternion for blending rigid transforms x -> R x + T.
struct DualQuat {
  Eigen::Quaterniond real;
  Eigen::Quaterniond dual;
};

inline DualQuat dq_from_rigid(const Mat3& R, const Vec3& T) {
  DualQuat q;
  q.real = Eigen::Quaterniond(R).normalized();
  const Eigen::Quaterniond tq(0.0, T.x(), T.y(), T.z());
  q.dual = tq * q.real;
  q.dual.coeffs() *= 0.5;
  return q;
}

inline void dq_to_rigid(const DualQuat& q, Mat3& R, Vec3& T) {
  R = q.real.toRotationMatrix();
  Eigen::Quaterniond tq = q.dual * q.real.conjugate();
  T = 2.0 * Vec3(tq.x(), tq.y(), tq.z());
}

// Dual-quaternion linear blend of two transforms with hemisphere correction
// and renormalization. alpha = 0 gives a, alpha = 1 gives b.
inline DualQuat dq_blend(const DualQuat& a, const DualQuat& b, double alpha) {
  double sign = a.real.coeffs().dot(b.real.coeffs()) < 0.0 ? -1.0 : 1.0;
  DualQuat out;
  out.real.coeffs() = (1.0 - alpha) * a.real.coeffs() + alpha * sign * b.real.coeffs();
  out.dual.coeffs() = (1.0 - alpha) * a.dual.coeffs() + alpha * sign * b.dual.coeffs();
  const double n = out.real.norm();
  if (n < 1e-12) throw Error("dual quaternion blend collapsed");
  out.real.coeffs() /= n;
  out.dual.coeffs() /= n;
  // Re-impose the Plucker condition so the result is exactly rigid.
  out.dual.coeffs() -= out.real.coeffs().dot(out.dual.coeffs()) * out.real.coeffs();
  return out;
}

}  // namespace nrmvs
