#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace nrmvs {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec3f = Eigen::Vector3f;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;

// Base error for everything the library can reject at runtime.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// File-level problems (missing paths, malformed formats). The CLI maps these
// to their own exit code.
struct IoError : Error {
  explicit IoError(const std::string& what) : Error(what) {}
};

// Not enough data to start a reconstruction (no usable view pair, empty
// canonical geometry).
struct BootstrapError : Error {
  explicit BootstrapError(const std::string& what) : Error(what) {}
};

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

}  // namespace nrmvs
