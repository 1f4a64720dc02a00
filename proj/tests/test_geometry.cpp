#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "helpers.hpp"
#include "nrmvs/camera.hpp"
#include "nrmvs/image.hpp"
#include "nrmvs/rng.hpp"

using namespace nrmvs;

namespace {

CameraView make_test_view(Rng& rng, double focal = 300) {
  Mat3 K = Mat3::Identity();
  K(0, 0) = focal;
  K(1, 1) = focal * rng.uniform(0.9, 1.1);
  K(0, 2) = 80;
  K(1, 2) = 60;
  const Vec3 w(0.2 * rng.normal(), 0.2 * rng.normal(), 0.2 * rng.normal());
  const Mat3 R = so3_exp(w);
  const Vec3 t(rng.normal(), rng.normal(), rng.uniform(4.0, 8.0));
  return make_view(K, R, t, Image{});
}

}  // namespace

TEST_CASE("level intrinsics scale the pixel rows only", "[geometry]") {
  Mat3 K = Mat3::Identity();
  K(0, 0) = 320;
  K(1, 1) = 300;
  K(0, 2) = 159.5;
  K(1, 2) = 119.5;
  for (int l = 0; l < 4; ++l) {
    const Mat3 Kl = level_intrinsics(K, l);
    const double s = std::pow(2.0, -l);
    CHECK(Kl(0, 0) == Catch::Approx(320 * s));
    CHECK(Kl(1, 1) == Catch::Approx(300 * s));
    CHECK(Kl(0, 2) == Catch::Approx(159.5 * s));
    CHECK(Kl(1, 2) == Catch::Approx(119.5 * s));
    CHECK(Kl(2, 2) == 1.0);
    CHECK(Kl(2, 0) == 0.0);
  }
}

TEST_CASE("project and unproject are mutual inverses", "[geometry]") {
  Rng rng(rng_key(11, 1));
  for (int trial = 0; trial < 200; ++trial) {
    CameraView v = make_test_view(rng);
    const Vec3 x(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    const double depth = camera_depth(v, x);
    if (depth <= 0.1) continue;
    for (int level = 0; level < 3; ++level) {
      const Vec2 uv = project(v, x, level);
      const Vec3 back = unproject(v, uv, depth, level);
      CHECK((back - x).norm() < 1e-10);
    }
  }
}

TEST_CASE("projection oracle: K(Rx+t) dehomogenized", "[geometry]") {
  Rng rng(rng_key(11, 2));
  for (int trial = 0; trial < 100; ++trial) {
    CameraView v = make_test_view(rng);
    const Vec3 x(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const Vec3 xc = v.R * x + v.t;
    if (xc.z() <= 0.1) continue;
    const Vec3 h = v.K * xc;
    const Vec2 expect(h.x() / h.z(), h.y() / h.z());
    CHECK((project(v, x) - expect).norm() < 1e-12);
  }
}

TEST_CASE("project throws behind the camera", "[geometry]") {
  Rng rng(rng_key(11, 3));
  CameraView v = make_test_view(rng);
  const Vec3 behind = v.center() - 2.0 * (v.R.transpose() * Vec3(0, 0, 1));
  CHECK_THROWS_AS(project(v, behind), Error);
  Vec2 uv;
  CHECK_FALSE(try_project(v, behind, 0, uv));
}

TEST_CASE("camera center satisfies R c + t = 0", "[geometry]") {
  Rng rng(rng_key(11, 4));
  CameraView v = make_test_view(rng);
  CHECK((v.R * v.center() + v.t).norm() < 1e-12);
}

TEST_CASE("view validation rejects malformed inputs", "[geometry]") {
  Mat3 K = Mat3::Identity();
  K(0, 0) = -5;
  CHECK_THROWS_AS(make_view(K, Mat3::Identity(), Vec3::Zero(), Image{}), Error);
  Mat3 K2 = Mat3::Identity();
  K2(0, 0) = K2(1, 1) = 100;
  Mat3 notrot = Mat3::Identity();
  notrot(0, 0) = 2;
  CHECK_THROWS_AS(make_view(K2, notrot, Vec3::Zero(), Image{}), Error);
  Mat3 mirror = Mat3::Identity();
  mirror(0, 0) = -1;  // orthonormal but det -1
  CHECK_THROWS_AS(make_view(K2, mirror, Vec3::Zero(), Image{}), Error);
}

TEST_CASE("keypoint ray passes through its pixel", "[geometry]") {
  Rng rng(rng_key(11, 5));
  for (int trial = 0; trial < 50; ++trial) {
    CameraView v = make_test_view(rng);
    const Vec2 uv(rng.uniform(0, 160), rng.uniform(0, 120));
    const Ray ray = keypoint_ray(v, uv);
    CHECK(std::abs(ray.dir.norm() - 1.0) < 1e-12);
    CHECK((ray.origin - v.center()).norm() < 1e-12);
    const Vec3 p = ray.origin + 3.7 * ray.dir;
    CHECK((project(v, p) - uv).norm() < 1e-8);
  }
}

TEST_CASE("keypoint ray rejects out-of-image pixels when an image is present",
          "[geometry]") {
  Mat3 K = Mat3::Identity();
  K(0, 0) = K(1, 1) = 50;
  K(0, 2) = 15.5;
  K(1, 2) = 15.5;
  CameraView v = make_view(K, Mat3::Identity(), Vec3(0, 0, 4), Image(32, 32));
  CHECK_THROWS_AS(keypoint_ray(v, Vec2(-1, 5)), Error);
  CHECK_THROWS_AS(keypoint_ray(v, Vec2(5, 31.5)), Error);
  CHECK_NOTHROW(keypoint_ray(v, Vec2(31.0, 0.0)));
}

TEST_CASE("project_to_ray matches a brute-force scan", "[geometry]") {
  Rng rng(rng_key(11, 6));
  for (int trial = 0; trial < 50; ++trial) {
    Ray ray;
    ray.origin = Vec3(rng.normal(), rng.normal(), rng.normal());
    ray.dir = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
    const Vec3 x = ray.origin + Vec3(rng.uniform(-3, 5) * ray.dir.x(),
                                     rng.normal(), rng.normal());
    const Vec3 p = project_to_ray(x, ray);
    // Scan s >= 0 densely; the closed form must not be beaten.
    const double d_best = (x - p).norm();
    double d_scan = std::numeric_limits<double>::infinity();
    for (double s = 0; s < 12.0; s += 1e-3)
      d_scan = std::min(d_scan, (x - (ray.origin + s * ray.dir)).norm());
    CHECK(d_scan >= d_best - 1e-9);
    // And the projection is either a stationary point or the clamped origin.
    const double s_star = (x - ray.origin).dot(ray.dir);
    if (s_star >= 0)
      CHECK(std::abs((x - p).dot(ray.dir)) < 1e-9);
    else
      CHECK((p - ray.origin).norm() < 1e-12);
  }
}

TEST_CASE("triangulation recovers exact points from clean projections",
          "[geometry]") {
  Rng rng(rng_key(11, 7));
  for (int trial = 0; trial < 100; ++trial) {
    CameraView a = make_test_view(rng);
    CameraView b = make_test_view(rng);
    CameraView c = make_test_view(rng);
    if ((a.center() - b.center()).norm() < 0.5) continue;
    const Vec3 x(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.5, 0.5));
    if (camera_depth(a, x) < 0.5 || camera_depth(b, x) < 0.5 ||
        camera_depth(c, x) < 0.5)
      continue;
    const Triangulation tri =
        triangulate({&a, &b, &c}, {project(a, x), project(b, x), project(c, x)});
    CHECK((tri.point - x).norm() < 1e-6);
    CHECK(tri.max_reprojection_error < 1e-6);
  }
}

TEST_CASE("triangulation reports reprojection error under pixel noise",
          "[geometry]") {
  Rng rng(rng_key(11, 8));
  CameraView a = make_test_view(rng);
  CameraView b = make_test_view(rng);
  const Vec3 x(0.3, -0.2, 0.1);
  REQUIRE(camera_depth(a, x) > 0.5);
  REQUIRE(camera_depth(b, x) > 0.5);
  const Vec2 ua = project(a, x) + Vec2(0.8, -0.4);
  const Vec2 ub = project(b, x) + Vec2(-0.3, 0.5);
  const Triangulation tri = triangulate({&a, &b}, {ua, ub});
  CHECK(tri.max_reprojection_error > 0.05);
  CHECK(tri.max_reprojection_error < 5.0);
}

TEST_CASE("triangulation rejects parallel rays", "[geometry]") {
  Mat3 K = Mat3::Identity();
  K(0, 0) = K(1, 1) = 200;
  K(0, 2) = 80;
  K(1, 2) = 60;
  CameraView a = make_view(K, Mat3::Identity(), Vec3::Zero(), Image{});
  // Second camera displaced along the optical axis: the ray through the
  // principal point is identical in both views.
  CameraView b = make_view(K, Mat3::Identity(), Vec3(0, 0, 1), Image{});
  CHECK_THROWS_WITH(triangulate({&a, &b}, {Vec2(80, 60), Vec2(80, 60)}),
                    Catch::Matchers::ContainsSubstring("parallel"));
}

TEST_CASE("triangulation needs two views", "[geometry]") {
  Rng rng(rng_key(11, 9));
  CameraView a = make_test_view(rng);
  CHECK_THROWS_AS(triangulate({&a}, {Vec2(10, 10)}), Error);
}

TEST_CASE("bilinear sampling is exact at pixels and linear between",
          "[geometry][image]") {
  Image im(4, 3);
  Rng rng(rng_key(11, 10));
  for (float& v : im.data) v = static_cast<float>(rng.uniform());
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 4; ++x)
      CHECK(im.sample(x, y) == Catch::Approx(im.at(x, y)).margin(1e-7));
  // Interior point oracle.
  const double fx = 0.3, fy = 0.6;
  const double expect = (1 - fy) * ((1 - fx) * im.at(1, 1) + fx * im.at(2, 1)) +
                        fy * ((1 - fx) * im.at(1, 2) + fx * im.at(2, 2));
  CHECK(im.sample(1.3, 1.6) == Catch::Approx(expect).margin(1e-6));
  CHECK(im.in_bilinear_domain(0, 0));
  CHECK(im.in_bilinear_domain(3.0, 2.0));
  CHECK_FALSE(im.in_bilinear_domain(3.0001, 1.0));
  CHECK_FALSE(im.in_bilinear_domain(-0.0001, 1.0));
}

TEST_CASE("pyramid decimation matches a direct convolution oracle",
          "[geometry][image]") {
  Rng rng(rng_key(11, 11));
  Image im(16, 12);
  for (float& v : im.data) v = static_cast<float>(rng.uniform());
  const Image down = downsample2(im);
  REQUIRE(down.width == 8);
  REQUIRE(down.height == 6);

  // Independent 5x5 separable Gaussian, sigma 1, clamped borders.
  double k[5], sum = 0;
  for (int i = -2; i <= 2; ++i) sum += std::exp(-0.5 * i * i);
  for (int i = -2; i <= 2; ++i) k[i + 2] = std::exp(-0.5 * i * i) / sum;
  auto clamp = [](int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
  for (int y = 0; y < down.height; ++y)
    for (int x = 0; x < down.width; ++x) {
      double acc = 0;
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx)
          acc += k[dx + 2] * k[dy + 2] *
                 im.at(clamp(2 * x + dx, im.width - 1),
                       clamp(2 * y + dy, im.height - 1));
      CHECK(down.at(x, y) == Catch::Approx(acc).margin(1e-5));
    }
}

TEST_CASE("pyramid keeps constants constant and rejects tiny images",
          "[geometry][image]") {
  Image flat(20, 14, 0.37f);
  const std::vector<Image> pyr = build_pyramid(flat, 3);
  REQUIRE(pyr.size() == 3);
  for (const Image& level : pyr)
    for (float v : level.data) CHECK(v == Catch::Approx(0.37f).margin(1e-6));
  CHECK_THROWS_AS(build_pyramid(Image(3, 3), 3), Error);
  CHECK_THROWS_AS(build_pyramid(flat, 0), Error);
}

TEST_CASE("pyramid level pixel sits at scaled full-resolution coordinates",
          "[geometry][image]") {
  // A horizontal ramp stays a ramp under blurring (away from borders), so
  // level-l pixel x must equal full-resolution pixel 2^l x.
  Image ramp(32, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 32; ++x) ramp.at(x, y) = static_cast<float>(x);
  const Image down = downsample2(ramp);
  for (int y = 2; y < down.height - 2; ++y)
    for (int x = 2; x < down.width - 2; ++x)
      CHECK(down.at(x, y) == Catch::Approx(2.0 * x).margin(1e-4));
}
