#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "nrmvs/core.hpp"

namespace nrmvs {

// Single-channel float image, row-major, intensities nominally in [0, 1].
// Pixel (x, y) = column x, row y.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, float fill = 0.f)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

  float& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  float at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }

  bool empty() const { return width == 0 || height == 0; }

  // Valid domain for bilinear interpolation.
  bool in_bilinear_domain(double x, double y) const {
    return x >= 0.0 && y >= 0.0 && x <= width - 1.0 && y <= height - 1.0;
  }

  float sample(double x, double y) const {
    int x0 = static_cast<int>(std::floor(x));
    int y0 = static_cast<int>(std::floor(y));
    if (x0 > width - 2) x0 = width - 2;
    if (y0 > height - 2) y0 = height - 2;
    if (x0 < 0) x0 = 0;
    if (y0 < 0) y0 = 0;
    const double fx = x - x0;
    const double fy = y - y0;
    const double v00 = at(x0, y0);
    const double v10 = at(x0 + 1, y0);
    const double v01 = at(x0, y0 + 1);
    const double v11 = at(x0 + 1, y0 + 1);
    return static_cast<float>((1 - fy) * ((1 - fx) * v00 + fx * v10) +
                              fy * ((1 - fx) * v01 + fx * v11));
  }
};

namespace detail {

// 5-tap kernel for sigma = 1, normalized.
struct Gauss5 {
  float k[5];
  Gauss5() {
    double s = 0;
    for (int i = -2; i <= 2; ++i) s += std::exp(-0.5 * i * i);
    for (int i = -2; i <= 2; ++i)
      k[i + 2] = static_cast<float>(std::exp(-0.5 * i * i) / s);
  }
};

inline const float* gauss5() {
  static const Gauss5 g;
  return g.k;
}

inline int clampi(int v, int lo, int hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

}  // namespace detail

// 5x5 Gaussian (sigma 1, border clamp) followed by 2x decimation at even
// pixels, so level-l pixel (x, y) sits at full-resolution (2^l x, 2^l y).
inline Image downsample2(const Image& src) {
  const float* k = detail::gauss5();
  Image tmp(src.width, src.height);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) {
      double acc = 0;
      for (int i = -2; i <= 2; ++i)
        acc += k[i + 2] * src.at(detail::clampi(x + i, 0, src.width - 1), y);
      tmp.at(x, y) = static_cast<float>(acc);
    }
  Image blur(src.width, src.height);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) {
      double acc = 0;
      for (int i = -2; i <= 2; ++i)
        acc += k[i + 2] * tmp.at(x, detail::clampi(y + i, 0, src.height - 1));
      blur.at(x, y) = static_cast<float>(acc);
    }
  Image out(src.width / 2, src.height / 2);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) out.at(x, y) = blur.at(2 * x, 2 * y);
  return out;
}

inline std::vector<Image> build_pyramid(const Image& base, int levels) {
  if (levels < 1) throw Error("pyramid needs at least one level");
  std::vector<Image> pyr;
  pyr.reserve(levels);
  pyr.push_back(base);
  for (int l = 1; l < levels; ++l) {
    if (pyr.back().width < 2 || pyr.back().height < 2)
      throw Error("image too small for requested pyramid levels");
    pyr.push_back(downsample2(pyr.back()));
  }
  return pyr;
}

}  // namespace nrmvs
