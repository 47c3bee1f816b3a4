#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "cotr/errors.hpp"
#include "cotr/tensor.hpp"

namespace cotr {

struct Vec2 {
  double x = 0;
  double y = 0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2 a, Vec2 b) = default;
  double norm() const { return std::hypot(x, y); }
};

/// Row-major H×W×C float image with values nominally in [0,1]. Pixel (c, r)
/// covers [c, c+1)×[r, r+1); its center is at (c+0.5, r+0.5).
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c = 3, float fill = 0.f)
      : width(w), height(h), channels(c), data(w * h * c, fill) {}

  float& at(std::size_t col, std::size_t row, std::size_t ch) { return data[(row * width + col) * channels + ch]; }
  float at(std::size_t col, std::size_t row, std::size_t ch) const {
    return data[(row * width + col) * channels + ch];
  }
  std::size_t long_edge() const { return std::max(width, height); }
  bool empty() const { return data.empty(); }
  friend bool operator==(const Image&, const Image&) = default;
};

/// Projective transform of the plane, row-major 3×3.
struct Homography {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Homography identity() { return {}; }
  static Homography translation(double tx, double ty) { return {{1, 0, tx, 0, 1, ty, 0, 0, 1}}; }

  Vec2 apply(Vec2 p) const {
    const double x = m[0] * p.x + m[1] * p.y + m[2];
    const double y = m[3] * p.x + m[4] * p.y + m[5];
    const double w = m[6] * p.x + m[7] * p.y + m[8];
    return {x / w, y / w};
  }
  double denominator(Vec2 p) const { return m[6] * p.x + m[7] * p.y + m[8]; }

  double determinant() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }

  Homography inverse() const {
    const double d = determinant();
    if (std::abs(d) < 1e-12) throw DomainError("homography is singular");
    Homography r;
    r.m = {(m[4] * m[8] - m[5] * m[7]) / d, (m[2] * m[7] - m[1] * m[8]) / d, (m[1] * m[5] - m[2] * m[4]) / d,
           (m[5] * m[6] - m[3] * m[8]) / d, (m[0] * m[8] - m[2] * m[6]) / d, (m[2] * m[3] - m[0] * m[5]) / d,
           (m[3] * m[7] - m[4] * m[6]) / d, (m[1] * m[6] - m[0] * m[7]) / d, (m[0] * m[4] - m[1] * m[3]) / d};
    return r;
  }

  /// (*this) ∘ other: apply `other` first.
  Homography compose(const Homography& o) const {
    Homography r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += m[3 * i + k] * o.m[3 * k + j];
        r.m[3 * i + j] = s;
      }
    return r;
  }

  /// Square root of |det J| at p: the local isotropic scale of the mapping.
  double local_scale(Vec2 p) const {
    const double w = denominator(p);
    const Vec2 q = apply(p);
    const double j00 = (m[0] - m[6] * q.x) / w, j01 = (m[1] - m[7] * q.x) / w;
    const double j10 = (m[3] - m[6] * q.y) / w, j11 = (m[4] - m[7] * q.y) / w;
    return std::sqrt(std::abs(j00 * j11 - j01 * j10));
  }
};

/// Square window of an image in pixel units: pixel = origin + side·(u, v).
struct CropWindow {
  double origin_x = 0;
  double origin_y = 0;
  double side = 1;
  std::size_t image_w = 1;
  std::size_t image_h = 1;

  Vec2 to_pixel(Vec2 uv) const { return {origin_x + side * uv.x, origin_y + side * uv.y}; }
  Vec2 to_normalized(Vec2 px) const { return {(px.x - origin_x) / side, (px.y - origin_y) / side}; }

  /// Window of `side` pixels centered on `center`, shifted to stay inside
  /// the image along each axis where the image is large enough; the part
  /// that still falls outside is zero padded when sampled.
  static CropWindow centered(Vec2 center, double side, std::size_t w, std::size_t h) {
    if (!(side > 0)) throw std::invalid_argument("crop side must be positive");
    auto place = [side](double c, double extent) {
      if (side >= extent) return (extent - side) / 2.0;
      return std::clamp(c - side / 2.0, 0.0, extent - side);
    };
    return {place(center.x, double(w)), place(center.y, double(h)), side, w, h};
  }
};

/// Axis-aligned affine view of an image: pixel = origin + (u·sx, v·sy).
/// A full-image view stretches a non-square image onto the unit square.
struct View {
  const Image* image = nullptr;
  double origin_x = 0;
  double origin_y = 0;
  double scale_x = 1;
  double scale_y = 1;

  static View full(const Image& img) { return {&img, 0, 0, double(img.width), double(img.height)}; }
  static View crop(const Image& img, const CropWindow& w) { return {&img, w.origin_x, w.origin_y, w.side, w.side}; }

  Vec2 to_pixel(Vec2 uv) const { return {origin_x + scale_x * uv.x, origin_y + scale_y * uv.y}; }
  Vec2 to_normalized(Vec2 px) const { return {(px.x - origin_x) / scale_x, (px.y - origin_y) / scale_y}; }
};

/// Bilinear sample at continuous pixel position (x, y); clamp-to-edge inside
/// the image rectangle, zero outside it.
inline float sample_bilinear(const Image& img, double x, double y, std::size_t ch) {
  if (x < 0 || y < 0 || x > double(img.width) || y > double(img.height)) return 0.f;
  const double fx = std::clamp(x - 0.5, 0.0, double(img.width - 1));
  const double fy = std::clamp(y - 0.5, 0.0, double(img.height - 1));
  const std::size_t x0 = std::size_t(fx), y0 = std::size_t(fy);
  const std::size_t x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  const double ax = fx - double(x0), ay = fy - double(y0);
  const double top = (1 - ax) * img.at(x0, y0, ch) + ax * img.at(x1, y0, ch);
  const double bot = (1 - ax) * img.at(x0, y1, ch) + ax * img.at(x1, y1, ch);
  return float((1 - ay) * top + ay * bot);
}

/// All three channels of sample_bilinear at once (grayscale replicated).
inline void sample_bilinear_rgb(const Image& img, double x, double y, double out[3]) {
  if (x < 0 || y < 0 || x > double(img.width) || y > double(img.height)) {
    out[0] = out[1] = out[2] = 0;
    return;
  }
  const double fx = std::clamp(x - 0.5, 0.0, double(img.width - 1));
  const double fy = std::clamp(y - 0.5, 0.0, double(img.height - 1));
  const std::size_t x0 = std::size_t(fx), y0 = std::size_t(fy);
  const std::size_t x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  const double ax = fx - double(x0), ay = fy - double(y0);
  const std::size_t n = img.channels;
  const float* p00 = img.data.data() + (y0 * img.width + x0) * n;
  const float* p10 = img.data.data() + (y0 * img.width + x1) * n;
  const float* p01 = img.data.data() + (y1 * img.width + x0) * n;
  const float* p11 = img.data.data() + (y1 * img.width + x1) * n;
  if (ax == 0 && ay == 0) {
    // Pixel centre: the weights reduce to picking p00 exactly.
    for (std::size_t ch = 0; ch < 3; ++ch) out[ch] = p00[n == 1 ? 0 : ch];
    return;
  }
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const std::size_t k = n == 1 ? 0 : ch;
    const double top = (1 - ax) * p00[k] + ax * p10[k];
    const double bot = (1 - ax) * p01[k] + ax * p11[k];
    out[ch] = double(float((1 - ay) * top + ay * bot));
  }
}

/// Resamples a view into a size×size×3 image (grayscale replicated),
/// supersampling when the view is minified.
inline Image render_view(const View& view, std::size_t size) {
  const Image& src = *view.image;
  Image out(size, size, 3);
  const double step_x = view.scale_x / double(size), step_y = view.scale_y / double(size);
  const int nx = std::max(1, int(std::ceil(step_x - 1e-9)));
  const int ny = std::max(1, int(std::ceil(step_y - 1e-9)));
  const double inv = 1.0 / double(nx * ny);
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      double acc[3] = {0, 0, 0};
      for (int sy = 0; sy < ny; ++sy) {
        for (int sx = 0; sx < nx; ++sx) {
          const double u = (double(c) + (sx + 0.5) / nx) / double(size);
          const double v = (double(r) + (sy + 0.5) / ny) / double(size);
          const Vec2 p = view.to_pixel({u, v});
          double px[3];
          sample_bilinear_rgb(src, p.x, p.y, px);
          for (std::size_t ch = 0; ch < 3; ++ch) acc[ch] += px[ch];
        }
      }
      for (std::size_t ch = 0; ch < 3; ++ch) out.at(c, r, ch) = float(acc[ch] * inv);
    }
  }
  return out;
}

/// Stretches a whole image to w×h, supersampling when minifying.
inline Image resize(const Image& img, std::size_t w, std::size_t h) {
  Image out(w, h, img.channels);
  const double sx = double(img.width) / double(w), sy = double(img.height) / double(h);
  const int nx = std::max(1, int(std::ceil(sx - 1e-9))), ny = std::max(1, int(std::ceil(sy - 1e-9)));
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t ch = 0; ch < img.channels; ++ch) {
        double acc = 0;
        for (int a = 0; a < ny; ++a)
          for (int b = 0; b < nx; ++b)
            acc += sample_bilinear(img, (double(c) + (b + 0.5) / nx) * sx, (double(r) + (a + 0.5) / ny) * sy, ch);
        out.at(c, r, ch) = float(acc / (nx * ny));
      }
  return out;
}

template <class T>
Tensor<T> image_tensor(const Image& img) {
  if (img.channels != 3) throw ShapeError("model input must have 3 channels");
  std::vector<T> v(img.data.begin(), img.data.end());
  return Tensor<T>({img.height, img.width, 3}, std::move(v));
}

}  // namespace cotr
