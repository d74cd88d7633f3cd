#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dctir/dct_core.hpp"
#include "dctir/error.hpp"

namespace dctir {

/// H x W x 3 interleaved RGB samples, nominally in [0, 255].
struct ImageTensor {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  static constexpr int kChannels = 3;

  ImageTensor() = default;
  ImageTensor(int h, int w, double fill = 0.0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w * kChannels, fill) {}

  double& at(int r, int c, int ch) { return data[(static_cast<std::size_t>(r) * width + c) * kChannels + ch]; }
  double at(int r, int c, int ch) const { return data[(static_cast<std::size_t>(r) * width + c) * kChannels + ch]; }
  double clamped(int r, int c, int ch) const {
    return at(std::clamp(r, 0, height - 1), std::clamp(c, 0, width - 1), ch);
  }
  bool empty() const { return height == 0 || width == 0; }
  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

/// Center-aligned bilinear resize. Same-size input is returned unchanged.
inline ImageTensor resize_bilinear(const ImageTensor& img, int out_h, int out_w) {
  require(!img.empty() && out_h > 0 && out_w > 0, ErrorCode::InvalidDimensions, "resize of empty image");
  if (out_h == img.height && out_w == img.width) return img;
  ImageTensor out(out_h, out_w);
  const double sy = static_cast<double>(img.height) / out_h;
  const double sx = static_cast<double>(img.width) / out_w;
  for (int r = 0; r < out_h; ++r) {
    const double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int c = 0; c < out_w; ++c) {
      const double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < ImageTensor::kChannels; ++ch) {
        const double top = img.at(y0, x0, ch) * (1 - wx) + img.at(y0, x1, ch) * wx;
        const double bot = img.at(y1, x0, ch) * (1 - wx) + img.at(y1, x1, ch) * wx;
        out.at(r, c, ch) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

/// Crops rows [y0, y1) and columns [x0, x1), clipped to the image.
inline ImageTensor crop(const ImageTensor& img, int x0, int y0, int x1, int y1) {
  x0 = std::clamp(x0, 0, img.width);
  x1 = std::clamp(x1, 0, img.width);
  y0 = std::clamp(y0, 0, img.height);
  y1 = std::clamp(y1, 0, img.height);
  require(x1 > x0 && y1 > y0, ErrorCode::InvalidDimensions, "empty crop");
  ImageTensor out(y1 - y0, x1 - x0);
  for (int r = 0; r < out.height; ++r)
    for (int c = 0; c < out.width; ++c)
      for (int ch = 0; ch < ImageTensor::kChannels; ++ch) out.at(r, c, ch) = img.at(y0 + r, x0 + c, ch);
  return out;
}

inline ImageTensor flip_horizontal(const ImageTensor& img) {
  ImageTensor out(img.height, img.width);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      for (int ch = 0; ch < ImageTensor::kChannels; ++ch) out.at(r, c, ch) = img.at(r, img.width - 1 - c, ch);
  return out;
}

inline ImageTensor pad_replicate(const ImageTensor& img, int out_h, int out_w) {
  ImageTensor out(out_h, out_w);
  for (int r = 0; r < out_h; ++r)
    for (int c = 0; c < out_w; ++c)
      for (int ch = 0; ch < ImageTensor::kChannels; ++ch) out.at(r, c, ch) = img.clamped(r, c, ch);
  return out;
}

/// Rounds and clamps every sample to an 8-bit value (kept as double).
inline ImageTensor quantize_to_u8(const ImageTensor& img) {
  ImageTensor out = img;
  for (double& v : out.data) v = std::clamp(std::round(v), 0.0, 255.0);
  return out;
}

inline double psnr(const ImageTensor& a, const ImageTensor& b) {
  require(a.height == b.height && a.width == b.width, ErrorCode::ShapeMismatch, "psnr of different sizes");
  double se = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) se += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  const double mse = se / static_cast<double>(a.data.size());
  if (mse == 0.0) return INFINITY;
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

/// Splits into Y, Cb, Cr planes using the unclamped JFIF matrix.
inline std::array<Plane, 3> to_ycbcr_planes(const ImageTensor& img) {
  std::array<Plane, 3> planes{Plane(img.height, img.width), Plane(img.height, img.width),
                              Plane(img.height, img.width)};
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) {
      const Ycc v = rgb_to_ycbcr_linear(img.at(r, c, 0), img.at(r, c, 1), img.at(r, c, 2));
      planes[0](r, c) = v.y;
      planes[1](r, c) = v.cb;
      planes[2](r, c) = v.cr;
    }
  return planes;
}

inline ImageTensor from_ycbcr_planes(const Plane& y, const Plane& cb, const Plane& cr) {
  require(y.rows == cb.rows && y.rows == cr.rows && y.cols == cb.cols && y.cols == cr.cols,
          ErrorCode::ShapeMismatch, "plane sizes differ");
  ImageTensor out(y.rows, y.cols);
  for (int r = 0; r < y.rows; ++r)
    for (int c = 0; c < y.cols; ++c) {
      const Rgb v = ycbcr_to_rgb_linear(y(r, c), cb(r, c), cr(r, c));
      out.at(r, c, 0) = v.r;
      out.at(r, c, 1) = v.g;
      out.at(r, c, 2) = v.b;
    }
  return out;
}

}  // namespace dctir
