#pragma once

// 8x8 block transform and the per-sample stages of the JPEG chain: color
// conversion, quantization, zig-zag ordering and chroma resampling. All
// arithmetic is double precision; level shifting is left to the callers.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

#include "dctir/error.hpp"

namespace dctir {

inline constexpr int kBlockSize = 8;
inline constexpr int kBlockArea = 64;

/// Level-shifted samples f(x, y), row-major with x the row.
struct PixelBlock {
  std::array<double, kBlockArea> samples{};

  double& operator()(int x, int y) { return samples[x * kBlockSize + y]; }
  double operator()(int x, int y) const { return samples[x * kBlockSize + y]; }
  friend bool operator==(const PixelBlock&, const PixelBlock&) = default;
};

/// Coefficients F(u, v); (0, 0) is DC, the other 63 are AC.
struct CoeffBlock {
  std::array<double, kBlockArea> coeffs{};

  double& operator()(int u, int v) { return coeffs[u * kBlockSize + v]; }
  double operator()(int u, int v) const { return coeffs[u * kBlockSize + v]; }
  double dc() const { return coeffs[0]; }
  friend bool operator==(const CoeffBlock&, const CoeffBlock&) = default;
};

/// Quantized coefficients in natural (u, v) order.
struct QuantizedBlock {
  std::array<std::int32_t, kBlockArea> coeffs{};

  std::int32_t& operator()(int u, int v) { return coeffs[u * kBlockSize + v]; }
  std::int32_t operator()(int u, int v) const { return coeffs[u * kBlockSize + v]; }
  friend bool operator==(const QuantizedBlock&, const QuantizedBlock&) = default;
};

/// Per-frequency divisors in natural order, 1..255.
struct QuantTable {
  std::array<std::uint16_t, kBlockArea> entries{};

  static QuantTable ones() {
    QuantTable q;
    q.entries.fill(1);
    return q;
  }
  std::uint16_t operator()(int u, int v) const { return entries[u * kBlockSize + v]; }
  bool valid() const {
    return std::all_of(entries.begin(), entries.end(), [](auto e) { return e >= 1 && e <= 255; });
  }
  friend bool operator==(const QuantTable&, const QuantTable&) = default;
};

// ---------------------------------------------------------------------------
// Zig-zag order

namespace detail {

constexpr std::array<std::uint8_t, kBlockArea> make_zigzag() {
  std::array<std::uint8_t, kBlockArea> order{};
  int k = 0;
  for (int diag = 0; diag < 2 * kBlockSize - 1; ++diag) {
    // Odd anti-diagonals run top-right to bottom-left (row increasing),
    // even ones the other way.
    const int lo = std::max(0, diag - (kBlockSize - 1));
    const int hi = std::min(diag, kBlockSize - 1);
    if (diag % 2 == 1) {
      for (int u = lo; u <= hi; ++u) order[k++] = static_cast<std::uint8_t>(u * kBlockSize + (diag - u));
    } else {
      for (int u = hi; u >= lo; --u) order[k++] = static_cast<std::uint8_t>(u * kBlockSize + (diag - u));
    }
  }
  return order;
}

constexpr std::array<std::uint8_t, kBlockArea> invert(const std::array<std::uint8_t, kBlockArea>& p) {
  std::array<std::uint8_t, kBlockArea> inv{};
  for (int i = 0; i < kBlockArea; ++i) inv[p[i]] = static_cast<std::uint8_t>(i);
  return inv;
}

}  // namespace detail

/// zigzag_to_natural[k] is the natural index u*8+v of the k-th zig-zag slot.
inline constexpr std::array<std::uint8_t, kBlockArea> zigzag_to_natural = detail::make_zigzag();
inline constexpr std::array<std::uint8_t, kBlockArea> natural_to_zigzag = detail::invert(zigzag_to_natural);

constexpr std::pair<int, int> zigzag_position(int k) {
  return {zigzag_to_natural[k] / kBlockSize, zigzag_to_natural[k] % kBlockSize};
}

template <typename T>
std::array<T, kBlockArea> zigzag_scan(const std::array<T, kBlockArea>& natural) {
  std::array<T, kBlockArea> out{};
  for (int k = 0; k < kBlockArea; ++k) out[k] = natural[zigzag_to_natural[k]];
  return out;
}

template <typename T>
std::array<T, kBlockArea> zigzag_unscan(const std::array<T, kBlockArea>& scanned) {
  std::array<T, kBlockArea> out{};
  for (int k = 0; k < kBlockArea; ++k) out[zigzag_to_natural[k]] = scanned[k];
  return out;
}

// ---------------------------------------------------------------------------
// Transform

namespace detail {

/// basis[u][x] = (C_u / 2) cos(pi (2x+1) u / 16), so F = B f B^T.
inline const std::array<double, kBlockArea>& dct_basis() {
  static const std::array<double, kBlockArea> table = [] {
    std::array<double, kBlockArea> b{};
    for (int u = 0; u < kBlockSize; ++u) {
      const double cu = (u == 0) ? 1.0 / std::numbers::sqrt2 : 1.0;
      for (int x = 0; x < kBlockSize; ++x)
        b[u * kBlockSize + x] = 0.5 * cu * std::cos(std::numbers::pi * (2 * x + 1) * u / 16.0);
    }
    return b;
  }();
  return table;
}

}  // namespace detail

inline CoeffBlock forward_dct(const PixelBlock& block) {
  const auto& b = detail::dct_basis();
  std::array<double, kBlockArea> tmp{};  // tmp[u][y] = sum_x B[u][x] f[x][y]
  for (int u = 0; u < kBlockSize; ++u)
    for (int x = 0; x < kBlockSize; ++x) {
      const double w = b[u * kBlockSize + x];
      for (int y = 0; y < kBlockSize; ++y) tmp[u * kBlockSize + y] += w * block(x, y);
    }
  CoeffBlock out;
  for (int u = 0; u < kBlockSize; ++u)
    for (int v = 0; v < kBlockSize; ++v) {
      double s = 0.0;
      for (int y = 0; y < kBlockSize; ++y) s += tmp[u * kBlockSize + y] * b[v * kBlockSize + y];
      out(u, v) = s;
    }
  return out;
}

inline PixelBlock inverse_dct(const CoeffBlock& coeffs) {
  const auto& b = detail::dct_basis();
  std::array<double, kBlockArea> tmp{};  // tmp[x][v] = sum_u B[u][x] F[u][v]
  for (int u = 0; u < kBlockSize; ++u)
    for (int x = 0; x < kBlockSize; ++x) {
      const double w = b[u * kBlockSize + x];
      for (int v = 0; v < kBlockSize; ++v) tmp[x * kBlockSize + v] += w * coeffs(u, v);
    }
  PixelBlock out;
  for (int x = 0; x < kBlockSize; ++x)
    for (int y = 0; y < kBlockSize; ++y) {
      double s = 0.0;
      for (int v = 0; v < kBlockSize; ++v) s += tmp[x * kBlockSize + v] * b[v * kBlockSize + y];
      out(x, y) = s;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Quantization

/// Round half away from zero of coeff / entry.
inline QuantizedBlock quantize(const CoeffBlock& coeffs, const QuantTable& table) {
  QuantizedBlock out;
  for (int i = 0; i < kBlockArea; ++i)
    out.coeffs[i] = static_cast<std::int32_t>(std::round(coeffs.coeffs[i] / table.entries[i]));
  return out;
}

inline CoeffBlock dequantize(const QuantizedBlock& q, const QuantTable& table) {
  CoeffBlock out;
  for (int i = 0; i < kBlockArea; ++i) out.coeffs[i] = static_cast<double>(q.coeffs[i]) * table.entries[i];
  return out;
}

// ---------------------------------------------------------------------------
// Color

struct Ycc {
  double y, cb, cr;
};
struct Rgb {
  double r, g, b;
};

namespace detail {
inline constexpr std::array<std::array<double, 3>, 3> kRgbToYcc = {{
    {0.299, 0.587, 0.114},
    {-0.168736, -0.331264, 0.5},
    {0.5, -0.418688, -0.081312},
}};

constexpr std::array<std::array<double, 3>, 3> invert3(const std::array<std::array<double, 3>, 3>& m) {
  std::array<std::array<double, 3>, 3> inv{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const int r0 = (j + 1) % 3, r1 = (j + 2) % 3, c0 = (i + 1) % 3, c1 = (i + 2) % 3;
      inv[i][j] = m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    }
  const double det = m[0][0] * inv[0][0] + m[0][1] * inv[1][0] + m[0][2] * inv[2][0];
  for (auto& row : inv)
    for (double& v : row) v /= det;
  return inv;
}

// Solved rather than the rounded 1.402 / 0.344136 / 0.714136 / 1.772, so the
// pair below round-trips to machine precision.
inline constexpr auto kYccToRgb = invert3(kRgbToYcc);
}  // namespace detail

/// JFIF matrix without clamping.
constexpr Ycc rgb_to_ycbcr_linear(double r, double g, double b) {
  const auto& m = detail::kRgbToYcc;
  return {m[0][0] * r + m[0][1] * g + m[0][2] * b,
          m[1][0] * r + m[1][1] * g + m[1][2] * b + 128.0,
          m[2][0] * r + m[2][1] * g + m[2][2] * b + 128.0};
}

/// Exact inverse of rgb_to_ycbcr_linear.
constexpr Rgb ycbcr_to_rgb_linear(double y, double cb, double cr) {
  const auto& m = detail::kYccToRgb;
  cb -= 128.0;
  cr -= 128.0;
  return {m[0][0] * y + m[0][1] * cb + m[0][2] * cr,
          m[1][0] * y + m[1][1] * cb + m[1][2] * cr,
          m[2][0] * y + m[2][1] * cb + m[2][2] * cr};
}

inline double clamp_sample(double v) { return std::clamp(v, 0.0, 255.0); }

/// JFIF conversion clamped to [0, 255].
inline Ycc rgb_to_ycbcr(double r, double g, double b) {
  const Ycc c = rgb_to_ycbcr_linear(r, g, b);
  return {clamp_sample(c.y), clamp_sample(c.cb), clamp_sample(c.cr)};
}

inline Rgb ycbcr_to_rgb(double y, double cb, double cr) {
  const Rgb c = ycbcr_to_rgb_linear(y, cb, cr);
  return {clamp_sample(c.r), clamp_sample(c.g), clamp_sample(c.b)};
}

// ---------------------------------------------------------------------------
// Planes

/// A single-channel sample grid, row-major.
struct Plane {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Plane() = default;
  Plane(int r, int c, double fill = 0.0) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  /// Edge-replicating access.
  double clamped(int r, int c) const {
    return (*this)(std::clamp(r, 0, rows - 1), std::clamp(c, 0, cols - 1));
  }
  friend bool operator==(const Plane&, const Plane&) = default;
};

/// Copies the plane into a rows x cols grid, replicating the last row/column.
inline Plane pad_replicate(const Plane& p, int rows, int cols) {
  Plane out(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out(r, c) = p.clamped(r, c);
  return out;
}

enum class Resample { Down, Up };

/// Factor-2 chroma resampling: Down is a 2x2 box mean (odd sizes are padded
/// by replication first), Up is center-aligned bilinear to double size.
inline Plane chroma_resample(const Plane& plane, Resample direction) {
  require(plane.rows > 0 && plane.cols > 0, ErrorCode::InvalidDimensions, "empty plane");
  if (direction == Resample::Down) {
    const int rows = (plane.rows + 1) / 2;
    const int cols = (plane.cols + 1) / 2;
    Plane out(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c)
        out(r, c) = 0.25 * (plane.clamped(2 * r, 2 * c) + plane.clamped(2 * r, 2 * c + 1) +
                            plane.clamped(2 * r + 1, 2 * c) + plane.clamped(2 * r + 1, 2 * c + 1));
    return out;
  }
  Plane out(plane.rows * 2, plane.cols * 2);
  for (int r = 0; r < out.rows; ++r) {
    // Output sample r sits at input coordinate (r + 0.5) / 2 - 0.5.
    const double sr = std::clamp((r + 0.5) * 0.5 - 0.5, 0.0, static_cast<double>(plane.rows - 1));
    const int r0 = static_cast<int>(std::floor(sr));
    const int r1 = std::min(r0 + 1, plane.rows - 1);
    const double fr = sr - r0;
    for (int c = 0; c < out.cols; ++c) {
      const double sc = std::clamp((c + 0.5) * 0.5 - 0.5, 0.0, static_cast<double>(plane.cols - 1));
      const int c0 = static_cast<int>(std::floor(sc));
      const int c1 = std::min(c0 + 1, plane.cols - 1);
      const double fc = sc - c0;
      const double top = plane(r0, c0) * (1 - fc) + plane(r0, c1) * fc;
      const double bottom = plane(r1, c0) * (1 - fc) + plane(r1, c1) * fc;
      out(r, c) = top * (1 - fr) + bottom * fr;
    }
  }
  return out;
}

/// Reads block (br, bc) of a plane whose dimensions are multiples of 8.
inline PixelBlock extract_block(const Plane& plane, int br, int bc) {
  PixelBlock b;
  for (int x = 0; x < kBlockSize; ++x)
    for (int y = 0; y < kBlockSize; ++y) b(x, y) = plane(br * kBlockSize + x, bc * kBlockSize + y);
  return b;
}

inline void store_block(Plane& plane, int br, int bc, const PixelBlock& b) {
  for (int x = 0; x < kBlockSize; ++x)
    for (int y = 0; y < kBlockSize; ++y) plane(br * kBlockSize + x, bc * kBlockSize + y) = b(x, y);
}

}  // namespace dctir
