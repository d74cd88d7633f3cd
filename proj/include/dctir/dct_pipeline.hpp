#pragma once

// Spatial-domain augmentation followed by the DCT reshaping used as network
// input: blockwise DCT per YCbCr component, regrouped so that each channel
// holds one zig-zag frequency of every block, then static channel selection
// and per-channel standardization.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dctir/binary_io.hpp"
#include "dctir/dct_core.hpp"
#include "dctir/error.hpp"
#include "dctir/image.hpp"
#include "dctir/jpeg_codec.hpp"
#include "dctir/rng.hpp"

namespace dctir {

inline constexpr int kComponents = 3;
inline constexpr int kCubeChannels = kComponents * kBlockArea;  // 192

/// Channel id = component * 64 + zig-zag index.
constexpr int channel_id(int component, int zigzag) { return component * kBlockArea + zigzag; }

/// Frequency-major regrouping of block DCTs: channels x rows x cols, where
/// rows/cols count 8x8 blocks. `channel_ids` names each stored channel.
struct DctCube {
  int rows = 0;
  int cols = 0;
  std::vector<int> channel_ids;
  std::vector<double> data;  // [channel][row][col]

  DctCube() = default;
  DctCube(int r, int c, std::vector<int> ids)
      : rows(r), cols(c), channel_ids(std::move(ids)), data(channel_ids.size() * static_cast<std::size_t>(r) * c, 0.0) {}

  static DctCube full(int r, int c) {
    std::vector<int> ids(kCubeChannels);
    std::iota(ids.begin(), ids.end(), 0);
    return DctCube(r, c, std::move(ids));
  }

  int channels() const { return static_cast<int>(channel_ids.size()); }
  std::size_t plane_size() const { return static_cast<std::size_t>(rows) * cols; }
  double& at(int ch, int r, int c) { return data[ch * plane_size() + static_cast<std::size_t>(r) * cols + c]; }
  double at(int ch, int r, int c) const { return data[ch * plane_size() + static_cast<std::size_t>(r) * cols + c]; }
  std::span<double> channel(int ch) { return {data.data() + ch * plane_size(), plane_size()}; }
  std::span<const double> channel(int ch) const { return {data.data() + ch * plane_size(), plane_size()}; }
  friend bool operator==(const DctCube&, const DctCube&) = default;
};

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  int output_size = 448;
  double min_aspect = 3.0 / 4.0;
  double max_aspect = 4.0 / 3.0;
  double min_area = 0.6;  // crop area fraction lower bound
  double flip_probability = 0.5;
};

struct Augmented {
  ImageTensor image;
  double aspect_ratio = 1.0;  // sampled width/height ratio of the crop
  bool flipped = false;
};

/// Training-time augmentation: a random crop with aspect ratio drawn
/// uniformly from [min_aspect, max_aspect], random horizontal flip, then a
/// bilinear resize to output_size squared. Fully determined by `seed`.
inline Augmented augment(const ImageTensor& image, std::uint64_t seed, const AugmentConfig& cfg = {}) {
  require(image.height >= 32 && image.width >= 32, ErrorCode::InvalidDimensions, "augment needs at least 32x32");
  Rng rng(seed);
  Augmented out;
  out.aspect_ratio = rng.uniform(cfg.min_aspect, cfg.max_aspect);
  const double area = rng.uniform(cfg.min_area, 1.0) * image.height * image.width;
  const int cw = std::clamp(static_cast<int>(std::lround(std::sqrt(area * out.aspect_ratio))), 1, image.width);
  const int ch = std::clamp(static_cast<int>(std::lround(std::sqrt(area / out.aspect_ratio))), 1, image.height);
  const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(image.width - cw + 1)));
  const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(image.height - ch + 1)));
  out.flipped = rng.coin(cfg.flip_probability);
  ImageTensor cropped = crop(image, x0, y0, x0 + cw, y0 + ch);
  if (out.flipped) cropped = flip_horizontal(cropped);
  out.image = resize_bilinear(cropped, cfg.output_size, cfg.output_size);
  return out;
}

/// Evaluation path: plain resize, no jitter or flip.
inline ImageTensor resize_for_eval(const ImageTensor& image, int output_size) {
  return resize_bilinear(image, output_size, output_size);
}

// ---------------------------------------------------------------------------
// Cube construction

/// RGB -> YCbCr, level shift, blockwise DCT, regroup by zig-zag frequency.
/// Dimensions that are not multiples of 8 are padded by replication.
inline DctCube to_dct_cube(const ImageTensor& image) {
  require(image.height >= 1 && image.width >= 1, ErrorCode::InvalidDimensions, "empty image");
  const int rows = (image.height + 7) / 8;
  const int cols = (image.width + 7) / 8;
  const ImageTensor padded = pad_replicate(image, rows * 8, cols * 8);
  const auto planes = to_ycbcr_planes(padded);
  DctCube cube = DctCube::full(rows, cols);
  for (int comp = 0; comp < kComponents; ++comp)
    for (int br = 0; br < rows; ++br)
      for (int bc = 0; bc < cols; ++bc) {
        PixelBlock b = extract_block(planes[comp], br, bc);
        for (double& s : b.samples) s -= 128.0;
        const CoeffBlock F = forward_dct(b);
        for (int k = 0; k < kBlockArea; ++k) cube.at(channel_id(comp, k), br, bc) = F.coeffs[zigzag_to_natural[k]];
      }
  return cube;
}

/// Unscan channel slice (r, c) of one component back into a natural-order block.
inline CoeffBlock cube_block(const DctCube& cube, int component, int r, int c) {
  CoeffBlock F;
  for (int ch = 0; ch < cube.channels(); ++ch) {
    const int id = cube.channel_ids[ch];
    if (id / kBlockArea == component) F.coeffs[zigzag_to_natural[id % kBlockArea]] = cube.at(ch, r, c);
  }
  return F;
}

/// Inverse of to_dct_cube for a full cube (padded size, linear color).
inline ImageTensor image_from_cube(const DctCube& cube) {
  require(cube.channels() == kCubeChannels, ErrorCode::ShapeMismatch, "inverse needs all 192 channels");
  std::array<Plane, 3> planes{Plane(cube.rows * 8, cube.cols * 8), Plane(cube.rows * 8, cube.cols * 8),
                              Plane(cube.rows * 8, cube.cols * 8)};
  for (int comp = 0; comp < kComponents; ++comp)
    for (int r = 0; r < cube.rows; ++r)
      for (int c = 0; c < cube.cols; ++c) {
        PixelBlock b = inverse_dct(cube_block(cube, comp, r, c));
        for (double& s : b.samples) s += 128.0;
        store_block(planes[comp], r, c, b);
      }
  return from_ycbcr_planes(planes[0], planes[1], planes[2]);
}

/// Compressed-domain route: dequantized coefficients regrouped into the cube
/// layout without decoding pixels. 4:2:0 chroma is brought to luma resolution
/// (IDCT, bilinear upsample, DCT); grayscale input leaves chroma at zero.
inline DctCube cube_from_jpeg(const JpegImage& img) {
  require(!img.planes.empty(), ErrorCode::UnsupportedFormat, "image has no components");
  const ComponentPlane& luma = img.planes[0];
  DctCube cube = DctCube::full(luma.block_rows, luma.block_cols);
  const auto coeffs = coefficient_planes(img, true);

  auto scatter = [&](int comp, const std::vector<CoeffBlock>& blocks, int grid_cols) {
    for (int r = 0; r < cube.rows; ++r)
      for (int c = 0; c < cube.cols; ++c) {
        const CoeffBlock& F = blocks[static_cast<std::size_t>(r) * grid_cols + c];
        for (int k = 0; k < kBlockArea; ++k) cube.at(channel_id(comp, k), r, c) = F.coeffs[zigzag_to_natural[k]];
      }
  };

  scatter(0, coeffs[0], luma.block_cols);
  for (std::size_t ci = 1; ci < img.planes.size(); ++ci) {
    const ComponentPlane& p = img.planes[ci];
    if (p.h == luma.h && p.v == luma.v) {
      scatter(static_cast<int>(ci), coeffs[ci], p.block_cols);
      continue;
    }
    Plane shifted(p.block_rows * 8, p.block_cols * 8);
    for (int r = 0; r < p.block_rows; ++r)
      for (int c = 0; c < p.block_cols; ++c)
        store_block(shifted, r, c, inverse_dct(coeffs[ci][static_cast<std::size_t>(r) * p.block_cols + c]));
    const Plane up = pad_replicate(chroma_resample(shifted, Resample::Up), cube.rows * 8, cube.cols * 8);
    std::vector<CoeffBlock> blocks;
    blocks.reserve(cube.plane_size());
    for (int r = 0; r < cube.rows; ++r)
      for (int c = 0; c < cube.cols; ++c) blocks.push_back(forward_dct(extract_block(up, r, c)));
    scatter(static_cast<int>(ci), blocks, cube.cols);
  }
  return cube;
}

// ---------------------------------------------------------------------------
// Channel selection

/// Kept zig-zag indices per component (Y, Cb, Cr).
struct ChannelSelection {
  std::array<std::vector<int>, kComponents> kept;

  /// Lowest-frequency channels of each component.
  static ChannelSelection lowest(int y, int cb, int cr) {
    ChannelSelection s;
    const int counts[kComponents] = {y, cb, cr};
    for (int c = 0; c < kComponents; ++c) {
      require(counts[c] >= 0 && counts[c] <= kBlockArea, ErrorCode::InvalidSelection, "per-component count must be 0..64");
      s.kept[c].resize(static_cast<std::size_t>(counts[c]));
      std::iota(s.kept[c].begin(), s.kept[c].end(), 0);
    }
    return s;
  }
  /// Luma-weighted 64-channel default: Y 0..31, Cb 0..15, Cr 0..15.
  static ChannelSelection default_selection() { return lowest(32, 16, 16); }
  static ChannelSelection all() { return lowest(64, 64, 64); }

  std::size_t total() const { return kept[0].size() + kept[1].size() + kept[2].size(); }

  /// Throws InvalidSelection on out-of-range or duplicate indices, or an empty Y list.
  void validate() const {
    require(!kept[0].empty(), ErrorCode::InvalidSelection, "luma selection is empty");
    for (const auto& list : kept) {
      std::vector<int> sorted = list;
      std::sort(sorted.begin(), sorted.end());
      for (std::size_t i = 0; i < sorted.size(); ++i) {
        require(sorted[i] >= 0 && sorted[i] < kBlockArea, ErrorCode::InvalidSelection, "index outside 0..63");
        require(i == 0 || sorted[i] != sorted[i - 1], ErrorCode::InvalidSelection, "duplicate index");
      }
    }
  }

  /// Cube channel ids in output order: component-major, ascending frequency.
  std::vector<int> channel_ids() const {
    std::vector<int> ids;
    for (int c = 0; c < kComponents; ++c) {
      std::vector<int> sorted = kept[c];
      std::sort(sorted.begin(), sorted.end());
      for (int k : sorted) ids.push_back(channel_id(c, k));
    }
    return ids;
  }

  friend bool operator==(const ChannelSelection&, const ChannelSelection&) = default;
};

inline DctCube select_channels(const DctCube& cube, const ChannelSelection& sel) {
  sel.validate();
  const std::vector<int> ids = sel.channel_ids();
  DctCube out(cube.rows, cube.cols, ids);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto it = std::find(cube.channel_ids.begin(), cube.channel_ids.end(), ids[i]);
    require(it != cube.channel_ids.end(), ErrorCode::InvalidSelection,
            "channel " + std::to_string(ids[i]) + " not present in cube");
    const auto src = cube.channel(static_cast<int>(it - cube.channel_ids.begin()));
    std::copy(src.begin(), src.end(), out.channel(static_cast<int>(i)).begin());
  }
  return out;
}

inline void write_selection(ByteWriter& w, const ChannelSelection& sel) {
  for (const auto& list : sel.kept) {
    w.u16(static_cast<std::uint16_t>(list.size()));
    for (int k : list) w.u8(static_cast<std::uint8_t>(k));
  }
}

inline ChannelSelection read_selection(ByteReader& r) {
  ChannelSelection sel;
  for (auto& list : sel.kept) {
    list.resize(r.u16());
    for (int& k : list) k = r.u8();
  }
  return sel;
}

// ---------------------------------------------------------------------------
// Normalization

inline constexpr double kVarianceFloor = 1e-6;

struct NormStats {
  std::vector<double> mean;
  std::vector<double> variance;

  std::size_t channels() const { return mean.size(); }
  friend bool operator==(const NormStats&, const NormStats&) = default;
};

/// Two-pass per-channel mean and population variance over every spatial
/// position of every cube. Summation order is fixed (cube, then position).
inline NormStats compute_norm_stats(std::span<const DctCube> cubes) {
  require(!cubes.empty(), ErrorCode::EmptyTrainingSet, "no training cubes");
  const int channels = cubes[0].channels();
  for (const auto& c : cubes)
    require(c.channels() == channels && c.channel_ids == cubes[0].channel_ids, ErrorCode::ShapeMismatch,
            "training cubes have different channel layouts");
  NormStats s;
  s.mean.assign(static_cast<std::size_t>(channels), 0.0);
  s.variance.assign(static_cast<std::size_t>(channels), 0.0);
  for (int ch = 0; ch < channels; ++ch) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& c : cubes)
      for (double v : c.channel(ch)) sum += v;
    for (const auto& c : cubes) count += c.plane_size();
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (const auto& c : cubes)
      for (double v : c.channel(ch)) sq += (v - mean) * (v - mean);
    s.mean[ch] = mean;
    s.variance[ch] = sq / static_cast<double>(count);
  }
  return s;
}

/// (x - mean) / sqrt(variance + 1e-6) per channel.
inline DctCube normalize(const DctCube& cube, const NormStats& stats) {
  require(stats.channels() == static_cast<std::size_t>(cube.channels()), ErrorCode::ShapeMismatch,
          "norm stats channel count differs from cube");
  DctCube out = cube;
  for (int ch = 0; ch < cube.channels(); ++ch) {
    const double inv = 1.0 / std::sqrt(stats.variance[ch] + kVarianceFloor);
    for (double& v : out.channel(ch)) v = (v - stats.mean[ch]) * inv;
  }
  return out;
}

inline void write_norm_stats(ByteWriter& w, const NormStats& s) {
  w.u32(static_cast<std::uint32_t>(s.channels()));
  for (std::size_t i = 0; i < s.channels(); ++i) {
    w.f64(s.mean[i]);
    w.f64(s.variance[i]);
  }
}

inline NormStats read_norm_stats(ByteReader& r) {
  NormStats s;
  const std::uint32_t n = r.u32();
  r.need(static_cast<std::size_t>(n) * 16);
  s.mean.resize(n);
  s.variance.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    s.mean[i] = r.f64();
    s.variance[i] = r.f64();
  }
  return s;
}

inline constexpr std::uint16_t kNormStatsVersion = 1;

/// Standalone file: "DCNS", u16 version, u32 channel count, (mean, variance) f64 pairs.
inline std::vector<std::uint8_t> serialize_norm_stats(const NormStats& s) {
  ByteWriter w;
  w.tag("DCNS");
  w.u16(kNormStatsVersion);
  write_norm_stats(w, s);
  return w.take();
}

inline NormStats deserialize_norm_stats(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, ErrorCode::CorruptCheckpoint);
  r.expect_tag("DCNS", ErrorCode::CorruptCheckpoint);
  const std::uint16_t version = r.u16();
  require(version == kNormStatsVersion, ErrorCode::VersionMismatch, "norm stats version " + std::to_string(version));
  NormStats s = read_norm_stats(r);
  require(r.at_end(), ErrorCode::CorruptCheckpoint, "trailing bytes after norm stats");
  return s;
}

inline void save_norm_stats(const std::filesystem::path& path, const NormStats& s) {
  write_file(path, serialize_norm_stats(s));
}

inline NormStats load_norm_stats(const std::filesystem::path& path) { return deserialize_norm_stats(read_file(path)); }

/// Selection and standardization applied to every cube fed to the model.
struct Preprocessor {
  ChannelSelection selection = ChannelSelection::default_selection();
  NormStats stats;

  DctCube operator()(const DctCube& full) const { return normalize(select_channels(full, selection), stats); }
};

}  // namespace dctir
