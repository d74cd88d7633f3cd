#pragma once

// Feature extraction (single-scale global, multi-scale local), the gallery
// index file, and two-stage search: exact global ranking, then RANSAC affine
// verification of the top candidates.

#include <openssl/sha.h>

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dctir/binary_io.hpp"
#include "dctir/nn_checkpoint.hpp"
#include "dctir/nn_train.hpp"
#include "dctir/parallel.hpp"
#include "dctir/rng.hpp"

namespace dctir {

using ModelHash = std::array<std::uint8_t, 32>;

/// SHA-256 of the serialized checkpoint.
inline ModelHash model_hash(const Checkpoint& ck) {
  const auto bytes = serialize_checkpoint(ck);
  ModelHash h;
  SHA256(bytes.data(), bytes.size(), h.data());
  return h;
}

inline std::string to_hex(const ModelHash& h) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (auto b : h) {
    s += digits[b >> 4];
    s += digits[b & 15];
  }
  return s;
}

// ---------------------------------------------------------------------------
// Extraction

struct LocalFeature {
  float x = 0, y = 0;  // original-image pixels
  float scale = 1;
  float attention = 0;
  std::vector<float> descriptor;  // unit-norm shallow-tap channels
  friend bool operator==(const LocalFeature&, const LocalFeature&) = default;
};

struct Features {
  std::vector<float> global;  // unit norm
  std::vector<LocalFeature> locals;
};

struct ExtractConfig {
  std::vector<double> scales = {0.70711, 1.0, 1.41421};
  std::size_t max_local = 200;
  bool compressed_domain = true;  // read the scale-1 cube straight from JPEG coefficients when sizes allow
};

namespace detail {

struct LocalCandidate {
  LocalFeature f;
  std::size_t order;  // scale index, row, col: deterministic tie-break
};

inline void collect_locals(const Graph& gr, const Checkpoint& ck, double scale, int side, double to_orig_x,
                           double to_orig_y, std::size_t scale_index, std::vector<LocalCandidate>& out) {
  const int C = gr.S.dim(0), H = gr.S.dim(1), W = gr.S.dim(2);
  const double cell = 8.0 * ck.config.shallow_stride();
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  // Centre of the part of the cell that lies inside the image; the last row
  // and column of cells may extend into block padding.
  const auto center = [&](int i) { return 0.5 * (i * cell + std::min((i + 1) * cell, static_cast<double>(side))); };
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const std::size_t pos = static_cast<std::size_t>(r) * W + c;
      const double a = gr.A.data[pos];
      if (a < ck.params.tau) continue;
      LocalCandidate lc;
      lc.order = (scale_index * hw + pos);
      lc.f.x = static_cast<float>(center(c) * to_orig_x);
      lc.f.y = static_cast<float>(center(r) * to_orig_y);
      lc.f.scale = static_cast<float>(scale);
      lc.f.attention = static_cast<float>(a);
      std::vector<double> d(static_cast<std::size_t>(C));
      for (int k = 0; k < C; ++k) d[k] = gr.S.data[k * hw + pos];
      d = ops::l2_normalize(d);
      lc.f.descriptor.assign(d.begin(), d.end());
      out.push_back(std::move(lc));
    }
}

inline Graph run_model(const Checkpoint& ck, const DctCube& full) {
  return forward(ck.params, ck.config, prepare_input(full, ck.preprocessor()));
}

}  // namespace detail

/// Global descriptor from the model-size (scale 1) input; local features
/// from every configured scale, kept when attention >= tau, best
/// `max_local` by attention. `scale_one_cube` optionally supplies the scale-1
/// cube (e.g. read from JPEG coefficients).
inline Features extract(const Checkpoint& ck, const ImageTensor& image, const ExtractConfig& cfg = {},
                        const DctCube* scale_one_cube = nullptr) {
  require(!image.empty(), ErrorCode::InvalidDimensions, "empty image");
  const int size = model_image_size(ck.config);
  Features out;
  std::vector<detail::LocalCandidate> cands;
  bool have_global = false;
  auto run_scale = [&](double s, std::size_t si, bool locals) {
    const int side = std::max(8, static_cast<int>(std::lround(size * s)));
    const bool unit = side == size;
    const DctCube cube = (unit && scale_one_cube) ? *scale_one_cube : to_dct_cube(resize_for_eval(image, side));
    const Graph gr = detail::run_model(ck, cube);
    if (unit && !have_global) {
      out.global.assign(gr.g.begin(), gr.g.end());
      have_global = true;
    }
    if (locals)
      detail::collect_locals(gr, ck, s, side, static_cast<double>(image.width) / side, static_cast<double>(image.height) / side,
                             si, cands);
  };
  for (std::size_t si = 0; si < cfg.scales.size(); ++si) {
    require(cfg.scales[si] > 0, ErrorCode::InvalidArgument, "scales must be positive");
    run_scale(cfg.scales[si], si, true);
  }
  if (!have_global) run_scale(1.0, cfg.scales.size(), false);

  std::stable_sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) {
    if (a.f.attention != b.f.attention) return a.f.attention > b.f.attention;
    return a.order < b.order;
  });
  if (cands.size() > cfg.max_local) cands.resize(cfg.max_local);
  for (auto& c : cands) out.locals.push_back(std::move(c.f));
  return out;
}

/// From JPEG bytes. With a crop box the query region is cut out of the
/// decoded pixels first; keypoints are then relative to the crop.
inline Features extract_jpeg(const Checkpoint& ck, std::span<const std::uint8_t> bytes, const ExtractConfig& cfg = {},
                             const std::optional<std::array<double, 4>>& bbox = std::nullopt) {
  const JpegImage jpeg = parse_jpeg(bytes);
  ImageTensor image = decode_rgb(jpeg);
  if (bbox) {
    const auto& b = *bbox;
    image = crop(image, static_cast<int>(std::floor(b[0])), static_cast<int>(std::floor(b[1])),
                 static_cast<int>(std::ceil(b[2])), static_cast<int>(std::ceil(b[3])));
    return extract(ck, image, cfg);
  }
  const int size = model_image_size(ck.config);
  if (cfg.compressed_domain && jpeg.width == size && jpeg.height == size) {
    const DctCube cube = cube_from_jpeg(jpeg);
    return extract(ck, image, cfg, &cube);
  }
  return extract(ck, image, cfg);
}

// ---------------------------------------------------------------------------
// Index

inline constexpr std::uint16_t kIndexVersion = 1;

struct RetrievalIndex {
  ModelHash model = {};
  std::uint32_t global_dim = 0;
  std::uint32_t local_dim = 0;
  ChannelSelection selection;
  std::vector<std::string> ids;
  std::vector<std::vector<float>> globals;
  std::vector<std::vector<LocalFeature>> locals;

  std::size_t size() const { return ids.size(); }

  /// Refuses a checkpoint other than the one the index was built with.
  void require_model(const Checkpoint& ck) const {
    require(model_hash(ck) == model, ErrorCode::ChecksumMismatch, "index was built with a different checkpoint");
  }

  friend bool operator==(const RetrievalIndex&, const RetrievalIndex&) = default;
};

struct GalleryImage {
  std::string id;
  std::vector<std::uint8_t> jpeg;
};

/// Extraction runs in parallel; output order follows the input list.
inline RetrievalIndex build_index(const Checkpoint& ck, const std::vector<GalleryImage>& gallery,
                                  const ExtractConfig& cfg = {}) {
  require(!gallery.empty(), ErrorCode::EmptyGallery, "gallery is empty");
  RetrievalIndex idx;
  idx.model = model_hash(ck);
  idx.global_dim = static_cast<std::uint32_t>(ck.config.global_dim);
  idx.local_dim = static_cast<std::uint32_t>(ck.config.shallow_channels());
  idx.selection = ck.selection;
  std::set<std::string> seen;
  for (const auto& g : gallery) {
    require(seen.insert(g.id).second, ErrorCode::InvalidArgument, "duplicate gallery id " + g.id);
    idx.ids.push_back(g.id);
  }
  std::vector<Features> feats(gallery.size());
  parallel_for(gallery.size(), [&](std::size_t i) { feats[i] = extract_jpeg(ck, gallery[i].jpeg, cfg); });
  for (auto& f : feats) {
    idx.globals.push_back(std::move(f.global));
    idx.locals.push_back(std::move(f.locals));
  }
  return idx;
}

inline std::vector<std::uint8_t> serialize_index(const RetrievalIndex& idx) {
  ByteWriter w;
  w.tag("DCIR");
  w.u16(kIndexVersion);
  w.raw(idx.model);
  w.u32(idx.global_dim);
  w.u32(idx.local_dim);
  write_selection(w, idx.selection);
  w.u64(idx.ids.size());
  for (const auto& id : idx.ids) w.str(id);
  for (const auto& g : idx.globals)
    for (float v : g) w.f32(v);
  for (const auto& set : idx.locals) {
    require(set.size() <= 0xFFFF, ErrorCode::InvalidArgument, "too many local features for one image");
    w.u16(static_cast<std::uint16_t>(set.size()));
    for (const auto& f : set) {
      w.f32(f.x);
      w.f32(f.y);
      w.f32(f.scale);
      w.f32(f.attention);
      for (float v : f.descriptor) w.f32(v);
    }
  }
  return w.take();
}

inline RetrievalIndex deserialize_index(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, ErrorCode::CorruptStream);
  r.expect_tag("DCIR", ErrorCode::CorruptStream);
  const std::uint16_t version = r.u16();
  require(version == kIndexVersion, ErrorCode::VersionMismatch,
          "index version " + std::to_string(version) + ", expected " + std::to_string(kIndexVersion));
  RetrievalIndex idx;
  for (auto& b : idx.model) b = r.u8();
  idx.global_dim = r.u32();
  idx.local_dim = r.u32();
  idx.selection = read_selection(r);
  const std::uint64_t n = r.u64();
  r.need(n);  // at least one length byte per id
  for (std::uint64_t i = 0; i < n; ++i) idx.ids.push_back(r.str());
  r.need(n * idx.global_dim * 4);
  idx.globals.assign(n, std::vector<float>(idx.global_dim));
  for (auto& g : idx.globals)
    for (float& v : g) v = r.f32();
  idx.locals.resize(n);
  for (auto& set : idx.locals) {
    const std::uint16_t count = r.u16();
    r.need(static_cast<std::size_t>(count) * (16 + 4 * idx.local_dim));
    set.resize(count);
    for (auto& f : set) {
      f.x = r.f32();
      f.y = r.f32();
      f.scale = r.f32();
      f.attention = r.f32();
      f.descriptor.resize(idx.local_dim);
      for (float& v : f.descriptor) v = r.f32();
    }
  }
  require(r.at_end(), ErrorCode::CorruptStream, "trailing bytes after index");
  return idx;
}

inline void save_index(const std::filesystem::path& path, const RetrievalIndex& idx) {
  write_file(path, serialize_index(idx));
}

inline RetrievalIndex load_index(const std::filesystem::path& path) { return deserialize_index(read_file(path)); }

// ---------------------------------------------------------------------------
// Global search

struct Hit {
  std::string id;
  std::size_t index = 0;  // position in the gallery
  double cosine = 0.0;
  int inliers = 0;
  std::size_t global_rank = 0;
};

inline double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

/// Exhaustive cosine ranking (descriptors are unit norm), ties by ascending id.
/// k = 0 returns the whole gallery.
inline std::vector<Hit> global_search(const RetrievalIndex& idx, std::span<const float> query, std::size_t k = 0) {
  require(idx.size() > 0, ErrorCode::EmptyGallery, "index is empty");
  require(query.size() == idx.global_dim, ErrorCode::ShapeMismatch, "query descriptor dimension differs from index");
  std::vector<Hit> hits(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    hits[i].id = idx.ids[i];
    hits[i].index = i;
    hits[i].cosine = dot(query, idx.globals[i]);
  }
  std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
    if (a.cosine != b.cosine) return a.cosine > b.cosine;
    return a.id < b.id;
  });
  for (std::size_t i = 0; i < hits.size(); ++i) hits[i].global_rank = i;
  if (k > 0 && k < hits.size()) hits.resize(k);
  return hits;
}

// ---------------------------------------------------------------------------
// Matching and verification

struct Correspondence {
  double qx, qy;  // query point
  double cx, cy;  // candidate point
  friend auto operator<=>(const Correspondence&, const Correspondence&) = default;
};

/// Pairs that are each other's nearest neighbour in descriptor space,
/// sorted so downstream results do not depend on input order.
inline std::vector<Correspondence> mutual_matches(const std::vector<LocalFeature>& q,
                                                  const std::vector<LocalFeature>& c) {
  std::vector<Correspondence> out;
  if (q.empty() || c.empty()) return out;
  std::vector<std::size_t> best_c(q.size()), best_q(c.size());
  std::vector<double> dist_q(q.size(), std::numeric_limits<double>::infinity()),
      dist_c(c.size(), std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < q.size(); ++i)
    for (std::size_t j = 0; j < c.size(); ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < q[i].descriptor.size(); ++k) {
        const double t = static_cast<double>(q[i].descriptor[k]) - c[j].descriptor[k];
        d += t * t;
      }
      if (d < dist_q[i]) {
        dist_q[i] = d;
        best_c[i] = j;
      }
      if (d < dist_c[j]) {
        dist_c[j] = d;
        best_q[j] = i;
      }
    }
  for (std::size_t i = 0; i < q.size(); ++i)
    if (best_q[best_c[i]] == i) out.push_back({q[i].x, q[i].y, c[best_c[i]].x, c[best_c[i]].y});
  std::sort(out.begin(), out.end());
  return out;
}

/// Maps query points to candidate points: [a b tx; c d ty].
struct Affine {
  std::array<double, 6> m = {1, 0, 0, 0, 1, 0};
  std::array<double, 2> apply(double x, double y) const {
    return {m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5]};
  }
  double det() const { return m[0] * m[4] - m[1] * m[3]; }
};

struct RansacConfig {
  double threshold = 10.0;  // reprojection error in pixels
  int max_iterations = 1000;
  double confidence = 0.99;
  int min_inliers = 4;
};

struct Verification {
  int inliers = 0;
  std::optional<Affine> model;
};

namespace detail {

/// Least-squares affine over the chosen correspondences; nullopt if degenerate.
inline std::optional<Affine> fit_affine(const std::vector<Correspondence>& m, const std::vector<std::size_t>& use) {
  if (use.size() < 3) return std::nullopt;
  Eigen::Matrix3d ata = Eigen::Matrix3d::Zero();
  Eigen::Vector3d atx = Eigen::Vector3d::Zero(), aty = Eigen::Vector3d::Zero();
  for (std::size_t i : use) {
    const Eigen::Vector3d row(m[i].qx, m[i].qy, 1.0);
    ata += row * row.transpose();
    atx += row * m[i].cx;
    aty += row * m[i].cy;
  }
  const Eigen::FullPivLU<Eigen::Matrix3d> lu(ata);
  if (!lu.isInvertible() || std::abs(lu.determinant()) < 1e-9) return std::nullopt;
  const Eigen::Vector3d px = lu.solve(atx), py = lu.solve(aty);
  Affine a;
  a.m = {px[0], px[1], px[2], py[0], py[1], py[2]};
  if (std::abs(a.det()) < 1e-6 || !std::isfinite(a.det())) return std::nullopt;
  return a;
}

inline std::vector<std::size_t> inliers_of(const Affine& a, const std::vector<Correspondence>& m, double thr) {
  std::vector<std::size_t> in;
  const double t2 = thr * thr;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto p = a.apply(m[i].qx, m[i].qy);
    const double dx = p[0] - m[i].cx, dy = p[1] - m[i].cy;
    if (dx * dx + dy * dy <= t2) in.push_back(i);
  }
  return in;
}

inline bool collinear(const Correspondence& a, const Correspondence& b, const Correspondence& c) {
  const double cross = (b.qx - a.qx) * (c.qy - a.qy) - (b.qy - a.qy) * (c.qx - a.qx);
  return std::abs(cross) < 1e-6;
}

}  // namespace detail

/// Minimal samples of 3 non-collinear pairs, adaptive iteration count, then a
/// least-squares refit on the consensus set. Fewer than `min_inliers`
/// reports 0 and no model.
inline Verification ransac_affine(std::vector<Correspondence> m, const RansacConfig& cfg, std::uint64_t seed) {
  Verification none;
  if (m.size() < 3) return none;
  std::sort(m.begin(), m.end());
  Rng rng(seed);
  const std::size_t n = m.size();
  std::vector<std::size_t> best;
  double needed = cfg.max_iterations;
  for (int it = 0; it < cfg.max_iterations && it < needed; ++it) {
    const std::size_t i = rng.below(n);
    std::size_t j = rng.below(n - 1);
    if (j >= i) ++j;
    std::size_t k = rng.below(n - 2);
    for (std::size_t lo : {std::min(i, j), std::max(i, j)})
      if (k >= lo) ++k;
    if (detail::collinear(m[i], m[j], m[k])) continue;
    const auto a = detail::fit_affine(m, {i, j, k});
    if (!a) continue;
    auto in = detail::inliers_of(*a, m, cfg.threshold);
    if (in.size() > best.size()) {
      best = std::move(in);
      const double w = static_cast<double>(best.size()) / static_cast<double>(n);
      const double miss = 1.0 - w * w * w;
      needed = miss <= 0.0 ? 0.0 : std::ceil(std::log(1.0 - cfg.confidence) / std::log(miss));
    }
  }
  if (best.size() < 3) return none;
  // Refit until the consensus set stops growing.
  std::optional<Affine> model = detail::fit_affine(m, best);
  for (int round = 0; model && round < 5; ++round) {
    auto in = detail::inliers_of(*model, m, cfg.threshold);
    if (in.size() <= best.size()) break;
    best = std::move(in);
    model = detail::fit_affine(m, best);
  }
  if (!model) return none;
  const int count = static_cast<int>(detail::inliers_of(*model, m, cfg.threshold).size());
  if (count < cfg.min_inliers) return none;
  return {count, model};
}

inline std::uint64_t pair_seed(const std::string& query, const std::string& candidate) {
  return mix_seed(hash_string(query), hash_string(candidate));
}

inline Verification match_and_verify(const std::vector<LocalFeature>& q, const std::vector<LocalFeature>& c,
                                     const RansacConfig& cfg, std::uint64_t seed) {
  return ransac_affine(mutual_matches(q, c), cfg, seed);
}

// ---------------------------------------------------------------------------
// Two-stage search

struct SearchConfig {
  bool rerank = true;
  std::size_t rerank_depth = 100;
  std::size_t top_k = 0;  // 0 = whole gallery
  RansacConfig ransac;
};

/// Global ranking over the whole gallery, then the first `rerank_depth`
/// candidates re-ordered by (inliers desc, cosine desc); the rest keep their
/// global order.
inline std::vector<Hit> search(const RetrievalIndex& idx, const Features& query, const std::string& query_id,
                               const SearchConfig& cfg = {}) {
  std::vector<Hit> hits = global_search(idx, query.global);
  if (cfg.rerank) {
    const std::size_t depth = std::min(cfg.rerank_depth, hits.size());
    parallel_for(depth, [&](std::size_t i) {
      hits[i].inliers = match_and_verify(query.locals, idx.locals[hits[i].index], cfg.ransac,
                                         pair_seed(query_id, hits[i].id))
                            .inliers;
    });
    std::stable_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(depth), [](const Hit& a, const Hit& b) {
      if (a.inliers != b.inliers) return a.inliers > b.inliers;
      return a.cosine > b.cosine;
    });
  }
  if (cfg.top_k > 0 && cfg.top_k < hits.size()) hits.resize(cfg.top_k);
  return hits;
}

}  // namespace dctir
