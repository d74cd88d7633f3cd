#pragma once

// Desk-scale stand-in for a landmark dataset. Each class is one procedural
// scene (textured polygons and ellipses over a shaded background); every
// image of the class is that scene under a random affine view plus
// photometric jitter and noise, stored as baseline JPEG.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "dctir/eval.hpp"
#include "dctir/image.hpp"
#include "dctir/jpeg_codec.hpp"
#include "dctir/nn_train.hpp"
#include "dctir/rng.hpp"
#include "json.hpp"

namespace dctir {

struct SyntheticSpec {
  int classes = 17;
  int images_per_class = 50;  // labeled images, split into train / val
  double train_fraction = 0.8;
  int gallery_per_class = 10;  // easy + hard + junk
  int hard_per_class = 2;
  int junk_per_class = 2;
  int queries_per_class = 3;
  int image_size = 448;
  int quality = 90;
  int shapes_per_scene = 7;
  double noise_sigma = 3.0;
  std::uint64_t seed = 0;

  void validate() const {
    auto check = [](bool ok, const std::string& what) { require(ok, ErrorCode::InvalidArgument, "synthetic spec: " + what); };
    check(classes >= 2, "need at least 2 classes");
    check(images_per_class >= 1, "images_per_class must be positive");
    check(train_fraction > 0.0 && train_fraction <= 1.0, "train_fraction must be in (0, 1]");
    check(gallery_per_class >= 0 && hard_per_class >= 0 && junk_per_class >= 0 &&
              hard_per_class + junk_per_class <= gallery_per_class,
          "gallery split");
    check(queries_per_class >= 0, "queries_per_class must be non-negative");
    check(image_size >= 32 && image_size <= 4096, "image_size must be in [32, 4096]");
    check(quality >= 1 && quality <= 100, "quality must be in [1, 100]");
    check(shapes_per_scene >= 1 && noise_sigma >= 0, "scene parameters");
  }
};

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j, SyntheticSpec s = {}) {
  try {
    s.classes = j.value("classes", s.classes);
    s.images_per_class = j.value("images_per_class", s.images_per_class);
    s.train_fraction = j.value("train_fraction", s.train_fraction);
    s.gallery_per_class = j.value("gallery_per_class", s.gallery_per_class);
    s.hard_per_class = j.value("hard_per_class", s.hard_per_class);
    s.junk_per_class = j.value("junk_per_class", s.junk_per_class);
    s.queries_per_class = j.value("queries_per_class", s.queries_per_class);
    s.image_size = j.value("image_size", s.image_size);
    s.quality = j.value("quality", s.quality);
    s.shapes_per_scene = j.value("shapes_per_scene", s.shapes_per_scene);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

inline nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"classes", s.classes},
          {"images_per_class", s.images_per_class},
          {"train_fraction", s.train_fraction},
          {"gallery_per_class", s.gallery_per_class},
          {"hard_per_class", s.hard_per_class},
          {"junk_per_class", s.junk_per_class},
          {"queries_per_class", s.queries_per_class},
          {"image_size", s.image_size},
          {"quality", s.quality},
          {"shapes_per_scene", s.shapes_per_scene},
          {"noise_sigma", s.noise_sigma},
          {"seed", s.seed}};
}

namespace synth {

enum class Texture { Flat, Stripes, Checker, Rings };

struct Shape {
  bool ellipse = false;
  std::vector<std::array<double, 2>> vertices;  // convex, counter-clockwise
  double cx = 0, cy = 0, rx = 0, ry = 0, angle = 0;
  std::array<double, 3> color{};
  Texture texture = Texture::Flat;
  double freq = 10, orient = 0, amplitude = 0;

  bool contains(double u, double v) const {
    if (ellipse) {
      const double c = std::cos(angle), s = std::sin(angle);
      const double du = u - cx, dv = v - cy;
      const double a = (c * du + s * dv) / rx, b = (-s * du + c * dv) / ry;
      return a * a + b * b <= 1.0;
    }
    for (std::size_t i = 0; i < vertices.size(); ++i) {
      const auto& p = vertices[i];
      const auto& q = vertices[(i + 1) % vertices.size()];
      if ((q[0] - p[0]) * (v - p[1]) - (q[1] - p[1]) * (u - p[0]) < 0) return false;
    }
    return true;
  }

  double shade(double u, double v) const {
    const double t = std::cos(orient) * u + std::sin(orient) * v;
    switch (texture) {
      case Texture::Flat: return 0.0;
      case Texture::Stripes: return amplitude * std::sin(2 * std::numbers::pi * freq * t);
      case Texture::Checker: {
        const double w = -std::sin(orient) * u + std::cos(orient) * v;
        const int k = static_cast<int>(std::floor(t * freq)) + static_cast<int>(std::floor(w * freq));
        return (k % 2 == 0) ? amplitude : -amplitude;
      }
      case Texture::Rings: {
        const double r = std::hypot(u - cx, v - cy);
        return amplitude * std::cos(2 * std::numbers::pi * freq * r);
      }
    }
    return 0.0;
  }
};

struct Scene {
  std::array<double, 3> bg_a{}, bg_b{};
  double bg_orient = 0, bg_freq = 2, bg_amp = 10;
  std::vector<Shape> shapes;

  std::array<double, 3> color(double u, double v) const {
    const double t = 0.5 + 0.5 * std::tanh(std::cos(bg_orient) * (u - 0.5) + std::sin(bg_orient) * (v - 0.5));
    const double ripple = bg_amp * std::sin(2 * std::numbers::pi * bg_freq * (u + 0.7 * v));
    std::array<double, 3> c;
    for (int k = 0; k < 3; ++k) c[k] = bg_a[k] * (1 - t) + bg_b[k] * t + ripple;
    for (const auto& s : shapes)
      if (s.contains(u, v)) {
        const double d = s.shade(u, v);
        for (int k = 0; k < 3; ++k) c[k] = s.color[k] + d;
      }
    return c;
  }
};

inline std::array<double, 3> random_color(Rng& rng) { return {rng.uniform(20, 235), rng.uniform(20, 235), rng.uniform(20, 235)}; }

inline Scene make_scene(std::uint64_t seed, int shapes) {
  Rng rng(seed);
  Scene sc;
  sc.bg_a = random_color(rng);
  sc.bg_b = random_color(rng);
  sc.bg_orient = rng.uniform(0, 2 * std::numbers::pi);
  sc.bg_freq = rng.uniform(1, 4);
  sc.bg_amp = rng.uniform(5, 15);
  for (int i = 0; i < shapes; ++i) {
    Shape s;
    s.ellipse = rng.coin(0.3);
    s.cx = rng.uniform(0.12, 0.88);
    s.cy = rng.uniform(0.12, 0.88);
    if (s.ellipse) {
      s.rx = rng.uniform(0.06, 0.2);
      s.ry = rng.uniform(0.06, 0.2);
      s.angle = rng.uniform(0, std::numbers::pi);
    } else {
      const int n = 3 + static_cast<int>(rng.below(4));
      const double r = rng.uniform(0.08, 0.22), phase = rng.uniform(0, 2 * std::numbers::pi);
      for (int k = 0; k < n; ++k) {
        const double a = phase + 2 * std::numbers::pi * (k + rng.uniform(-0.25, 0.25)) / n;
        const double rr = r * rng.uniform(0.75, 1.0);
        s.vertices.push_back({s.cx + rr * std::cos(a), s.cy + rr * std::sin(a)});
      }
    }
    s.color = random_color(rng);
    s.texture = static_cast<Texture>(rng.below(4));
    s.freq = rng.uniform(8, 28);
    s.orient = rng.uniform(0, std::numbers::pi);
    s.amplitude = rng.uniform(20, 55);
    sc.shapes.push_back(std::move(s));
  }
  return sc;
}

struct ViewJitter {
  double rotation_deg = 20;
  double scale_lo = 0.8, scale_hi = 1.25;
  double anisotropy = 0.08;
  double translation = 0.1;
  double contrast = 0.15;
  double brightness = 15;
  double noise = 3;
  double occlusion = 0.0;  // occluder area fraction, 0 for none
};

inline ViewJitter easy_view(double noise) { return {20, 0.8, 1.25, 0.08, 0.1, 0.15, 15, noise, 0.0}; }
inline ViewJitter hard_view(double noise) { return {45, 0.6, 1.6, 0.15, 0.15, 0.3, 30, 2.5 * noise, 0.25}; }

/// Renders `primary` (and optionally `secondary` to the right of `split`,
/// a fraction of the width) under one random view.
inline ImageTensor render(const Scene& primary, const Scene* secondary, double split, int size, const ViewJitter& j,
                          Rng& rng) {
  const double theta = rng.uniform(-j.rotation_deg, j.rotation_deg) * std::numbers::pi / 180;
  const double s = rng.uniform(j.scale_lo, j.scale_hi);
  const double an = std::exp(rng.uniform(-j.anisotropy, j.anisotropy));
  const double tx = rng.uniform(-j.translation, j.translation), ty = rng.uniform(-j.translation, j.translation);
  const double contrast = 1 + rng.uniform(-j.contrast, j.contrast);
  const double bright = rng.uniform(-j.brightness, j.brightness);
  // Inverse map from image to scene: q = 0.5 + R^T diag(1/(s an), an/s) (p - 0.5 - t)
  const double c = std::cos(theta), sn = std::sin(theta);
  const double ix = 1.0 / (s * an), iy = an / s;

  double ox0 = 0, oy0 = 0, ox1 = 0, oy1 = 0;
  if (j.occlusion > 0) {
    const double side = std::sqrt(j.occlusion);
    ox0 = rng.uniform(0, 1 - side);
    oy0 = rng.uniform(0, 1 - side);
    ox1 = ox0 + side;
    oy1 = oy0 + side;
  }
  const double occ_gray = rng.uniform(60, 200);

  ImageTensor img(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      std::array<double, 3> acc{};
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          const double px = (x + 0.25 + 0.5 * sx) / size, py = (y + 0.25 + 0.5 * sy) / size;
          const double dx = (px - 0.5 - tx) * ix, dy = (py - 0.5 - ty) * iy;
          const double u = 0.5 + c * dx + sn * dy, v = 0.5 - sn * dx + c * dy;
          const Scene& sc = (secondary && px > split) ? *secondary : primary;
          const auto col = sc.color(u, v);
          for (int k = 0; k < 3; ++k) acc[k] += col[k] / 4;
        }
      const double fx = (x + 0.5) / size, fy = (y + 0.5) / size;
      const bool occluded = j.occlusion > 0 && fx >= ox0 && fx < ox1 && fy >= oy0 && fy < oy1;
      for (int k = 0; k < 3; ++k) {
        const double base = occluded ? occ_gray : acc[k];
        img.at(y, x, k) = std::clamp(128 + contrast * (base - 128) + bright + rng.normal(0, j.noise), 0.0, 255.0);
      }
    }
  return quantize_to_u8(img);
}

}  // namespace synth

struct SyntheticFile {
  std::string path;  // relative to the dataset root
  std::string id;    // file stem; gallery/query ids used in ground truth
  int label = -1;    // class index for labeled and query images; owning class for gallery items
  std::vector<std::uint8_t> jpeg;
};

struct SyntheticDataset {
  SyntheticSpec spec;
  std::vector<std::string> class_names;
  std::vector<SyntheticFile> train, val, gallery, queries;
  GroundTruth truth;
};

inline std::string class_name(int c) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "class%02d", c);
  return buf;
}

inline std::string numbered(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%04zu", prefix, i);
  return buf;
}

/// Gallery per class: easy views, `hard_per_class` hard views (stronger
/// jitter and an occluder), and `junk_per_class` half-and-half composites with
/// the next class, which are junk for both classes. Queries carry a bbox
/// covering the central 80% of the frame.
inline SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticDataset ds;
  ds.spec = spec;
  std::vector<synth::Scene> scenes;
  for (int c = 0; c < spec.classes; ++c) {
    ds.class_names.push_back(class_name(c));
    scenes.push_back(synth::make_scene(mix_seed(spec.seed, hash_string("scene") + static_cast<std::uint64_t>(c)),
                                       spec.shapes_per_scene));
  }
  EncodeOptions enc;
  enc.quality = spec.quality;
  enc.subsampling = ChromaSubsampling::Yuv420;
  const int n_train = std::max(1, static_cast<int>(std::lround(spec.images_per_class * spec.train_fraction)));
  const int n_easy = spec.gallery_per_class - spec.hard_per_class - spec.junk_per_class;

  struct GalleryItem {
    SyntheticFile file;
    enum { Easy, Hard, Junk } kind;
    int other = -1;
  };
  std::vector<GalleryItem> gallery;

  for (int c = 0; c < spec.classes; ++c) {
    Rng rng(mix_seed(spec.seed, hash_string("views") + static_cast<std::uint64_t>(c)));
    const auto easy = synth::easy_view(spec.noise_sigma);
    for (int i = 0; i < spec.images_per_class; ++i) {
      const ImageTensor img = synth::render(scenes[c], nullptr, 1.0, spec.image_size, easy, rng);
      SyntheticFile f;
      const bool is_train = i < n_train;
      f.id = ds.class_names[c] + "_" + std::to_string(i);
      f.path = std::string(is_train ? "train/" : "val/") + ds.class_names[c] + "/" + f.id + ".jpg";
      f.label = c;
      f.jpeg = encode_jpeg(img, enc);
      (is_train ? ds.train : ds.val).push_back(std::move(f));
    }
    for (int i = 0; i < spec.gallery_per_class; ++i) {
      GalleryItem g;
      g.file.label = c;
      if (i < n_easy) {
        g.kind = GalleryItem::Easy;
        g.file.jpeg = encode_jpeg(synth::render(scenes[c], nullptr, 1.0, spec.image_size, easy, rng), enc);
      } else if (i < n_easy + spec.hard_per_class) {
        g.kind = GalleryItem::Hard;
        g.file.jpeg = encode_jpeg(
            synth::render(scenes[c], nullptr, 1.0, spec.image_size, synth::hard_view(spec.noise_sigma), rng), enc);
      } else {
        g.kind = GalleryItem::Junk;
        g.other = (c + 1) % spec.classes;
        g.file.jpeg = encode_jpeg(synth::render(scenes[c], &scenes[g.other], 0.5, spec.image_size, easy, rng), enc);
      }
      gallery.push_back(std::move(g));
    }
    for (int i = 0; i < spec.queries_per_class; ++i) {
      SyntheticFile f;
      f.label = c;
      f.jpeg = encode_jpeg(synth::render(scenes[c], nullptr, 1.0, spec.image_size, easy, rng), enc);
      ds.queries.push_back(std::move(f));
    }
  }

  // Shuffle gallery so ids carry no class order.
  Rng shuffle(mix_seed(spec.seed, hash_string("gallery-order")));
  for (std::size_t i = gallery.size(); i > 1; --i) std::swap(gallery[i - 1], gallery[shuffle.below(i)]);
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    gallery[i].file.id = numbered("g", i);
    gallery[i].file.path = "gallery/" + gallery[i].file.id + ".jpg";
    ds.truth.gallery.push_back(gallery[i].file.id);
  }
  const double lo = 0.1 * spec.image_size, hi = 0.9 * spec.image_size;
  for (std::size_t i = 0; i < ds.queries.size(); ++i) {
    SyntheticFile& f = ds.queries[i];
    f.id = numbered("q", i);
    f.path = "queries/" + f.id + ".jpg";
    QueryTruth q;
    q.name = f.id;
    q.bbox = std::array<double, 4>{lo, lo, hi, hi};
    for (const auto& g : gallery) {
      if (g.kind == GalleryItem::Junk && (g.file.label == f.label || g.other == f.label)) {
        q.junk.push_back(g.file.id);
      } else if (g.file.label == f.label) {
        (g.kind == GalleryItem::Easy ? q.easy : q.hard).push_back(g.file.id);
      }
    }
    ds.truth.queries.push_back(std::move(q));
  }
  for (auto& g : gallery) ds.gallery.push_back(std::move(g.file));
  ds.truth.validate();
  return ds;
}

inline void write_bytes(const std::filesystem::path& p, const std::string& s) {
  write_file(p, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

/// Layout: train/<class>/*.jpg, val/<class>/*.jpg, gallery/*.jpg,
/// queries/*.jpg, dataset.json (spec, classes, labeled lists) and
/// ground_truth.json.
inline void write_synthetic(const SyntheticDataset& ds, const std::filesystem::path& root) {
  nlohmann::json meta;
  meta["spec"] = to_json(ds.spec);
  meta["classes"] = ds.class_names;
  auto listing = [&](const std::vector<SyntheticFile>& files) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& f : files) {
      write_file(root / f.path, f.jpeg);
      arr.push_back({{"path", f.path}, {"label", f.label}});
    }
    return arr;
  };
  meta["train"] = listing(ds.train);
  meta["val"] = listing(ds.val);
  meta["gallery"] = listing(ds.gallery);
  meta["queries"] = listing(ds.queries);
  write_bytes(root / "dataset.json", meta.dump(2) + "\n");
  save_ground_truth(root / "ground_truth.json", ds.truth);
}

/// Labeled split ("train" or "val") listed in dataset.json, decoded to pixels.
inline std::vector<LabeledImage> load_labeled_split(const std::filesystem::path& root, const std::string& split) {
  const auto bytes = read_file(root / "dataset.json");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("dataset.json: ") + e.what());
  }
  require(meta.contains(split), ErrorCode::InvalidArgument, "dataset.json has no \"" + split + "\" list");
  std::vector<LabeledImage> out;
  for (const auto& e : meta[split]) {
    LabeledImage li;
    li.name = e.at("path").get<std::string>();
    li.label = e.at("label").get<int>();
    out.push_back(std::move(li));
  }
  parallel_for(out.size(), [&](std::size_t i) { out[i].image = decode_rgb(parse_jpeg(read_file(root / out[i].name))); });
  return out;
}

}  // namespace dctir
