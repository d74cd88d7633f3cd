#pragma once

// Command implementations behind the `dctir` tool. Each returns its report as
// JSON and touches the filesystem only through the paths it is given, so the
// tool's main stays a thin argument parser.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dctir/config.hpp"
#include "dctir/eval.hpp"

namespace dctir::cmd {

namespace fs = std::filesystem;

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  const std::string text = j.dump(2) + "\n";
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

/// *.jpg / *.jpeg files directly inside `dir`, sorted by name.
inline std::vector<fs::path> list_jpegs(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorCode::IoError, "not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".jpg" || ext == ".jpeg") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// inspect

inline const char* marker_name(std::uint8_t m) {
  switch (m) {
    case 0xD8: return "SOI";
    case 0xD9: return "EOI";
    case 0xC0: return "SOF0";
    case 0xC1: return "SOF1";
    case 0xC2: return "SOF2";
    case 0xC4: return "DHT";
    case 0xDB: return "DQT";
    case 0xDA: return "SOS";
    case 0xDD: return "DRI";
    case 0xFE: return "COM";
    default: break;
  }
  if (m >= 0xE0 && m <= 0xEF) return "APPn";
  if (m >= 0xD0 && m <= 0xD7) return "RSTn";
  return "other";
}

inline nlohmann::json block_json(const QuantizedBlock& b) {
  nlohmann::json rows = nlohmann::json::array();
  for (int u = 0; u < kBlockSize; ++u) {
    std::vector<int> row(b.coeffs.begin() + u * kBlockSize, b.coeffs.begin() + (u + 1) * kBlockSize);
    rows.push_back(row);
  }
  return rows;
}

struct BlockRequest {
  std::size_t component = 0;
  int row = 0;
  int col = 0;
};

/// Markers, tables, geometry and per-component statistics of the quantized
/// coefficients; with `block`, one block's 8x8 quantized coefficients.
inline nlohmann::json inspect(std::span<const std::uint8_t> bytes, const std::optional<BlockRequest>& block = {}) {
  const JpegImage img = parse_jpeg(bytes);
  nlohmann::json j;
  j["width"] = img.width;
  j["height"] = img.height;
  j["subsampling"] = img.planes.size() == 1 ? "gray"
                     : img.subsampling() == ChromaSubsampling::Yuv420 ? "4:2:0"
                                                                       : "4:4:4";
  j["restart_interval"] = img.restart_interval;
  j["segments"] = nlohmann::json::array();
  for (const auto& s : img.segments)
    j["segments"].push_back({{"marker", marker_name(s.marker)}, {"code", s.marker}, {"offset", s.offset}, {"length", s.length}});
  j["quant_tables"] = nlohmann::json::array();
  for (std::size_t i = 0; i < img.quant_tables.size(); ++i)
    if (img.quant_tables[i]) j["quant_tables"].push_back({{"id", i}, {"values", img.quant_tables[i]->entries}});
  j["huffman_tables"] = nlohmann::json::array();
  for (const auto& t : img.huffman_tables)
    j["huffman_tables"].push_back(
        {{"class", t.cls == HuffmanClass::DC ? "DC" : "AC"}, {"id", t.id}, {"symbols", t.total()}});

  static constexpr const char* kKinds[] = {"Y", "Cb", "Cr"};
  j["components"] = nlohmann::json::array();
  for (const auto& p : img.planes) {
    long long dc_min = 0, dc_max = 0, nonzero = 0;
    double dc_sum = 0, ac_energy = 0;
    for (std::size_t b = 0; b < p.blocks.size(); ++b) {
      const auto& c = p.blocks[b].coeffs;
      dc_min = b == 0 ? c[0] : std::min<long long>(dc_min, c[0]);
      dc_max = b == 0 ? c[0] : std::max<long long>(dc_max, c[0]);
      dc_sum += c[0];
      for (int k = 1; k < kBlockArea; ++k) {
        ac_energy += static_cast<double>(c[k]) * c[k];
        nonzero += c[k] != 0;
      }
    }
    const double n = static_cast<double>(std::max<std::size_t>(1, p.blocks.size()));
    j["components"].push_back({{"id", p.id},
                               {"kind", kKinds[static_cast<int>(p.kind)]},
                               {"h", p.h},
                               {"v", p.v},
                               {"quant_table", p.quant_id},
                               {"dc_table", p.dc_table},
                               {"ac_table", p.ac_table},
                               {"block_rows", p.block_rows},
                               {"block_cols", p.block_cols},
                               {"dc_min", dc_min},
                               {"dc_max", dc_max},
                               {"dc_mean", dc_sum / n},
                               {"ac_energy", ac_energy},
                               {"nonzero_ac", nonzero}});
  }
  if (block) {
    require(block->component < img.planes.size(), ErrorCode::InvalidArgument,
            "component " + std::to_string(block->component) + " out of range");
    const auto& p = img.planes[block->component];
    require(block->row >= 0 && block->row < p.block_rows && block->col >= 0 && block->col < p.block_cols,
            ErrorCode::InvalidArgument,
            "block (" + std::to_string(block->row) + ", " + std::to_string(block->col) + ") outside the " +
                std::to_string(p.block_rows) + "x" + std::to_string(p.block_cols) + " grid");
    j["block"] = {{"component", block->component},
                  {"row", block->row},
                  {"col", block->col},
                  {"coefficients", block_json(p.block(block->row, block->col))}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// gen-synthetic

inline nlohmann::json gen_synthetic(const SyntheticSpec& spec, const fs::path& out) {
  const SyntheticDataset ds = generate_synthetic(spec);
  write_synthetic(ds, out);
  return {{"classes", ds.class_names.size()},
          {"train", ds.train.size()},
          {"val", ds.val.size()},
          {"gallery", ds.gallery.size()},
          {"queries", ds.queries.size()},
          {"ground_truth", (out / "ground_truth.json").string()}};
}

// ---------------------------------------------------------------------------
// train

/// dataset.json's train split when present, otherwise one subdirectory of
/// JPEGs per class (labels follow sorted directory names).
inline std::vector<LabeledImage> load_training_set(const fs::path& root) {
  if (fs::exists(root / "dataset.json")) return load_labeled_split(root, "train");
  require(fs::is_directory(root), ErrorCode::IoError, "not a directory: " + root.string());
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) classes.push_back(e.path());
  std::sort(classes.begin(), classes.end());
  std::vector<LabeledImage> out;
  for (std::size_t c = 0; c < classes.size(); ++c)
    for (const auto& p : list_jpegs(classes[c])) out.push_back({p.string(), {}, static_cast<int>(c)});
  parallel_for(out.size(), [&](std::size_t i) { out[i].image = decode_rgb(parse_jpeg(read_file(out[i].name))); });
  return out;
}

inline nlohmann::json epoch_json(const EpochLog& e) {
  return {{"epoch", e.epoch},       {"lr", e.lr},     {"loss", e.loss},       {"arcface", e.arcface},
          {"attention", e.attention}, {"accuracy", e.accuracy}, {"tau", e.tau}, {"seconds", e.seconds}};
}

inline nlohmann::json train(const fs::path& data, const RunConfig& rc, const fs::path& checkpoint_out,
                            const EpochCallback& on_epoch = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto set = load_training_set(data);
  const TrainResult r = dctir::train(set, rc.model, rc.selection, rc.train, on_epoch);
  save_checkpoint(checkpoint_out, r.checkpoint);
  nlohmann::json j;
  j["images"] = set.size();
  j["classes"] = r.checkpoint.config.num_classes;
  j["tau"] = r.checkpoint.params.tau;
  j["model_hash"] = to_hex(model_hash(r.checkpoint));
  j["epochs"] = nlohmann::json::array();
  for (const auto& e : r.log) j["epochs"].push_back(epoch_json(e));
  j["seconds"] = seconds_since(t0);
  return j;
}

// ---------------------------------------------------------------------------
// index / search / evaluate

inline nlohmann::json index(const Checkpoint& ck, const fs::path& gallery_dir, const ExtractConfig& cfg,
                            const fs::path& index_out) {
  std::vector<GalleryImage> gallery;
  for (const auto& p : list_jpegs(gallery_dir)) gallery.push_back({p.stem().string(), read_file(p)});
  const RetrievalIndex idx = build_index(ck, gallery, cfg);
  save_index(index_out, idx);
  std::size_t locals = 0;
  for (const auto& l : idx.locals) locals += l.size();
  return {{"images", idx.size()},
          {"global_dim", idx.global_dim},
          {"local_dim", idx.local_dim},
          {"local_features", locals},
          {"model_hash", to_hex(idx.model)}};
}

inline nlohmann::json hits_json(const std::vector<Hit>& hits) {
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t i = 0; i < hits.size(); ++i)
    arr.push_back({{"rank", i + 1},
                   {"id", hits[i].id},
                   {"cosine", hits[i].cosine},
                   {"inliers", hits[i].inliers},
                   {"global_rank", hits[i].global_rank + 1}});
  return arr;
}

inline nlohmann::json search(const RetrievalIndex& idx, const Checkpoint& ck, const fs::path& query,
                             const RunConfig& rc, const std::optional<std::array<double, 4>>& bbox = {}) {
  idx.require_model(ck);
  const Features f = extract_jpeg(ck, read_file(query), rc.extract, bbox);
  const std::string id = query.stem().string();
  const auto hits = dctir::search(idx, f, id, rc.search);
  return {{"query", id},
          {"rerank", rc.search.rerank},
          {"top_k", rc.search.top_k},
          {"local_features", f.locals.size()},
          {"results", hits_json(hits)}};
}

inline std::vector<std::string> ids_of(const std::vector<Hit>& hits) {
  std::vector<std::string> out;
  out.reserve(hits.size());
  for (const auto& h : hits) out.push_back(h.id);
  return out;
}

/// Every ground-truth query is read from `<queries_dir>/<name>.jpg`, cropped
/// to its box unless cropping is disabled, and ranked both by global cosine
/// and after re-ranking. The report carries mAP for both, per difficulty.
inline nlohmann::json evaluate(const RetrievalIndex& idx, const Checkpoint& ck, const GroundTruth& gt,
                               const fs::path& queries_dir, const RunConfig& rc,
                               const std::vector<Difficulty>& difficulties) {
  idx.require_model(ck);
  gt.validate();
  require(!gt.queries.empty(), ErrorCode::InvalidArgument, "ground truth lists no queries");
  std::map<std::string, std::vector<std::string>> global_rank, reranked;
  nlohmann::json per_query = nlohmann::json::array();
  for (const auto& q : gt.queries) {
    const auto bbox = rc.crop_queries ? q.bbox : std::nullopt;
    const Features f = extract_jpeg(ck, read_file(queries_dir / (q.name + ".jpg")), rc.extract, bbox);
    SearchConfig plain = rc.search;
    plain.rerank = false;
    plain.top_k = 0;
    SearchConfig verified = rc.search;
    verified.rerank = true;
    verified.top_k = 0;
    global_rank[q.name] = ids_of(dctir::search(idx, f, q.name, plain));
    const auto hits = dctir::search(idx, f, q.name, verified);
    reranked[q.name] = ids_of(hits);
    per_query.push_back({{"query", q.name}, {"local_features", f.locals.size()}, {"top", hits.front().id}});
  }
  nlohmann::json rows = nlohmann::json::array();
  nlohmann::json excluded = nlohmann::json::object();
  for (const auto& [method, rankings] : {std::pair{"global", &global_rank}, std::pair{"global+local", &reranked}}) {
    nlohmann::json row = {{"method", method}, {"mAP", nlohmann::json::object()}, {"per_query", nlohmann::json::object()}};
    for (const Difficulty d : difficulties) {
      const std::string letter = difficulty_letter(d);
      MapReport r;
      try {
        r = mean_average_precision(*rankings, gt, d);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::AllQueriesExcluded) throw;
        row["mAP"][letter] = nullptr;
        excluded[letter] = nlohmann::json::array();
        for (const auto& q : gt.queries) excluded[letter].push_back(q.name);
        continue;
      }
      row["mAP"][letter] = r.map;
      for (const auto& [name, ap] : r.per_query) row["per_query"][letter][name] = ap;
      excluded[letter] = r.excluded;
    }
    rows.push_back(row);
  }
  return {{"queries", gt.queries.size()},
          {"gallery", idx.size()},
          {"crop_queries", rc.crop_queries},
          {"rerank_depth", rc.search.rerank_depth},
          {"rows", rows},
          {"excluded", excluded},
          {"top_hits", per_query}};
}

// ---------------------------------------------------------------------------
// bench

struct BenchOptions {
  std::size_t images = 8;
  int repeats = 3;
  int batch_size = 4;
  std::uint64_t seed = 0;
};

inline std::pair<double, double> mean_variance(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double var = 0;
  for (double x : v) var += (x - m) * (x - m);
  return {m, v.size() > 1 ? var / static_cast<double>(v.size() - 1) : 0.0};
}

/// One variant of the backbone timed on fixed input tensors: an "epoch" is
/// one pass of forward, backward and SGD steps over all inputs.
inline nlohmann::json bench_variant(const std::string& name, const ModelConfig& cfg, const std::vector<Tensor>& inputs,
                                    const BenchOptions& opt) {
  std::vector<double> epoch_s, extract_s;
  for (int rep = 0; rep < opt.repeats; ++rep) {
    ModelParams params = init_params(cfg, opt.seed);
    TrainConfig tc;
    Sgd sgd(params, tc);
    Gradients grads(params);
    const LossConfig lc;
    auto t0 = std::chrono::steady_clock::now();
    for (std::size_t start = 0; start < inputs.size(); start += static_cast<std::size_t>(opt.batch_size)) {
      const std::size_t end = std::min(inputs.size(), start + static_cast<std::size_t>(opt.batch_size));
      grads.zero();
      for (std::size_t i = start; i < end; ++i) {
        const Graph gr = forward(params, cfg, inputs[i]);
        backward(params, cfg, gr, static_cast<int>(i % 2), lc, grads, 1.0 / static_cast<double>(end - start));
      }
      sgd.step(params, grads, tc.lr);
    }
    epoch_s.push_back(seconds_since(t0));
    t0 = std::chrono::steady_clock::now();
    for (const auto& x : inputs) forward(params, cfg, x);
    extract_s.push_back(seconds_since(t0) / static_cast<double>(inputs.size()));
  }
  const auto [em, ev] = mean_variance(epoch_s);
  const auto [xm, xv] = mean_variance(extract_s);
  return {{"name", name},
          {"channels", inputs.front().dim(0)},
          {"size", {inputs.front().dim(1), inputs.front().dim(2)}},
          {"stem_stride", cfg.stem_stride},
          {"stem_maxpool", cfg.stem_maxpool},
          {"images", inputs.size()},
          {"epoch_seconds", epoch_s},
          {"epoch_mean", em},
          {"epoch_variance", ev},
          {"extract_seconds_per_image", extract_s},
          {"extract_mean", xm},
          {"extract_variance", xv}};
}

/// DCT cubes at the model's input size against RGB pixels at four times the
/// side, fed through a stride-2 stem with max pooling so both variants reach
/// the same feature-map size after the stem.
inline nlohmann::json bench(const std::vector<ImageTensor>& images, const RunConfig& rc, const BenchOptions& opt) {
  require(!images.empty(), ErrorCode::EmptyDataset, "bench needs at least one image");
  require(opt.repeats >= 1 && opt.batch_size >= 1, ErrorCode::InvalidArgument, "repeats and batch size must be positive");
  const std::size_t n = std::min(opt.images, images.size());

  ModelConfig dct = rc.model;
  dct.in_channels = static_cast<int>(rc.selection.total());
  dct.stem_stride = 1;
  dct.stem_maxpool = false;
  std::vector<DctCube> cubes;
  for (std::size_t i = 0; i < n; ++i) cubes.push_back(select_channels(eval_cube(images[i], dct), rc.selection));
  const NormStats stats = compute_norm_stats(cubes);
  std::vector<Tensor> dct_inputs;
  for (const auto& c : cubes) dct_inputs.push_back(cube_tensor(normalize(c, stats)));

  ModelConfig rgb = dct;
  rgb.in_channels = 3;
  rgb.stem_stride = 2;
  rgb.stem_maxpool = true;
  rgb.input_size = dct.input_size * 4;
  std::vector<Tensor> rgb_inputs;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor t = image_tensor_chw(resize_for_eval(images[i], rgb.input_size));
    for (double& v : t.data) v = (v - 128.0) / 64.0;
    rgb_inputs.push_back(std::move(t));
  }

  nlohmann::json rows = nlohmann::json::array();
  rows.push_back(bench_variant("dct", dct, dct_inputs, opt));
  rows.push_back(bench_variant("rgb", rgb, rgb_inputs, opt));
  const double dct_area = static_cast<double>(dct.input_size) * dct.input_size;
  const double rgb_area = static_cast<double>(rgb.input_size) * rgb.input_size;
  return {{"rows", rows},
          {"stem_input_area_ratio", dct_area / rgb_area},
          {"repeats", opt.repeats},
          {"workers", worker_count()}};
}

}  // namespace dctir::cmd
