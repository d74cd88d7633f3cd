// dctir: inspect JPEG coefficients, generate synthetic data, train, index,
// search, evaluate and benchmark. Every command writes a JSON manifest, also
// when it fails.

#include <chrono>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "dctir/commands.hpp"

#ifndef DCTIR_VERSION
#define DCTIR_VERSION "dev"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dctir;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string output;
  std::string manifest;
};

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::UnsupportedFormat:
    case ErrorCode::InvalidArgument:
    case ErrorCode::InvalidSelection:
    case ErrorCode::InvalidDimensions:
      return 2;
    case ErrorCode::CorruptStream:
    case ErrorCode::TruncatedInput:
      return 3;
    default:
      return 1;
  }
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

/// Holds the manifest of one command and writes it however the command ends.
class Run {
 public:
  Run(std::string command, const Options& opt, std::vector<std::string> argv)
      : command_(std::move(command)), opt_(opt) {
    manifest_["command"] = command_;
    manifest_["argv"] = std::move(argv);
    manifest_["version"] = DCTIR_VERSION;
    manifest_["started"] = utc_now();
    manifest_["inputs"] = json::object();
    manifest_["outputs"] = json::object();
    manifest_["timings"] = json::object();
  }

  json& manifest() { return manifest_; }
  void input(const std::string& key, const fs::path& p) { manifest_["inputs"][key] = p.string(); }
  void output(const std::string& key, const fs::path& p) { manifest_["outputs"][key] = p.string(); }

  RunConfig config(RunConfig base = {}) {
    if (!opt_.config.empty()) {
      input("config", opt_.config);
      base = load_run_config(opt_.config, std::move(base));
    }
    return base;
  }

  void snapshot(const RunConfig& rc, std::optional<std::uint64_t> seed) {
    manifest_["config"] = to_json(rc);
    manifest_["seed"] = seed ? json(*seed) : json(nullptr);
  }

  /// Report to --output when given, stdout otherwise.
  void emit(const json& report) {
    if (opt_.output.empty()) {
      std::cout << report.dump(2) << "\n";
    } else {
      cmd::write_json(opt_.output, report);
      output("report", opt_.output);
    }
  }

  template <typename Fn>
  int operator()(Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    int code = 0;
    try {
      fn(*this);
      manifest_["status"] = "ok";
    } catch (const Error& e) {
      code = exit_code(e.code());
      fail(std::string(to_string(e.code())), e.what());
    } catch (const std::exception& e) {
      code = 1;
      fail("Internal", e.what());
    }
    manifest_["timings"]["total_seconds"] = cmd::seconds_since(t0);
    try {
      cmd::write_json(manifest_path(), manifest_);
    } catch (const std::exception& e) {
      std::cerr << "warning: cannot write manifest: " << e.what() << "\n";
    }
    return code;
  }

 private:
  void fail(const std::string& code, const std::string& message) {
    const json err = {{"code", code}, {"message", message}};
    manifest_["status"] = "error";
    manifest_["error"] = err;
    std::cerr << json{{"error", err}}.dump() << "\n";
  }

  fs::path manifest_path() const {
    if (!opt_.manifest.empty()) return opt_.manifest;
    if (opt_.output.empty()) return "dctir-" + command_ + ".manifest.json";
    if (command_ == "gen-synthetic") return fs::path(opt_.output) / "manifest.json";
    return opt_.output + ".manifest.json";
  }

  std::string command_;
  Options opt_;
  json manifest_;
};

void common_options(CLI::App* sub, Options& o, bool output_required = false) {
  sub->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  sub->add_option("--seed", o.seed, "Seed override");
  auto* out = sub->add_option("--output", o.output, "Output path");
  if (output_required) out->required();
  sub->add_option("--manifest", o.manifest, "Manifest path (default: next to the output)");
}

std::vector<ImageTensor> bench_images(const fs::path& dir, std::size_t limit) {
  std::vector<fs::path> files = cmd::list_jpegs(dir);
  std::vector<ImageTensor> out;
  if (files.empty()) {
    for (auto& li : cmd::load_training_set(dir)) {
      if (out.size() == limit) break;
      out.push_back(std::move(li.image));
    }
    return out;
  }
  for (const auto& f : files) {
    if (out.size() == limit) break;
    out.push_back(decode_rgb(parse_jpeg(read_file(f))));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compressed-domain image retrieval: DCT features straight from JPEG data."};
  app.require_subcommand(1);
  app.set_version_flag("--version", DCTIR_VERSION);
  const std::vector<std::string> args(argv, argv + argc);
  Options o;

  // inspect
  auto* inspect = app.add_subcommand("inspect", "Dump markers, tables and coefficient statistics of a JPEG");
  std::string inspect_path;
  std::vector<int> block;
  std::size_t component = 0;
  inspect->add_option("jpeg", inspect_path, "JPEG file")->required();
  inspect->add_option("--block", block, "Print one quantized block: ROW COL")->expected(2);
  inspect->add_option("--component", component, "Component index for --block (0 = Y)");
  common_options(inspect, o);

  // gen-synthetic
  auto* gen = app.add_subcommand("gen-synthetic", "Write a labeled synthetic dataset and its ground truth");
  std::optional<int> classes, per_class, image_size;
  gen->add_option("--classes", classes, "Number of classes");
  gen->add_option("--images-per-class", per_class, "Labeled images per class");
  gen->add_option("--image-size", image_size, "Image side in pixels");
  common_options(gen, o, true);

  // train
  auto* train = app.add_subcommand("train", "Train a model on a dataset directory");
  std::string data_dir;
  std::optional<int> epochs;
  train->add_option("data", data_dir, "Dataset directory (dataset.json or one folder per class)")->required();
  train->add_option("--epochs", epochs, "Epoch count override");
  common_options(train, o, true);

  // index
  auto* index = app.add_subcommand("index", "Extract features for a gallery directory and write an index");
  std::string ckpt_path, gallery_dir;
  index->add_option("checkpoint", ckpt_path, "Model checkpoint")->required();
  index->add_option("gallery", gallery_dir, "Directory of gallery JPEGs")->required();
  common_options(index, o, true);

  // search
  auto* search = app.add_subcommand("search", "Rank the gallery for one query image");
  std::string index_path, query_path;
  std::optional<std::size_t> top_k;
  std::optional<bool> rerank;
  std::vector<double> bbox;
  search->add_option("index", index_path, "Index file")->required();
  search->add_option("checkpoint", ckpt_path, "Model checkpoint")->required();
  search->add_option("query", query_path, "Query JPEG")->required();
  search->add_option("--top-k", top_k, "Number of results (0 = all)");
  search->add_flag("--rerank,!--no-rerank", rerank, "Geometric re-ranking of the top candidates");
  search->add_option("--bbox", bbox, "Crop the query first: X1 Y1 X2 Y2")->expected(4);
  common_options(search, o);

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "mAP with and without re-ranking against a ground truth");
  std::string gt_path, queries_dir, difficulty;
  bool no_crop = false;
  evaluate->add_option("index", index_path, "Index file")->required();
  evaluate->add_option("checkpoint", ckpt_path, "Model checkpoint")->required();
  evaluate->add_option("ground_truth", gt_path, "Ground-truth JSON")->required();
  evaluate->add_option("--queries", queries_dir, "Query image directory (default: queries/ next to the ground truth)");
  evaluate->add_option("--difficulty", difficulty, "Only one protocol")->check(CLI::IsMember({"E", "M", "H"}));
  evaluate->add_flag("--no-crop", no_crop, "Ignore query boxes");
  common_options(evaluate, o);

  // bench
  auto* bench = app.add_subcommand("bench", "Time DCT-cube input against RGB input on the same backbone");
  cmd::BenchOptions bo;
  bench->add_option("data", data_dir, "Directory of JPEGs or a dataset directory")->required();
  bench->add_option("--images", bo.images, "Images per epoch");
  bench->add_option("--repeats", bo.repeats, "Timing repeats");
  common_options(bench, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*inspect) {
    return Run("inspect", o, args)([&](Run& run) {
      run.input("jpeg", inspect_path);
      std::optional<cmd::BlockRequest> req;
      if (!block.empty()) req = cmd::BlockRequest{component, block[0], block[1]};
      run.emit(cmd::inspect(read_file(inspect_path), req));
    });
  }
  if (*gen) {
    return Run("gen-synthetic", o, args)([&](Run& run) {
      RunConfig rc = run.config();
      if (o.seed) rc.synthetic.seed = *o.seed;
      if (classes) rc.synthetic.classes = *classes;
      if (per_class) rc.synthetic.images_per_class = *per_class;
      if (image_size) rc.synthetic.image_size = *image_size;
      run.snapshot(rc, rc.synthetic.seed);
      const json summary = cmd::gen_synthetic(rc.synthetic, o.output);
      run.output("dataset", o.output);
      run.manifest()["summary"] = summary;
      std::cout << summary.dump(2) << "\n";
    });
  }
  if (*train) {
    return Run("train", o, args)([&](Run& run) {
      RunConfig rc = run.config();
      if (o.seed) rc.train.seed = *o.seed;
      if (epochs) rc.train.epochs = *epochs;
      run.snapshot(rc, rc.train.seed);
      run.input("data", data_dir);
      const json log = cmd::train(data_dir, rc, o.output, [](const EpochLog& e) {
        std::cerr << "epoch " << e.epoch << " loss " << e.loss << " acc " << e.accuracy << " tau " << e.tau << " ("
                  << e.seconds << " s)\n";
      });
      const fs::path log_path = o.output + ".log.json";
      cmd::write_json(log_path, log);
      run.output("checkpoint", o.output);
      run.output("log", log_path);
      run.manifest()["timings"]["train_seconds"] = log["seconds"];
    });
  }
  if (*index) {
    return Run("index", o, args)([&](Run& run) {
      const RunConfig rc = run.config();
      run.snapshot(rc, std::nullopt);
      run.input("checkpoint", ckpt_path);
      run.input("gallery", gallery_dir);
      const json summary = cmd::index(load_checkpoint(ckpt_path), gallery_dir, rc.extract, o.output);
      run.output("index", o.output);
      run.manifest()["summary"] = summary;
      std::cout << summary.dump(2) << "\n";
    });
  }
  if (*search) {
    return Run("search", o, args)([&](Run& run) {
      RunConfig rc = run.config();
      if (top_k) rc.search.top_k = *top_k;
      if (rerank) rc.search.rerank = *rerank;
      run.snapshot(rc, std::nullopt);
      run.input("index", index_path);
      run.input("checkpoint", ckpt_path);
      run.input("query", query_path);
      std::optional<std::array<double, 4>> box;
      if (!bbox.empty()) box = std::array<double, 4>{bbox[0], bbox[1], bbox[2], bbox[3]};
      run.emit(cmd::search(load_index(index_path), load_checkpoint(ckpt_path), query_path, rc, box));
    });
  }
  if (*evaluate) {
    return Run("evaluate", o, args)([&](Run& run) {
      RunConfig rc = run.config();
      if (no_crop) rc.crop_queries = false;
      run.snapshot(rc, std::nullopt);
      const fs::path qdir = queries_dir.empty() ? fs::path(gt_path).parent_path() / "queries" : fs::path(queries_dir);
      run.input("index", index_path);
      run.input("checkpoint", ckpt_path);
      run.input("ground_truth", gt_path);
      run.input("queries", qdir);
      std::vector<Difficulty> ds = {Difficulty::Easy, Difficulty::Medium, Difficulty::Hard};
      if (!difficulty.empty()) ds = {parse_difficulty(difficulty)};
      run.emit(cmd::evaluate(load_index(index_path), load_checkpoint(ckpt_path), load_ground_truth(gt_path), qdir, rc, ds));
    });
  }
  if (*bench) {
    return Run("bench", o, args)([&](Run& run) {
      const RunConfig rc = run.config();
      if (o.seed) bo.seed = *o.seed;
      run.snapshot(rc, bo.seed);
      run.input("data", data_dir);
      run.emit(cmd::bench(bench_images(data_dir, bo.images), rc, bo));
    });
  }
  return 2;
}
