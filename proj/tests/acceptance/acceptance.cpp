// Acceptance run: one PASS/FAIL line per criterion, with the measured numbers.
// The exit status is nonzero when a criterion fails, except for failures
// listed as known gaps (a claim that cannot hold as stated; see README).

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <sstream>

#include "ap_oracle.hpp"
#include "dctir/commands.hpp"
#include "op_gradchecks.hpp"
#include "ransac_bench.hpp"

namespace fs = std::filesystem;
using namespace dctir;

namespace {

const fs::path kFixtures = DCTIR_FIXTURES;

struct Outcome {
  bool pass = true;
  bool known_gap = false;  // the only failing check is a documented gap
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) { return cmd::seconds_since(t0); }

// ---------------------------------------------------------------------------

void dct_exactness(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  double worst_rt = 0, worst_parseval = 0, worst_dc = 0;
  for (int t = 0; t < 1000; ++t) {
    PixelBlock b;
    for (auto& s : b.samples) s = rng.uniform(-128.0, 127.0);
    const CoeffBlock F = forward_dct(b);
    const PixelBlock back = inverse_dct(F);
    double e_pix = 0, e_coef = 0, mean = 0;
    for (int i = 0; i < kBlockArea; ++i) {
      worst_rt = std::max(worst_rt, std::abs(back.samples[i] - b.samples[i]));
      e_pix += b.samples[i] * b.samples[i];
      e_coef += F.coeffs[i] * F.coeffs[i];
      mean += b.samples[i];
    }
    mean /= kBlockArea;
    worst_parseval = std::max(worst_parseval, std::abs(e_pix - e_coef) / e_pix);
    worst_dc = std::max(worst_dc, std::abs(F.dc() - 8.0 * mean));
  }
  const double secs = seconds_since(t0);
  o.check(worst_rt < 1e-10, "round trip");
  o.check(worst_parseval <= 1e-9, "Parseval");
  o.check(worst_dc <= 1e-12, "DC");
  o.check(secs < 1.0, "runtime");
  o.detail << "round-trip " << worst_rt << ", Parseval rel " << worst_parseval << ", |DC - 8 mean| " << worst_dc
           << ", " << secs << " s";
}

std::vector<Plane> load_reference_planes(const fs::path& path) {
  const auto bytes = read_file(path);
  ByteReader rd(bytes, ErrorCode::TruncatedInput);
  std::vector<Plane> planes(rd.u32());
  for (auto& p : planes) {
    const int rows = static_cast<int>(rd.u32());
    const int cols = static_cast<int>(rd.u32());
    p = Plane(rows, cols);
    for (auto& v : p.data) v = rd.u8();
  }
  return planes;
}

void jpeg_codec(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(202);
  int exact = 0;
  for (int t = 0; t < 50; ++t) {
    const int h = 8 + static_cast<int>(rng.below(90)), w = 8 + static_cast<int>(rng.below(90));
    ImageTensor img(h, w);
    for (double& v : img.data) v = static_cast<double>(rng.below(256));
    EncodeOptions opt;
    opt.quality = 10 + static_cast<int>(rng.below(91));
    opt.subsampling = t % 2 ? ChromaSubsampling::Yuv420 : ChromaSubsampling::Yuv444;
    const JpegImage src = jpeg_from_pixels(img, opt);
    const JpegImage back = parse_jpeg(encode_jpeg(src));
    bool same = back.planes.size() == src.planes.size();
    for (std::size_t i = 0; same && i < src.planes.size(); ++i) same = back.planes[i].blocks == src.planes[i].blocks;
    exact += same;
  }
  int fixtures = 0;
  double worst = 0;
  for (const char* name : {"astronaut_420_q75", "coffee_444_q90", "chelsea_420_q60_rst", "camera_gray_q80"}) {
    const auto ours = decode_component_planes(parse_jpeg(read_file(kFixtures / (std::string(name) + ".jpg"))));
    const auto ref = load_reference_planes(kFixtures / (std::string(name) + ".planes"));
    bool ok = ours.size() == ref.size();
    for (std::size_t i = 0; ok && i < ours.size(); ++i) {
      ok = ours[i].rows == ref[i].rows && ours[i].cols == ref[i].cols;
      for (std::size_t k = 0; ok && k < ours[i].data.size(); ++k)
        worst = std::max(worst, std::abs(ours[i].data[k] - ref[i].data[k]));
    }
    fixtures += ok && worst <= 1.0;
  }
  const double secs = seconds_since(t0);
  o.check(exact == 50, "self round trip");
  o.check(fixtures >= 3 && worst <= 1.0, "reference decode");
  o.check(secs < 30.0, "runtime");
  o.detail << exact << "/50 exact round trips, " << fixtures << " photographic fixtures within " << worst
           << " of the reference decoder, " << secs << " s";
}

void shape_contract(Outcome& o) {
  Rng rng(303);
  ImageTensor img(448, 448);
  for (double& v : img.data) v = static_cast<double>(rng.below(256));
  img = quantize_to_u8(img);
  const DctCube full = to_dct_cube(img);
  const DctCube sel = select_channels(full, ChannelSelection::default_selection());
  const DctCube from_jpeg = cube_from_jpeg(parse_jpeg(encode_jpeg(img)));
  o.check(full.rows == 56 && full.cols == 56 && full.channels() == 192, "full cube");
  o.check(sel.rows == 56 && sel.cols == 56 && sel.channels() == 64, "selection");
  o.check(from_jpeg.rows == 56 && from_jpeg.cols == 56 && from_jpeg.channels() == 192, "cube from JPEG");
  ModelConfig cfg;  // defaults consume 56x56x64
  o.check(cfg.in_channels == 64 && cfg.input_size == 56 && model_image_size(cfg) == 448, "model defaults");
  o.detail << "448x448x3 -> " << full.rows << "x" << full.cols << "x" << full.channels() << " -> " << sel.rows << "x"
           << sel.cols << "x" << sel.channels() << " (also from JPEG coefficients: " << from_jpeg.rows << "x"
           << from_jpeg.cols << "x" << from_jpeg.channels() << ")";
}

void gradient_suite(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto checks = testing::run_op_gradient_suite();
  double worst = 0;
  int min_shapes = 1 << 30;
  for (const auto& c : checks) {
    worst = std::max(worst, c.worst);
    min_shapes = std::min(min_shapes, c.shapes);
    o.check(c.worst <= testing::kFdTolerance, c.op);
    o.check(c.shapes >= 5, c.op + " shapes");
  }
  const double secs = seconds_since(t0);
  o.check(secs < 120.0, "runtime");
  o.detail << checks.size() << " operations, >= " << min_shapes << " shapes each, worst relative error " << worst
           << ", " << secs << " s";
}

Tensor positive_map(Rng& rng, int c, int h, int w) {
  Tensor t({c, h, w});
  for (double& v : t.data) v = rng.uniform(0.01, 5.0);
  return t;
}

void gem_properties(Outcome& o) {
  Rng rng(404);
  double worst_mean = 0, worst_gap64 = 0;
  bool bounded = true;
  for (int t = 0; t < 200; ++t) {
    const int h = 1 + static_cast<int>(rng.below(7)), w = 1 + static_cast<int>(rng.below(7));
    const Tensor x = positive_map(rng, 4, h, w);
    const std::size_t n = static_cast<std::size_t>(h) * w;
    const auto mean = ops::gem(x, 1.0);
    const auto g64 = ops::gem(x, 64.0);
    for (int c = 0; c < 4; ++c) {
      const auto first = x.data.begin() + static_cast<std::ptrdiff_t>(c * n);
      const double lo = *std::min_element(first, first + static_cast<std::ptrdiff_t>(n));
      const double hi = *std::max_element(first, first + static_cast<std::ptrdiff_t>(n));
      double avg = 0;
      for (std::size_t i = 0; i < n; ++i) avg += first[static_cast<std::ptrdiff_t>(i)];
      avg /= static_cast<double>(n);
      worst_mean = std::max(worst_mean, std::abs(mean[c] - avg));
      worst_gap64 = std::max(worst_gap64, (hi - g64[c]) / hi);
      for (double p : {0.5, 1.0, 3.0, 10.0, 64.0}) {
        const double g = ops::gem(x, p)[c];
        bounded = bounded && g >= lo * (1 - 1e-12) && g <= hi * (1 + 1e-12);
      }
    }
  }
  o.check(worst_mean <= 1e-12, "p=1 mean");
  o.check(bounded, "min <= GeM <= max");
  const bool others_pass = o.pass;
  o.check(worst_gap64 <= 0.01, "p=64 within 1% of max");
  o.known_gap = others_pass && !o.pass;
  o.detail << "p=1 vs mean " << worst_mean << "; min <= GeM <= max " << (bounded ? "holds" : "violated")
           << "; p=64 worst gap to max " << 100 * worst_gap64 << "% (GeM_p >= max * N^(-1/p) is the tight bound, "
           << "so the gap reaches 1 - N^(-1/64) on maps of N positions)";
}

void ap_oracle(Outcome& o) {
  Rng rng(505);
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.below(20);
    std::vector<std::string> ranked;
    std::set<std::string> pos, ign;
    for (std::size_t i = 0; i < n; ++i) {
      ranked.push_back("i" + std::to_string(i));
      const double u = rng.uniform();
      if (u < 0.35) pos.insert(ranked.back());
      else if (u < 0.5) ign.insert(ranked.back());
    }
    if (pos.empty()) pos.insert(ranked[rng.below(n)]), ign.erase(*pos.begin());
    for (std::size_t i = n; i > 1; --i) std::swap(ranked[i - 1], ranked[rng.below(i)]);
    worst = std::max(worst, std::abs(average_precision(ranked, pos, ign) - testing::naive_ap(ranked, pos, ign)));
  }
  const double pnp = average_precision({"p1", "n", "p2"}, {"p1", "p2"}, {});
  o.check(worst <= 1e-12, "naive oracle");
  o.check(std::abs(pnp - 0.91667) <= 1e-5 && std::abs(pnp - 11.0 / 12.0) <= 1e-6, "[P,N,P]");

  const QueryTruth q{"q", std::nullopt, {"a"}, {"b"}, {"c"}};
  const auto e = resolve_labels(q, Difficulty::Easy);
  const auto m = resolve_labels(q, Difficulty::Medium);
  const auto h = resolve_labels(q, Difficulty::Hard);
  using S = std::set<std::string>;
  const bool table = e.positives == S{"a"} && e.ignored == S{"b", "c"} && m.positives == S{"a", "b"} &&
                     m.ignored == S{"c"} && h.positives == S{"b"} && h.ignored == S{"a", "c"};
  o.check(table, "E/M/H labels");
  o.detail << "1000 instances, worst |AP - oracle| " << worst << "; [P,N,P] = " << pnp << "; E/M/H table "
           << (table ? "matches" : "differs");
}

void ransac(Outcome& o) {
  const auto r = testing::run_ransac_benchmark(100);
  o.check(r.successes >= 95, "success rate");
  o.check(r.seconds < 10.0, "runtime");
  o.detail << r.successes << "/" << r.trials << " recovered (worst mean error " << r.worst_error << " px, fewest inliers "
           << r.fewest_inliers << "), " << r.seconds << " s";
}

// ---------------------------------------------------------------------------
// Desk-scale run shared by criteria 8 and 9.

struct DeskRun {
  fs::path root;
  RunConfig rc = desk_preset();
  SyntheticDataset ds;
  nlohmann::json train_log, report;
  Checkpoint ck;
  RetrievalIndex index;
};

DeskRun& desk() {
  static DeskRun run = [] {
    DeskRun d;
    d.root = fs::temp_directory_path() / "dctir_acceptance";
    fs::remove_all(d.root);
    d.ds = generate_synthetic(d.rc.synthetic);
    write_synthetic(d.ds, d.root / "data");
    d.train_log = cmd::train(d.root / "data", d.rc, d.root / "desk.ckpt");
    d.ck = load_checkpoint(d.root / "desk.ckpt");
    cmd::index(d.ck, d.root / "data" / "gallery", d.rc.extract, d.root / "desk.dcir");
    d.index = load_index(d.root / "desk.dcir");
    d.report = cmd::evaluate(d.index, d.ck, load_ground_truth(d.root / "data" / "ground_truth.json"),
                             d.root / "data" / "queries", d.rc, {Difficulty::Easy, Difficulty::Medium, Difficulty::Hard});
    return d;
  }();
  return run;
}

void end_to_end(Outcome& o) {
  DeskRun& d = desk();
  const double train_s = d.train_log["seconds"].get<double>();
  const auto& rows = d.report["rows"];
  const double g = rows[0]["mAP"]["M"].get<double>(), gl = rows[1]["mAP"]["M"].get<double>();
  o.check(d.ds.train.size() == 160 && d.ds.gallery.size() == 40 && d.ds.queries.size() == 12, "dataset size");
  o.check(d.train_log["epochs"].size() == 40, "40 epochs");
  o.check(train_s < 1800.0, "training time");
  o.check(g >= 0.85, "global mAP(M)");
  o.check(gl >= g - 0.02, "re-ranking drop");
  o.detail << d.ds.train.size() << " train / " << d.ds.gallery.size() << " gallery / " << d.ds.queries.size()
           << " queries; 40 epochs in " << train_s << " s; mAP E/M/H global " << rows[0]["mAP"]["E"].get<double>() << "/"
           << g << "/" << rows[0]["mAP"]["H"].get<double>() << ", global+local " << rows[1]["mAP"]["E"].get<double>()
           << "/" << gl << "/" << rows[1]["mAP"]["H"].get<double>();
}

void determinism(Outcome& o) {
  DeskRun& d = desk();
  // Short retrains on the desk data, with different worker counts.
  RunConfig rc = d.rc;
  rc.train.epochs = 2;
  const auto set = cmd::load_training_set(d.root / "data");
  setenv("DCTIR_THREADS", "1", 1);
  const auto a = serialize_checkpoint(train(set, rc.model, rc.selection, rc.train).checkpoint);
  unsetenv("DCTIR_THREADS");
  const auto b = serialize_checkpoint(train(set, rc.model, rc.selection, rc.train).checkpoint);
  o.check(a == b, "checkpoint bits");

  std::vector<GalleryImage> gallery;
  for (const auto& p : cmd::list_jpegs(d.root / "data" / "gallery")) gallery.push_back({p.stem().string(), read_file(p)});
  const auto idx_bytes = serialize_index(build_index(d.ck, gallery, d.rc.extract));
  o.check(idx_bytes == read_file(d.root / "desk.dcir"), "index bits");

  o.check(serialize_checkpoint(load_checkpoint(d.root / "desk.ckpt")) == read_file(d.root / "desk.ckpt") &&
              deserialize_checkpoint(read_file(d.root / "desk.ckpt")) == d.ck,
          "checkpoint round trip");
  o.check(deserialize_index(idx_bytes) == d.index, "index round trip");
  const auto stats = serialize_norm_stats(d.ck.stats);
  o.check(serialize_norm_stats(deserialize_norm_stats(stats)) == stats, "stats round trip");

  std::size_t images = 0, most = 0;
  bool above_tau = true;
  auto audit = [&](const std::vector<LocalFeature>& locals) {
    ++images;
    most = std::max(most, locals.size());
    for (const auto& f : locals) above_tau = above_tau && f.attention >= static_cast<float>(d.ck.params.tau);
  };
  for (const auto& l : d.index.locals) audit(l);
  for (const auto& q : d.ds.queries) audit(extract_jpeg(d.ck, q.jpeg, d.rc.extract).locals);
  o.check(most <= 200, "local cap");
  o.check(above_tau, "attention >= tau");
  o.detail << "checkpoints " << (a == b ? "identical" : "differ") << " across worker counts; index rebuild "
           << (idx_bytes == read_file(d.root / "desk.dcir") ? "identical" : "differs") << "; " << images
           << " images, at most " << most << " local features, all attention >= tau=" << d.ck.params.tau;
}

void stop_gradient(Outcome& o) {
  ModelConfig cfg;  // full default network
  cfg.num_classes = 17;
  const ModelParams p = init_params(cfg, 7);
  Rng rng(606);
  Tensor x({cfg.in_channels, cfg.input_size, cfg.input_size});
  for (double& v : x.data) v = rng.normal();
  const Graph gr = forward(p, cfg, x);
  Gradients g0(p), g1(p);
  backward(p, cfg, gr, 3, LossConfig{0.15, 0.0}, g0);
  backward(p, cfg, gr, 3, LossConfig{0.15, 1.0}, g1);
  std::size_t backbone = 0, identical = 0, head_changed = 0, heads = 0;
  for (std::size_t i = 0; i < p.names.size(); ++i) {
    const std::string& n = p.names[i];
    const bool head = n.rfind("att", 0) == 0 || n.rfind("aux", 0) == 0;
    if (head) {
      ++heads;
      head_changed += g0[i] != g1[i];
    } else {
      ++backbone;
      identical += g0[i] == g1[i];
    }
  }
  o.check(identical == backbone, "backbone bits");
  o.check(head_changed == heads, "attention heads receive gradient");
  o.detail << identical << "/" << backbone << " backbone/global tensors bitwise equal for beta 0 vs 1; " << head_changed
           << "/" << heads << " attention/aux tensors change";
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<void(Outcome&)>>> criteria = {
      {"DCT exactness", dct_exactness},
      {"JPEG codec", jpeg_codec},
      {"Shape contract", shape_contract},
      {"Gradient suite", gradient_suite},
      {"GeM properties", gem_properties},
      {"AP oracle equivalence", ap_oracle},
      {"RANSAC recovery", ransac},
      {"End-to-end desk retrieval", end_to_end},
      {"Determinism and persistence", determinism},
      {"Stop-gradient contract", stop_gradient},
  };
  int passed = 0, unexpected = 0, known = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.known_gap = false;
      o.detail << "exception: " << e.what();
    }
    const char* verdict = o.pass ? "PASS" : "FAIL";
    std::printf("%-4s %2zu. %s: %s (%.1f s)%s\n", verdict, i + 1, criteria[i].first, o.detail.str().c_str(),
                seconds_since(t0), !o.pass && o.known_gap ? " [known gap]" : "");
    std::fflush(stdout);
    if (o.pass) ++passed;
    else if (o.known_gap) ++known;
    else ++unexpected;
  }
  std::printf("%d/%zu criteria pass; %d known gap(s); %d unexpected failure(s)\n", passed, criteria.size(), known,
              unexpected);
  fs::remove_all(fs::temp_directory_path() / "dctir_acceptance");
  return unexpected == 0 ? 0 : 1;
}
