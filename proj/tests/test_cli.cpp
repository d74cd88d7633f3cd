#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dctir/commands.hpp"

namespace dctir {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const fs::path kFixtures = DCTIR_FIXTURES;
const std::string kTool = DCTIR_TOOL;

struct Result {
  int code = -1;
  std::string out;
};

/// Runs the tool with `args` (already shell-quoted where needed), capturing
/// stdout; stderr goes to a side file.
Result run(const std::string& args, const fs::path& cwd) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" + kTool + "' " + args + " 2>stderr.txt";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("dctir_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Result tool(const std::string& args) { return run(args, dir_); }
  fs::path dir_;
};

// Small enough to train in a couple of seconds.
json tiny_config() {
  return json::parse(R"({
    "synthetic": {"classes": 2, "images_per_class": 6, "gallery_per_class": 4, "hard_per_class": 1,
                  "junk_per_class": 1, "queries_per_class": 2, "image_size": 64, "seed": 3},
    "model": {"input_size": 8, "stem_width": 8, "stages": [{"width": 8}, {"width": 12, "stride": 2}],
              "global_dim": 8, "attention_hidden": 4},
    "selection": {"lowest": [8, 4, 4]},
    "train": {"epochs": 2, "batch_size": 4, "grad_clip": 1.0, "seed": 5}
  })");
}

TEST_F(Cli, InspectConstantImageHasNoAcEnergy) {
  const Result r = tool("inspect '" + (kFixtures / "solid_16x16.jpg").string() + "'");
  ASSERT_EQ(r.code, 0);
  const json j = json::parse(r.out);
  for (const auto& c : j["components"]) EXPECT_EQ(c["ac_energy"].get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(dir_ / "dctir-inspect.manifest.json"));
}

TEST_F(Cli, InspectReportsEncoderTables) {
  ImageTensor img(24, 40);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<double>((i * 37) % 256);
  EncodeOptions opt;
  opt.quality = 63;
  const auto bytes = encode_jpeg(img, opt);
  write_file(dir_ / "self.jpg", bytes);
  const Result r = tool("inspect self.jpg");
  ASSERT_EQ(r.code, 0);
  const json j = json::parse(r.out);
  ASSERT_EQ(j["quant_tables"].size(), 2u);
  const QuantTable luma = scale_quant_table(jpeg_tables::kLuminanceQuant, 63);
  const QuantTable chroma = scale_quant_table(jpeg_tables::kChrominanceQuant, 63);
  EXPECT_EQ(j["quant_tables"][0]["values"].get<std::vector<int>>(), std::vector<int>(luma.entries.begin(), luma.entries.end()));
  EXPECT_EQ(j["quant_tables"][1]["values"].get<std::vector<int>>(),
            std::vector<int>(chroma.entries.begin(), chroma.entries.end()));
  EXPECT_EQ(j["width"], 40);
  EXPECT_EQ(j["subsampling"], "4:2:0");
}

TEST_F(Cli, InspectMatchesGoldenDump) {
  const Result r = tool("inspect '" + (kFixtures / "astronaut_420_q75.jpg").string() + "' --block 3 5");
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(json::parse(r.out), read_json(kFixtures / "astronaut_420_q75.inspect.json"));
}

TEST_F(Cli, ExitCodesAndErrorManifest) {
  auto bytes = read_file(kFixtures / "coffee_444_q90.jpg");
  write_file(dir_ / "garbage.jpg", std::vector<std::uint8_t>{'n', 'o', 'p', 'e'});
  Result r = tool("inspect garbage.jpg --output out.json");
  EXPECT_EQ(r.code, 3);
  json m = read_json(dir_ / "out.json.manifest.json");
  EXPECT_EQ(m["status"], "error");
  EXPECT_EQ(m["error"]["code"], "CorruptStream");
  std::ifstream err(dir_ / "stderr.txt");
  const json e = json::parse(err);
  EXPECT_EQ(e["error"]["code"], "CorruptStream");

  // Same stream announced as progressive.
  for (std::size_t i = 0; i + 1 < bytes.size(); ++i)
    if (bytes[i] == 0xFF && bytes[i + 1] == 0xC0) {
      bytes[i + 1] = 0xC2;
      break;
    }
  write_file(dir_ / "progressive.jpg", bytes);
  r = tool("inspect progressive.jpg");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(read_json(dir_ / "dctir-inspect.manifest.json")["error"]["code"], "UnsupportedFormat");

  EXPECT_EQ(tool("gen-synthetic --classes 1 --output data").code, 2);
  EXPECT_EQ(read_json(dir_ / "data" / "manifest.json")["status"], "error");
  EXPECT_EQ(tool("inspect '" + (kFixtures / "coffee_444_q90.jpg").string() + "' --block 99 0").code, 2);
  EXPECT_NE(tool("frobnicate").code, 0);
}

TEST_F(Cli, GenSyntheticCountsAndReproducibility) {
  ASSERT_EQ(tool("gen-synthetic --classes 4 --images-per-class 10 --image-size 48 --seed 9 --output a").code, 0);
  ASSERT_EQ(tool("gen-synthetic --classes 4 --images-per-class 10 --image-size 48 --seed 9 --output b").code, 0);
  std::size_t labeled = 0;
  for (const char* split : {"train", "val"})
    for (const auto& e : fs::recursive_directory_iterator(dir_ / "a" / split)) labeled += e.path().extension() == ".jpg";
  EXPECT_EQ(labeled, 40u);
  const json m = read_json(dir_ / "a" / "manifest.json");
  EXPECT_EQ(m["status"], "ok");
  EXPECT_EQ(m["seed"], 9);
  EXPECT_EQ(m["command"], "gen-synthetic");
  EXPECT_TRUE(m["timings"].contains("total_seconds"));
  for (const auto& e : fs::recursive_directory_iterator(dir_ / "a")) {
    if (!e.is_regular_file() || e.path().filename() == "manifest.json") continue;
    const auto rel = fs::relative(e.path(), dir_ / "a");
    EXPECT_EQ(read_file(e.path()), read_file(dir_ / "b" / rel)) << rel;
  }
  EXPECT_NO_THROW(load_ground_truth(dir_ / "a" / "ground_truth.json").validate());
}

TEST_F(Cli, TrainIndexSearchEvaluateBench) {
  cmd::write_json(dir_ / "tiny.json", tiny_config());
  const std::string cfg = " --config tiny.json";
  ASSERT_EQ(tool("gen-synthetic --output data" + cfg).code, 0);
  ASSERT_EQ(tool("train data --output m1.ckpt" + cfg).code, 0);
  ASSERT_EQ(tool("train data --output m2.ckpt" + cfg).code, 0);
  EXPECT_EQ(read_file(dir_ / "m1.ckpt"), read_file(dir_ / "m2.ckpt"));
  const json log = read_json(dir_ / "m1.ckpt.log.json");
  EXPECT_EQ(log["epochs"].size(), 2u);
  EXPECT_EQ(read_json(dir_ / "m1.ckpt.manifest.json")["seed"], 5);
  ASSERT_EQ(tool("train data --output m3.ckpt --seed 6" + cfg).code, 0);
  EXPECT_NE(read_file(dir_ / "m1.ckpt"), read_file(dir_ / "m3.ckpt"));

  ASSERT_EQ(tool("index m1.ckpt data/gallery --output g1.dcir" + cfg).code, 0);
  ASSERT_EQ(tool("index m1.ckpt data/gallery --output g2.dcir" + cfg).code, 0);
  EXPECT_EQ(read_file(dir_ / "g1.dcir"), read_file(dir_ / "g2.dcir"));
  const RetrievalIndex idx = load_index(dir_ / "g1.dcir");
  EXPECT_EQ(idx.size(), 8u);

  // Top-5 in descending (inliers, cosine) order.
  Result r = tool("search g1.dcir m1.ckpt data/queries/q0000.jpg --top-k 5" + cfg);
  ASSERT_EQ(r.code, 0);
  json s = json::parse(r.out);
  ASSERT_EQ(s["results"].size(), 5u);
  for (std::size_t i = 1; i < 5; ++i) {
    const auto& a = s["results"][i - 1];
    const auto& b = s["results"][i];
    EXPECT_TRUE(a["inliers"].get<int>() > b["inliers"].get<int>() ||
                (a["inliers"] == b["inliers"] && a["cosine"].get<double>() >= b["cosine"].get<double>()));
  }

  // --no-rerank reproduces the library's global ranking exactly.
  r = tool("search g1.dcir m1.ckpt data/queries/q0001.jpg --no-rerank" + cfg);
  ASSERT_EQ(r.code, 0);
  s = json::parse(r.out);
  const Checkpoint ck = load_checkpoint(dir_ / "m1.ckpt");
  const RunConfig rc = run_config_from_json(tiny_config());
  const auto global = global_search(idx, extract_jpeg(ck, read_file(dir_ / "data/queries/q0001.jpg"), rc.extract).global);
  ASSERT_EQ(s["results"].size(), global.size());
  for (std::size_t i = 0; i < global.size(); ++i) EXPECT_EQ(s["results"][i]["id"], global[i].id);

  // Wrong model for the index.
  EXPECT_EQ(tool("search g1.dcir m3.ckpt data/queries/q0001.jpg" + cfg).code, 1);
  EXPECT_EQ(read_json(dir_ / "dctir-search.manifest.json")["error"]["code"], "ChecksumMismatch");

  ASSERT_EQ(tool("evaluate g1.dcir m1.ckpt data/ground_truth.json --output report.json" + cfg).code, 0);
  const json rep = read_json(dir_ / "report.json");
  ASSERT_EQ(rep["rows"].size(), 2u);
  EXPECT_EQ(rep["rows"][0]["method"], "global");
  EXPECT_EQ(rep["rows"][1]["method"], "global+local");
  for (const auto& row : rep["rows"])
    for (const char* d : {"E", "M", "H"}) {
      const double v = row["mAP"][d].get<double>();
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  ASSERT_EQ(tool("evaluate g1.dcir m1.ckpt data/ground_truth.json --difficulty H --output h.json" + cfg).code, 0);
  EXPECT_EQ(read_json(dir_ / "h.json")["rows"][0]["mAP"].size(), 1u);

  ASSERT_EQ(tool("bench data/gallery --images 3 --output bench.json" + cfg).code, 0);
  const json b = read_json(dir_ / "bench.json");
  ASSERT_EQ(b["rows"].size(), 2u);
  EXPECT_EQ(b["rows"][0]["channels"], 16);  // the configured selection
  EXPECT_EQ(b["rows"][1]["channels"], 3);
  EXPECT_EQ(b["rows"][0]["size"], json::array({8, 8}));
  EXPECT_EQ(b["rows"][1]["size"], json::array({32, 32}));
  EXPECT_DOUBLE_EQ(b["stem_input_area_ratio"].get<double>(), 1.0 / 16.0);
  for (const auto& row : b["rows"]) {
    EXPECT_EQ(row["epoch_seconds"].size(), 3u);
    for (double t : row["epoch_seconds"]) EXPECT_GT(t, 0.0);
    EXPECT_GE(row["epoch_variance"].get<double>(), 0.0);
    EXPECT_GT(row["extract_mean"].get<double>(), 0.0);
  }
}

TEST_F(Cli, BenchDefaultShapes) {
  // Default model: 56x56 DCT cubes with 64 channels against 224x224 RGB.
  ASSERT_EQ(tool("gen-synthetic --classes 2 --images-per-class 1 --image-size 64 --output data").code, 0);
  ASSERT_EQ(tool("bench data/gallery --images 1 --repeats 2 --output bench.json").code, 0);
  const json b = read_json(dir_ / "bench.json");
  EXPECT_EQ(b["rows"][0]["channels"], 64);
  EXPECT_EQ(b["rows"][0]["size"], json::array({56, 56}));
  EXPECT_EQ(b["rows"][1]["channels"], 3);
  EXPECT_EQ(b["rows"][1]["size"], json::array({224, 224}));
  EXPECT_DOUBLE_EQ(b["stem_input_area_ratio"].get<double>(), 1.0 / 16.0);
}

TEST_F(Cli, DeskPipelineReachesPinnedAccuracy) {
  const std::string cfg = " --config '" + std::string(DCTIR_CONFIGS) + "/desk.json'";
  ASSERT_EQ(tool("gen-synthetic --output data" + cfg).code, 0);
  ASSERT_EQ(tool("train data --output desk.ckpt" + cfg).code, 0);
  ASSERT_EQ(tool("index desk.ckpt data/gallery --output desk.dcir" + cfg).code, 0);
  ASSERT_EQ(tool("evaluate desk.dcir desk.ckpt data/ground_truth.json --output report.json" + cfg).code, 0);
  const json rep = read_json(dir_ / "report.json");
  const double global_m = rep["rows"][0]["mAP"]["M"].get<double>();
  const double reranked_m = rep["rows"][1]["mAP"]["M"].get<double>();
  EXPECT_GE(global_m, 0.9);
  EXPECT_GE(reranked_m, 0.9);
}

}  // namespace
}  // namespace dctir
