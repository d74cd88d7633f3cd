#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <string>

#include "dctir/nn_checkpoint.hpp"
#include "dctir/nn_model.hpp"
#include "dctir/nn_train.hpp"
#include "dctir/synthetic.hpp"
#include "gradcheck.hpp"

namespace dctir {
namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.in_channels = 4;
  c.input_size = 6;
  c.stem_width = 4;
  c.stages = {{4, 1, 1}, {5, 1, 2}};
  c.global_dim = 5;
  c.attention_hidden = 3;
  c.num_classes = 3;
  return c;
}

Tensor random_input(const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x({c.in_channels, c.input_size, c.input_size});
  for (double& v : x.data) v = rng.normal();
  return x;
}

// Zero biases put ReLU inputs exactly on the kink wherever a feature map is
// all zeros, where finite differences are meaningless; move them off it.
ModelParams jittered_params(const ModelConfig& c, std::uint64_t seed) {
  ModelParams p = init_params(c, seed);
  Rng rng(seed + 100);
  for (std::size_t i = 0; i < p.tensors.size(); ++i)
    if (!is_weight_name(p.names[i]) && p.names[i] != "arc.gamma")
      for (double& v : p.tensors[i].data) v = rng.normal(0.0, 0.1);
  return p;
}

bool is_attention_side(const std::string& name) {
  return name.rfind("att", 0) == 0 || name.rfind("aux", 0) == 0;
}

Gradients analytic(const ModelParams& p, const ModelConfig& c, const Tensor& x, int label, double beta) {
  Gradients g(p);
  backward(p, c, forward(p, c, x), label, LossConfig{0.15, beta}, g);
  return g;
}

TEST(ModelGradients, EveryParameterMatchesFiniteDifferences) {
  for (const bool maxpool : {false, true}) {
    ModelConfig c = tiny_config();
    c.stem_maxpool = maxpool;
    if (maxpool) c.input_size = 8;
    for (std::uint64_t seed : {1u, 2u}) {
      ModelParams p = jittered_params(c, seed);
      const Tensor x = random_input(c, seed + 10);
      const int label = static_cast<int>(seed % 3);
      // Backbone and global head against the global loss alone (the attention
      // loss does depend on the backbone numerically; the stop-gradient
      // deliberately ignores that path). Attention-side params against the
      // full loss.
      const Gradients g0 = analytic(p, c, x, label, 0.0);
      const Gradients g1 = analytic(p, c, x, label, 1.0);
      for (std::size_t i = 0; i < p.tensors.size(); ++i) {
        const bool att = is_attention_side(p.names[i]);
        const LossConfig lc{0.15, att ? 1.0 : 0.0};
        const auto numeric = testing::numeric_gradient(p.tensors[i].data, [&] {
          return evaluate_loss(p, forward(p, c, x), label, lc).total;
        });
        const double err = testing::relative_error(att ? g1[i] : g0[i], numeric);
        EXPECT_LE(err, testing::kFdTolerance) << p.names[i] << " maxpool=" << maxpool << " seed=" << seed;
      }
    }
  }
}

TEST(ModelGradients, BackboneIsBitIdenticalAcrossBeta) {
  const ModelConfig c = tiny_config();
  const ModelParams p = init_params(c, 4);
  const Tensor x = random_input(c, 5);
  const Gradients g0 = analytic(p, c, x, 1, 0.0);
  const Gradients g1 = analytic(p, c, x, 1, 1.0);
  const Gradients g7 = analytic(p, c, x, 1, 7.5);
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    if (is_attention_side(p.names[i])) continue;
    EXPECT_EQ(g0[i], g1[i]) << p.names[i];
    EXPECT_EQ(g0[i], g7[i]) << p.names[i];
  }
}

TEST(ModelGradients, BetaZeroLeavesAttentionSideUntouched) {
  const ModelConfig c = tiny_config();
  const ModelParams p = init_params(c, 6);
  const Gradients g = analytic(p, c, random_input(c, 7), 2, 0.0);
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    if (!is_attention_side(p.names[i])) continue;
    for (double v : g[i]) EXPECT_EQ(v, 0.0) << p.names[i];
  }
}

TEST(ModelGradients, BackwardWithoutForward) {
  const ModelConfig c = tiny_config();
  const ModelParams p = init_params(c, 1);
  Gradients g(p);
  try {
    backward(p, c, Graph{}, 0, {}, g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::GraphNotBuilt);
  }
}

TEST(ModelForward, ShapesAndInvariants) {
  const ModelConfig c = tiny_config();
  const ModelParams p = init_params(c, 3);
  for (std::uint64_t s = 0; s < 20; ++s) {
    Tensor x = random_input(c, s);
    for (double& v : x.data) v *= 1.0 + static_cast<double>(s);
    const Graph g = forward(p, c, x);
    EXPECT_EQ(g.S.shape, (std::vector<int>{4, 6, 6}));
    EXPECT_EQ(g.D.shape, (std::vector<int>{5, 3, 3}));
    EXPECT_EQ(g.A.shape, (std::vector<int>{1, 6, 6}));
    EXPECT_NEAR(ops::l2_norm(g.g), 1.0, 1e-6);
    for (double a : g.A.data) EXPECT_GT(a, 0.0);
  }
  EXPECT_THROW(forward(p, c, Tensor({3, 6, 6})), Error);
}

TEST(ModelForward, DefaultConfigShapes) {
  const ModelConfig c;
  EXPECT_EQ(c.in_channels, 64);
  EXPECT_EQ(c.input_size, 56);
  EXPECT_EQ(c.shallow_stride(), 1);
  EXPECT_EQ(c.shallow_channels(), 128);
  EXPECT_EQ(c.deep_channels(), 256);
  const auto shapes = parameter_shapes(c);
  EXPECT_EQ(shapes.front().second, (std::vector<int>{64, 64, 3, 3}));  // 3x3 stride-1 stem, no pooling
  bool found_whiten = false;
  for (const auto& [name, shape] : shapes)
    if (name == "whiten.w") {
      EXPECT_EQ(shape, (std::vector<int>{128, 256}));
      found_whiten = true;
    }
  EXPECT_TRUE(found_whiten);
}

TEST(ModelConfigTest, Validation) {
  ModelConfig c = tiny_config();
  c.shallow_stage = 1;
  EXPECT_THROW(c.validate(), Error);
  c = tiny_config();
  c.gem_p = 0;
  EXPECT_THROW(c.validate(), Error);
  c = tiny_config();
  c.deep_stage = 5;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Training, LearningRateSchedule) {
  const TrainConfig tc;
  for (int e = 1; e <= 40; ++e) {
    const double expect = e <= 10 ? 0.1 : e <= 20 ? 0.01 : e <= 30 ? 0.001 : 0.0001;
    EXPECT_NEAR(learning_rate(tc, e), expect, expect * 1e-12) << e;
  }
  EXPECT_EQ(tc.epochs, 40);
  EXPECT_EQ(tc.batch_size, 32);
  EXPECT_DOUBLE_EQ(tc.momentum, 0.9);
  EXPECT_DOUBLE_EQ(tc.weight_decay, 1e-4);
  EXPECT_DOUBLE_EQ(tc.margin, 0.15);
  EXPECT_DOUBLE_EQ(tc.beta, 1.0);
  EXPECT_DOUBLE_EQ(kInitialGamma, 30.0);
}

TEST(Training, Median) {
  EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
  EXPECT_DOUBLE_EQ(median({4, 1, 3, 2}), 2.5);
  EXPECT_THROW(median({}), Error);
}

std::vector<LabeledImage> tiny_set(int classes, int per_class, int size, std::uint64_t seed) {
  SyntheticSpec s;
  s.classes = classes;
  s.images_per_class = per_class;
  s.train_fraction = 1.0;
  s.gallery_per_class = 0;
  s.hard_per_class = 0;
  s.junk_per_class = 0;
  s.queries_per_class = 0;
  s.image_size = size;
  s.seed = seed;
  std::vector<LabeledImage> out;
  for (const auto& f : generate_synthetic(s).train)
    out.push_back({f.id, decode_rgb(parse_jpeg(f.jpeg)), f.label});
  return out;
}

ModelConfig desk_tiny() {
  ModelConfig c;
  c.input_size = 4;
  c.stem_width = 8;
  c.stages = {{8, 1, 1}, {12, 1, 2}};
  c.global_dim = 8;
  c.attention_hidden = 4;
  return c;
}

TrainConfig quick_train(int epochs) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 4;
  tc.seed = 11;
  return tc;
}

TEST(Training, OneEpochSmoke) {
  const auto data = tiny_set(2, 4, 40, 3);
  const ChannelSelection sel = ChannelSelection::lowest(4, 2, 2);
  const TrainResult r = train(data, desk_tiny(), sel, quick_train(1));
  ASSERT_EQ(r.log.size(), 1u);
  EXPECT_TRUE(std::isfinite(r.log[0].loss));
  EXPECT_GT(r.log[0].seconds, 0.0);
  EXPECT_DOUBLE_EQ(r.log[0].lr, 0.1);
  EXPECT_GT(r.checkpoint.params.tau, 0.0);
  EXPECT_EQ(r.checkpoint.config.in_channels, 8);
  EXPECT_EQ(r.checkpoint.config.num_classes, 2);
  const ModelParams init = init_params(r.checkpoint.config, 11);
  for (std::size_t i = 0; i < init.tensors.size(); ++i)
    EXPECT_NE(init.tensors[i].data, r.checkpoint.params.tensors[i].data) << init.names[i];

  const Checkpoint back = deserialize_checkpoint(serialize_checkpoint(r.checkpoint));
  EXPECT_TRUE(back == r.checkpoint);
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(r.checkpoint));
}

TEST(Training, DeterministicAcrossRunsAndWorkerCounts) {
  const auto data = tiny_set(2, 4, 40, 5);
  const ChannelSelection sel = ChannelSelection::lowest(4, 2, 2);
  setenv("DCTIR_THREADS", "1", 1);
  const auto a = serialize_checkpoint(train(data, desk_tiny(), sel, quick_train(2)).checkpoint);
  setenv("DCTIR_THREADS", "3", 1);
  const auto b = serialize_checkpoint(train(data, desk_tiny(), sel, quick_train(2)).checkpoint);
  unsetenv("DCTIR_THREADS");
  EXPECT_EQ(a, b);
}

TEST(Training, Errors) {
  const ChannelSelection sel = ChannelSelection::lowest(4, 2, 2);
  try {
    train({}, desk_tiny(), sel, quick_train(1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyDataset);
  }
  auto data = tiny_set(2, 2, 40, 1);
  for (auto& d : data) d.label = 0;
  try {
    train(data, desk_tiny(), sel, quick_train(1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SingleClassDataset);
  }
}

Checkpoint small_checkpoint() {
  Checkpoint ck;
  ck.config = tiny_config();
  ck.selection = ChannelSelection::lowest(2, 1, 1);
  ck.stats.mean = {1, 2, 3, 4};
  ck.stats.variance = {1, 0.5, 2, 3};
  ck.params = init_params(ck.config, 9);
  ck.params.tau = 0.731;
  return ck;
}

TEST(Checkpoints, FileRoundTripIsBitwise) {
  const Checkpoint ck = small_checkpoint();
  const auto path = std::filesystem::temp_directory_path() / "dctir_ckpt_test" / "m.dcmd";
  save_checkpoint(path, ck);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_TRUE(back == ck);
  EXPECT_EQ(back.params.tau, 0.731);
  std::filesystem::remove_all(path.parent_path());
}

TEST(Checkpoints, TruncationIsCorrupt) {
  const auto bytes = serialize_checkpoint(small_checkpoint());
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    try {
      deserialize_checkpoint(std::span(bytes.data(), cut));
      FAIL() << cut;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::CorruptCheckpoint) << cut;
    }
  }
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(deserialize_checkpoint(extra), Error);
}

TEST(Checkpoints, VersionMismatch) {
  auto bytes = serialize_checkpoint(small_checkpoint());
  bytes[4] = 9;  // version u16 follows the 4-byte magic
  try {
    deserialize_checkpoint(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::VersionMismatch);
  }
}

TEST(Checkpoints, ConfigMismatchRefused) {
  const Checkpoint ck = small_checkpoint();
  EXPECT_NO_THROW(ck.require_config(tiny_config()));
  ModelConfig other = tiny_config();
  other.global_dim = 6;
  try {
    ck.require_config(other);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
}

}  // namespace
}  // namespace dctir
