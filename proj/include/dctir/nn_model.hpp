#pragma once

// Residual CNN over DCT cubes with two heads: a GeM-pooled, whitened global
// descriptor (ArcFace-trained) and a softplus attention map over the shallow
// features (trained through an attention-pooled auxiliary classifier).
// Attention-side gradients stop at the shallow tap and never reach the
// backbone.

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "dctir/dct_pipeline.hpp"
#include "dctir/nn_ops.hpp"
#include "dctir/rng.hpp"

namespace dctir {

struct StageConfig {
  int width = 0;
  int blocks = 1;
  int stride = 1;
  friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

struct ModelConfig {
  int in_channels = 64;
  int input_size = 56;  // spatial side of the network input
  int stem_width = 64;
  int stem_kernel = 3;
  int stem_stride = 1;
  bool stem_maxpool = false;
  std::vector<StageConfig> stages = {{128, 1, 1}, {256, 1, 2}};
  int shallow_stage = 0;
  int deep_stage = 1;
  int global_dim = 128;
  double gem_p = 3.0;
  int attention_hidden = 128;
  int num_classes = 2;

  void validate() const {
    auto check = [](bool ok, const std::string& what) { require(ok, ErrorCode::InvalidArgument, "model config: " + what); };
    check(in_channels > 0 && input_size > 0 && stem_width > 0, "sizes must be positive");
    check(stem_kernel % 2 == 1 && stem_stride >= 1, "stem kernel must be odd");
    check(!stages.empty(), "no stages");
    for (const auto& s : stages) check(s.width > 0 && s.blocks >= 1 && s.stride >= 1, "bad stage");
    check(shallow_stage >= 0 && deep_stage < static_cast<int>(stages.size()), "tap outside stage list");
    check(shallow_stage < deep_stage, "shallow tap must precede deep tap");
    check(gem_p > 0, "GeM power must be positive");
    check(global_dim > 0 && attention_hidden > 0 && num_classes >= 2, "head sizes");
  }

  int shallow_channels() const { return stages[shallow_stage].width; }
  int deep_channels() const { return stages[deep_stage].width; }

  /// Input-pixel stride of one shallow-map cell, counting the stem and
  /// every stage up to the shallow tap.
  int shallow_stride() const {
    int s = stem_stride * (stem_maxpool ? 2 : 1);
    for (int i = 0; i <= shallow_stage; ++i) s *= stages[i].stride;
    return s;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Named parameter tensors in a fixed creation order.
struct ModelParams {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;
  double tau = 0.0;  // attention threshold, set by training

  void add(const std::string& name, Tensor t) {
    index_[name] = names.size();
    names.push_back(name);
    tensors.push_back(std::move(t));
  }
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index(const std::string& name) const {
    const auto it = index_.find(name);
    require(it != index_.end(), ErrorCode::ShapeMismatch, "missing parameter " + name);
    return it->second;
  }
  const Tensor& operator[](const std::string& name) const { return tensors[index(name)]; }
  Tensor& operator[](const std::string& name) { return tensors[index(name)]; }
  double gamma() const { return (*this)["arc.gamma"].data[0]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.names == b.names && a.tensors == b.tensors && a.tau == b.tau;
  }

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

inline bool is_weight_name(const std::string& n) { return n.size() > 2 && n.compare(n.size() - 2, 2, ".w") == 0; }

inline std::string block_prefix(int stage, int block) {
  return "stage" + std::to_string(stage) + ".block" + std::to_string(block);
}

inline bool block_has_projection(const ModelConfig& cfg, int stage, int block, int in_width) {
  return block == 0 && (cfg.stages[stage].stride != 1 || cfg.stages[stage].width != in_width);
}

/// Shapes of every parameter for a config, in creation order.
inline std::vector<std::pair<std::string, std::vector<int>>> parameter_shapes(const ModelConfig& cfg) {
  std::vector<std::pair<std::string, std::vector<int>>> s;
  auto conv = [&](const std::string& name, int out, int in, int k) {
    s.push_back({name + ".w", {out, in, k, k}});
    s.push_back({name + ".b", {out}});
  };
  conv("stem", cfg.stem_width, cfg.in_channels, cfg.stem_kernel);
  int width = cfg.stem_width;
  for (int si = 0; si <= cfg.deep_stage; ++si) {
    for (int b = 0; b < cfg.stages[si].blocks; ++b) {
      const std::string p = block_prefix(si, b);
      const int out = cfg.stages[si].width;
      conv(p + ".conv1", out, width, 3);
      conv(p + ".conv2", out, out, 3);
      if (block_has_projection(cfg, si, b, width)) conv(p + ".proj", out, width, 1);
      width = out;
    }
  }
  s.push_back({"whiten.w", {cfg.global_dim, cfg.deep_channels()}});
  s.push_back({"whiten.b", {cfg.global_dim}});
  conv("att1", cfg.attention_hidden, cfg.shallow_channels(), 1);
  conv("att2", 1, cfg.attention_hidden, 1);
  s.push_back({"aux.w", {cfg.num_classes, cfg.shallow_channels()}});
  s.push_back({"aux.b", {cfg.num_classes}});
  s.push_back({"arc.w", {cfg.num_classes, cfg.global_dim}});
  s.push_back({"arc.gamma", {1}});
  return s;
}

inline constexpr double kInitialGamma = 30.0;

/// Kaiming fan-in normal weights, zero biases, gamma = 30.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, hash_string("init")));
  ModelParams p;
  for (auto& [name, shape] : parameter_shapes(cfg)) {
    Tensor t(shape);
    if (name == "arc.gamma") {
      t.data[0] = kInitialGamma;
    } else if (is_weight_name(name)) {
      std::size_t fan_in = 1;
      for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= static_cast<std::size_t>(shape[i]);
      // Heads that feed a loss directly get unit-gain scaling.
      const bool head = name.rfind("whiten", 0) == 0 || name.rfind("aux", 0) == 0 || name.rfind("arc", 0) == 0 ||
                        name.rfind("att2", 0) == 0;
      const double sd = std::sqrt((head ? 1.0 : 2.0) / static_cast<double>(fan_in));
      for (double& v : t.data) v = rng.normal(0.0, sd);
    }
    p.add(name, std::move(t));
  }
  return p;
}

inline void check_params_match(const ModelParams& p, const ModelConfig& cfg) {
  const auto shapes = parameter_shapes(cfg);
  require(shapes.size() == p.tensors.size(), ErrorCode::ShapeMismatch, "parameter count does not match config");
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    require(shapes[i].first == p.names[i], ErrorCode::ShapeMismatch, "parameter order differs at " + p.names[i]);
    require_shape(p.tensors[i], shapes[i].second, p.names[i].c_str());
  }
}

// ---------------------------------------------------------------------------
// Forward

struct BlockTrace {
  Tensor in;
  ops::ConvCache c1, c2, proj;
  Tensor h1;  // relu(conv1)
  Tensor out;
  bool has_proj = false;
};

/// Everything backward needs, plus the forward outputs.
struct Graph {
  bool built = false;
  ops::ConvCache stem;
  Tensor stem_out;
  ops::PoolCache pool;
  std::vector<std::vector<BlockTrace>> stages;

  Tensor S;  // shallow map [Cs, Hs, Ws]
  Tensor D;  // deep map [Cd, Hd, Wd]
  std::vector<double> pooled;    // GeM(D)
  std::vector<double> whitened;  // F pooled + b
  std::vector<double> g;         // unit global descriptor

  ops::ConvCache att1, att2;
  Tensor att_hidden;  // relu(conv1(S))
  Tensor att_logit;   // conv2 output, softplus input
  Tensor A;           // [1, Hs, Ws], strictly positive
};

inline Tensor cube_tensor(const DctCube& cube) {
  Tensor t({cube.channels(), cube.rows, cube.cols});
  t.data = cube.data;
  return t;
}

inline Tensor image_tensor_chw(const ImageTensor& img) {
  Tensor t({3, img.height, img.width});
  const std::size_t n = static_cast<std::size_t>(img.height) * img.width;
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) t.data[c * n + i] = img.data[i * 3 + c];
  return t;
}

inline Graph forward(const ModelParams& p, const ModelConfig& cfg, const Tensor& input) {
  require(input.shape.size() == 3 && input.dim(0) == cfg.in_channels, ErrorCode::ShapeMismatch,
          "input " + shape_string(input.shape) + " does not match model with " + std::to_string(cfg.in_channels) +
              " channels");
  Graph gr;
  const int stem_pad = cfg.stem_kernel / 2;
  gr.stem_out = ops::relu(ops::conv2d(input, p["stem.w"], p["stem.b"], cfg.stem_stride, stem_pad, &gr.stem));
  Tensor x = cfg.stem_maxpool ? ops::maxpool2d(gr.stem_out, 3, 2, 1, &gr.pool) : gr.stem_out;

  gr.stages.resize(static_cast<std::size_t>(cfg.deep_stage) + 1);
  for (int si = 0; si <= cfg.deep_stage; ++si) {
    for (int b = 0; b < cfg.stages[si].blocks; ++b) {
      const std::string pre = block_prefix(si, b);
      const int stride = b == 0 ? cfg.stages[si].stride : 1;
      BlockTrace bt;
      bt.in = std::move(x);
      bt.h1 = ops::relu(ops::conv2d(bt.in, p[pre + ".conv1.w"], p[pre + ".conv1.b"], stride, 1, &bt.c1));
      Tensor z = ops::conv2d(bt.h1, p[pre + ".conv2.w"], p[pre + ".conv2.b"], 1, 1, &bt.c2);
      bt.has_proj = p.has(pre + ".proj.w");
      if (bt.has_proj)
        z = ops::add(z, ops::conv2d(bt.in, p[pre + ".proj.w"], p[pre + ".proj.b"], stride, 0, &bt.proj));
      else
        z = ops::add(z, bt.in);
      bt.out = ops::relu(z);
      x = bt.out;
      gr.stages[si].push_back(std::move(bt));
    }
    if (si == cfg.shallow_stage) gr.S = x;
  }
  gr.D = std::move(x);

  gr.pooled = ops::gem(gr.D, cfg.gem_p);
  gr.whitened = ops::linear(p["whiten.w"], p["whiten.b"], gr.pooled);
  gr.g = ops::l2_normalize(gr.whitened);

  gr.att_hidden = ops::relu(ops::conv2d(gr.S, p["att1.w"], p["att1.b"], 1, 0, &gr.att1));
  gr.att_logit = ops::conv2d(gr.att_hidden, p["att2.w"], p["att2.b"], 1, 0, &gr.att2);
  gr.A = ops::softplus(gr.att_logit);
  gr.built = true;
  return gr;
}

inline Graph forward(const ModelParams& p, const ModelConfig& cfg, const DctCube& cube) {
  return forward(p, cfg, cube_tensor(cube));
}

// ---------------------------------------------------------------------------
// Loss and backward

struct LossConfig {
  double margin = 0.15;
  double beta = 1.0;
};

struct LossParts {
  double arcface = 0.0;
  double attention = 0.0;
  double total = 0.0;
  bool global_correct = false;  // argmax cosine hits the label
};

/// Per-parameter gradient buffers aligned with ModelParams::tensors.
struct Gradients {
  std::vector<std::vector<double>> g;

  explicit Gradients(const ModelParams& p) {
    g.reserve(p.tensors.size());
    for (const auto& t : p.tensors) g.emplace_back(t.size(), 0.0);
  }
  std::vector<double>& operator[](std::size_t i) { return g[i]; }
  const std::vector<double>& operator[](std::size_t i) const { return g[i]; }
  void zero() {
    for (auto& v : g) std::fill(v.begin(), v.end(), 0.0);
  }
  void add(const Gradients& o, double scale = 1.0) {
    for (std::size_t i = 0; i < g.size(); ++i)
      for (std::size_t j = 0; j < g[i].size(); ++j) g[i][j] += scale * o.g[i][j];
  }
};

/// Loss values only.
inline LossParts evaluate_loss(const ModelParams& p, const Graph& gr, int label, const LossConfig& lc) {
  require(gr.built, ErrorCode::GraphNotBuilt, "loss requested before forward");
  LossParts lp;
  const auto arc = ops::arcface(gr.g, p["arc.w"], p.gamma(), lc.margin, label);
  lp.arcface = arc.loss;
  lp.global_correct = std::max_element(arc.cosines.begin(), arc.cosines.end()) - arc.cosines.begin() == label;
  const auto pooled = ops::attention_pool(gr.S, gr.A);
  const auto logits = ops::linear(p["aux.w"], p["aux.b"], pooled);
  lp.attention = ops::softmax_cross_entropy(logits, label).loss;
  lp.total = lp.arcface + lc.beta * lp.attention;
  return lp;
}

/// Reverse pass for L = arcface + beta * attention, scaled by `scale`
/// (e.g. 1/batch), accumulated into `grads`. The attention term only reaches
/// att1/att2/aux parameters.
inline LossParts backward(const ModelParams& p, const ModelConfig& cfg, const Graph& gr, int label, const LossConfig& lc,
                          Gradients& grads, double scale = 1.0) {
  require(gr.built, ErrorCode::GraphNotBuilt, "backward called without a forward graph");
  LossParts lp;

  // Global branch.
  ops::ArcFaceGrad ag;
  const auto arc = ops::arcface(gr.g, p["arc.w"], p.gamma(), lc.margin, label, &ag);
  lp.arcface = arc.loss;
  lp.global_correct = std::max_element(arc.cosines.begin(), arc.cosines.end()) - arc.cosines.begin() == label;
  {
    auto& dw = grads[p.index("arc.w")];
    for (std::size_t i = 0; i < dw.size(); ++i) dw[i] += scale * ag.dw[i];
    grads[p.index("arc.gamma")][0] += scale * ag.dgamma;
  }
  std::vector<double> dg = ag.dg;
  for (double& v : dg) v *= scale;
  const auto dwh = ops::l2_normalize_backward(dg, gr.whitened, gr.g);
  const auto dpool = ops::linear_backward(dwh, p["whiten.w"], gr.pooled, grads[p.index("whiten.w")],
                                          grads[p.index("whiten.b")]);
  Tensor dx = ops::gem_backward(dpool, gr.D, gr.pooled, cfg.gem_p);

  for (int si = cfg.deep_stage; si >= 0; --si) {
    for (int b = cfg.stages[si].blocks - 1; b >= 0; --b) {
      const BlockTrace& bt = gr.stages[si][b];
      const std::string pre = block_prefix(si, b);
      const Tensor dz = ops::relu_backward(dx, bt.out);
      Tensor dh1;
      ops::conv2d_backward(dz, p[pre + ".conv2.w"], bt.c2, grads[p.index(pre + ".conv2.w")],
                           grads[p.index(pre + ".conv2.b")], &dh1);
      Tensor din;
      ops::conv2d_backward(ops::relu_backward(dh1, bt.h1), p[pre + ".conv1.w"], bt.c1, grads[p.index(pre + ".conv1.w")],
                           grads[p.index(pre + ".conv1.b")], &din);
      if (bt.has_proj) {
        Tensor dsc;
        ops::conv2d_backward(dz, p[pre + ".proj.w"], bt.proj, grads[p.index(pre + ".proj.w")],
                             grads[p.index(pre + ".proj.b")], &dsc);
        din = ops::add(din, dsc);
      } else {
        din = ops::add(din, dz);
      }
      dx = std::move(din);
    }
  }
  if (cfg.stem_maxpool) dx = ops::maxpool2d_backward(dx, gr.pool);
  ops::conv2d_backward(ops::relu_backward(dx, gr.stem_out), p["stem.w"], gr.stem, grads[p.index("stem.w")],
                       grads[p.index("stem.b")], nullptr);

  // Attention branch on a detached copy of S.
  const auto pooled = ops::attention_pool(gr.S, gr.A);
  const auto logits = ops::linear(p["aux.w"], p["aux.b"], pooled);
  const auto ce = ops::softmax_cross_entropy(logits, label);
  lp.attention = ce.loss;
  lp.total = lp.arcface + lc.beta * lp.attention;
  if (lc.beta == 0.0) return lp;

  std::vector<double> dlogits = ce.dlogits;
  for (double& v : dlogits) v *= scale * lc.beta;
  const auto dv = ops::linear_backward(dlogits, p["aux.w"], pooled, grads[p.index("aux.w")], grads[p.index("aux.b")]);
  Tensor dA;
  ops::attention_pool_backward(dv, gr.S, gr.A, pooled, nullptr, &dA);
  Tensor dlogit = ops::softplus_backward(dA, gr.att_logit);
  Tensor dhid;
  ops::conv2d_backward(dlogit, p["att2.w"], gr.att2, grads[p.index("att2.w")], grads[p.index("att2.b")], &dhid);
  ops::conv2d_backward(ops::relu_backward(dhid, gr.att_hidden), p["att1.w"], gr.att1, grads[p.index("att1.w")],
                       grads[p.index("att1.b")], nullptr);
  return lp;
}

}  // namespace dctir
