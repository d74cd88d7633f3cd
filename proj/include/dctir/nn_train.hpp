#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "dctir/dct_pipeline.hpp"
#include "dctir/nn_checkpoint.hpp"
#include "dctir/nn_model.hpp"
#include "dctir/parallel.hpp"

namespace dctir {

struct TrainConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int lr_step_epochs = 10;
  double lr_decay = 0.1;
  int epochs = 40;
  int batch_size = 32;
  double margin = 0.15;
  double beta = 1.0;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentConfig augment_config;  // output_size is overridden by the model input size
  double grad_clip = 0.0;        // global-norm clip; 0 disables
};

struct LabeledImage {
  std::string name;
  ImageTensor image;
  int label = 0;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double arcface = 0.0;
  double attention = 0.0;
  double accuracy = 0.0;  // fraction of samples whose nearest class is the label
  double tau = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
};

/// Step schedule: lr * decay^floor((epoch - 1) / step), epochs counted from 1.
inline double learning_rate(const TrainConfig& tc, int epoch) {
  return tc.lr * std::pow(tc.lr_decay, static_cast<double>((epoch - 1) / tc.lr_step_epochs));
}

/// Median of all values (mean of the two middle values for even counts).
inline double median(std::vector<double> v) {
  require(!v.empty(), ErrorCode::InvalidArgument, "median of nothing");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

/// Image side the model expects: one cube cell per 8x8 pixel block.
inline int model_image_size(const ModelConfig& cfg) { return cfg.input_size * 8; }

/// Evaluation-path cube for an image: plain resize to the model size, then DCT.
inline DctCube eval_cube(const ImageTensor& image, const ModelConfig& cfg) {
  return to_dct_cube(resize_for_eval(image, model_image_size(cfg)));
}

/// Network input tensor from a prepared cube (selection + normalization).
inline Tensor prepare_input(const DctCube& full, const Preprocessor& pre) { return cube_tensor(pre(full)); }

/// SGD with momentum (v = mu v + g + wd w; w -= lr v). Weight decay applies
/// to conv/linear weights only, not to biases or the ArcFace scale.
class Sgd {
 public:
  Sgd(const ModelParams& p, const TrainConfig& tc) : tc_(tc), velocity_(p) {}

  void step(ModelParams& p, const Gradients& g, double lr) {
    for (std::size_t i = 0; i < p.tensors.size(); ++i) {
      const bool decay = is_weight_name(p.names[i]);
      auto& w = p.tensors[i].data;
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double grad = g[i][j] + (decay ? tc_.weight_decay * w[j] : 0.0);
        v[j] = tc_.momentum * v[j] + grad;
        w[j] -= lr * v[j];
      }
    }
    // Keep the ArcFace scale positive.
    double& gamma = p["arc.gamma"].data[0];
    gamma = std::max(gamma, 1e-3);
  }

 private:
  TrainConfig tc_;
  Gradients velocity_;
};

inline double gradient_norm(const Gradients& g) {
  double s = 0.0;
  for (const auto& t : g.g)
    for (double v : t) s += v * v;
  return std::sqrt(s);
}

/// Computes norm stats from the evaluation-path cubes of the training set.
inline NormStats training_norm_stats(const std::vector<LabeledImage>& data, const ModelConfig& cfg,
                                     const ChannelSelection& sel) {
  std::vector<DctCube> cubes(data.size());
  parallel_for(data.size(), [&](std::size_t i) { cubes[i] = select_channels(eval_cube(data[i].image, cfg), sel); });
  return compute_norm_stats(cubes);
}

using EpochCallback = std::function<void(const EpochLog&)>;

/// Deterministic for a given seed regardless of worker count: per-sample
/// gradients are reduced in sample order.
inline TrainResult train(const std::vector<LabeledImage>& data, ModelConfig cfg, const ChannelSelection& selection,
                         const TrainConfig& tc, const EpochCallback& on_epoch = {}) {
  require(!data.empty(), ErrorCode::EmptyDataset, "training set is empty");
  std::set<int> labels;
  for (const auto& d : data) {
    require(d.label >= 0, ErrorCode::InvalidArgument, "negative label");
    labels.insert(d.label);
  }
  require(labels.size() >= 2, ErrorCode::SingleClassDataset, "training set has a single class");
  require(tc.epochs >= 1 && tc.batch_size >= 1 && tc.lr > 0 && tc.lr_step_epochs >= 1, ErrorCode::InvalidArgument,
          "train config values must be positive");
  selection.validate();
  cfg.num_classes = *labels.rbegin() + 1;
  cfg.in_channels = static_cast<int>(selection.total());
  cfg.validate();

  TrainResult result;
  Checkpoint& ck = result.checkpoint;
  ck.config = cfg;
  ck.selection = selection;
  ck.stats = training_norm_stats(data, cfg, selection);
  ck.params = init_params(cfg, tc.seed);
  const Preprocessor pre = ck.preprocessor();
  const LossConfig lc{tc.margin, tc.beta};
  AugmentConfig aug = tc.augment_config;
  aug.output_size = model_image_size(cfg);

  Sgd opt(ck.params, tc);
  const std::size_t workers = std::max<std::size_t>(1, worker_count());
  std::vector<Gradients> scratch(workers, Gradients(ck.params));
  std::vector<LossParts> parts;
  std::vector<std::vector<double>> attention;
  Gradients total(ck.params);

  std::vector<std::size_t> order(data.size());
  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = learning_rate(tc, epoch);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(mix_seed(tc.seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    EpochLog log;
    log.epoch = epoch;
    log.lr = lr;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t B = std::min<std::size_t>(static_cast<std::size_t>(tc.batch_size), order.size() - start);
      total.zero();
      parts.assign(B, {});
      attention.assign(B, {});
      // Rounds of `workers` samples; each round's gradients are added in sample order.
      for (std::size_t round = 0; round < B; round += workers) {
        const std::size_t n = std::min(workers, B - round);
        parallel_for(n, [&](std::size_t w) {
          const std::size_t k = round + w;
          const LabeledImage& item = data[order[start + k]];
          const std::uint64_t sample_seed = mix_seed(mix_seed(tc.seed, static_cast<std::uint64_t>(epoch)), order[start + k]);
          const ImageTensor img = tc.augment ? augment(item.image, sample_seed, aug).image
                                             : resize_for_eval(item.image, aug.output_size);
          const Graph gr = forward(ck.params, cfg, prepare_input(to_dct_cube(img), pre));
          scratch[w].zero();
          parts[k] = backward(ck.params, cfg, gr, item.label, lc, scratch[w], 1.0 / static_cast<double>(B));
          attention[k] = gr.A.data;
        }, n);
        for (std::size_t w = 0; w < n; ++w) total.add(scratch[w]);
      }
      if (tc.grad_clip > 0) {
        const double norm = gradient_norm(total);
        if (norm > tc.grad_clip)
          for (auto& t : total.g)
            for (double& v : t) v *= tc.grad_clip / norm;
      }
      opt.step(ck.params, total, lr);

      std::vector<double> all;
      for (const auto& a : attention) all.insert(all.end(), a.begin(), a.end());
      ck.params.tau = median(std::move(all));
      for (const auto& lp : parts) {
        log.loss += lp.total;
        log.arcface += lp.arcface;
        log.attention += lp.attention;
        correct += lp.global_correct ? 1 : 0;
      }
    }
    const double n = static_cast<double>(data.size());
    log.loss /= n;
    log.arcface /= n;
    log.attention /= n;
    log.accuracy = static_cast<double>(correct) / n;
    log.tau = ck.params.tau;
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (const auto& t : ck.params.tensors)
      for (double v : t.data) require(std::isfinite(v), ErrorCode::InvalidArgument, "training diverged (non-finite parameter)");
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

}  // namespace dctir
