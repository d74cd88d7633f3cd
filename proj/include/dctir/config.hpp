#pragma once

// JSON run configuration shared by the CLI and the acceptance run. Every
// section is optional; missing keys keep their defaults.

#include <filesystem>
#include <string>

#include "dctir/retrieval.hpp"
#include "dctir/synthetic.hpp"
#include "json.hpp"

namespace dctir {

struct RunConfig {
  ModelConfig model;
  ChannelSelection selection = ChannelSelection::default_selection();
  TrainConfig train;
  ExtractConfig extract;
  SearchConfig search;
  SyntheticSpec synthetic;
  bool crop_queries = true;
};

namespace detail {

template <typename T>
void take(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.stages) stages.push_back({{"width", s.width}, {"blocks", s.blocks}, {"stride", s.stride}});
  return {{"in_channels", c.in_channels},   {"input_size", c.input_size},       {"stem_width", c.stem_width},
          {"stem_kernel", c.stem_kernel},   {"stem_stride", c.stem_stride},     {"stem_maxpool", c.stem_maxpool},
          {"stages", stages},               {"shallow_stage", c.shallow_stage}, {"deep_stage", c.deep_stage},
          {"global_dim", c.global_dim},     {"gem_p", c.gem_p},                 {"attention_hidden", c.attention_hidden},
          {"num_classes", c.num_classes}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  using detail::take;
  take(j, "in_channels", c.in_channels);
  take(j, "input_size", c.input_size);
  take(j, "stem_width", c.stem_width);
  take(j, "stem_kernel", c.stem_kernel);
  take(j, "stem_stride", c.stem_stride);
  take(j, "stem_maxpool", c.stem_maxpool);
  if (j.contains("stages")) {
    c.stages.clear();
    for (const auto& s : j.at("stages"))
      c.stages.push_back({s.at("width").get<int>(), s.value("blocks", 1), s.value("stride", 1)});
  }
  take(j, "shallow_stage", c.shallow_stage);
  take(j, "deep_stage", c.deep_stage);
  take(j, "global_dim", c.global_dim);
  take(j, "gem_p", c.gem_p);
  take(j, "attention_hidden", c.attention_hidden);
  take(j, "num_classes", c.num_classes);
  c.validate();
  return c;
}

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"lr", t.lr},
          {"momentum", t.momentum},
          {"weight_decay", t.weight_decay},
          {"lr_step_epochs", t.lr_step_epochs},
          {"lr_decay", t.lr_decay},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"margin", t.margin},
          {"beta", t.beta},
          {"seed", t.seed},
          {"augment", t.augment},
          {"augment_min_area", t.augment_config.min_area},
          {"grad_clip", t.grad_clip}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig t = {}) {
  using detail::take;
  take(j, "lr", t.lr);
  take(j, "momentum", t.momentum);
  take(j, "weight_decay", t.weight_decay);
  take(j, "lr_step_epochs", t.lr_step_epochs);
  take(j, "lr_decay", t.lr_decay);
  take(j, "epochs", t.epochs);
  take(j, "batch_size", t.batch_size);
  take(j, "margin", t.margin);
  take(j, "beta", t.beta);
  take(j, "seed", t.seed);
  take(j, "augment", t.augment);
  take(j, "augment_min_area", t.augment_config.min_area);
  take(j, "grad_clip", t.grad_clip);
  return t;
}

inline nlohmann::json to_json(const ChannelSelection& s) {
  return {{"y", s.kept[0]}, {"cb", s.kept[1]}, {"cr", s.kept[2]}};
}

/// Either explicit lists {"y": [...], "cb": [...], "cr": [...]} or counts
/// of lowest frequencies {"lowest": [32, 16, 16]}.
inline ChannelSelection selection_from_json(const nlohmann::json& j) {
  ChannelSelection s;
  if (j.contains("lowest")) {
    const auto n = j.at("lowest").get<std::array<int, 3>>();
    s = ChannelSelection::lowest(n[0], n[1], n[2]);
  } else {
    s.kept[0] = j.value("y", std::vector<int>{});
    s.kept[1] = j.value("cb", std::vector<int>{});
    s.kept[2] = j.value("cr", std::vector<int>{});
  }
  s.validate();
  return s;
}

inline nlohmann::json to_json(const RunConfig& rc) {
  nlohmann::json j;
  j["model"] = to_json(rc.model);
  j["selection"] = to_json(rc.selection);
  j["train"] = to_json(rc.train);
  j["extract"] = {{"scales", rc.extract.scales},
                  {"max_local", rc.extract.max_local},
                  {"compressed_domain", rc.extract.compressed_domain}};
  j["search"] = {{"rerank", rc.search.rerank},
                 {"rerank_depth", rc.search.rerank_depth},
                 {"top_k", rc.search.top_k},
                 {"ransac_threshold", rc.search.ransac.threshold},
                 {"ransac_iterations", rc.search.ransac.max_iterations},
                 {"ransac_confidence", rc.search.ransac.confidence},
                 {"min_inliers", rc.search.ransac.min_inliers}};
  j["synthetic"] = to_json(rc.synthetic);
  j["crop_queries"] = rc.crop_queries;
  return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig rc = {}) {
  try {
    if (j.contains("model")) rc.model = model_config_from_json(j["model"], rc.model);
    if (j.contains("selection")) rc.selection = selection_from_json(j["selection"]);
    if (j.contains("train")) rc.train = train_config_from_json(j["train"], rc.train);
    if (j.contains("extract")) {
      const auto& e = j["extract"];
      detail::take(e, "scales", rc.extract.scales);
      detail::take(e, "max_local", rc.extract.max_local);
      detail::take(e, "compressed_domain", rc.extract.compressed_domain);
    }
    if (j.contains("search")) {
      const auto& s = j["search"];
      detail::take(s, "rerank", rc.search.rerank);
      detail::take(s, "rerank_depth", rc.search.rerank_depth);
      detail::take(s, "top_k", rc.search.top_k);
      detail::take(s, "ransac_threshold", rc.search.ransac.threshold);
      detail::take(s, "ransac_iterations", rc.search.ransac.max_iterations);
      detail::take(s, "ransac_confidence", rc.search.ransac.confidence);
      detail::take(s, "min_inliers", rc.search.ransac.min_inliers);
    }
    if (j.contains("synthetic")) rc.synthetic = synthetic_spec_from_json(j["synthetic"], rc.synthetic);
    detail::take(j, "crop_queries", rc.crop_queries);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("config: ") + e.what());
  }
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {}) {
  const auto bytes = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidArgument, "cannot parse " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j, std::move(base));
}

/// Laptop-scale setup: 4-class synthetic set of 128 px images (160 train /
/// 40 val / 40 gallery / 12 queries), a small residual network on 16x16x64
/// cubes, the default optimizer schedule with gradient clipping.
inline RunConfig desk_preset() {
  RunConfig rc;
  rc.synthetic.classes = 4;
  rc.synthetic.image_size = 128;
  rc.synthetic.seed = 7;
  rc.model.input_size = 16;
  rc.model.stem_width = 32;
  rc.model.stages = {{32, 1, 1}, {64, 1, 2}};
  rc.model.global_dim = 64;
  rc.model.attention_hidden = 32;
  rc.train.seed = 1;
  rc.train.grad_clip = 1.0;
  return rc;
}

}  // namespace dctir
