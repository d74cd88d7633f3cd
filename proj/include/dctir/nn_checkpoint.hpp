#pragma once

// Checkpoint file: "DCMD", u16 version, model config, channel selection,
// norm stats, tau, then every parameter as name + shape + f64 payload.

#include <filesystem>
#include <string>
#include <vector>

#include "dctir/binary_io.hpp"
#include "dctir/dct_pipeline.hpp"
#include "dctir/nn_model.hpp"

namespace dctir {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ChannelSelection selection = ChannelSelection::default_selection();
  NormStats stats;
  ModelParams params;

  Preprocessor preprocessor() const { return {selection, stats}; }

  /// Extraction under a different architecture is refused.
  void require_config(const ModelConfig& expected) const {
    require(config == expected, ErrorCode::ShapeMismatch, "checkpoint was trained with a different model config");
  }

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    return a.config == b.config && a.selection == b.selection && a.stats == b.stats && a.params == b.params;
  }
};

inline void write_model_config(ByteWriter& w, const ModelConfig& c) {
  w.i32(c.in_channels);
  w.i32(c.input_size);
  w.i32(c.stem_width);
  w.i32(c.stem_kernel);
  w.i32(c.stem_stride);
  w.u8(c.stem_maxpool ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(c.stages.size()));
  for (const auto& s : c.stages) {
    w.i32(s.width);
    w.i32(s.blocks);
    w.i32(s.stride);
  }
  w.i32(c.shallow_stage);
  w.i32(c.deep_stage);
  w.i32(c.global_dim);
  w.f64(c.gem_p);
  w.i32(c.attention_hidden);
  w.i32(c.num_classes);
}

inline ModelConfig read_model_config(ByteReader& r) {
  ModelConfig c;
  c.in_channels = r.i32();
  c.input_size = r.i32();
  c.stem_width = r.i32();
  c.stem_kernel = r.i32();
  c.stem_stride = r.i32();
  c.stem_maxpool = r.u8() != 0;
  const std::uint32_t n = r.u32();
  require(n <= 64, ErrorCode::CorruptCheckpoint, "implausible stage count");
  c.stages.resize(n);
  for (auto& s : c.stages) {
    s.width = r.i32();
    s.blocks = r.i32();
    s.stride = r.i32();
  }
  c.shallow_stage = r.i32();
  c.deep_stage = r.i32();
  c.global_dim = r.i32();
  c.gem_p = r.f64();
  c.attention_hidden = r.i32();
  c.num_classes = r.i32();
  return c;
}

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  w.tag("DCMD");
  w.u16(kCheckpointVersion);
  write_model_config(w, ck.config);
  write_selection(w, ck.selection);
  write_norm_stats(w, ck.stats);
  w.f64(ck.params.tau);
  w.u32(static_cast<std::uint32_t>(ck.params.tensors.size()));
  for (std::size_t i = 0; i < ck.params.tensors.size(); ++i) {
    const Tensor& t = ck.params.tensors[i];
    w.str(ck.params.names[i]);
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (int d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data) w.f64(v);
  }
  return w.take();
}

inline Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, ErrorCode::CorruptCheckpoint);
  r.expect_tag("DCMD", ErrorCode::CorruptCheckpoint);
  const std::uint16_t version = r.u16();
  require(version == kCheckpointVersion, ErrorCode::VersionMismatch,
          "checkpoint version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
  Checkpoint ck;
  try {
    ck.config = read_model_config(r);
    ck.config.validate();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::InvalidArgument) fail(ErrorCode::CorruptCheckpoint, e.what());
    throw;
  }
  ck.selection = read_selection(r);
  ck.stats = read_norm_stats(r);
  ck.params.tau = r.f64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const int rank = r.u8();
    require(rank <= 4, ErrorCode::CorruptCheckpoint, "tensor rank above 4");
    std::vector<int> shape(static_cast<std::size_t>(rank));
    for (int& d : shape) {
      const std::uint32_t v = r.u32();
      require(v <= (1u << 24), ErrorCode::CorruptCheckpoint, "implausible tensor dimension");
      d = static_cast<int>(v);
    }
    r.need(Tensor::count(shape) * 8);
    Tensor t(shape);
    for (double& v : t.data) v = r.f64();
    ck.params.add(name, std::move(t));
  }
  require(r.at_end(), ErrorCode::CorruptCheckpoint, "trailing bytes after checkpoint");
  try {
    check_params_match(ck.params, ck.config);
    ck.selection.validate();
  } catch (const Error& e) {
    fail(ErrorCode::CorruptCheckpoint, std::string("inconsistent checkpoint: ") + e.what());
  }
  require(ck.selection.total() == static_cast<std::size_t>(ck.config.in_channels) &&
              ck.stats.channels() == ck.selection.total(),
          ErrorCode::CorruptCheckpoint, "selection, norm stats and input channels disagree");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace dctir
