#pragma once

// Binary checkpoint, all integers and floats little-endian:
//
//   magic "DTNCKPT\0" | u32 version | str config_yaml | u64 iteration
//   | u32 count, count x { str name | u32 rank | rank x u64 dim | f32 data }
//   | optimizer(rpn) | optimizer(head)
//   | u64 count, count x { u64 iteration | u8 phase | f64 loss, cls, reg }
//   | u32 crc32 of every preceding byte
//
// where str = u32 length + bytes and optimizer = u64 step | u32 count,
// count x { str name | u64 length | f32 m | f32 v }.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dtn/config.hpp"
#include "dtn/model.hpp"
#include "dtn/trainer.hpp"

namespace dtn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ParameterBlob {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_yaml;
  std::vector<ParameterBlob> parameters;
  TrainerState state;

  RunConfig config() const { return parse_run_config(config_yaml); }
};

Checkpoint make_checkpoint(const RunConfig& config, const DetTransNet<float>& model, const TrainerState& state);

std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws CheckpointError on bad magic, unknown version, truncation or a
/// checksum mismatch.
Checkpoint deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies parameter blobs into the model. Throws CheckpointError naming the
/// first missing, extra or differently shaped parameter.
void load_parameters(DetTransNet<float>& model, const Checkpoint& ckpt);

/// Builds the model described by the checkpoint's config and loads it.
DetTransNet<float> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace dtn
