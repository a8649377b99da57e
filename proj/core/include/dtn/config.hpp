#pragma once

// Run configuration: one YAML document whose top-level sections mirror the
// component configs (patch, encoder, rpn, head, train, optimizer, data,
// output). Every key is optional; missing keys keep the desk-scale default.
// Unknown keys are rejected so that typos fail before any compute.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dtn/model.hpp"
#include "dtn/optimizer.hpp"
#include "dtn/trainer.hpp"

namespace dtn {

enum class DataSource { Synthetic, Coco };

struct DataConfig {
  DataSource source = DataSource::Synthetic;
  /// COCO annotation file and image directory (used when source is coco).
  std::string annotations;
  std::string images;
  std::size_t synthetic_count = 32;
  std::uint64_t synthetic_seed = 7;
  std::size_t resize_target = 96;
};

struct OutputConfig {
  std::string dir = "runs/desk";
  /// Iterations between checkpoints; 0 writes only the final one.
  std::uint64_t checkpoint_every = 500;
};

struct RunConfig {
  ModelConfig model;
  /// `train.seed` is the run seed; it also keys model initialization.
  TrainSchedule train;
  AdamConfig optimizer;
  DataConfig data;
  OutputConfig output;

  std::uint64_t seed() const { return train.seed; }
  /// Component invariants plus cross-field checks. Throws ConfigError.
  void validate() const;
  /// Canonical YAML text: every key, fixed order, shortest round-trip floats.
  std::string to_yaml() const;
};

/// Parses and validates. Field errors name the offending "section.key".
RunConfig parse_run_config(const std::string& yaml_text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Sets "section.key" to a YAML scalar or flow sequence, then
/// re-validates.
void apply_override(RunConfig& config, const std::string& dotted_key, const std::string& value);

}  // namespace dtn
