#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xnet/backbone.hpp"
#include "xnet/train.hpp"
#include "xnet/xnet_model.hpp"

namespace xnet {

struct PathsConfig {
  std::string encoder;
  std::string decoder;
  std::string out;
  bool operator==(const PathsConfig&) const = default;
};

/// Everything a CLI run needs. Every field is optional in the JSON text;
/// unknown keys are rejected with their full key path.
struct RunConfig {
  BackboneConfig backbone;
  TrainConfig pretrain = default_pretrain_config();
  TrainConfig finetune = default_finetune_config();
  DataConfig data;
  Variant variant = Variant::xnet;
  Task task = Task::depth;
  bool freeze_encoder = false;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  PathsConfig paths;

  void validate() const;
  ModelConfig model_config() const;
  AblationConfig ablation_config() const;
  bool operator==(const RunConfig&) const = default;
};

/// ConfigError naming the key path ("finetune.optimizer") on bad keys, types or enum values.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Canonical JSON text with every field present.
std::string serialize_run_config(const RunConfig& cfg);

}  // namespace xnet
