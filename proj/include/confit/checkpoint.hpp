#pragma once

#include <string>

#include "confit/train.hpp"
#include "json.hpp"

namespace confit {

// Strict JSON codecs shared by checkpoints and CLI config files. The
// from_json side rejects unknown keys so typos fail loudly instead of
// silently falling back to defaults. All keys are optional on input;
// omitted ones keep their defaults.
nlohmann::json model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct CheckpointBundle {
  ModelSpec model_spec;
  TrainConfig config;
  RunState state;
};

/// Writes the full run state to a directory: manifest.json plus one CFT
/// tensor file per parameter/statistic, each checksummed in the manifest.
/// Cached recovered means are derived state and are not serialized.
void save_checkpoint(const RunState& state, const ModelSpec& mspec,
                     const TrainConfig& cfg, const std::string& dir);

/// Inverse of save_checkpoint; verifies every checksum. save -> load ->
/// save reproduces the directory byte for byte.
CheckpointBundle load_checkpoint(const std::string& dir);

}  // namespace confit
