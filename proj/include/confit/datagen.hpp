#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "confit/tensor.hpp"
#include "json.hpp"

namespace confit {

/// Spec for a synthetic task sequence. Each class is a smooth random
/// prototype (a coarse Gaussian grid, bilinearly upsampled) plus per-sample
/// Gaussian noise. Each task carries its own mean offset so the input
/// statistics genuinely shift between tasks.
struct TaskSequenceSpec {
  std::size_t num_tasks = 5;
  std::size_t classes_per_task = 4;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  double prototype_scale = 1.0;
  double task_offset_scale = 0.75;  // std of the per-task mean shift
  double noise_scale = 0.25;
  std::uint64_t seed = 0;
  bool with_pretext = false;        // extra disjoint super-task for pretraining
  std::size_t pretext_classes = 8;

  void validate() const;
};

struct SplitData {
  Tensor x;  // (N, C, H, W)
  Tensor y;  // (N), integral values
};

struct TaskDataset {
  std::size_t task_id = 0;
  std::size_t num_classes = 0;
  SplitData train;
  SplitData test;
};

struct TaskSequence {
  TaskSequenceSpec spec;
  std::vector<TaskDataset> tasks;
  std::optional<TaskDataset> pretext;
};

// Pure function of the spec. The pretext task is drawn after the main tasks,
// so toggling with_pretext does not change the main tasks' bytes.
TaskSequence generate(const TaskSequenceSpec& spec);

// Directory layout: manifest.json plus CFT tensors
// task<t>.{train,test}.{x,y}.cft and optionally pretext.{train,test}.{x,y}.cft.
// The manifest carries per-file checksums; load verifies them.
void save_dataset(const TaskSequence& seq, const std::string& dir);
TaskSequence load_dataset(const std::string& dir);

// Strict JSON codec (unknown keys rejected; omitted keys keep defaults),
// shared by dataset manifests and CLI config files.
nlohmann::json task_spec_to_json(const TaskSequenceSpec& s);
TaskSequenceSpec task_spec_from_json(const nlohmann::json& j);

}  // namespace confit
