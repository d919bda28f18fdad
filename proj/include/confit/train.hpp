#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "confit/datagen.hpp"
#include "confit/metrics.hpp"
#include "confit/model.hpp"

namespace confit {

enum class ScheduleMode { plain_ft, hierarchical, linear_probe_only, stl };

ScheduleMode schedule_mode_from_string(const std::string& s);
std::string schedule_mode_to_string(ScheduleMode m);

/// Three-stage epoch split: head only, head + normalization affine, all
/// parameters. The first two stages floor their share; the last takes the
/// remainder, so the counts always sum to total_epochs.
struct StageSchedule {
  std::size_t total_epochs = 10;
  double f_head = 0.2;
  double f_head_norm = 0.3;
  double f_all = 0.5;
  ScheduleMode mode = ScheduleMode::hierarchical;

  std::array<std::size_t, 3> stage_epochs() const;
  void validate() const;
};

struct TrainConfig {
  double lr = 0.01;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  Dtype precision = Dtype::f64;
  NormMode norm_mode = NormMode::xconv_bn;
  StageSchedule schedule;
  double bn_momentum = 0.1;
  double stab_eps = 1e-5;
  MomentMode eval_moments = MomentMode::running;
  std::size_t pretrain_epochs = 0;  // on the pretext task, before task 0

  void validate() const;
};

struct ParamFilter {
  bool head = false;
  bool norm_affine = false;
  bool features = false;
};

struct TrainLog {
  std::size_t task_id = 0;
  std::array<std::size_t, 3> stage_epochs{0, 0, 0};
  std::vector<double> epoch_losses;
};

// One SGD pass over a batch with the given parameter filter. Exposed for
// tests; returns the batch loss.
double train_step(ContinualModel& model, const Tensor& x,
                  const std::vector<std::size_t>& labels, std::size_t task,
                  const ParamFilter& filter, double lr);

// Trains one new task under the config's schedule. The head is zero-init
// for probed schedules and small-random for plain_ft; banks freeze on
// completion and (xconv mode) recovery runs for every stored task.
TrainLog train_task(ContinualModel& model, const TaskDataset& task,
                    const TrainConfig& cfg, Rng& rng);

// All-parameter training of a throwaway task, then the task is dropped but
// its weights/affine template (and shared running stats) remain: "B0".
void pretrain(ContinualModel& model, const TaskDataset& pretext,
              std::size_t epochs, const TrainConfig& cfg, Rng& rng);

/// Mutable state of a continual run, checkpointable between tasks.
struct RunState {
  // In stl mode this stays the untouched base; each task trains a copy.
  ContinualModel model;
  AccuracyMatrix matrix;
  Rng rng;
  std::size_t next_task = 0;
  std::vector<TrainLog> logs;
  std::optional<MeanProbeSnapshot> probe_after_first;
  std::optional<MeanProbeSnapshot> probe_after_last;
};

// Fresh state: builds the model, runs the optional pretraining phase.
RunState init_run(const ModelSpec& mspec, const TrainConfig& cfg,
                  const TaskSequence& seq);

// Trains tasks [state.next_task, stop_after) and fills the accuracy matrix
// column after each. stop_after is clamped to the sequence length.
void run_tasks(RunState& state, const TaskSequence& seq,
               const TrainConfig& cfg, std::size_t stop_after);

struct RunResult {
  AccuracyMatrix matrix;
  double acc_value = 0.0;
  FgtResult fgt_value;
  std::vector<TrainLog> logs;
  std::vector<DeltaRow> deltas;  // empty when probes were not collected
};

RunResult continual_run(const TaskSequence& seq, const ModelSpec& mspec,
                        const TrainConfig& cfg);

RunResult finish_run(RunState& state);

}  // namespace confit
