#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "confit/bn.hpp"
#include "confit/conv.hpp"
#include "confit/datagen.hpp"
#include "confit/layers.hpp"
#include "confit/metrics.hpp"
#include "confit/rng.hpp"

namespace confit {

enum class NormMode { shared_bn, task_bn, xconv_bn };
enum class MomentMode { running, t_mean, t_var, t_both };

NormMode norm_mode_from_string(const std::string& s);
std::string norm_mode_to_string(NormMode m);
MomentMode moment_mode_from_string(const std::string& s);
std::string moment_mode_to_string(MomentMode m);

struct BlockSpec {
  std::size_t out_channels = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 2;  // kernel - 1 keeps the mean recovery exact
};

struct ModelSpec {
  std::size_t in_channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t classes_per_task = 4;
  std::vector<BlockSpec> blocks;

  // Three-block stack whose every layer admits exact mean recovery:
  // two stride-1 padding=K-1 convs around one K=stride=2 downsampler.
  static ModelSpec synth_default(std::size_t in_channels, std::size_t height,
                                 std::size_t width,
                                 std::size_t classes_per_task);

  std::size_t feature_dim() const;  // flattened size after the last block
  void validate() const;
};

/// Per-block normalization template: the state a new task's bank starts
/// from. Training a task writes its final values back, so knowledge flows
/// forward across tasks without mutating frozen banks.
struct NormTemplate {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;            // post-conv stats (shared/task modes)
  Tensor running_var;
  std::vector<Tensor> pre_means;  // xconv phase means
  std::size_t in_h = 0, in_w = 0;
  bool has_spatial = false;
};

/// Shared feature stack (Conv -> Norm -> ReLU blocks) + per-task heads +
/// per-task normalization banks. The norm mode decides what each block
/// stores: one shared BN state, one classic BN state per task, or one
/// cross-convolution record per task.
class ContinualModel {
 public:
  struct Block {
    ConvSpec conv;
    Tensor weight;
    std::size_t in_h = 0, in_w = 0;  // nominal input extent from the ModelSpec
    NormTemplate tmpl;
    BatchNormState shared;                         // shared_bn
    std::map<std::size_t, BatchNormState> task_bn;  // task_bn
    std::map<std::size_t, XconvTaskRecord> xconv;   // xconv_bn
  };

  struct Head {
    Tensor weight;  // (classes, feature_dim)
    Tensor bias;    // (classes)
  };

  ContinualModel() = default;
  ContinualModel(const ModelSpec& spec, NormMode mode, double bn_momentum,
                 double stab_eps, Dtype dtype, Rng& init_rng);

  const ModelSpec& spec() const { return spec_; }
  NormMode mode() const { return mode_; }
  double bn_momentum() const { return bn_momentum_; }
  double stab_eps() const { return stab_eps_; }
  Dtype dtype() const { return dtype_; }

  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  std::map<std::size_t, Head>& heads() { return heads_; }
  const std::map<std::size_t, Head>& heads() const { return heads_; }

  bool has_task(std::size_t task) const { return heads_.count(task) > 0; }
  std::vector<std::size_t> trained_tasks() const;

  // Creates the head (zero or small random init) and per-task norm records
  // seeded from the affine template. Duplicate ids are rejected. num_classes
  // sizes the head (the pretext super-task differs from regular tasks).
  void start_task(std::size_t task, std::size_t num_classes, bool random_head,
                  Rng& rng);

  // Marks the task's banks immutable and copies its affine into the template.
  void finish_task(std::size_t task);
  void drop_task(std::size_t task);  // removes head + banks (pretraining)

  // Train-mode forward through the feature stack for the given task,
  // updating running statistics and (xconv mode) pre-convolution means.
  struct BlockCache {
    Tensor conv_in;
    BnCache bn;
    Tensor relu_mask;
  };
  struct ForwardCache {
    std::vector<BlockCache> blocks;
    Tensor features;  // flattened
  };
  Tensor forward_train_features(const Tensor& x, std::size_t task,
                                ForwardCache& cache);

  // Eval-mode forward; per-layer moment overrides replace the mean/var used
  // for normalization (transductive evaluation). Requires recovery to have
  // run for xconv banks unless both overrides are present for that layer.
  struct MomentOverrides {
    std::vector<std::optional<Tensor>> mean;
    std::vector<std::optional<Tensor>> var;
    static MomentOverrides none(std::size_t layers);
  };
  Tensor forward_eval_features(const Tensor& x, std::size_t task,
                               const MomentOverrides& overrides) const;
  Tensor forward_eval_features(const Tensor& x, std::size_t task) const;

  Tensor head_logits(const Tensor& features, std::size_t task) const;

  // Recomputes recovered means for every task bank of every block against
  // the current weights (no-op outside xconv mode).
  void run_recovery();
  void invalidate_recovery();

  // The normalization mean/var the model would use for this task right now.
  // In xconv mode the mean is the recovered one (requires run_recovery()).
  Tensor norm_mean_for_task(std::size_t layer, std::size_t task) const;
  Tensor norm_var_for_task(std::size_t layer, std::size_t task) const;

  // True post-conv moments of a dataset at one layer, propagating through
  // earlier layers via this task's eval path. Exact two-pass computation.
  void true_moments(const Tensor& x, std::size_t task, std::size_t layer,
                    Tensor& mean, Tensor& var,
                    const MomentOverrides& overrides) const;
  void true_moments(const Tensor& x, std::size_t task, std::size_t layer,
                    Tensor& mean, Tensor& var) const;

 private:
  const Block& checked_block(std::size_t layer) const;
  ModelSpec spec_;
  NormMode mode_ = NormMode::xconv_bn;
  double bn_momentum_ = 0.1;
  double stab_eps_ = 1e-5;
  Dtype dtype_ = Dtype::f64;
  std::vector<Block> blocks_;
  std::map<std::size_t, Head> heads_;
};

// Accuracy of the multi-head protocol: argmax over the task's own head.
double evaluate(ContinualModel& model, std::size_t task, const SplitData& test,
                MomentMode moments);

// Per-layer probe of normalization means vs. true means for the given task's
// test inputs under the current weights (used for the shift diagnostics).
MeanProbeSnapshot collect_probe(ContinualModel& model, std::size_t task,
                                const Tensor& test_x);

}  // namespace confit
