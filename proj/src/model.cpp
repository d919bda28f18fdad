#include "confit/model.hpp"

#include <cmath>
#include <string>

#include "confit/error.hpp"
#include "confit/pool.hpp"

namespace confit {

NormMode norm_mode_from_string(const std::string& s) {
  if (s == "shared" || s == "shared_bn") return NormMode::shared_bn;
  if (s == "task" || s == "task_bn") return NormMode::task_bn;
  if (s == "xconv" || s == "xconv_bn") return NormMode::xconv_bn;
  throw ConfigError("unknown norm mode '" + s + "'");
}

std::string norm_mode_to_string(NormMode m) {
  switch (m) {
    case NormMode::shared_bn: return "shared_bn";
    case NormMode::task_bn: return "task_bn";
    case NormMode::xconv_bn: return "xconv_bn";
  }
  return "?";
}

MomentMode moment_mode_from_string(const std::string& s) {
  if (s == "running") return MomentMode::running;
  if (s == "t-mean" || s == "t_mean") return MomentMode::t_mean;
  if (s == "t-var" || s == "t_var") return MomentMode::t_var;
  if (s == "t-both" || s == "t_both") return MomentMode::t_both;
  throw ConfigError("unknown moment mode '" + s + "'");
}

std::string moment_mode_to_string(MomentMode m) {
  switch (m) {
    case MomentMode::running: return "running";
    case MomentMode::t_mean: return "t-mean";
    case MomentMode::t_var: return "t-var";
    case MomentMode::t_both: return "t-both";
  }
  return "?";
}

ModelSpec ModelSpec::synth_default(std::size_t in_channels, std::size_t height,
                                   std::size_t width,
                                   std::size_t classes_per_task) {
  ModelSpec s;
  s.in_channels = in_channels;
  s.height = height;
  s.width = width;
  s.classes_per_task = classes_per_task;
  s.blocks = {
      {6, 3, 1, 2},  // stride 1, padding K-1
      {8, 2, 2, 0},  // K == stride: downsampling, still exactly recoverable
      {8, 3, 1, 2},
  };
  return s;
}

void ModelSpec::validate() const {
  if (in_channels < 1 || height < 1 || width < 1 || classes_per_task < 2) {
    throw ConfigError("model spec needs positive dims and >= 2 classes");
  }
  if (blocks.empty()) throw ConfigError("model spec needs >= 1 block");
  feature_dim();  // throws if any extent is inconsistent
}

std::size_t ModelSpec::feature_dim() const {
  std::size_t h = height, w = width, c = in_channels;
  for (const BlockSpec& b : blocks) {
    ConvSpec cs;
    cs.out_channels = b.out_channels;
    cs.in_channels = c;
    cs.kernel = b.kernel;
    cs.stride = b.stride;
    cs.padding = b.padding;
    h = cs.out_extent(h);
    w = cs.out_extent(w);
    c = b.out_channels;
  }
  return c * h * w;
}

ContinualModel::ContinualModel(const ModelSpec& spec, NormMode mode,
                               double bn_momentum, double stab_eps,
                               Dtype dtype, Rng& init_rng)
    : spec_(spec),
      mode_(mode),
      bn_momentum_(bn_momentum),
      stab_eps_(stab_eps),
      dtype_(dtype) {
  spec_.validate();
  std::size_t c = spec_.in_channels;
  std::size_t h = spec_.height, w = spec_.width;
  for (const BlockSpec& b : spec_.blocks) {
    Block blk;
    blk.conv.out_channels = b.out_channels;
    blk.conv.in_channels = c;
    blk.conv.kernel = b.kernel;
    blk.conv.stride = b.stride;
    blk.conv.padding = b.padding;
    blk.conv.has_bias = false;  // norm layer follows; bias is redundant
    blk.in_h = h;
    blk.in_w = w;
    blk.weight = Tensor({b.out_channels, c, b.kernel, b.kernel}, dtype);
    const double scale =
        std::sqrt(2.0 / double(c * b.kernel * b.kernel));
    for (std::size_t i = 0; i < blk.weight.size(); ++i) {
      blk.weight[i] = init_rng.normal(0.0, scale);
    }
    blk.weight.quantize();
    blk.tmpl.gamma = Tensor::full({b.out_channels}, 1.0, dtype);
    blk.tmpl.beta = Tensor::zeros({b.out_channels}, dtype);
    blk.tmpl.running_mean = Tensor::zeros({b.out_channels}, dtype);
    blk.tmpl.running_var = Tensor::full({b.out_channels}, 1.0, dtype);
    blk.tmpl.pre_means.assign(blk.conv.stride * blk.conv.stride,
                              Tensor::zeros({c}, dtype));
    blk.tmpl.in_h = h;
    blk.tmpl.in_w = w;
    blk.tmpl.has_spatial = false;
    blk.shared = BatchNormState::init(b.out_channels, dtype, bn_momentum,
                                      stab_eps);
    h = blk.conv.out_extent(h);
    w = blk.conv.out_extent(w);
    c = b.out_channels;
    blocks_.push_back(std::move(blk));
  }
}

std::vector<std::size_t> ContinualModel::trained_tasks() const {
  std::vector<std::size_t> out;
  for (const auto& [id, head] : heads_) out.push_back(id);
  return out;
}

void ContinualModel::start_task(std::size_t task, std::size_t num_classes,
                                bool random_head, Rng& rng) {
  if (heads_.count(task)) {
    throw StateError("task " + std::to_string(task) + " already trained");
  }
  if (num_classes < 2) throw StateError("a task head needs >= 2 classes");
  Head head;
  head.weight = Tensor({num_classes, spec_.feature_dim()}, dtype_);
  head.bias = Tensor({num_classes}, dtype_);
  if (random_head) {
    for (std::size_t i = 0; i < head.weight.size(); ++i) {
      head.weight[i] = rng.uniform(-0.1, 0.1);
    }
    head.weight.quantize();
  }
  heads_[task] = std::move(head);

  // New banks warm-start from the template so normalization knowledge
  // carries forward without touching earlier tasks' frozen state.
  for (Block& blk : blocks_) {
    if (mode_ == NormMode::task_bn) {
      BatchNormState st = BatchNormState::init(blk.conv.out_channels, dtype_,
                                               bn_momentum_, stab_eps_);
      st.gamma = blk.tmpl.gamma;
      st.beta = blk.tmpl.beta;
      st.running_mean = blk.tmpl.running_mean;
      st.running_var = blk.tmpl.running_var;
      blk.task_bn.emplace(task, std::move(st));
    } else if (mode_ == NormMode::xconv_bn) {
      XconvTaskRecord rec = XconvTaskRecord::init(
          blk.conv.out_channels, blk.conv.in_channels, blk.conv.stride, dtype_);
      rec.gamma = blk.tmpl.gamma;
      rec.beta = blk.tmpl.beta;
      rec.pre_means = blk.tmpl.pre_means;
      rec.running_var = blk.tmpl.running_var;
      // Spatial extent is pinned immediately (nominal when the template has
      // never seen data) so mean recovery is defined even before training.
      rec.in_h = blk.tmpl.has_spatial ? blk.tmpl.in_h : blk.in_h;
      rec.in_w = blk.tmpl.has_spatial ? blk.tmpl.in_w : blk.in_w;
      rec.has_spatial = true;
      blk.xconv.emplace(task, std::move(rec));
    }
  }
}

void ContinualModel::finish_task(std::size_t task) {
  for (Block& blk : blocks_) {
    if (mode_ == NormMode::shared_bn) {
      blk.tmpl.gamma = blk.shared.gamma;
      blk.tmpl.beta = blk.shared.beta;
      blk.tmpl.running_mean = blk.shared.running_mean;
      blk.tmpl.running_var = blk.shared.running_var;
    } else if (mode_ == NormMode::task_bn) {
      const BatchNormState& st = blk.task_bn.at(task);
      blk.tmpl.gamma = st.gamma;
      blk.tmpl.beta = st.beta;
      blk.tmpl.running_mean = st.running_mean;
      blk.tmpl.running_var = st.running_var;
    } else {
      XconvTaskRecord& rec = blk.xconv.at(task);
      rec.frozen = true;
      blk.tmpl.gamma = rec.gamma;
      blk.tmpl.beta = rec.beta;
      blk.tmpl.pre_means = rec.pre_means;
      blk.tmpl.running_var = rec.running_var;
      blk.tmpl.in_h = rec.in_h;
      blk.tmpl.in_w = rec.in_w;
      blk.tmpl.has_spatial = rec.has_spatial;
    }
  }
}

void ContinualModel::drop_task(std::size_t task) {
  heads_.erase(task);
  for (Block& blk : blocks_) {
    blk.task_bn.erase(task);
    blk.xconv.erase(task);
  }
}

Tensor ContinualModel::forward_train_features(const Tensor& x,
                                              std::size_t task,
                                              ForwardCache& cache) {
  if (!heads_.count(task)) {
    throw StateError("no bank for task " + std::to_string(task));
  }
  cache.blocks.assign(blocks_.size(), BlockCache{});
  Tensor a = x;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    Block& blk = blocks_[l];
    BlockCache& bc = cache.blocks[l];
    bc.conv_in = a;
    Tensor z = conv2d_forward(a, blk.conv, blk.weight);
    Tensor n;
    if (mode_ == NormMode::shared_bn) {
      n = bn_forward_train(z, blk.shared, bc.bn);
    } else if (mode_ == NormMode::task_bn) {
      n = bn_forward_train(z, blk.task_bn.at(task), bc.bn);
    } else {
      XconvTaskRecord& rec = blk.xconv.at(task);
      xconv_update_pre_means(bc.conv_in, rec, bn_momentum_);
      n = xconv_forward_train(z, rec, bn_momentum_, stab_eps_, bc.bn);
    }
    a = relu_forward(n, &bc.relu_mask);
  }
  cache.features = flatten(a);
  return cache.features;
}

ContinualModel::MomentOverrides ContinualModel::MomentOverrides::none(
    std::size_t layers) {
  MomentOverrides o;
  o.mean.assign(layers, std::nullopt);
  o.var.assign(layers, std::nullopt);
  return o;
}

Tensor ContinualModel::forward_eval_features(
    const Tensor& x, std::size_t task, const MomentOverrides& overrides) const {
  if (!heads_.count(task)) {
    throw StateError("no bank for task " + std::to_string(task));
  }
  if (overrides.mean.size() != blocks_.size() ||
      overrides.var.size() != blocks_.size()) {
    throw StateError("moment override count does not match layer count");
  }
  Tensor a = x;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& blk = blocks_[l];
    Tensor z = conv2d_forward(a, blk.conv, blk.weight);
    const Tensor mean = overrides.mean[l].has_value()
                            ? *overrides.mean[l]
                            : norm_mean_for_task(l, task);
    const Tensor var = overrides.var[l].has_value()
                           ? *overrides.var[l]
                           : norm_var_for_task(l, task);
    const Tensor* gamma = nullptr;
    const Tensor* beta = nullptr;
    if (mode_ == NormMode::shared_bn) {
      gamma = &blk.shared.gamma;
      beta = &blk.shared.beta;
    } else if (mode_ == NormMode::task_bn) {
      gamma = &blk.task_bn.at(task).gamma;
      beta = &blk.task_bn.at(task).beta;
    } else {
      gamma = &blk.xconv.at(task).gamma;
      beta = &blk.xconv.at(task).beta;
    }
    Tensor n = bn_forward_eval_with(z, mean, var, *gamma, *beta, stab_eps_);
    a = relu_forward(n);
  }
  return flatten(a);
}

Tensor ContinualModel::forward_eval_features(const Tensor& x,
                                             std::size_t task) const {
  return forward_eval_features(x, task, MomentOverrides::none(blocks_.size()));
}

Tensor ContinualModel::head_logits(const Tensor& features,
                                   std::size_t task) const {
  auto it = heads_.find(task);
  if (it == heads_.end()) {
    throw StateError("no head for task " + std::to_string(task));
  }
  return linear_forward(features, it->second.weight, it->second.bias);
}

void ContinualModel::run_recovery() {
  if (mode_ != NormMode::xconv_bn) return;
  for (Block& blk : blocks_) {
    for (auto& [task, rec] : blk.xconv) {
      xconv_recover_mean(rec, blk.conv, blk.weight);
    }
  }
}

void ContinualModel::invalidate_recovery() {
  if (mode_ != NormMode::xconv_bn) return;
  for (Block& blk : blocks_) {
    for (auto& [task, rec] : blk.xconv) rec.recovered_mean.reset();
  }
}

const ContinualModel::Block& ContinualModel::checked_block(
    std::size_t layer) const {
  if (layer >= blocks_.size()) {
    throw StateError("layer index " + std::to_string(layer) + " out of range");
  }
  return blocks_[layer];
}

Tensor ContinualModel::norm_mean_for_task(std::size_t layer,
                                          std::size_t task) const {
  const Block& blk = checked_block(layer);
  if (mode_ == NormMode::shared_bn) return blk.shared.running_mean;
  if (mode_ == NormMode::task_bn) {
    auto it = blk.task_bn.find(task);
    if (it == blk.task_bn.end()) {
      throw StateError("no bank for task " + std::to_string(task));
    }
    return it->second.running_mean;
  }
  auto it = blk.xconv.find(task);
  if (it == blk.xconv.end()) {
    throw StateError("no bank for task " + std::to_string(task));
  }
  if (!it->second.recovered_mean.has_value()) {
    throw StateError("stale recovery: run_recovery() required after weight "
                     "changes");
  }
  return *it->second.recovered_mean;
}

Tensor ContinualModel::norm_var_for_task(std::size_t layer,
                                         std::size_t task) const {
  const Block& blk = checked_block(layer);
  if (mode_ == NormMode::shared_bn) return blk.shared.running_var;
  if (mode_ == NormMode::task_bn) {
    auto it = blk.task_bn.find(task);
    if (it == blk.task_bn.end()) {
      throw StateError("no bank for task " + std::to_string(task));
    }
    return it->second.running_var;
  }
  auto it = blk.xconv.find(task);
  if (it == blk.xconv.end()) {
    throw StateError("no bank for task " + std::to_string(task));
  }
  return it->second.running_var;
}

void ContinualModel::true_moments(const Tensor& x, std::size_t task,
                                  std::size_t layer, Tensor& mean, Tensor& var,
                                  const MomentOverrides& overrides) const {
  checked_block(layer);
  Tensor a = x;
  for (std::size_t l = 0; l < layer; ++l) {
    const Block& blk = blocks_[l];
    Tensor z = conv2d_forward(a, blk.conv, blk.weight);
    const Tensor m = overrides.mean[l].has_value()
                         ? *overrides.mean[l]
                         : norm_mean_for_task(l, task);
    const Tensor v = overrides.var[l].has_value() ? *overrides.var[l]
                                                  : norm_var_for_task(l, task);
    const Tensor* gamma;
    const Tensor* beta;
    if (mode_ == NormMode::shared_bn) {
      gamma = &blk.shared.gamma;
      beta = &blk.shared.beta;
    } else if (mode_ == NormMode::task_bn) {
      gamma = &blk.task_bn.at(task).gamma;
      beta = &blk.task_bn.at(task).beta;
    } else {
      gamma = &blk.xconv.at(task).gamma;
      beta = &blk.xconv.at(task).beta;
    }
    Tensor n = bn_forward_eval_with(z, m, v, *gamma, *beta, stab_eps_);
    a = relu_forward(n);
  }
  const Tensor z = conv2d_forward(a, blocks_[layer].conv,
                                  blocks_[layer].weight);
  batch_moments(z, mean, var);
}

void ContinualModel::true_moments(const Tensor& x, std::size_t task,
                                  std::size_t layer, Tensor& mean,
                                  Tensor& var) const {
  true_moments(x, task, layer, mean, var,
               MomentOverrides::none(blocks_.size()));
}

double evaluate(ContinualModel& model, std::size_t task, const SplitData& test,
                MomentMode moments) {
  if (test.x.rank() != 4 || test.x.dim(0) == 0 || test.y.rank() != 1 ||
      test.y.dim(0) != test.x.dim(0)) {
    throw DataError("empty or malformed test set");
  }
  if (!model.has_task(task)) {
    throw StateError("no bank for task " + std::to_string(task));
  }
  model.run_recovery();

  const std::size_t layers = model.blocks().size();
  auto overrides = ContinualModel::MomentOverrides::none(layers);
  if (moments != MomentMode::running) {
    // Sequential transductive pre-pass: each layer's true moments are
    // computed with earlier layers already normalized the transductive way.
    for (std::size_t l = 0; l < layers; ++l) {
      Tensor m, v;
      model.true_moments(test.x, task, l, m, v, overrides);
      if (moments == MomentMode::t_mean || moments == MomentMode::t_both) {
        overrides.mean[l] = m;
      }
      if (moments == MomentMode::t_var || moments == MomentMode::t_both) {
        overrides.var[l] = v;
      }
    }
  }

  const Tensor features = model.forward_eval_features(test.x, task, overrides);
  const Tensor logits = model.head_logits(features, task);
  const auto labels = labels_from_tensor(test.y, logits.dim(1));

  std::size_t correct = 0;
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (logits.at2(b, k) > logits.at2(b, best)) best = k;
    }
    if (best == labels[b]) ++correct;
  }
  return double(correct) / double(B);
}

MeanProbeSnapshot collect_probe(ContinualModel& model, std::size_t task,
                                const Tensor& test_x) {
  model.run_recovery();
  MeanProbeSnapshot snap;
  const std::size_t layers = model.blocks().size();
  for (std::size_t l = 0; l < layers; ++l) {
    snap.mu_r.push_back(model.norm_mean_for_task(l, task));
    Tensor m, v;
    model.true_moments(test_x, task, l, m, v);
    snap.mu_te.push_back(m);
  }
  return snap;
}

}  // namespace confit
