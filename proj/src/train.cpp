#include "confit/train.hpp"

#include <cmath>
#include <numeric>

#include "confit/error.hpp"

namespace confit {

ScheduleMode schedule_mode_from_string(const std::string& s) {
  if (s == "plain" || s == "plain_ft") return ScheduleMode::plain_ft;
  if (s == "hierarchical") return ScheduleMode::hierarchical;
  if (s == "lp" || s == "linear_probe_only") {
    return ScheduleMode::linear_probe_only;
  }
  if (s == "stl") return ScheduleMode::stl;
  throw ConfigError("unknown schedule mode '" + s + "'");
}

std::string schedule_mode_to_string(ScheduleMode m) {
  switch (m) {
    case ScheduleMode::plain_ft: return "plain_ft";
    case ScheduleMode::hierarchical: return "hierarchical";
    case ScheduleMode::linear_probe_only: return "linear_probe_only";
    case ScheduleMode::stl: return "stl";
  }
  return "?";
}

void StageSchedule::validate() const {
  if (total_epochs < 1) throw ConfigError("total_epochs must be >= 1");
  if (f_head < 0 || f_head_norm < 0 || f_all < 0 ||
      std::abs(f_head + f_head_norm + f_all - 1.0) > 1e-9) {
    throw ConfigError("stage fractions must be nonnegative and sum to 1");
  }
}

std::array<std::size_t, 3> StageSchedule::stage_epochs() const {
  validate();
  switch (mode) {
    case ScheduleMode::hierarchical: {
      const auto e1 = std::size_t(double(total_epochs) * f_head);
      const auto e2 = std::size_t(double(total_epochs) * f_head_norm);
      return {e1, e2, total_epochs - e1 - e2};
    }
    case ScheduleMode::linear_probe_only:
      return {total_epochs, 0, 0};
    case ScheduleMode::plain_ft:
    case ScheduleMode::stl:
      return {0, 0, total_epochs};
  }
  return {0, 0, total_epochs};
}

void TrainConfig::validate() const {
  if (lr <= 0.0) throw ConfigError("learning rate must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (bn_momentum <= 0.0 || bn_momentum > 1.0) {
    throw ConfigError("bn momentum must be in (0, 1]");
  }
  if (stab_eps <= 0.0) throw ConfigError("stab_eps must be positive");
  schedule.validate();
}

namespace {

void sgd_update(Tensor& param, const Tensor& grad, double lr) {
  for (std::size_t i = 0; i < param.size(); ++i) param[i] -= lr * grad[i];
  param.quantize();
}

Tensor gather_batch(const Tensor& x, const std::vector<std::size_t>& order,
                    std::size_t begin, std::size_t end) {
  const std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t sample = C * H * W;
  Tensor batch({end - begin, C, H, W}, x.dtype());
  for (std::size_t b = begin; b < end; ++b) {
    const std::size_t src = order[b];
    for (std::size_t i = 0; i < sample; ++i) {
      batch[(b - begin) * sample + i] = x[src * sample + i];
    }
  }
  return batch;
}

}  // namespace

double train_step(ContinualModel& model, const Tensor& x,
                  const std::vector<std::size_t>& labels, std::size_t task,
                  const ParamFilter& filter, double lr) {
  ContinualModel::ForwardCache cache;
  const Tensor features = model.forward_train_features(x, task, cache);
  ContinualModel::Head& head = model.heads().at(task);
  const Tensor logits = linear_forward(features, head.weight, head.bias);
  SoftmaxCeResult ce = softmax_cross_entropy(logits, labels);
  const Tensor grad_logits = softmax_cross_entropy_backward(ce.probs, labels);
  LinearGrads head_grads = linear_backward(features, head.weight, grad_logits);

  // Backprop through the feature stack before any parameter moves, so every
  // gradient is taken at the forward pass's parameter values.
  const std::size_t L = model.blocks().size();
  std::vector<BnGrads> bn_grads(L);
  std::vector<ConvGrads> conv_grads(L);
  Tensor grad = unflatten(head_grads.grad_input,
                          cache.blocks[L - 1].relu_mask.shape());
  for (std::size_t li = L; li-- > 0;) {
    ContinualModel::Block& blk = model.blocks()[li];
    ContinualModel::BlockCache& bc = cache.blocks[li];
    const Tensor grad_norm_out = relu_backward(bc.relu_mask, grad);
    bn_grads[li] = bn_backward(bc.bn, grad_norm_out);
    conv_grads[li] =
        conv2d_backward(bc.conv_in, blk.conv, blk.weight, bn_grads[li].grad_input);
    if (li > 0) grad = conv_grads[li].grad_input;
  }

  if (filter.head) {
    sgd_update(head.weight, head_grads.grad_weight, lr);
    sgd_update(head.bias, head_grads.grad_bias, lr);
  }
  for (std::size_t li = 0; li < L; ++li) {
    ContinualModel::Block& blk = model.blocks()[li];
    if (filter.norm_affine) {
      Tensor* gamma;
      Tensor* beta;
      if (model.mode() == NormMode::shared_bn) {
        gamma = &blk.shared.gamma;
        beta = &blk.shared.beta;
      } else if (model.mode() == NormMode::task_bn) {
        gamma = &blk.task_bn.at(task).gamma;
        beta = &blk.task_bn.at(task).beta;
      } else {
        gamma = &blk.xconv.at(task).gamma;
        beta = &blk.xconv.at(task).beta;
      }
      sgd_update(*gamma, bn_grads[li].grad_gamma, lr);
      sgd_update(*beta, bn_grads[li].grad_beta, lr);
    }
    if (filter.features) {
      sgd_update(blk.weight, conv_grads[li].grad_weight, lr);
    }
  }
  if (filter.features) model.invalidate_recovery();
  return ce.loss;
}

namespace {

// Head-only pass over frozen features: the stack runs in eval mode, so no
// weight, affine, or statistic changes by a single bit.
double frozen_probe_step(ContinualModel& model, const Tensor& x,
                         const std::vector<std::size_t>& labels,
                         std::size_t task, double lr) {
  const Tensor features = model.forward_eval_features(x, task);
  ContinualModel::Head& head = model.heads().at(task);
  const Tensor logits = linear_forward(features, head.weight, head.bias);
  SoftmaxCeResult ce = softmax_cross_entropy(logits, labels);
  const Tensor grad_logits = softmax_cross_entropy_backward(ce.probs, labels);
  LinearGrads hg = linear_backward(features, head.weight, grad_logits);
  sgd_update(head.weight, hg.grad_weight, lr);
  sgd_update(head.bias, hg.grad_bias, lr);
  return ce.loss;
}

TrainLog run_schedule(ContinualModel& model, const TaskDataset& task,
                      const TrainConfig& cfg,
                      const std::array<std::size_t, 3>& stage_epochs,
                      Rng& rng) {
  const std::size_t N = task.train.x.dim(0);
  const auto labels = labels_from_tensor(task.train.y, task.num_classes);

  TrainLog log;
  log.task_id = task.task_id;
  log.stage_epochs = stage_epochs;

  const bool frozen_stack =
      cfg.schedule.mode == ScheduleMode::linear_probe_only;
  if (frozen_stack) model.run_recovery();  // weights never move below

  const ParamFilter filters[3] = {
      {true, false, false},  // head only
      {true, true, false},   // head + normalization affine
      {true, true, true},    // everything
  };

  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t stage = 0; stage < 3; ++stage) {
    for (std::size_t epoch = 0; epoch < stage_epochs[stage]; ++epoch) {
      rng.shuffle(order);
      double loss_sum = 0.0;
      std::size_t batches = 0;
      for (std::size_t begin = 0; begin < N; begin += cfg.batch_size) {
        const std::size_t end = std::min(N, begin + cfg.batch_size);
        Tensor bx = gather_batch(task.train.x, order, begin, end);
        std::vector<std::size_t> by(end - begin);
        for (std::size_t i = begin; i < end; ++i) {
          by[i - begin] = labels[order[i]];
        }
        loss_sum += frozen_stack
                        ? frozen_probe_step(model, bx, by, task.task_id,
                                            cfg.lr)
                        : train_step(model, bx, by, task.task_id,
                                     filters[stage], cfg.lr);
        ++batches;
      }
      log.epoch_losses.push_back(loss_sum / double(batches));
    }
  }
  return log;
}

}  // namespace

TrainLog train_task(ContinualModel& model, const TaskDataset& task,
                    const TrainConfig& cfg, Rng& rng) {
  if (task.train.x.rank() != 4 || task.train.x.dim(0) == 0) {
    throw DataError("empty or malformed training set for task " +
                    std::to_string(task.task_id));
  }
  const bool random_head = cfg.schedule.mode == ScheduleMode::plain_ft ||
                           cfg.schedule.mode == ScheduleMode::stl;
  model.start_task(task.task_id, task.num_classes, random_head, rng);
  TrainLog log =
      run_schedule(model, task, cfg, cfg.schedule.stage_epochs(), rng);
  model.finish_task(task.task_id);
  model.run_recovery();
  return log;
}

void pretrain(ContinualModel& model, const TaskDataset& pretext,
              std::size_t epochs, const TrainConfig& cfg, Rng& rng) {
  if (epochs == 0) return;
  model.start_task(pretext.task_id, pretext.num_classes, true, rng);
  run_schedule(model, pretext, cfg, {0, 0, epochs}, rng);
  model.finish_task(pretext.task_id);  // affine template keeps the values
  model.drop_task(pretext.task_id);
  model.invalidate_recovery();
}

RunState init_run(const ModelSpec& mspec, const TrainConfig& cfg,
                  const TaskSequence& seq) {
  cfg.validate();
  mspec.validate();
  if (seq.tasks.empty()) throw DataError("task sequence is empty");

  RunState state;
  state.rng = Rng(cfg.seed);
  state.model = ContinualModel(mspec, cfg.norm_mode, cfg.bn_momentum,
                               cfg.stab_eps, cfg.precision, state.rng);
  if (cfg.pretrain_epochs > 0) {
    if (!seq.pretext.has_value()) {
      throw ConfigError("pretrain_epochs > 0 but the dataset has no pretext "
                        "task");
    }
    pretrain(state.model, *seq.pretext, cfg.pretrain_epochs, cfg, state.rng);
  }
  state.matrix = AccuracyMatrix(seq.tasks.size());
  state.next_task = 0;
  return state;
}

void run_tasks(RunState& state, const TaskSequence& seq,
               const TrainConfig& cfg, std::size_t stop_after) {
  const std::size_t T = seq.tasks.size();
  stop_after = std::min(stop_after, T);
  const bool stl = cfg.schedule.mode == ScheduleMode::stl;

  for (std::size_t t = state.next_task; t < stop_after; ++t) {
    if (stl) {
      // Fresh copy of the untouched initial model; past tasks' models are
      // never revisited, so their accuracies carry over unchanged.
      ContinualModel trained = state.model;
      state.logs.push_back(train_task(trained, seq.tasks[t], cfg, state.rng));
      const double a_tt =
          evaluate(trained, t, seq.tasks[t].test, cfg.eval_moments);
      for (std::size_t i = 0; i < t; ++i) {
        state.matrix.set(i, t, state.matrix.get(i, i));
      }
      state.matrix.set(t, t, a_tt);
    } else {
      state.logs.push_back(
          train_task(state.model, seq.tasks[t], cfg, state.rng));
      for (std::size_t i = 0; i <= t; ++i) {
        state.matrix.set(
            i, t, evaluate(state.model, i, seq.tasks[i].test, cfg.eval_moments));
      }
      if (t == 0) {
        state.probe_after_first =
            collect_probe(state.model, 0, seq.tasks[0].test.x);
      }
      if (t + 1 == T) {
        state.probe_after_last =
            collect_probe(state.model, 0, seq.tasks[0].test.x);
      }
    }
    state.next_task = t + 1;
  }
}

RunResult finish_run(RunState& state) {
  RunResult res;
  res.matrix = state.matrix;
  res.acc_value = acc(state.matrix);
  res.fgt_value = fgt(state.matrix);
  res.logs = state.logs;
  if (state.probe_after_first.has_value() &&
      state.probe_after_last.has_value()) {
    res.deltas =
        delta_diagnostics(*state.probe_after_first, *state.probe_after_last);
  }
  return res;
}

RunResult continual_run(const TaskSequence& seq, const ModelSpec& mspec,
                        const TrainConfig& cfg) {
  RunState state = init_run(mspec, cfg, seq);
  run_tasks(state, seq, cfg, seq.tasks.size());
  return finish_run(state);
}

}  // namespace confit
