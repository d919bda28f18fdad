// Continual model + trainer: schedules, parameter filters, bank isolation,
// mode semantics, determinism, and the transductive evaluation paths.
#include <array>
#include <cmath>
#include <vector>

#include "confit/bn.hpp"
#include "confit/conv.hpp"
#include "confit/datagen.hpp"
#include "confit/error.hpp"
#include "confit/layers.hpp"
#include "confit/model.hpp"
#include "confit/train.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace confit;

namespace {

ModelSpec tiny_spec() {
  ModelSpec s;
  s.in_channels = 1;
  s.height = 8;
  s.width = 8;
  s.classes_per_task = 3;
  // One exact-recovery block, one downsampling block with K == stride.
  s.blocks = {{3, 3, 1, 2}, {4, 2, 2, 0}};
  return s;
}

TaskSequenceSpec tiny_data(std::size_t tasks, std::uint64_t seed,
                           bool pretext = false) {
  TaskSequenceSpec d;
  d.num_tasks = tasks;
  d.classes_per_task = 3;
  d.train_per_class = 8;
  d.test_per_class = 6;
  d.channels = 1;
  d.height = 8;
  d.width = 8;
  d.seed = seed;
  d.with_pretext = pretext;
  d.pretext_classes = 4;
  return d;
}

TrainConfig tiny_config(ScheduleMode mode, NormMode norm,
                        std::uint64_t seed) {
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.batch_size = 8;
  cfg.seed = seed;
  cfg.norm_mode = norm;
  cfg.schedule.mode = mode;
  cfg.schedule.total_epochs = 4;
  return cfg;
}

// Every tensor whose bytes define the shared feature stack.
std::vector<Tensor> stack_snapshot(const ContinualModel& m) {
  std::vector<Tensor> out;
  for (const auto& blk : m.blocks()) {
    out.push_back(blk.weight);
    out.push_back(blk.shared.gamma);
    out.push_back(blk.shared.beta);
    out.push_back(blk.shared.running_mean);
    out.push_back(blk.shared.running_var);
  }
  return out;
}

bool all_equal(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] == b[i])) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("stage epochs partition the total for any valid fractions") {
  const double fracs[][3] = {{0.2, 0.3, 0.5},
                             {1.0 / 3, 1.0 / 3, 1.0 / 3},
                             {0.0, 0.0, 1.0},
                             {1.0, 0.0, 0.0},
                             {0.5, 0.25, 0.25}};
  for (const auto& f : fracs) {
    for (std::size_t total = 1; total <= 50; ++total) {
      StageSchedule s;
      s.total_epochs = total;
      s.f_head = f[0];
      s.f_head_norm = f[1];
      s.f_all = f[2];
      s.mode = ScheduleMode::hierarchical;
      const auto e = s.stage_epochs();
      CHECK(e[0] + e[1] + e[2] == total);
    }
  }
}

TEST_CASE("stage epochs: worked splits and degenerate modes") {
  StageSchedule s;
  s.total_epochs = 10;
  CHECK(s.stage_epochs() == std::array<std::size_t, 3>{2, 3, 5});
  s.total_epochs = 7;
  CHECK(s.stage_epochs() == std::array<std::size_t, 3>{1, 2, 4});
  s.total_epochs = 1;
  CHECK(s.stage_epochs() == std::array<std::size_t, 3>{0, 0, 1});

  s.total_epochs = 9;
  s.mode = ScheduleMode::linear_probe_only;
  CHECK(s.stage_epochs() == std::array<std::size_t, 3>{9, 0, 0});
  s.mode = ScheduleMode::plain_ft;
  CHECK(s.stage_epochs() == std::array<std::size_t, 3>{0, 0, 9});
  s.mode = ScheduleMode::stl;
  CHECK(s.stage_epochs() == std::array<std::size_t, 3>{0, 0, 9});
}

TEST_CASE("config validation rejects bad schedules and hyperparameters") {
  StageSchedule s;
  s.total_epochs = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.total_epochs = 5;
  s.f_head = 0.5;  // 0.5 + 0.3 + 0.5 != 1
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.f_head = -0.2;
  s.f_head_norm = 0.7;
  s.f_all = 0.5;
  CHECK_THROWS_AS(s.validate(), ConfigError);

  TrainConfig cfg;
  cfg.lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.bn_momentum = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.bn_momentum = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  CHECK(schedule_mode_from_string("plain") == ScheduleMode::plain_ft);
  CHECK(schedule_mode_from_string("lp") == ScheduleMode::linear_probe_only);
  CHECK_THROWS_AS(schedule_mode_from_string("banana"), ConfigError);
}

TEST_CASE("model geometry: feature dims and invalid specs") {
  CHECK(ModelSpec::synth_default(1, 16, 16, 4).feature_dim() == 968);
  CHECK(tiny_spec().feature_dim() == 100);  // (3,10,10) -> (4,5,5)

  ModelSpec bad = tiny_spec();
  bad.blocks[1].kernel = 3;  // (10 - 3) not divisible by stride 2
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = tiny_spec();
  bad.classes_per_task = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_spec();
  bad.blocks.clear();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("task lifecycle: duplicate starts, head init, unknown tasks") {
  Rng rng(3);
  ContinualModel m(tiny_spec(), NormMode::task_bn, 0.1, 1e-5, Dtype::f64, rng);
  CHECK_FALSE(m.has_task(0));
  CHECK_THROWS_AS(m.head_logits(Tensor::zeros({1, 100}), 0), StateError);

  m.start_task(0, 3, /*random_head=*/false, rng);
  CHECK(m.has_task(0));
  CHECK(m.heads().at(0).weight.shape() == std::vector<std::size_t>{3, 100});
  CHECK(max_abs_diff(m.heads().at(0).weight,
                     Tensor::zeros({3, 100})) == 0.0);  // probed head: zeros
  CHECK_THROWS_AS(m.start_task(0, 3, false, rng), StateError);

  m.start_task(1, 4, /*random_head=*/true, rng);
  CHECK(max_abs_diff(m.heads().at(1).weight, Tensor::zeros({4, 100})) > 0.0);
  double biggest = 0.0;
  for (std::size_t i = 0; i < m.heads().at(1).weight.size(); ++i) {
    biggest = std::max(biggest, std::abs(m.heads().at(1).weight[i]));
  }
  CHECK(biggest <= 0.1);  // small uniform init

  m.drop_task(1);
  CHECK_FALSE(m.has_task(1));
  CHECK(m.has_task(0));
  CHECK_THROWS_AS(m.start_task(0, 1, false, rng), StateError);
}

TEST_CASE("parameter filters touch exactly their stage's parameters") {
  const TaskSequence seq = generate(tiny_data(1, 21));
  Rng rng(5);
  for (NormMode norm :
       {NormMode::shared_bn, NormMode::task_bn, NormMode::xconv_bn}) {
    const std::string mode_name = norm_mode_to_string(norm);
    CAPTURE(mode_name);
    ContinualModel m(tiny_spec(), norm, 0.1, 1e-5, Dtype::f64, rng);
    m.start_task(0, 3, false, rng);
    const Tensor x = seq.tasks[0].train.x;
    const auto labels = labels_from_tensor(seq.tasks[0].train.y, 3);

    auto gamma_of = [&](std::size_t l) {
      const auto& blk = m.blocks()[l];
      if (norm == NormMode::shared_bn) return blk.shared.gamma;
      if (norm == NormMode::task_bn) return blk.task_bn.at(0).gamma;
      return blk.xconv.at(0).gamma;
    };

    // Stage 1: head only. Weights and affine stay bitwise put.
    const Tensor w0 = m.blocks()[0].weight;
    const Tensor g0 = gamma_of(0);
    const Tensor h0 = m.heads().at(0).weight;
    train_step(m, x, labels, 0, {true, false, false}, 0.05);
    CHECK(m.blocks()[0].weight == w0);
    CHECK(gamma_of(0) == g0);
    CHECK_FALSE(m.heads().at(0).weight == h0);

    // Stage 2: affine joins in, conv weights still frozen.
    train_step(m, x, labels, 0, {true, true, false}, 0.05);
    CHECK(m.blocks()[0].weight == w0);
    CHECK_FALSE(gamma_of(0) == g0);

    // Stage 3: everything moves.
    const Tensor w1 = m.blocks()[0].weight;
    train_step(m, x, labels, 0, {true, true, true}, 0.05);
    CHECK_FALSE(m.blocks()[0].weight == w1);
  }
}

TEST_CASE("training a later task rewrites no byte of earlier banks/heads") {
  const TaskSequence seq = generate(tiny_data(2, 22));
  for (NormMode norm : {NormMode::task_bn, NormMode::xconv_bn}) {
    const std::string mode_name = norm_mode_to_string(norm);
    CAPTURE(mode_name);
    TrainConfig cfg = tiny_config(ScheduleMode::hierarchical, norm, 9);
    RunState state = init_run(tiny_spec(), cfg, seq);
    run_tasks(state, seq, cfg, 1);

    auto head0_w = state.model.heads().at(0).weight;
    auto head0_b = state.model.heads().at(0).bias;
    std::vector<Tensor> bank0;
    for (const auto& blk : state.model.blocks()) {
      if (norm == NormMode::task_bn) {
        const auto& st = blk.task_bn.at(0);
        bank0.insert(bank0.end(), {st.gamma, st.beta, st.running_mean,
                                   st.running_var});
      } else {
        const auto& rec = blk.xconv.at(0);
        bank0.insert(bank0.end(), {rec.gamma, rec.beta, rec.running_var});
        bank0.insert(bank0.end(), rec.pre_means.begin(), rec.pre_means.end());
      }
    }

    run_tasks(state, seq, cfg, 2);

    CHECK(state.model.heads().at(0).weight == head0_w);
    CHECK(state.model.heads().at(0).bias == head0_b);
    std::vector<Tensor> bank0_after;
    for (const auto& blk : state.model.blocks()) {
      if (norm == NormMode::task_bn) {
        const auto& st = blk.task_bn.at(0);
        bank0_after.insert(bank0_after.end(),
                           {st.gamma, st.beta, st.running_mean,
                            st.running_var});
      } else {
        const auto& rec = blk.xconv.at(0);
        bank0_after.insert(bank0_after.end(),
                           {rec.gamma, rec.beta, rec.running_var});
        bank0_after.insert(bank0_after.end(), rec.pre_means.begin(),
                           rec.pre_means.end());
      }
    }
    CHECK(all_equal(bank0, bank0_after));
  }
}

TEST_CASE("linear-probe-only leaves the feature stack bitwise unchanged") {
  const TaskSequence seq = generate(tiny_data(2, 23));
  for (NormMode norm :
       {NormMode::shared_bn, NormMode::task_bn, NormMode::xconv_bn}) {
    const std::string mode_name = norm_mode_to_string(norm);
    CAPTURE(mode_name);
    TrainConfig cfg = tiny_config(ScheduleMode::linear_probe_only, norm, 9);
    RunState state = init_run(tiny_spec(), cfg, seq);
    const auto before = stack_snapshot(state.model);
    run_tasks(state, seq, cfg, 2);
    CHECK(all_equal(before, stack_snapshot(state.model)));
    CHECK(max_abs_diff(state.model.heads().at(0).weight,
                       Tensor::zeros({3, 100})) > 0.0);  // head did train
    // Per-task banks never drift off the template either.
    for (const auto& blk : state.model.blocks()) {
      if (norm == NormMode::task_bn) {
        CHECK(blk.task_bn.at(0).running_mean == blk.task_bn.at(1).running_mean);
        CHECK(blk.task_bn.at(0).gamma == blk.task_bn.at(1).gamma);
      } else if (norm == NormMode::xconv_bn) {
        CHECK(blk.xconv.at(0).pre_means[0] == blk.xconv.at(1).pre_means[0]);
      }
    }
    CHECK(state.matrix.complete());
  }
}

TEST_CASE("stl trains copies: no forgetting, base model untouched") {
  const TaskSequence seq = generate(tiny_data(3, 24));
  TrainConfig cfg = tiny_config(ScheduleMode::stl, NormMode::shared_bn, 9);
  RunState state = init_run(tiny_spec(), cfg, seq);
  const auto before = stack_snapshot(state.model);
  run_tasks(state, seq, cfg, 3);
  CHECK(all_equal(before, stack_snapshot(state.model)));
  CHECK(state.model.heads().empty());

  RunResult res = finish_run(state);
  CHECK(res.fgt_value.defined);
  CHECK(res.fgt_value.value == 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = i + 1; j < 3; ++j) {
      CHECK(res.matrix.get(i, j) == res.matrix.get(i, i));
    }
  }
}

TEST_CASE("identical seeds reproduce the run; different seeds do not") {
  const TaskSequence seq = generate(tiny_data(2, 25));
  TrainConfig cfg =
      tiny_config(ScheduleMode::hierarchical, NormMode::xconv_bn, 40);
  const RunResult a = continual_run(seq, tiny_spec(), cfg);
  const RunResult b = continual_run(seq, tiny_spec(), cfg);
  CHECK(a.matrix == b.matrix);
  REQUIRE(a.logs.size() == b.logs.size());
  for (std::size_t t = 0; t < a.logs.size(); ++t) {
    CHECK(a.logs[t].epoch_losses == b.logs[t].epoch_losses);
  }

  cfg.seed = 41;
  const RunResult c = continual_run(seq, tiny_spec(), cfg);
  CHECK(a.logs[0].epoch_losses != c.logs[0].epoch_losses);
}

TEST_CASE("interrupting between tasks changes nothing") {
  const TaskSequence seq = generate(tiny_data(3, 26));
  TrainConfig cfg =
      tiny_config(ScheduleMode::hierarchical, NormMode::xconv_bn, 12);

  RunState one_go = init_run(tiny_spec(), cfg, seq);
  run_tasks(one_go, seq, cfg, 3);

  RunState split = init_run(tiny_spec(), cfg, seq);
  run_tasks(split, seq, cfg, 1);
  run_tasks(split, seq, cfg, 2);
  run_tasks(split, seq, cfg, 3);

  CHECK(one_go.matrix == split.matrix);
  CHECK(one_go.rng.serialize() == split.rng.serialize());
  for (std::size_t l = 0; l < one_go.model.blocks().size(); ++l) {
    CHECK(one_go.model.blocks()[l].weight == split.model.blocks()[l].weight);
  }
}

TEST_CASE("xconv recovery is invalidated by weight motion and restored") {
  const TaskSequence seq = generate(tiny_data(2, 27));
  TrainConfig cfg = tiny_config(ScheduleMode::plain_ft, NormMode::xconv_bn, 7);
  RunState state = init_run(tiny_spec(), cfg, seq);
  run_tasks(state, seq, cfg, 1);
  CHECK(state.model.norm_mean_for_task(0, 0).all_finite());  // fresh recovery

  // A feature-moving step on the NEXT task stales every stored recovery.
  Rng rng(1);
  state.model.start_task(1, 3, true, rng);
  const auto labels = labels_from_tensor(seq.tasks[1].train.y, 3);
  train_step(state.model, seq.tasks[1].train.x, labels, 1,
             {true, true, true}, 0.01);
  CHECK_THROWS_AS(state.model.norm_mean_for_task(0, 0), StateError);
  state.model.run_recovery();
  CHECK(state.model.norm_mean_for_task(0, 0).all_finite());

  // A frozen task's phase means reject further updates by construction.
  auto& rec0 = state.model.blocks()[0].xconv.at(0);
  CHECK_THROWS_AS(
      xconv_update_pre_means(seq.tasks[0].train.x, rec0, 0.1), StateError);
}

TEST_CASE("pretraining yields the same feature weights in every norm mode") {
  const TaskSequence seq = generate(tiny_data(2, 28, /*pretext=*/true));
  std::vector<ContinualModel> models;
  for (NormMode norm :
       {NormMode::shared_bn, NormMode::task_bn, NormMode::xconv_bn}) {
    TrainConfig cfg = tiny_config(ScheduleMode::hierarchical, norm, 99);
    cfg.pretrain_epochs = 2;
    RunState state = init_run(tiny_spec(), cfg, seq);
    CHECK(state.model.heads().empty());  // pretext head was dropped
    models.push_back(state.model);
  }
  Rng fresh_rng(99);
  const ContinualModel fresh(tiny_spec(), NormMode::shared_bn, 0.1, 1e-5,
                             Dtype::f64, fresh_rng);
  for (std::size_t l = 0; l < models[0].blocks().size(); ++l) {
    const Tensor& w = models[0].blocks()[l].weight;
    CHECK(max_abs_diff(w, models[1].blocks()[l].weight) == 0.0);
    CHECK(max_abs_diff(w, models[2].blocks()[l].weight) == 0.0);
    // And pretraining actually moved the weights off the random init.
    CHECK(max_abs_diff(w, fresh.blocks()[l].weight) > 0.0);
  }

  TrainConfig no_pretext = tiny_config(ScheduleMode::hierarchical,
                                       NormMode::xconv_bn, 99);
  no_pretext.pretrain_epochs = 2;
  const TaskSequence plain_seq = generate(tiny_data(2, 28, false));
  CHECK_THROWS_AS(init_run(tiny_spec(), no_pretext, plain_seq), ConfigError);
}

TEST_CASE("new banks warm-start from the previous task's statistics") {
  const TaskSequence seq = generate(tiny_data(1, 29));
  Rng rng(4);

  SUBCASE("task bn copies running moments") {
    TrainConfig cfg = tiny_config(ScheduleMode::plain_ft, NormMode::task_bn, 8);
    RunState state = init_run(tiny_spec(), cfg, seq);
    run_tasks(state, seq, cfg, 1);
    state.model.start_task(1, 3, false, rng);
    for (const auto& blk : state.model.blocks()) {
      CHECK(blk.task_bn.at(1).running_mean == blk.task_bn.at(0).running_mean);
      CHECK(blk.task_bn.at(1).running_var == blk.task_bn.at(0).running_var);
      CHECK(blk.task_bn.at(1).gamma == blk.task_bn.at(0).gamma);
      // The old bank's stats are not the init values anymore.
      CHECK(max_abs_diff(blk.task_bn.at(0).running_mean,
                         Tensor::zeros(blk.task_bn.at(0).running_mean.shape()))
            > 0.0);
    }
  }

  SUBCASE("xconv copies phase means and spatial extent") {
    TrainConfig cfg =
        tiny_config(ScheduleMode::plain_ft, NormMode::xconv_bn, 8);
    RunState state = init_run(tiny_spec(), cfg, seq);
    run_tasks(state, seq, cfg, 1);
    state.model.start_task(1, 3, false, rng);
    for (const auto& blk : state.model.blocks()) {
      const auto& r0 = blk.xconv.at(0);
      const auto& r1 = blk.xconv.at(1);
      REQUIRE(r1.pre_means.size() == r0.pre_means.size());
      for (std::size_t p = 0; p < r0.pre_means.size(); ++p) {
        CHECK(r1.pre_means[p] == r0.pre_means[p]);
      }
      CHECK(r1.in_h == r0.in_h);
      CHECK(r1.in_w == r0.in_w);
      CHECK(r1.has_spatial);
      CHECK_FALSE(r1.frozen);
      CHECK(r0.frozen);
    }
  }
}

TEST_CASE("transductive evaluation equals a hand-built single-block pipeline") {
  ModelSpec spec;
  spec.in_channels = 1;
  spec.height = 6;
  spec.width = 6;
  spec.classes_per_task = 3;
  spec.blocks = {{2, 2, 1, 1}};  // exact-recovery block, fdim 2*7*7

  TaskSequenceSpec d = tiny_data(1, 31);
  d.height = 6;
  d.width = 6;
  const TaskSequence seq = generate(d);
  TrainConfig cfg = tiny_config(ScheduleMode::plain_ft, NormMode::xconv_bn, 5);
  RunState state = init_run(spec, cfg, seq);
  run_tasks(state, seq, cfg, 1);
  ContinualModel& m = state.model;
  const SplitData& test = seq.tasks[0].test;

  const auto& blk = m.blocks()[0];
  const Tensor z = conv2d_forward(test.x, blk.conv, blk.weight);
  Tensor bm, bv;
  batch_moments(z, bm, bv);
  const auto& rec = blk.xconv.at(0);

  auto manual_accuracy = [&](const Tensor& mean, const Tensor& var) {
    const Tensor n = bn_forward_eval_with(z, mean, var, rec.gamma, rec.beta,
                                          1e-5);
    const Tensor logits = m.head_logits(flatten(relu_forward(n)), 0);
    const auto labels = labels_from_tensor(test.y, 3);
    std::size_t correct = 0;
    for (std::size_t b = 0; b < logits.dim(0); ++b) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < logits.dim(1); ++k) {
        if (logits.at2(b, k) > logits.at2(b, best)) best = k;
      }
      if (best == labels[b]) ++correct;
    }
    return double(correct) / double(logits.dim(0));
  };

  m.run_recovery();
  const Tensor mu_r = m.norm_mean_for_task(0, 0);
  const Tensor var_r = m.norm_var_for_task(0, 0);

  CHECK(evaluate(m, 0, test, MomentMode::running) ==
        manual_accuracy(mu_r, var_r));
  CHECK(evaluate(m, 0, test, MomentMode::t_mean) ==
        manual_accuracy(bm, var_r));
  CHECK(evaluate(m, 0, test, MomentMode::t_var) ==
        manual_accuracy(mu_r, bv));
  CHECK(evaluate(m, 0, test, MomentMode::t_both) ==
        manual_accuracy(bm, bv));

  // The override path is genuinely different from the running path.
  CHECK(max_abs_diff(bm, mu_r) > 0.0);
}

TEST_CASE("losses fall over plain fine-tuning on a separable task") {
  const TaskSequence seq = generate(tiny_data(1, 33));
  TrainConfig cfg = tiny_config(ScheduleMode::plain_ft, NormMode::task_bn, 2);
  cfg.schedule.total_epochs = 6;
  cfg.lr = 0.05;
  const RunResult res = continual_run(seq, tiny_spec(), cfg);
  REQUIRE(res.logs.size() == 1);
  const auto& losses = res.logs[0].epoch_losses;
  REQUIRE(losses.size() == 6);
  CHECK(losses.back() < losses.front());
  CHECK(res.matrix.get(0, 0) > 1.0 / 3.0);  // beats chance on its own task
}

TEST_CASE("evaluation rejects empty test sets and unknown tasks") {
  const TaskSequence seq = generate(tiny_data(1, 34));
  TrainConfig cfg = tiny_config(ScheduleMode::plain_ft, NormMode::shared_bn, 2);
  RunState state = init_run(tiny_spec(), cfg, seq);
  run_tasks(state, seq, cfg, 1);

  SplitData malformed;
  malformed.x = Tensor({2, 8, 8});  // rank 3: not a batch of images
  malformed.y = Tensor({2});
  CHECK_THROWS_AS(evaluate(state.model, 0, malformed, MomentMode::running),
                  DataError);

  SplitData mismatched;  // label count disagrees with the batch
  mismatched.x = seq.tasks[0].test.x;
  mismatched.y = Tensor({seq.tasks[0].test.y.dim(0) + 1});
  CHECK_THROWS_AS(evaluate(state.model, 0, mismatched, MomentMode::running),
                  DataError);

  CHECK_THROWS_AS(evaluate(state.model, 5, seq.tasks[0].test,
                           MomentMode::running),
                  StateError);
}

TEST_CASE("hierarchical runs collect usable mean-shift diagnostics") {
  const TaskSequence seq = generate(tiny_data(2, 35));
  TrainConfig cfg =
      tiny_config(ScheduleMode::hierarchical, NormMode::xconv_bn, 17);
  const RunResult res = continual_run(seq, tiny_spec(), cfg);
  REQUIRE(res.deltas.size() == tiny_spec().blocks.size());
  for (const DeltaRow& r : res.deltas) {
    CHECK(std::isfinite(r.d0));
    CHECK(std::isfinite(r.d1));
    CHECK(std::isfinite(r.d2));
    CHECK(r.d0 >= 0.0);
  }
  CHECK(res.matrix.complete());
  CHECK(res.fgt_value.defined);
}
