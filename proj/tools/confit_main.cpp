// Command-line front end: dataset generation, continual training runs,
// checkpoint evaluation, shift diagnostics, the property suite, and the
// linear-model bound sweep. Every numeric result printed to stdout is also
// written to a CSV or JSON file so runs are scriptable.
//
// Exit codes: 0 success, 1 usage or unexpected error, 2 config error,
// 3 data error, 4 verification failure, 5 theory-bound violation.
// Failures print a single machine-readable JSON line to stderr.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "confit/checkpoint.hpp"
#include "confit/datagen.hpp"
#include "confit/error.hpp"
#include "confit/metrics.hpp"
#include "confit/model.hpp"
#include "confit/serialize.hpp"
#include "confit/theory.hpp"
#include "confit/train.hpp"
#include "confit/verify.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int fail(int code, const std::string& kind, const std::string& message) {
  json err = {{"error", {{"code", code}, {"kind", kind}, {"message", message}}}};
  std::cerr << err.dump() << "\n";
  return code;
}

json parse_json_file(const std::string& path) {
  if (!fs::exists(path)) {
    throw confit::IoError("no file at '" + path + "'");
  }
  try {
    return json::parse(confit::read_text_file(path));
  } catch (const json::exception& e) {
    throw confit::ConfigError("invalid JSON in '" + path + "': " + e.what());
  }
}

confit::TaskSequence load_dataset_checked(const std::string& dir) {
  if (!fs::exists(dir)) {
    throw confit::IoError("no dataset directory at '" + dir + "'");
  }
  confit::TaskSequence seq = confit::load_dataset(dir);
  if (seq.tasks.empty()) throw confit::DataError("dataset has no tasks");
  return seq;
}

struct GenArgs {
  std::string out;
  std::string spec_file;
  confit::TaskSequenceSpec spec;
};

int run_gen_data(const GenArgs& args, bool inline_used) {
  confit::TaskSequenceSpec spec = args.spec;
  if (!args.spec_file.empty()) {
    if (inline_used) {
      throw confit::ConfigError(
          "--spec and inline dataset flags are mutually exclusive");
    }
    spec = confit::task_spec_from_json(parse_json_file(args.spec_file));
  }
  spec.validate();
  const confit::TaskSequence seq = confit::generate(spec);
  confit::save_dataset(seq, args.out);
  std::printf("dataset: %zu tasks, %zu classes each, %zu train / %zu test per class\n",
              spec.num_tasks, spec.classes_per_task, spec.train_per_class,
              spec.test_per_class);
  if (seq.pretext.has_value()) {
    std::printf("pretext: %zu classes\n", seq.pretext->num_classes);
  }
  std::printf("written to %s\n", args.out.c_str());
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string out;
  std::string config_file;
  std::string bn_mode;
  std::string schedule;
  std::string resume;
  std::size_t stop_after = 0;  // 0: all tasks
  bool grid = false;
};

// Config file layout: {"train": <train config>, "model": <model spec>},
// both sections optional, unknown keys rejected. CONFIT_PRECISION applies
// only when the file does not pin "precision" itself.
void load_train_config(const std::string& path, confit::TrainConfig& cfg,
                       json& model_json) {
  json precision_source = json::object();
  if (!path.empty()) {
    const json doc = parse_json_file(path);
    if (!doc.is_object()) throw confit::ConfigError("config root must be an object");
    for (const auto& [key, value] : doc.items()) {
      if (key == "train") {
        cfg = confit::train_config_from_json(value);
        precision_source = value;
      } else if (key == "model") {
        model_json = value;
      } else {
        throw confit::ConfigError("unknown config key '" + key + "'");
      }
    }
  }
  const char* env = std::getenv("CONFIT_PRECISION");
  if (env != nullptr && !precision_source.contains("precision")) {
    cfg.precision = confit::dtype_from_string(env);
  }
}

json metrics_json(const confit::RunResult& res, const confit::TrainConfig& cfg) {
  json logs = json::array();
  for (const confit::TrainLog& log : res.logs) {
    logs.push_back({{"task_id", log.task_id},
                    {"stage_epochs", log.stage_epochs},
                    {"epoch_losses", log.epoch_losses}});
  }
  json deltas = json::array();
  for (const confit::DeltaRow& row : res.deltas) {
    deltas.push_back(
        {{"layer", row.layer}, {"d0", row.d0}, {"d1", row.d1}, {"d2", row.d2}});
  }
  return {{"format_version", 1},
          {"kind", "confit-metrics"},
          {"norm_mode", confit::norm_mode_to_string(cfg.norm_mode)},
          {"schedule_mode", confit::schedule_mode_to_string(cfg.schedule.mode)},
          {"num_tasks", res.matrix.num_tasks()},
          {"acc", res.acc_value},
          {"fgt", res.fgt_value.value},
          {"fgt_defined", res.fgt_value.defined},
          {"logs", logs},
          {"deltas", deltas}};
}

int run_train(const TrainArgs& args) {
  const confit::TaskSequence seq = load_dataset_checked(args.data);

  confit::TrainConfig cfg;
  confit::ModelSpec mspec;
  std::optional<confit::RunState> state;
  if (!args.resume.empty()) {
    if (!args.config_file.empty() || !args.bn_mode.empty() ||
        !args.schedule.empty() || args.grid) {
      throw confit::ConfigError(
          "--resume takes its configuration from the checkpoint");
    }
    if (!fs::exists(args.resume)) {
      throw confit::IoError("no checkpoint directory at '" + args.resume + "'");
    }
    confit::CheckpointBundle bundle = confit::load_checkpoint(args.resume);
    cfg = bundle.config;
    mspec = bundle.model_spec;
    state.emplace(std::move(bundle.state));
  } else {
    json model_json;
    load_train_config(args.config_file, cfg, model_json);
    if (!args.bn_mode.empty()) {
      cfg.norm_mode = confit::norm_mode_from_string(args.bn_mode);
    }
    if (!args.schedule.empty()) {
      cfg.schedule.mode = confit::schedule_mode_from_string(args.schedule);
    }
    cfg.validate();

    if (model_json.is_null()) {
      mspec = confit::ModelSpec::synth_default(
          seq.spec.channels, seq.spec.height, seq.spec.width,
          seq.spec.classes_per_task);
    } else {
      mspec = confit::model_spec_from_json(model_json);
    }
    mspec.validate();
  }

  fs::create_directories(args.out);

  if (args.grid) {
    const confit::ScheduleMode schedules[] = {
        confit::ScheduleMode::plain_ft, confit::ScheduleMode::hierarchical};
    const confit::NormMode modes[] = {confit::NormMode::shared_bn,
                                      confit::NormMode::task_bn,
                                      confit::NormMode::xconv_bn};
    std::string csv = "schedule,bn_mode,acc,fgt\n";
    std::printf("%-14s %-10s %8s %8s\n", "schedule", "bn_mode", "acc", "fgt");
    for (const confit::ScheduleMode sched : schedules) {
      for (const confit::NormMode mode : modes) {
        confit::TrainConfig cell = cfg;
        cell.schedule.mode = sched;
        cell.norm_mode = mode;
        const confit::RunResult res = confit::continual_run(seq, mspec, cell);
        const std::string sname = confit::schedule_mode_to_string(sched);
        const std::string mname = confit::norm_mode_to_string(mode);
        char row[160];
        std::snprintf(row, sizeof row, "%s,%s,%.6f,%.6f\n", sname.c_str(),
                      mname.c_str(), res.acc_value, res.fgt_value.value);
        csv += row;
        std::printf("%-14s %-10s %8.4f %8.4f\n", sname.c_str(), mname.c_str(),
                    res.acc_value, res.fgt_value.value);
      }
    }
    const std::string path = args.out + "/grid.csv";
    confit::write_text_file(path, csv);
    std::printf("grid written to %s\n", path.c_str());
    return 0;
  }

  if (!state.has_value()) state.emplace(confit::init_run(mspec, cfg, seq));
  const std::size_t stop = args.stop_after == 0
                               ? seq.tasks.size()
                               : std::min(args.stop_after, seq.tasks.size());
  confit::run_tasks(*state, seq, cfg, stop);
  confit::save_checkpoint(*state, mspec, cfg, args.out + "/checkpoint");

  for (const confit::TrainLog& log : state->logs) {
    std::printf("task %zu  stage epochs %zu/%zu/%zu  final loss %.6f\n",
                log.task_id, log.stage_epochs[0], log.stage_epochs[1],
                log.stage_epochs[2],
                log.epoch_losses.empty() ? 0.0 : log.epoch_losses.back());
  }
  confit::write_text_file(args.out + "/acc_matrix.csv",
                          state->matrix.to_csv());

  if (state->next_task < seq.tasks.size()) {
    std::printf("stopped after task %zu of %zu; resume with --resume\n",
                state->next_task, seq.tasks.size());
    std::printf("checkpoint written to %s/checkpoint\n", args.out.c_str());
    return 0;
  }

  const confit::RunResult res = confit::finish_run(*state);
  confit::write_text_file(args.out + "/metrics.json",
                          metrics_json(res, cfg).dump(2) + "\n");
  if (!res.deltas.empty()) {
    confit::write_text_file(args.out + "/deltas.csv",
                            confit::deltas_to_csv(res.deltas));
  }
  std::printf("ACC %.6f  FGT %.6f\n", res.acc_value, res.fgt_value.value);
  std::printf("checkpoint written to %s/checkpoint\n", args.out.c_str());
  return 0;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::size_t task = 0;
  std::string moments = "running";
  std::string json_file;
};

int run_eval(const EvalArgs& args) {
  const confit::MomentMode moments =
      confit::moment_mode_from_string(args.moments);
  if (!fs::exists(args.ckpt)) {
    throw confit::IoError("no checkpoint directory at '" + args.ckpt + "'");
  }
  confit::CheckpointBundle bundle = confit::load_checkpoint(args.ckpt);
  const confit::TaskSequence seq = load_dataset_checked(args.data);
  if (args.task >= seq.tasks.size()) {
    throw confit::ConfigError("dataset has no task " + std::to_string(args.task));
  }
  if (!bundle.state.model.has_task(args.task)) {
    throw confit::ConfigError("checkpoint has no trained task " +
                              std::to_string(args.task));
  }
  const double accuracy = confit::evaluate(
      bundle.state.model, args.task, seq.tasks[args.task].test, moments);

  const json doc = {{"kind", "confit-eval"},
                    {"task", args.task},
                    {"moments", confit::moment_mode_to_string(moments)},
                    {"accuracy", accuracy},
                    {"test_examples", seq.tasks[args.task].test.x.dim(0)}};
  std::printf("accuracy %.6f\n", accuracy);
  std::cout << doc.dump() << "\n";
  if (!args.json_file.empty()) {
    confit::write_text_file(args.json_file, doc.dump(2) + "\n");
  }
  return 0;
}

struct DiagArgs {
  std::string ckpt_after_1;
  std::string ckpt_final;
  std::string data;
  std::string out = "deltas.csv";
};

int run_diag(const DiagArgs& args) {
  for (const std::string& dir : {args.ckpt_after_1, args.ckpt_final}) {
    if (!fs::exists(dir)) {
      throw confit::IoError("no checkpoint directory at '" + dir + "'");
    }
  }
  confit::CheckpointBundle first = confit::load_checkpoint(args.ckpt_after_1);
  confit::CheckpointBundle last = confit::load_checkpoint(args.ckpt_final);
  if (confit::model_spec_to_json(first.model_spec) !=
          confit::model_spec_to_json(last.model_spec) ||
      first.state.model.mode() != last.state.model.mode()) {
    throw confit::ConfigError("checkpoints disagree on model or norm mode");
  }
  if (!first.state.model.has_task(0) || !last.state.model.has_task(0)) {
    throw confit::ConfigError("both checkpoints must contain trained task 0");
  }
  const confit::TaskSequence seq = load_dataset_checked(args.data);

  const confit::MeanProbeSnapshot snap_first =
      confit::collect_probe(first.state.model, 0, seq.tasks[0].test.x);
  const confit::MeanProbeSnapshot snap_last =
      confit::collect_probe(last.state.model, 0, seq.tasks[0].test.x);
  const std::vector<confit::DeltaRow> rows =
      confit::delta_diagnostics(snap_first, snap_last);

  confit::write_text_file(args.out, confit::deltas_to_csv(rows));
  for (const confit::DeltaRow& row : rows) {
    std::printf("layer %zu  d0 %.6e  d1 %.6e  d2 %.6e\n", row.layer, row.d0,
                row.d1, row.d2);
  }
  std::printf("deltas written to %s\n", args.out.c_str());
  return 0;
}

struct VerifyArgs {
  std::size_t cases = 100;
  std::uint64_t seed = 0;
  std::string json_file;
};

int run_verify(const VerifyArgs& args) {
  if (args.cases == 0) throw confit::ConfigError("--cases must be positive");
  const std::vector<confit::verify::PropertyResult> results =
      confit::verify::run_property_suite(args.cases, args.seed);
  std::fputs(confit::verify::format_report(results).c_str(), stdout);

  if (!args.json_file.empty()) {
    json props = json::array();
    for (const auto& r : results) {
      props.push_back({{"name", r.name},
                       {"cases", r.cases},
                       {"failures", r.failures},
                       {"worst", r.worst},
                       {"limit", r.limit},
                       {"passed", r.passed()}});
    }
    const json doc = {{"format_version", 1},
                      {"kind", "confit-verify-report"},
                      {"cases", args.cases},
                      {"seed", args.seed},
                      {"all_passed", confit::verify::all_passed(results)},
                      {"properties", props}};
    confit::write_text_file(args.json_file, doc.dump(2) + "\n");
  }

  if (!confit::verify::all_passed(results)) {
    std::size_t failed = 0;
    for (const auto& r : results) failed += r.passed() ? 0 : 1;
    return fail(4, "verification",
                std::to_string(failed) + " properties failed");
  }
  return 0;
}

struct TheoryArgs {
  std::size_t k = 3;
  std::size_t n = 10;
  std::size_t d = 50;
  std::size_t instances = 100;
  std::uint64_t seed = 0;
  std::string out = ".";
};

int run_theory(const TheoryArgs& args) {
  if (args.instances == 0) {
    throw confit::ConfigError("--instances must be positive");
  }
  const std::vector<confit::theory::BoundRecord> records =
      confit::theory::bound_sweep(args.k, args.n, args.d, args.instances,
                                  args.seed);
  fs::create_directories(args.out);
  const std::string json_path = args.out + "/theory_report.json";
  const std::string csv_path = args.out + "/theory_report.csv";
  confit::theory::write_theory_report(records, args.k, args.n, args.d,
                                      json_path, csv_path);

  std::size_t checked = 0, violations = 0;
  for (const auto& r : records) {
    checked += r.checked ? 1 : 0;
    violations += (r.checked && !r.satisfied) ? 1 : 0;
  }
  std::printf("instances %zu  checked %zu  violations %zu\n", records.size(),
              checked, violations);
  std::printf("report written to %s\n", json_path.c_str());
  if (violations > 0) {
    return fail(5, "theory",
                std::to_string(violations) + " instances violate the bound");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "confit: a continual fine-tuning laboratory with recoverable "
      "normalization statistics"};
  app.require_subcommand(1);

  GenArgs gen;
  CLI::App* sub_gen = app.add_subcommand(
      "gen-data", "Generate a synthetic task-sequence dataset");
  sub_gen->add_option("--out", gen.out, "Output dataset directory")->required();
  CLI::Option* spec_opt = sub_gen->add_option(
      "--spec", gen.spec_file, "Dataset spec JSON (excludes inline flags)");
  std::vector<CLI::Option*> inline_opts = {
      sub_gen->add_option("--tasks", gen.spec.num_tasks, "Number of tasks"),
      sub_gen->add_option("--classes", gen.spec.classes_per_task,
                          "Classes per task"),
      sub_gen->add_option("--train-per-class", gen.spec.train_per_class,
                          "Training examples per class"),
      sub_gen->add_option("--test-per-class", gen.spec.test_per_class,
                          "Test examples per class"),
      sub_gen->add_option("--channels", gen.spec.channels, "Input channels"),
      sub_gen->add_option("--height", gen.spec.height, "Input height"),
      sub_gen->add_option("--width", gen.spec.width, "Input width"),
      sub_gen->add_option("--prototype-scale", gen.spec.prototype_scale,
                          "Class prototype amplitude"),
      sub_gen->add_option("--offset-scale", gen.spec.task_offset_scale,
                          "Std of the per-task mean shift"),
      sub_gen->add_option("--noise-scale", gen.spec.noise_scale,
                          "Per-sample noise std"),
      sub_gen->add_option("--seed", gen.spec.seed, "Generation seed"),
      sub_gen->add_flag("--with-pretext", gen.spec.with_pretext,
                        "Add a disjoint pretext task for pretraining"),
      sub_gen->add_option("--pretext-classes", gen.spec.pretext_classes,
                          "Classes in the pretext task"),
  };

  TrainArgs train;
  CLI::App* sub_train =
      app.add_subcommand("train", "Run continual training on a dataset");
  sub_train->add_option("--data", train.data, "Dataset directory")->required();
  sub_train->add_option("--out", train.out, "Output directory")->required();
  sub_train->add_option("--config", train.config_file,
                        "Run config JSON ({\"train\": ..., \"model\": ...})");
  sub_train->add_option("--bn-mode", train.bn_mode,
                        "Normalization mode: shared|task|xconv");
  sub_train->add_option("--schedule", train.schedule,
                        "Schedule mode: plain|hierarchical|lp|stl");
  sub_train->add_option("--stop-after", train.stop_after,
                        "Checkpoint after this many tasks (0: all)");
  sub_train->add_option("--resume", train.resume,
                        "Continue a run from this checkpoint directory");
  sub_train->add_flag("--grid", train.grid,
                      "Run the {plain,hierarchical} x {shared,task,xconv} "
                      "grid and write a comparison CSV");

  EvalArgs eval;
  CLI::App* sub_eval =
      app.add_subcommand("eval", "Evaluate a checkpoint on one task");
  sub_eval->add_option("--ckpt", eval.ckpt, "Checkpoint directory")->required();
  sub_eval->add_option("--data", eval.data, "Dataset directory")->required();
  sub_eval->add_option("--task", eval.task, "Task index")->required();
  sub_eval->add_option("--moments", eval.moments,
                       "Eval moments: running|t-mean|t-var|t-both");
  sub_eval->add_option("--json", eval.json_file,
                       "Also write the result JSON to this file");

  DiagArgs diag;
  CLI::App* sub_diag = app.add_subcommand(
      "diag", "Normalization-shift diagnostics between two checkpoints");
  sub_diag->add_option("--ckpt-after-1", diag.ckpt_after_1,
                       "Checkpoint saved after the first task")
      ->required();
  sub_diag->add_option("--ckpt-final", diag.ckpt_final, "Final checkpoint")
      ->required();
  sub_diag->add_option("--data", diag.data, "Dataset directory")->required();
  sub_diag->add_option("--out", diag.out, "Output CSV path");

  VerifyArgs verify;
  CLI::App* sub_verify =
      app.add_subcommand("verify", "Run the numerical property suite");
  sub_verify->add_option("--cases", verify.cases, "Cases per property");
  sub_verify->add_option("--seed", verify.seed, "Suite seed");
  sub_verify->add_option("--json", verify.json_file,
                         "Also write the report JSON to this file");

  TheoryArgs theory;
  CLI::App* sub_theory = app.add_subcommand(
      "theory", "Sweep the linear-model forgetting bound");
  sub_theory->add_option("--k", theory.k, "Feature dimension");
  sub_theory->add_option("--n", theory.n, "Samples per task");
  sub_theory->add_option("--d", theory.d, "Input dimension");
  sub_theory->add_option("--instances", theory.instances,
                         "Number of random instances");
  sub_theory->add_option("--seed", theory.seed, "First instance seed");
  sub_theory->add_option("--out", theory.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    const auto parsed = app.get_subcommands();
    std::cout << (parsed.empty() ? app.help() : parsed.front()->help());
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    return fail(1, "usage", e.what());
  }

  try {
    if (sub_gen->parsed()) {
      bool inline_used = false;
      for (const CLI::Option* opt : inline_opts) {
        inline_used = inline_used || opt->count() > 0;
      }
      if (spec_opt->count() > 0 && inline_used) {
        throw confit::ConfigError(
            "--spec and inline dataset flags are mutually exclusive");
      }
      return run_gen_data(gen, inline_used);
    }
    if (sub_train->parsed()) {
      if (train.grid && (!train.bn_mode.empty() || !train.schedule.empty())) {
        throw confit::ConfigError(
            "--grid picks its own schedule and normalization mode");
      }
      return run_train(train);
    }
    if (sub_eval->parsed()) return run_eval(eval);
    if (sub_diag->parsed()) return run_diag(diag);
    if (sub_verify->parsed()) return run_verify(verify);
    if (sub_theory->parsed()) return run_theory(theory);
    return fail(1, "usage", "no subcommand given");
  } catch (const confit::ConfigError& e) {
    return fail(2, "config", e.what());
  } catch (const confit::DataError& e) {
    return fail(3, "data", e.what());
  } catch (const confit::IoError& e) {
    return fail(3, "data", e.what());
  } catch (const std::exception& e) {
    return fail(1, "internal", e.what());
  }
}
