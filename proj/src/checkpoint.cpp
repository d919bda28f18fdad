#include "confit/checkpoint.hpp"

#include <filesystem>
#include <string>
#include <utility>

#include "confit/error.hpp"
#include "confit/json_util.hpp"
#include "confit/serialize.hpp"

namespace confit {

namespace fs = std::filesystem;
using nlohmann::json;

json model_spec_to_json(const ModelSpec& spec) {
  json blocks = json::array();
  for (const BlockSpec& b : spec.blocks) {
    blocks.push_back({{"out_channels", b.out_channels},
                      {"kernel", b.kernel},
                      {"stride", b.stride},
                      {"padding", b.padding}});
  }
  return json{{"in_channels", spec.in_channels},
              {"height", spec.height},
              {"width", spec.width},
              {"classes_per_task", spec.classes_per_task},
              {"blocks", blocks}};
}

ModelSpec model_spec_from_json(const json& j) {
  reject_unknown_keys(
      j, {"in_channels", "height", "width", "classes_per_task", "blocks"},
      "model spec");
  ModelSpec s;
  s.in_channels = j.value("in_channels", s.in_channels);
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.classes_per_task = j.value("classes_per_task", s.classes_per_task);
  if (j.contains("blocks")) {
    if (!j.at("blocks").is_array()) {
      throw ConfigError("model spec 'blocks' must be an array");
    }
    s.blocks.clear();
    for (const json& bj : j.at("blocks")) {
      reject_unknown_keys(bj, {"out_channels", "kernel", "stride", "padding"},
                          "block spec");
      BlockSpec b;
      b.out_channels = bj.value("out_channels", b.out_channels);
      b.kernel = bj.value("kernel", b.kernel);
      b.stride = bj.value("stride", b.stride);
      b.padding = bj.value("padding", b.padding);
      s.blocks.push_back(b);
    }
  }
  return s;
}

json train_config_to_json(const TrainConfig& cfg) {
  return json{
      {"lr", cfg.lr},
      {"batch_size", cfg.batch_size},
      {"seed", cfg.seed},
      {"precision", dtype_to_string(cfg.precision)},
      {"norm_mode", norm_mode_to_string(cfg.norm_mode)},
      {"schedule",
       {{"total_epochs", cfg.schedule.total_epochs},
        {"fractions",
         {cfg.schedule.f_head, cfg.schedule.f_head_norm, cfg.schedule.f_all}},
        {"mode", schedule_mode_to_string(cfg.schedule.mode)}}},
      {"bn_momentum", cfg.bn_momentum},
      {"stab_eps", cfg.stab_eps},
      {"eval_moments", moment_mode_to_string(cfg.eval_moments)},
      {"pretrain_epochs", cfg.pretrain_epochs}};
}

TrainConfig train_config_from_json(const json& j) {
  reject_unknown_keys(j,
                      {"lr", "batch_size", "seed", "precision", "norm_mode",
                       "schedule", "bn_momentum", "stab_eps", "eval_moments",
                       "pretrain_epochs"},
                      "train config");
  TrainConfig cfg;
  cfg.lr = j.value("lr", cfg.lr);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("precision")) {
    cfg.precision = dtype_from_string(j.at("precision").get<std::string>());
  }
  if (j.contains("norm_mode")) {
    cfg.norm_mode = norm_mode_from_string(j.at("norm_mode").get<std::string>());
  }
  if (j.contains("schedule")) {
    const json& sj = j.at("schedule");
    reject_unknown_keys(sj, {"total_epochs", "fractions", "mode"}, "schedule");
    cfg.schedule.total_epochs =
        sj.value("total_epochs", cfg.schedule.total_epochs);
    if (sj.contains("fractions")) {
      const json& f = sj.at("fractions");
      if (!f.is_array() || f.size() != 3) {
        throw ConfigError("schedule 'fractions' must be a 3-element array");
      }
      cfg.schedule.f_head = f[0].get<double>();
      cfg.schedule.f_head_norm = f[1].get<double>();
      cfg.schedule.f_all = f[2].get<double>();
    }
    if (sj.contains("mode")) {
      cfg.schedule.mode =
          schedule_mode_from_string(sj.at("mode").get<std::string>());
    }
  }
  cfg.bn_momentum = j.value("bn_momentum", cfg.bn_momentum);
  cfg.stab_eps = j.value("stab_eps", cfg.stab_eps);
  if (j.contains("eval_moments")) {
    cfg.eval_moments =
        moment_mode_from_string(j.at("eval_moments").get<std::string>());
  }
  cfg.pretrain_epochs = j.value("pretrain_epochs", cfg.pretrain_epochs);
  return cfg;
}

namespace {

std::string task_suffix(std::size_t t) {
  return ".task" + std::to_string(t);
}

struct Saver {
  fs::path dir;
  json checksums = json::object();

  void tensor(const std::string& name, const Tensor& t) {
    const std::string path = (dir / name).string();
    write_cft(path, t);
    checksums[name] = hex64(fnv1a64_file(path));
  }
};

struct Loader {
  fs::path dir;
  const json* checksums = nullptr;

  Tensor tensor(const std::string& name) const {
    if (!checksums->contains(name)) {
      throw IoError("manifest lists no checksum for " + name);
    }
    const std::string path = (dir / name).string();
    if (!fs::exists(path)) {
      throw IoError("checkpoint file missing: " + name);
    }
    if (hex64(fnv1a64_file(path)) != checksums->at(name).get<std::string>()) {
      throw IoError("checksum mismatch on " + name + " (corrupt checkpoint)");
    }
    return read_cft(path);
  }

  // Loads a tensor that must structurally match its freshly-built slot.
  Tensor tensor_like(const std::string& name, const Tensor& expect) const {
    Tensor t = tensor(name);
    if (t.shape() != expect.shape() || t.dtype() != expect.dtype()) {
      throw IoError("checkpoint tensor " + name + " has shape " +
                    shape_to_string(t.shape()) + "; model expects " +
                    shape_to_string(expect.shape()));
    }
    return t;
  }
};

void save_probe(Saver& sv, const std::string& tag,
                const MeanProbeSnapshot& p) {
  for (std::size_t l = 0; l < p.mu_r.size(); ++l) {
    sv.tensor(tag + ".mu_r.layer" + std::to_string(l) + ".cft", p.mu_r[l]);
    sv.tensor(tag + ".mu_te.layer" + std::to_string(l) + ".cft", p.mu_te[l]);
  }
}

MeanProbeSnapshot load_probe(const Loader& ld, const std::string& tag,
                             std::size_t layers) {
  MeanProbeSnapshot p;
  for (std::size_t l = 0; l < layers; ++l) {
    p.mu_r.push_back(ld.tensor(tag + ".mu_r.layer" + std::to_string(l) +
                               ".cft"));
    p.mu_te.push_back(ld.tensor(tag + ".mu_te.layer" + std::to_string(l) +
                                ".cft"));
  }
  return p;
}

}  // namespace

void save_checkpoint(const RunState& state, const ModelSpec& mspec,
                     const TrainConfig& cfg, const std::string& dir) {
  if (state.matrix.num_tasks() == 0) {
    throw StateError("run state was never initialized; nothing to checkpoint");
  }
  fs::create_directories(dir);
  Saver sv{fs::path(dir)};

  const ContinualModel& m = state.model;
  json xconv_meta = json::array();
  json template_meta = json::array();
  for (std::size_t k = 0; k < m.blocks().size(); ++k) {
    const auto& blk = m.blocks()[k];
    const std::string L = "block" + std::to_string(k);
    sv.tensor(L + ".weight.cft", blk.weight);
    sv.tensor(L + ".gamma.cft", blk.shared.gamma);
    sv.tensor(L + ".beta.cft", blk.shared.beta);
    sv.tensor(L + ".running_mean.cft", blk.shared.running_mean);
    sv.tensor(L + ".running_var.cft", blk.shared.running_var);
    sv.tensor(L + ".template_gamma.cft", blk.tmpl.gamma);
    sv.tensor(L + ".template_beta.cft", blk.tmpl.beta);
    sv.tensor(L + ".template_running_mean.cft", blk.tmpl.running_mean);
    sv.tensor(L + ".template_running_var.cft", blk.tmpl.running_var);
    for (std::size_t p = 0; p < blk.tmpl.pre_means.size(); ++p) {
      sv.tensor(L + ".template_pre_mean.phase" + std::to_string(p) + ".cft",
                blk.tmpl.pre_means[p]);
    }
    template_meta.push_back({{"block", k},
                             {"in_h", blk.tmpl.in_h},
                             {"in_w", blk.tmpl.in_w},
                             {"has_spatial", blk.tmpl.has_spatial}});
    for (const auto& [t, st] : blk.task_bn) {
      const std::string suffix = task_suffix(t) + ".cft";
      sv.tensor(L + ".gamma" + suffix, st.gamma);
      sv.tensor(L + ".beta" + suffix, st.beta);
      sv.tensor(L + ".running_mean" + suffix, st.running_mean);
      sv.tensor(L + ".running_var" + suffix, st.running_var);
    }
    for (const auto& [t, rec] : blk.xconv) {
      const std::string suffix = task_suffix(t) + ".cft";
      sv.tensor(L + ".gamma" + suffix, rec.gamma);
      sv.tensor(L + ".beta" + suffix, rec.beta);
      sv.tensor(L + ".running_var" + suffix, rec.running_var);
      for (std::size_t p = 0; p < rec.pre_means.size(); ++p) {
        sv.tensor(L + ".pre_mean" + task_suffix(t) + ".phase" +
                      std::to_string(p) + ".cft",
                  rec.pre_means[p]);
      }
      xconv_meta.push_back({{"block", k},
                            {"task", t},
                            {"in_h", rec.in_h},
                            {"in_w", rec.in_w},
                            {"has_spatial", rec.has_spatial},
                            {"frozen", rec.frozen}});
    }
  }

  json heads = json::array();
  for (const auto& [t, head] : m.heads()) {
    sv.tensor("head.weight" + task_suffix(t) + ".cft", head.weight);
    sv.tensor("head.bias" + task_suffix(t) + ".cft", head.bias);
    heads.push_back({{"task", t}, {"num_classes", head.weight.dim(0)}});
  }

  if (state.probe_after_first.has_value()) {
    save_probe(sv, "probe_first", *state.probe_after_first);
  }
  if (state.probe_after_last.has_value()) {
    save_probe(sv, "probe_last", *state.probe_after_last);
  }

  json acc_entries = json::array();
  for (std::size_t i = 0; i < state.matrix.num_tasks(); ++i) {
    for (std::size_t j = i; j < state.matrix.num_tasks(); ++j) {
      if (state.matrix.has(i, j)) {
        acc_entries.push_back({i, j, state.matrix.get(i, j)});
      }
    }
  }

  json logs = json::array();
  for (const TrainLog& lg : state.logs) {
    logs.push_back({{"task_id", lg.task_id},
                    {"stage_epochs", lg.stage_epochs},
                    {"epoch_losses", lg.epoch_losses}});
  }

  const json manifest{{"format_version", 1},
                      {"kind", "confit-checkpoint"},
                      {"model_spec", model_spec_to_json(mspec)},
                      {"config", train_config_to_json(cfg)},
                      {"rng_state", state.rng.serialize()},
                      {"next_task", state.next_task},
                      {"num_tasks", state.matrix.num_tasks()},
                      {"heads", heads},
                      {"xconv_meta", xconv_meta},
                      {"template_meta", template_meta},
                      {"acc_entries", acc_entries},
                      {"logs", logs},
                      {"probes",
                       {{"first", state.probe_after_first.has_value()},
                        {"last", state.probe_after_last.has_value()}}},
                      {"checksums", sv.checksums}};
  write_text_file((fs::path(dir) / "manifest.json").string(),
                  manifest.dump(2) + "\n");
}

CheckpointBundle load_checkpoint(const std::string& dir) {
  const fs::path d(dir);
  if (!fs::exists(d / "manifest.json")) {
    throw IoError("no manifest.json in '" + dir + "'");
  }
  json manifest;
  try {
    manifest = json::parse(read_text_file((d / "manifest.json").string()));
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint manifest: " + std::string(e.what()));
  }

  try {
    if (manifest.at("format_version").get<int>() != 1) {
      throw IoError("unsupported checkpoint format version");
    }
    if (manifest.value("kind", "") != "confit-checkpoint") {
      throw IoError("'" + dir + "' is not a checkpoint directory");
    }

    CheckpointBundle b;
    b.model_spec = model_spec_from_json(manifest.at("model_spec"));
    b.config = train_config_from_json(manifest.at("config"));

    Rng scratch_rng(0);  // every tensor it draws is overwritten below
    b.state.model =
        ContinualModel(b.model_spec, b.config.norm_mode, b.config.bn_momentum,
                       b.config.stab_eps, b.config.precision, scratch_rng);
    ContinualModel& m = b.state.model;
    const Loader ld{d, &manifest.at("checksums")};

    for (std::size_t k = 0; k < m.blocks().size(); ++k) {
      auto& blk = m.blocks()[k];
      const std::string L = "block" + std::to_string(k);
      blk.weight = ld.tensor_like(L + ".weight.cft", blk.weight);
      blk.shared.gamma = ld.tensor_like(L + ".gamma.cft", blk.shared.gamma);
      blk.shared.beta = ld.tensor_like(L + ".beta.cft", blk.shared.beta);
      blk.shared.running_mean =
          ld.tensor_like(L + ".running_mean.cft", blk.shared.running_mean);
      blk.shared.running_var =
          ld.tensor_like(L + ".running_var.cft", blk.shared.running_var);
      blk.tmpl.gamma = ld.tensor_like(L + ".template_gamma.cft",
                                      blk.tmpl.gamma);
      blk.tmpl.beta = ld.tensor_like(L + ".template_beta.cft", blk.tmpl.beta);
      blk.tmpl.running_mean = ld.tensor_like(L + ".template_running_mean.cft",
                                             blk.tmpl.running_mean);
      blk.tmpl.running_var = ld.tensor_like(L + ".template_running_var.cft",
                                            blk.tmpl.running_var);
      for (std::size_t p = 0; p < blk.tmpl.pre_means.size(); ++p) {
        blk.tmpl.pre_means[p] =
            ld.tensor_like(L + ".template_pre_mean.phase" + std::to_string(p) +
                               ".cft",
                           blk.tmpl.pre_means[p]);
      }
    }
    for (const json& tm : manifest.at("template_meta")) {
      const std::size_t k = tm.at("block").get<std::size_t>();
      if (k >= m.blocks().size()) {
        throw IoError("template_meta names unknown block");
      }
      m.blocks()[k].tmpl.in_h = tm.at("in_h").get<std::size_t>();
      m.blocks()[k].tmpl.in_w = tm.at("in_w").get<std::size_t>();
      m.blocks()[k].tmpl.has_spatial = tm.at("has_spatial").get<bool>();
    }

    const std::size_t fdim = b.model_spec.feature_dim();
    for (const json& hj : manifest.at("heads")) {
      const std::size_t t = hj.at("task").get<std::size_t>();
      const std::size_t classes = hj.at("num_classes").get<std::size_t>();
      ContinualModel::Head head;
      head.weight = ld.tensor_like(
          "head.weight" + task_suffix(t) + ".cft",
          Tensor({classes, fdim}, b.config.precision));
      head.bias = ld.tensor_like("head.bias" + task_suffix(t) + ".cft",
                                 Tensor({classes}, b.config.precision));
      m.heads().emplace(t, std::move(head));

      for (std::size_t k = 0; k < m.blocks().size(); ++k) {
        auto& blk = m.blocks()[k];
        const std::string L = "block" + std::to_string(k);
        const std::string suffix = task_suffix(t) + ".cft";
        if (b.config.norm_mode == NormMode::task_bn) {
          BatchNormState st = BatchNormState::init(
              blk.conv.out_channels, b.config.precision, b.config.bn_momentum,
              b.config.stab_eps);
          st.gamma = ld.tensor_like(L + ".gamma" + suffix, st.gamma);
          st.beta = ld.tensor_like(L + ".beta" + suffix, st.beta);
          st.running_mean =
              ld.tensor_like(L + ".running_mean" + suffix, st.running_mean);
          st.running_var =
              ld.tensor_like(L + ".running_var" + suffix, st.running_var);
          blk.task_bn.emplace(t, std::move(st));
        } else if (b.config.norm_mode == NormMode::xconv_bn) {
          XconvTaskRecord rec = XconvTaskRecord::init(
              blk.conv.out_channels, blk.conv.in_channels, blk.conv.stride,
              b.config.precision);
          rec.gamma = ld.tensor_like(L + ".gamma" + suffix, rec.gamma);
          rec.beta = ld.tensor_like(L + ".beta" + suffix, rec.beta);
          rec.running_var =
              ld.tensor_like(L + ".running_var" + suffix, rec.running_var);
          for (std::size_t p = 0; p < rec.pre_means.size(); ++p) {
            rec.pre_means[p] = ld.tensor_like(
                L + ".pre_mean" + task_suffix(t) + ".phase" +
                    std::to_string(p) + ".cft",
                rec.pre_means[p]);
          }
          blk.xconv.emplace(t, std::move(rec));
        }
      }
    }
    if (b.config.norm_mode == NormMode::xconv_bn) {
      std::size_t applied = 0;
      for (const json& xm : manifest.at("xconv_meta")) {
        const std::size_t k = xm.at("block").get<std::size_t>();
        const std::size_t t = xm.at("task").get<std::size_t>();
        if (k >= m.blocks().size() || !m.blocks()[k].xconv.count(t)) {
          throw IoError("xconv_meta names unknown block/task");
        }
        auto& rec = m.blocks()[k].xconv.at(t);
        rec.in_h = xm.at("in_h").get<std::size_t>();
        rec.in_w = xm.at("in_w").get<std::size_t>();
        rec.has_spatial = xm.at("has_spatial").get<bool>();
        rec.frozen = xm.at("frozen").get<bool>();
        ++applied;
      }
      if (applied != m.blocks().size() * m.heads().size()) {
        throw IoError("xconv_meta does not cover every block/task record");
      }
    }

    const std::size_t num_tasks = manifest.at("num_tasks").get<std::size_t>();
    b.state.matrix = AccuracyMatrix(num_tasks);
    for (const json& e : manifest.at("acc_entries")) {
      b.state.matrix.set(e.at(0).get<std::size_t>(),
                         e.at(1).get<std::size_t>(), e.at(2).get<double>());
    }

    b.state.rng.restore(manifest.at("rng_state").get<std::string>());
    b.state.next_task = manifest.at("next_task").get<std::size_t>();

    for (const json& lj : manifest.at("logs")) {
      TrainLog lg;
      lg.task_id = lj.at("task_id").get<std::size_t>();
      lg.stage_epochs = lj.at("stage_epochs").get<std::array<std::size_t, 3>>();
      lg.epoch_losses = lj.at("epoch_losses").get<std::vector<double>>();
      b.state.logs.push_back(std::move(lg));
    }

    const json& probes = manifest.at("probes");
    if (probes.at("first").get<bool>()) {
      b.state.probe_after_first =
          load_probe(ld, "probe_first", m.blocks().size());
    }
    if (probes.at("last").get<bool>()) {
      b.state.probe_after_last =
          load_probe(ld, "probe_last", m.blocks().size());
    }
    return b;
  } catch (const json::exception& e) {
    throw IoError("checkpoint manifest missing fields: " +
                  std::string(e.what()));
  }
}

}  // namespace confit
