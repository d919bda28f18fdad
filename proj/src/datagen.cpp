#include "confit/datagen.hpp"

#include <filesystem>

#include "confit/error.hpp"
#include "confit/rng.hpp"
#include "confit/json_util.hpp"
#include "confit/serialize.hpp"
#include "json.hpp"

namespace confit {

namespace fs = std::filesystem;
using nlohmann::json;

void TaskSequenceSpec::validate() const {
  if (num_tasks < 1 || train_per_class < 1 || test_per_class < 1 ||
      channels < 1 || height < 1 || width < 1) {
    throw DataError("degenerate task sequence spec: all counts must be >= 1");
  }
  if (classes_per_task < 2) {
    throw DataError("classification tasks need >= 2 classes");
  }
  if (prototype_scale <= 0.0 || noise_scale < 0.0 || task_offset_scale < 0.0) {
    throw DataError("degenerate task sequence spec: bad scales");
  }
  if (with_pretext && pretext_classes < 2) {
    throw DataError("pretext super-task needs >= 2 classes");
  }
}

namespace {

// Bilinear upsample of a coarse (C, gh, gw) grid to (C, H, W), align-corners.
Tensor upsample(const Tensor& grid, std::size_t H, std::size_t W) {
  const std::size_t C = grid.dim(0), gh = grid.dim(1), gw = grid.dim(2);
  Tensor out({C, H, W});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t h = 0; h < H; ++h) {
      const double u = H > 1 ? double(h) * double(gh - 1) / double(H - 1) : 0.0;
      const std::size_t u0 = std::min(std::size_t(u), gh - 1);
      const std::size_t u1 = std::min(u0 + 1, gh - 1);
      const double fu = u - double(u0);
      for (std::size_t w = 0; w < W; ++w) {
        const double v =
            W > 1 ? double(w) * double(gw - 1) / double(W - 1) : 0.0;
        const std::size_t v0 = std::min(std::size_t(v), gw - 1);
        const std::size_t v1 = std::min(v0 + 1, gw - 1);
        const double fv = v - double(v0);
        const double top = grid[(c * gh + u0) * gw + v0] * (1 - fv) +
                           grid[(c * gh + u0) * gw + v1] * fv;
        const double bot = grid[(c * gh + u1) * gw + v0] * (1 - fv) +
                           grid[(c * gh + u1) * gw + v1] * fv;
        out[(c * H + h) * W + w] = top * (1 - fu) + bot * fu;
      }
    }
  }
  return out;
}

TaskDataset generate_task(const TaskSequenceSpec& spec, std::size_t task_id,
                          std::size_t num_classes, Rng& rng) {
  const std::size_t C = spec.channels, H = spec.height, W = spec.width;
  const std::size_t gh = std::min<std::size_t>(4, H);
  const std::size_t gw = std::min<std::size_t>(4, W);

  const double task_offset = rng.normal(0.0, spec.task_offset_scale);

  std::vector<Tensor> prototypes;
  prototypes.reserve(num_classes);
  for (std::size_t k = 0; k < num_classes; ++k) {
    Tensor grid({C, gh, gw});
    for (std::size_t i = 0; i < grid.size(); ++i) {
      grid[i] = rng.normal(task_offset, spec.prototype_scale);
    }
    prototypes.push_back(upsample(grid, H, W));
  }

  auto make_split = [&](std::size_t per_class) {
    const std::size_t N = per_class * num_classes;
    SplitData split;
    split.x = Tensor({N, C, H, W});
    split.y = Tensor({N});
    std::size_t idx = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
      for (std::size_t s = 0; s < per_class; ++s, ++idx) {
        const Tensor& proto = prototypes[k];
        for (std::size_t i = 0; i < proto.size(); ++i) {
          split.x[idx * proto.size() + i] =
              proto[i] + rng.normal(0.0, spec.noise_scale);
        }
        split.y[idx] = double(k);
      }
    }
    return split;
  };

  TaskDataset task;
  task.task_id = task_id;
  task.num_classes = num_classes;
  task.train = make_split(spec.train_per_class);
  task.test = make_split(spec.test_per_class);
  return task;
}

std::string split_file(const std::string& prefix, const char* split,
                       const char* part) {
  return prefix + "." + split + "." + part + ".cft";
}

void save_task_files(const TaskDataset& task, const std::string& prefix,
                     const fs::path& dir, json& checksums) {
  const struct {
    const char* split;
    const char* part;
    const Tensor* t;
  } files[] = {
      {"train", "x", &task.train.x},
      {"train", "y", &task.train.y},
      {"test", "x", &task.test.x},
      {"test", "y", &task.test.y},
  };
  for (const auto& f : files) {
    const std::string name = split_file(prefix, f.split, f.part);
    write_cft((dir / name).string(), *f.t);
    checksums[name] = hex64(fnv1a64_file((dir / name).string()));
  }
}

TaskDataset load_task_files(std::size_t task_id, std::size_t num_classes,
                            const std::string& prefix, const fs::path& dir,
                            const json& checksums) {
  auto load_one = [&](const char* split, const char* part) {
    const std::string name = split_file(prefix, split, part);
    const std::string path = (dir / name).string();
    if (!checksums.contains(name)) {
      throw IoError("manifest lists no checksum for " + name);
    }
    const std::string want = checksums.at(name).get<std::string>();
    if (hex64(fnv1a64_file(path)) != want) {
      throw IoError("checksum mismatch on " + name + " (corrupt file)");
    }
    return read_cft(path);
  };
  TaskDataset task;
  task.task_id = task_id;
  task.num_classes = num_classes;
  task.train.x = load_one("train", "x");
  task.train.y = load_one("train", "y");
  task.test.x = load_one("test", "x");
  task.test.y = load_one("test", "y");
  if (task.train.x.dim(0) != task.train.y.dim(0) ||
      task.test.x.dim(0) != task.test.y.dim(0)) {
    throw DataError("sample/label count mismatch in task " +
                    std::to_string(task_id));
  }
  return task;
}

}  // namespace

json task_spec_to_json(const TaskSequenceSpec& s) {
  return json{{"num_tasks", s.num_tasks},
              {"classes_per_task", s.classes_per_task},
              {"train_per_class", s.train_per_class},
              {"test_per_class", s.test_per_class},
              {"channels", s.channels},
              {"height", s.height},
              {"width", s.width},
              {"prototype_scale", s.prototype_scale},
              {"task_offset_scale", s.task_offset_scale},
              {"noise_scale", s.noise_scale},
              {"seed", s.seed},
              {"with_pretext", s.with_pretext},
              {"pretext_classes", s.pretext_classes}};
}

TaskSequenceSpec task_spec_from_json(const json& j) {
  reject_unknown_keys(j,
                      {"num_tasks", "classes_per_task", "train_per_class",
                       "test_per_class", "channels", "height", "width",
                       "prototype_scale", "task_offset_scale", "noise_scale",
                       "seed", "with_pretext", "pretext_classes"},
                      "task sequence spec");
  TaskSequenceSpec s;
  s.num_tasks = j.value("num_tasks", s.num_tasks);
  s.classes_per_task = j.value("classes_per_task", s.classes_per_task);
  s.train_per_class = j.value("train_per_class", s.train_per_class);
  s.test_per_class = j.value("test_per_class", s.test_per_class);
  s.channels = j.value("channels", s.channels);
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.prototype_scale = j.value("prototype_scale", s.prototype_scale);
  s.task_offset_scale = j.value("task_offset_scale", s.task_offset_scale);
  s.noise_scale = j.value("noise_scale", s.noise_scale);
  s.seed = j.value("seed", s.seed);
  s.with_pretext = j.value("with_pretext", s.with_pretext);
  s.pretext_classes = j.value("pretext_classes", s.pretext_classes);
  return s;
}

TaskSequence generate(const TaskSequenceSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  TaskSequence seq;
  seq.spec = spec;
  seq.tasks.reserve(spec.num_tasks);
  for (std::size_t t = 0; t < spec.num_tasks; ++t) {
    seq.tasks.push_back(generate_task(spec, t, spec.classes_per_task, rng));
  }
  if (spec.with_pretext) {
    seq.pretext = generate_task(spec, spec.num_tasks, spec.pretext_classes, rng);
  }
  return seq;
}

void save_dataset(const TaskSequence& seq, const std::string& dir) {
  fs::create_directories(dir);
  json checksums = json::object();
  for (const TaskDataset& task : seq.tasks) {
    save_task_files(task, "task" + std::to_string(task.task_id), dir,
                    checksums);
  }
  if (seq.pretext.has_value()) {
    save_task_files(*seq.pretext, "pretext", dir, checksums);
  }
  json manifest{{"format_version", 1},
                {"kind", "confit-dataset"},
                {"spec", task_spec_to_json(seq.spec)},
                {"checksums", checksums}};
  write_text_file((fs::path(dir) / "manifest.json").string(),
                  manifest.dump(2) + "\n");
}

TaskSequence load_dataset(const std::string& dir) {
  const fs::path d(dir);
  if (!fs::exists(d / "manifest.json")) {
    throw IoError("no manifest.json in '" + dir + "'");
  }
  json manifest;
  try {
    manifest = json::parse(read_text_file((d / "manifest.json").string()));
  } catch (const json::exception& e) {
    throw IoError("malformed dataset manifest: " + std::string(e.what()));
  }
  try {
    if (manifest.at("format_version").get<int>() != 1) {
      throw IoError("unsupported dataset format version");
    }
    TaskSequence seq;
    seq.spec = task_spec_from_json(manifest.at("spec"));
    const json& checksums = manifest.at("checksums");
    for (std::size_t t = 0; t < seq.spec.num_tasks; ++t) {
      seq.tasks.push_back(load_task_files(t, seq.spec.classes_per_task,
                                          "task" + std::to_string(t), d,
                                          checksums));
    }
    if (seq.spec.with_pretext) {
      seq.pretext = load_task_files(seq.spec.num_tasks,
                                    seq.spec.pretext_classes, "pretext", d,
                                    checksums);
    }
    return seq;
  } catch (const json::exception& e) {
    throw IoError("dataset manifest missing fields: " + std::string(e.what()));
  }
}

}  // namespace confit
