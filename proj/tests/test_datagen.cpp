// Synthetic task-sequence generator: determinism, statistical sanity,
// learnability, and the on-disk dataset format.
#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "confit/datagen.hpp"
#include "confit/error.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace confit;
namespace fs = std::filesystem;

namespace {

TaskSequenceSpec small_spec() {
  TaskSequenceSpec s;
  s.num_tasks = 2;
  s.classes_per_task = 3;
  s.train_per_class = 12;
  s.test_per_class = 8;
  s.channels = 1;
  s.height = 8;
  s.width = 8;
  s.seed = 7;
  return s;
}

fs::path fresh_dir(const char* tag) {
  const fs::path p =
      fs::temp_directory_path() / (std::string("confit-datagen-") + tag);
  fs::remove_all(p);
  return p;
}

bool split_equal(const SplitData& a, const SplitData& b) {
  return a.x == b.x && a.y == b.y;
}

}  // namespace

TEST_CASE("spec validation rejects degenerate configurations") {
  TaskSequenceSpec s = small_spec();
  s.num_tasks = 0;
  CHECK_THROWS_AS(generate(s), DataError);
  s = small_spec();
  s.classes_per_task = 1;
  CHECK_THROWS_AS(generate(s), DataError);
  s = small_spec();
  s.train_per_class = 0;
  CHECK_THROWS_AS(generate(s), DataError);
  s = small_spec();
  s.height = 0;
  CHECK_THROWS_AS(generate(s), DataError);
  s = small_spec();
  s.prototype_scale = 0.0;
  CHECK_THROWS_AS(generate(s), DataError);
  s = small_spec();
  s.noise_scale = -0.1;
  CHECK_THROWS_AS(generate(s), DataError);
  s = small_spec();
  s.with_pretext = true;
  s.pretext_classes = 1;
  CHECK_THROWS_AS(generate(s), DataError);
}

TEST_CASE("generated shapes, labels, and finiteness") {
  const TaskSequenceSpec s = small_spec();
  const TaskSequence seq = generate(s);
  REQUIRE(seq.tasks.size() == 2);
  CHECK_FALSE(seq.pretext.has_value());

  for (std::size_t t = 0; t < seq.tasks.size(); ++t) {
    const TaskDataset& task = seq.tasks[t];
    CHECK(task.task_id == t);
    CHECK(task.num_classes == 3);
    CHECK(task.train.x.shape() ==
          std::vector<std::size_t>{36, 1, 8, 8});
    CHECK(task.train.y.shape() == std::vector<std::size_t>{36});
    CHECK(task.test.x.shape() == std::vector<std::size_t>{24, 1, 8, 8});
    CHECK(task.train.x.all_finite());
    CHECK(task.test.x.all_finite());

    // Every class appears exactly per_class times, with integral labels.
    std::vector<std::size_t> counts(3, 0);
    for (std::size_t i = 0; i < task.train.y.size(); ++i) {
      const double v = task.train.y[i];
      REQUIRE(v == std::floor(v));
      REQUIRE(v >= 0.0);
      REQUIRE(v < 3.0);
      ++counts[std::size_t(v)];
    }
    for (std::size_t c : counts) CHECK(c == 12);
  }
}

TEST_CASE("generation is a pure function of the spec") {
  const TaskSequenceSpec s = small_spec();
  const TaskSequence a = generate(s);
  const TaskSequence b = generate(s);
  for (std::size_t t = 0; t < a.tasks.size(); ++t) {
    CHECK(split_equal(a.tasks[t].train, b.tasks[t].train));
    CHECK(split_equal(a.tasks[t].test, b.tasks[t].test));
  }

  TaskSequenceSpec other = s;
  other.seed = 8;
  const TaskSequence c = generate(other);
  CHECK_FALSE(a.tasks[0].train.x == c.tasks[0].train.x);
}

TEST_CASE("enabling the pretext task leaves the main tasks' bytes alone") {
  TaskSequenceSpec s = small_spec();
  const TaskSequence without = generate(s);
  s.with_pretext = true;
  s.pretext_classes = 5;
  const TaskSequence with = generate(s);

  for (std::size_t t = 0; t < without.tasks.size(); ++t) {
    CHECK(split_equal(without.tasks[t].train, with.tasks[t].train));
    CHECK(split_equal(without.tasks[t].test, with.tasks[t].test));
  }
  REQUIRE(with.pretext.has_value());
  CHECK(with.pretext->task_id == s.num_tasks);
  CHECK(with.pretext->num_classes == 5);
  CHECK(with.pretext->train.x.dim(0) == 5 * s.train_per_class);
}

TEST_CASE("train and test splits estimate the same class prototypes") {
  TaskSequenceSpec s = small_spec();
  s.num_tasks = 1;
  s.classes_per_task = 2;
  s.train_per_class = 100;
  s.test_per_class = 50;
  const TaskSequence seq = generate(s);
  const TaskDataset& task = seq.tasks[0];
  const std::size_t pix = s.channels * s.height * s.width;

  // Noise is iid N(0, sigma^2); the two split means differ by
  // N(0, sigma^2 (1/Ntr + 1/Nte)) per pixel. 5 sigma over 128 pixels.
  const double sigma_diff =
      s.noise_scale * std::sqrt(1.0 / 100.0 + 1.0 / 50.0);
  auto class_mean = [&](const SplitData& split, double cls) {
    std::vector<double> mean(pix, 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < split.y.size(); ++i) {
      if (split.y[i] != cls) continue;
      for (std::size_t p = 0; p < pix; ++p) mean[p] += split.x[i * pix + p];
      ++n;
    }
    for (double& m : mean) m /= double(n);
    return mean;
  };
  for (double cls : {0.0, 1.0}) {
    const auto mtr = class_mean(task.train, cls);
    const auto mte = class_mean(task.test, cls);
    double worst = 0.0;
    for (std::size_t p = 0; p < pix; ++p) {
      worst = std::max(worst, std::abs(mtr[p] - mte[p]));
    }
    CHECK(worst < 5.0 * sigma_diff);
  }
}

TEST_CASE("a ridge linear probe beats chance by at least 3x") {
  TaskSequenceSpec s;
  s.num_tasks = 1;
  s.classes_per_task = 4;
  s.train_per_class = 50;
  s.test_per_class = 25;
  s.seed = 11;
  const TaskSequence seq = generate(s);
  const TaskDataset& task = seq.tasks[0];

  const std::size_t pix = s.channels * s.height * s.width;
  const std::size_t Ntr = task.train.x.dim(0), Nte = task.test.x.dim(0);
  const std::size_t K = s.classes_per_task;

  Eigen::MatrixXd X(Ntr, pix + 1);
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(Ntr, K);
  for (std::size_t i = 0; i < Ntr; ++i) {
    for (std::size_t p = 0; p < pix; ++p) X(i, p) = task.train.x[i * pix + p];
    X(i, pix) = 1.0;
    Y(i, std::size_t(task.train.y[i])) = 1.0;
  }
  const Eigen::MatrixXd G =
      X.transpose() * X +
      1e-3 * Eigen::MatrixXd::Identity(pix + 1, pix + 1);
  const Eigen::MatrixXd W = G.ldlt().solve(X.transpose() * Y);

  std::size_t correct = 0;
  for (std::size_t i = 0; i < Nte; ++i) {
    Eigen::RowVectorXd xi(pix + 1);
    for (std::size_t p = 0; p < pix; ++p) xi(p) = task.test.x[i * pix + p];
    xi(pix) = 1.0;
    Eigen::Index best;
    (xi * W).maxCoeff(&best);
    if (std::size_t(best) == std::size_t(task.test.y[i])) ++correct;
  }
  const double accuracy = double(correct) / double(Nte);
  CHECK(accuracy >= 3.0 / double(K));
}

TEST_CASE("dataset save/load round-trips bitwise and verifies checksums") {
  TaskSequenceSpec s = small_spec();
  s.with_pretext = true;
  s.pretext_classes = 4;
  const TaskSequence seq = generate(s);
  const fs::path dir = fresh_dir("roundtrip");
  save_dataset(seq, dir.string());

  const TaskSequence back = load_dataset(dir.string());
  CHECK(back.spec.seed == s.seed);
  CHECK(back.spec.num_tasks == s.num_tasks);
  REQUIRE(back.tasks.size() == seq.tasks.size());
  for (std::size_t t = 0; t < seq.tasks.size(); ++t) {
    CHECK(split_equal(back.tasks[t].train, seq.tasks[t].train));
    CHECK(split_equal(back.tasks[t].test, seq.tasks[t].test));
  }
  REQUIRE(back.pretext.has_value());
  CHECK(split_equal(back.pretext->train, seq.pretext->train));

  SUBCASE("corrupting one payload byte is caught by the checksum") {
    const fs::path victim = dir / "task0.train.x.cft";
    std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(64);
    char b;
    f.seekg(64);
    f.get(b);
    f.seekp(64);
    f.put(char(b ^ 0x01));
    f.close();
    CHECK_THROWS_AS(load_dataset(dir.string()), IoError);
  }
  fs::remove_all(dir);
}

TEST_CASE("loading without a manifest fails") {
  const fs::path dir = fresh_dir("nomanifest");
  fs::create_directories(dir);
  CHECK_THROWS_AS(load_dataset(dir.string()), IoError);
  fs::remove_all(dir);
}

TEST_CASE("manifest missing a checksum entry fails") {
  const TaskSequenceSpec s = small_spec();
  const fs::path dir = fresh_dir("missing-entry");
  save_dataset(generate(s), dir.string());
  // Rewrite the manifest without one checksum entry.
  std::ifstream in(dir / "manifest.json");
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  in.close();
  const std::string key = "\"task1.test.y.cft\"";
  const auto pos = text.find(key);
  REQUIRE(pos != std::string::npos);
  const auto line_end = text.find('\n', pos);
  text.erase(pos, line_end - pos + 1);
  std::ofstream out(dir / "manifest.json");
  out << text;
  out.close();
  CHECK_THROWS_AS(load_dataset(dir.string()), IoError);
  fs::remove_all(dir);
}
