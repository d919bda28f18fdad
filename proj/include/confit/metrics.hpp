#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "confit/tensor.hpp"

namespace confit {

/// Lower-triangular table a[i][j]: accuracy on task i measured after training
/// task j, defined for i <= j < num_tasks. Entries are set as the run
/// progresses; metrics require the relevant region to be complete.
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::size_t num_tasks);

  std::size_t num_tasks() const { return t_; }
  void set(std::size_t i, std::size_t j, double value);
  double get(std::size_t i, std::size_t j) const;
  bool has(std::size_t i, std::size_t j) const;
  bool column_complete(std::size_t j) const;
  bool complete() const;

  std::string to_csv() const;  // header i,j,accuracy

  bool operator==(const AccuracyMatrix& other) const {
    return t_ == other.t_ && set_ == other.set_ && a_ == other.a_;
  }

 private:
  void check_index(std::size_t i, std::size_t j) const;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> a_;    // row i holds j = i .. T-1
  std::vector<std::vector<bool>> set_;
};

// Mean final accuracy: (1/T) * sum_i a[i][T-1]. Needs the last column.
double acc(const AccuracyMatrix& m);

struct FgtResult {
  double value = 0.0;
  bool defined = false;  // false iff T == 1 (value reported as 0)
};

// Mean maximal drop: (1/(T-1)) * sum_{i<T-1... } max_{i<=j} (a_ij - a_iT).
// Nonnegative because the j = T term contributes 0.
FgtResult fgt(const AccuracyMatrix& m);

/// Per-layer mean probes for the representational-shift diagnostics. One
/// snapshot holds, for every conv layer, the normalization mean the model
/// would use for the first task and the true mean of the first task's test
/// activations under the current weights.
struct MeanProbeSnapshot {
  std::vector<Tensor> mu_r;   // per layer
  std::vector<Tensor> mu_te;  // per layer
};

struct DeltaRow {
  std::size_t layer = 0;
  double d0 = 0.0;  // |mu_r(after first task)  - mu_te(after first task)|
  double d1 = 0.0;  // |mu_te(after first task) - mu_te(after last task)|
  double d2 = 0.0;  // |mu_r(after last task)   - mu_te(after last task)|
};

std::vector<DeltaRow> delta_diagnostics(const MeanProbeSnapshot& after_first,
                                        const MeanProbeSnapshot& after_last);

std::string deltas_to_csv(const std::vector<DeltaRow>& rows);

double median(std::vector<double> v);

}  // namespace confit
