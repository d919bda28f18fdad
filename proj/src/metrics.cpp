#include "confit/metrics.hpp"

#include <algorithm>
#include <sstream>

#include "confit/error.hpp"

namespace confit {

AccuracyMatrix::AccuracyMatrix(std::size_t num_tasks) : t_(num_tasks) {
  if (num_tasks == 0) throw StateError("accuracy matrix needs >= 1 task");
  a_.resize(t_);
  set_.resize(t_);
  for (std::size_t i = 0; i < t_; ++i) {
    a_[i].assign(t_ - i, 0.0);
    set_[i].assign(t_ - i, false);
  }
}

void AccuracyMatrix::check_index(std::size_t i, std::size_t j) const {
  if (i >= t_ || j >= t_ || j < i) {
    throw StateError("accuracy matrix index (" + std::to_string(i) + "," +
                     std::to_string(j) + ") outside lower triangle of T=" +
                     std::to_string(t_));
  }
}

void AccuracyMatrix::set(std::size_t i, std::size_t j, double value) {
  check_index(i, j);
  if (value < 0.0 || value > 1.0) {
    throw StateError("accuracy " + std::to_string(value) + " outside [0,1]");
  }
  a_[i][j - i] = value;
  set_[i][j - i] = true;
}

double AccuracyMatrix::get(std::size_t i, std::size_t j) const {
  check_index(i, j);
  if (!set_[i][j - i]) {
    throw StateError("accuracy entry (" + std::to_string(i) + "," +
                     std::to_string(j) + ") not filled yet");
  }
  return a_[i][j - i];
}

bool AccuracyMatrix::has(std::size_t i, std::size_t j) const {
  check_index(i, j);
  return set_[i][j - i];
}

bool AccuracyMatrix::column_complete(std::size_t j) const {
  for (std::size_t i = 0; i <= j; ++i) {
    if (!set_[i][j - i]) return false;
  }
  return true;
}

bool AccuracyMatrix::complete() const {
  for (std::size_t j = 0; j < t_; ++j) {
    if (!column_complete(j)) return false;
  }
  return true;
}

std::string AccuracyMatrix::to_csv() const {
  std::ostringstream os;
  os << "i,j,accuracy\n";
  os.precision(17);
  for (std::size_t i = 0; i < t_; ++i) {
    for (std::size_t j = i; j < t_; ++j) {
      if (set_[i][j - i]) os << i << "," << j << "," << a_[i][j - i] << "\n";
    }
  }
  return os.str();
}

double acc(const AccuracyMatrix& m) {
  const std::size_t T = m.num_tasks();
  if (!m.column_complete(T - 1)) {
    throw StateError("final column incomplete; ACC undefined");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < T; ++i) s += m.get(i, T - 1);
  return s / static_cast<double>(T);
}

FgtResult fgt(const AccuracyMatrix& m) {
  const std::size_t T = m.num_tasks();
  FgtResult res;
  if (T == 1) {
    res.value = 0.0;
    res.defined = false;
    return res;
  }
  if (!m.complete()) {
    throw StateError("matrix incomplete; FGT undefined");
  }
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < T; ++i) {
    double best_drop = 0.0;  // j = T-1 term is exactly 0
    for (std::size_t j = i; j < T; ++j) {
      best_drop = std::max(best_drop, m.get(i, j) - m.get(i, T - 1));
    }
    s += best_drop;
  }
  res.value = s / static_cast<double>(T - 1);
  res.defined = true;
  return res;
}

std::vector<DeltaRow> delta_diagnostics(const MeanProbeSnapshot& after_first,
                                        const MeanProbeSnapshot& after_last) {
  const std::size_t n = after_first.mu_r.size();
  if (after_first.mu_te.size() != n || after_last.mu_r.size() != n ||
      after_last.mu_te.size() != n || n == 0) {
    throw StateError("mean probes missing or of mismatched layer counts");
  }
  std::vector<DeltaRow> rows(n);
  for (std::size_t l = 0; l < n; ++l) {
    rows[l].layer = l;
    rows[l].d0 = l2_norm(sub(after_first.mu_r[l], after_first.mu_te[l]));
    rows[l].d1 = l2_norm(sub(after_first.mu_te[l], after_last.mu_te[l]));
    rows[l].d2 = l2_norm(sub(after_last.mu_r[l], after_last.mu_te[l]));
  }
  return rows;
}

std::string deltas_to_csv(const std::vector<DeltaRow>& rows) {
  std::ostringstream os;
  os << "layer,delta0,delta1,delta2\n";
  os.precision(17);
  for (const DeltaRow& r : rows) {
    os << r.layer << "," << r.d0 << "," << r.d1 << "," << r.d2 << "\n";
  }
  return os.str();
}

double median(std::vector<double> v) {
  if (v.empty()) throw StateError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace confit
