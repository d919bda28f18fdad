#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "confit/rng.hpp"

namespace confit::theory {

/// One regression task for the overparametrized linear model y = v'Bx.
/// Rows of X are inputs.
struct LinearTask {
  Eigen::MatrixXd X;  // n x d
  Eigen::VectorXd y;  // n
};

/// Shared linear feature extractor plus per-task heads and data, with the
/// dimension ordering 1 <= k < n < d enforced at construction.
struct LinearCLInstance {
  Eigen::MatrixXd B;                    // k x d ground-truth extractor
  std::vector<Eigen::VectorXd> heads;   // per-task ground-truth heads, each k
  std::vector<LinearTask> tasks;
  std::size_t k = 0, n = 0, d = 0;

  void validate() const;  // ConfigError on ordering or shape violations
};

// Each task is exactly realizable by the shared extractor: y_t = v_t' B x.
LinearCLInstance make_realizable_instance(std::size_t k, std::size_t n,
                                          std::size_t d, std::size_t tasks,
                                          std::uint64_t seed);

// Mean squared error of (B, v) on one task.
double task_loss(const Eigen::MatrixXd& B, const Eigen::VectorXd& v,
                 const LinearTask& task);

// Least-squares head for frozen features Bx; minimum-norm on rank deficiency.
Eigen::VectorXd linear_probe(const Eigen::MatrixXd& B, const LinearTask& task);

struct FineTuneOptions {
  double lr = 0.1;          // halved whenever a step would increase the loss
  double tol = 1e-10;       // loss threshold
  double grad_tol = 1e-6;   // stationarity threshold
  std::size_t max_iters = 200000;
};

struct FineTuneResult {
  Eigen::MatrixXd B;
  Eigen::VectorXd v;
  double final_loss = 0.0;
  double grad_norm = 0.0;
  std::size_t iterations = 0;
  bool converged = false;           // loss < tol and grad_norm < grad_tol
  std::vector<double> loss_trace;   // non-increasing by construction
};

// Full-batch gradient descent on both B and v from the given start. An init
// already at the stopping criteria returns unchanged with zero iterations;
// non-convergence is reported through the flag, never thrown.
FineTuneResult fine_tune(const Eigen::MatrixXd& B0, const Eigen::VectorXd& v0,
                         const LinearTask& task,
                         const FineTuneOptions& opt = {});

// Worst case over ||x|| <= 1 of (v'Bx - v_ref'B_ref x)^2, in closed form:
// ||B'v - B_ref'v_ref||^2.
double worst_case_loss(const Eigen::MatrixXd& B, const Eigen::VectorXd& v,
                       const Eigen::MatrixXd& B_ref,
                       const Eigen::VectorXd& v_ref);

// Divergence between two heads on one extractor: ||B'(v_a - v_b)||.
// The worst-case gap measured with head v_b is within this of the gap
// measured with head v_a (triangle inequality), which is what makes
// per-task heads a relaxation of the single-head analysis.
double multi_head_relaxation(const Eigen::MatrixXd& B,
                             const Eigen::VectorXd& v_a,
                             const Eigen::VectorXd& v_b);

/// Ingredients of the forgetting lower bound, all derived from the
/// fine-tuning start point, the new task's data, and a joint optimum.
struct BoundComponents {
  double sigma_k = 0.0;    // k-th singular value of R'S_perp
  double phi = 0.0;        // head misalignment, measured in the aligned frame
  double eps_hat = 0.0;    // squared spectral distance at the feasible
                           // Frobenius-optimal rotation; upper-bounds the
                           // true minimum, so the emitted bound is
                           // conservative
  double bound = 0.0;
  bool precondition_ok = false;  // sigma_k above threshold
  Eigen::MatrixXd S;       // orthonormal basis of the task data span
  Eigen::MatrixXd S_perp;  // orthonormal complement of S
  Eigen::MatrixXd R;       // orthonormal basis of the start extractor's rows
};

// Lower bound on the worst-case root-loss of any previous task after
// fine-tuning on data X from the start point (B_prev, v_prev), where
// (B_star, v_star) is optimal for both the new and the previous task.
// The head alignment is evaluated on the rotation-aligned representative
// (U B_star, U v_star), U the proper-rotation Procrustes minimizer, since
// (B, v) and (U B, U v) describe the same function.
BoundComponents forgetting_lower_bound(const Eigen::MatrixXd& X,
                                       const Eigen::MatrixXd& B_prev,
                                       const Eigen::VectorXd& v_prev,
                                       const Eigen::MatrixXd& B_star,
                                       const Eigen::VectorXd& v_star,
                                       double sigma_threshold = 1e-6);

enum class StartFlavor {
  random_start,         // start far from the joint optimum
  rotated_optimum,      // extractor at a rotated optimum, head misaligned
  trained_on_previous,  // start produced by converged training on prior data
};

std::string start_flavor_to_string(StartFlavor f);

/// One end-to-end bound check: build an instance, fine-tune, measure the
/// worst-case loss against the joint optimum, compare with the bound.
struct BoundRecord {
  std::uint64_t seed = 0;
  StartFlavor flavor = StartFlavor::random_start;
  double sigma_k = 0.0;
  double phi = 0.0;
  double eps_hat = 0.0;
  double bound = 0.0;
  double measured_sqrt_loss = 0.0;
  bool precondition_ok = false;
  bool converged = false;
  bool checked = false;    // precondition_ok && converged
  bool satisfied = false;  // measured >= bound; meaningful only when checked
};

BoundRecord bound_experiment(std::size_t k, std::size_t n, std::size_t d,
                             std::uint64_t seed, StartFlavor flavor,
                             const FineTuneOptions& opt = {});

// Seeds seed..seed+instances-1, cycling through the start flavors.
std::vector<BoundRecord> bound_sweep(std::size_t k, std::size_t n,
                                     std::size_t d, std::size_t instances,
                                     std::uint64_t seed,
                                     const FineTuneOptions& opt = {});

// theory_report.json plus a CSV with one row per instance.
void write_theory_report(const std::vector<BoundRecord>& records,
                         std::size_t k, std::size_t n, std::size_t d,
                         const std::string& json_path,
                         const std::string& csv_path);

/// Drift experiment: train the instance's tasks in sequence, starting the
/// head either from a linear probe or at random, and track how far the
/// extractor moves from its start and what the stored heads lose.
struct DriftReport {
  std::vector<double> drift;           // ||B_t - B_0||_F after each task
  std::vector<double> worst_prev_loss; // max over earlier tasks, each step
  double max_drift = 0.0;
  double max_prev_loss = 0.0;
  bool all_converged = true;
};

DriftReport drift_experiment(const LinearCLInstance& inst, bool probe_init,
                             std::uint64_t head_seed,
                             const FineTuneOptions& opt = {});

}  // namespace confit::theory
