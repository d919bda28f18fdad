#include "confit/theory.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "confit/error.hpp"
#include "confit/serialize.hpp"
#include "json.hpp"

namespace confit::theory {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

namespace {

MatrixXd gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols,
                         double stddev) {
  MatrixXd m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          rng.normal(0.0, stddev);
    }
  }
  return m;
}

VectorXd gaussian_vector(Rng& rng, std::size_t n, double stddev) {
  VectorXd v(n);
  for (std::size_t i = 0; i < n; ++i) {
    v(static_cast<Eigen::Index>(i)) = rng.normal(0.0, stddev);
  }
  return v;
}

// Haar-ish random proper rotation: QR of a Gaussian matrix with the sign of
// the R diagonal absorbed, then a determinant fix.
MatrixXd random_rotation(Rng& rng, std::size_t k) {
  const MatrixXd g = gaussian_matrix(rng, k, k, 1.0);
  Eigen::HouseholderQR<MatrixXd> qr(g);
  MatrixXd q = qr.householderQ();
  const MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index i = 0; i < q.cols(); ++i) {
    if (r(i, i) < 0.0) q.col(i) = -q.col(i);
  }
  if (q.determinant() < 0.0) q.col(0) = -q.col(0);
  return q;
}

// Orthonormal basis of the column space, rank decided at a fixed tolerance.
MatrixXd column_space_basis(const MatrixXd& m) {
  Eigen::JacobiSVD<MatrixXd> svd(m, Eigen::ComputeThinU);
  const double tol =
      1e-12 * std::max(m.rows(), m.cols()) *
      (svd.singularValues().size() > 0 ? svd.singularValues()(0) : 0.0);
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i) {
    if (svd.singularValues()(i) > tol) ++rank;
  }
  return svd.matrixU().leftCols(rank);
}

// Proper-rotation Procrustes: the U in SO(k) minimizing |A - U C|_F among
// proper rotations. A feasible point for the bound's rotation minimum under
// either reading of "rotation" (O(k) or SO(k)).
MatrixXd procrustes_rotation(const MatrixXd& a, const MatrixXd& c) {
  const MatrixXd m = a * c.transpose();
  Eigen::JacobiSVD<MatrixXd> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  MatrixXd u = svd.matrixU() * svd.matrixV().transpose();
  if (u.determinant() < 0.0) {
    MatrixXd flip = MatrixXd::Identity(u.rows(), u.cols());
    flip(flip.rows() - 1, flip.cols() - 1) = -1.0;
    u = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  return u;
}

double spectral_norm(const MatrixXd& m) {
  Eigen::JacobiSVD<MatrixXd> svd(m);
  return svd.singularValues().size() > 0 ? svd.singularValues()(0) : 0.0;
}

struct Grads {
  MatrixXd gB;
  VectorXd gv;
  double loss = 0.0;
};

Grads loss_and_grads(const MatrixXd& B, const VectorXd& v,
                     const LinearTask& task) {
  const auto n = static_cast<double>(task.X.rows());
  const MatrixXd Z = task.X * B.transpose();  // n x k
  const VectorXd r = Z * v - task.y;
  Grads g;
  g.loss = r.squaredNorm() / n;
  g.gv = (2.0 / n) * (Z.transpose() * r);
  g.gB = (2.0 / n) * (v * (r.transpose() * task.X));
  return g;
}

}  // namespace

void LinearCLInstance::validate() const {
  if (!(1 <= k && k < n && n < d)) {
    throw ConfigError("dimension ordering 1 <= k < n < d violated");
  }
  if (B.rows() != static_cast<Eigen::Index>(k) ||
      B.cols() != static_cast<Eigen::Index>(d)) {
    throw ConfigError("extractor shape disagrees with (k, d)");
  }
  if (heads.size() != tasks.size()) {
    throw ConfigError("one head per task required");
  }
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    if (heads[t].size() != static_cast<Eigen::Index>(k) ||
        tasks[t].X.rows() != static_cast<Eigen::Index>(n) ||
        tasks[t].X.cols() != static_cast<Eigen::Index>(d) ||
        tasks[t].y.size() != static_cast<Eigen::Index>(n)) {
      throw ConfigError("task " + std::to_string(t) + " has wrong shapes");
    }
  }
}

LinearCLInstance make_realizable_instance(std::size_t k, std::size_t n,
                                          std::size_t d, std::size_t tasks,
                                          std::uint64_t seed) {
  LinearCLInstance inst;
  inst.k = k;
  inst.n = n;
  inst.d = d;
  Rng rng(seed);
  // Row norms of B stay near one so that features and targets are O(1).
  inst.B = gaussian_matrix(rng, k, d, 1.0 / std::sqrt(static_cast<double>(d)));
  for (std::size_t t = 0; t < tasks; ++t) {
    LinearTask task;
    task.X = gaussian_matrix(rng, n, d, 1.0);
    VectorXd head = gaussian_vector(rng, k, 1.0);
    task.y = task.X * inst.B.transpose() * head;
    inst.heads.push_back(std::move(head));
    inst.tasks.push_back(std::move(task));
  }
  inst.validate();
  return inst;
}

double task_loss(const MatrixXd& B, const VectorXd& v, const LinearTask& task) {
  const auto n = static_cast<double>(task.X.rows());
  return (task.X * B.transpose() * v - task.y).squaredNorm() / n;
}

VectorXd linear_probe(const MatrixXd& B, const LinearTask& task) {
  const MatrixXd Z = task.X * B.transpose();
  return Z.jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(task.y);
}

FineTuneResult fine_tune(const MatrixXd& B0, const VectorXd& v0,
                         const LinearTask& task, const FineTuneOptions& opt) {
  FineTuneResult res;
  res.B = B0;
  res.v = v0;
  double lr = opt.lr;

  Grads g = loss_and_grads(res.B, res.v, task);
  res.loss_trace.push_back(g.loss);
  res.grad_norm = std::sqrt(g.gB.squaredNorm() + g.gv.squaredNorm());
  if (g.loss < opt.tol && res.grad_norm < opt.grad_tol) {
    res.final_loss = g.loss;
    res.converged = true;
    return res;  // already at the stopping criteria: parameters untouched
  }

  for (std::size_t it = 0; it < opt.max_iters; ++it) {
    MatrixXd B_next;
    VectorXd v_next;
    double loss_next = 0.0;
    while (true) {
      B_next = res.B - lr * g.gB;
      v_next = res.v - lr * g.gv;
      loss_next = task_loss(B_next, v_next, task);
      if (loss_next <= g.loss) break;
      lr *= 0.5;
      if (lr < 1e-18) {  // descent direction exhausted at double precision
        res.final_loss = g.loss;
        res.iterations = it;
        return res;
      }
    }
    res.B = std::move(B_next);
    res.v = std::move(v_next);
    res.iterations = it + 1;
    res.loss_trace.push_back(loss_next);
    lr = std::min(lr * 1.1, opt.lr);

    g = loss_and_grads(res.B, res.v, task);
    res.grad_norm = std::sqrt(g.gB.squaredNorm() + g.gv.squaredNorm());
    if (g.loss < opt.tol && res.grad_norm < opt.grad_tol) {
      res.final_loss = g.loss;
      res.converged = true;
      return res;
    }
  }
  res.final_loss = g.loss;
  return res;
}

double worst_case_loss(const MatrixXd& B, const VectorXd& v,
                       const MatrixXd& B_ref, const VectorXd& v_ref) {
  if (B.cols() != B_ref.cols() || B.rows() != v.size() ||
      B_ref.rows() != v_ref.size()) {
    throw ConfigError("worst_case_loss shape mismatch");
  }
  return (B.transpose() * v - B_ref.transpose() * v_ref).squaredNorm();
}

double multi_head_relaxation(const MatrixXd& B, const VectorXd& v_a,
                             const VectorXd& v_b) {
  if (B.rows() != v_a.size() || v_a.size() != v_b.size()) {
    throw ConfigError("multi_head_relaxation shape mismatch");
  }
  return (B.transpose() * (v_a - v_b)).norm();
}

BoundComponents forgetting_lower_bound(const MatrixXd& X,
                                       const MatrixXd& B_prev,
                                       const VectorXd& v_prev,
                                       const MatrixXd& B_star,
                                       const VectorXd& v_star,
                                       double sigma_threshold) {
  const auto k = B_prev.rows();
  const auto d = B_prev.cols();
  if (X.cols() != d || B_star.rows() != k || B_star.cols() != d ||
      v_prev.size() != k || v_star.size() != k) {
    throw ConfigError("forgetting_lower_bound shape mismatch");
  }

  BoundComponents out;
  out.S = column_space_basis(X.transpose());  // span of the data vectors
  Eigen::JacobiSVD<MatrixXd> full(X.transpose(), Eigen::ComputeFullU);
  out.S_perp = full.matrixU().rightCols(d - out.S.cols());
  out.R = column_space_basis(B_prev.transpose());  // row space of the start

  const MatrixXd proj = out.R.transpose() * out.S_perp;
  Eigen::JacobiSVD<MatrixXd> psvd(proj);
  out.sigma_k = psvd.singularValues().size() >= k
                    ? psvd.singularValues()(k - 1)
                    : 0.0;
  out.precondition_ok = out.sigma_k > sigma_threshold;

  // Align the joint optimum with the start extractor before comparing heads;
  // the rotated pair describes the same function.
  const MatrixXd U = procrustes_rotation(B_prev, B_star);
  const VectorXd v_aligned = U * v_star;
  out.eps_hat = spectral_norm(B_prev - U * B_star);
  out.eps_hat *= out.eps_hat;

  const double dot = v_prev.dot(v_aligned);
  const double vv = v_star.squaredNorm();
  const double phi_sq = std::abs(dot * dot - vv * vv);
  out.phi = std::sqrt(phi_sq);

  const double c = (B_star.transpose() * v_star).norm();
  const double align_term =
      c > 0.0 ? std::min(out.phi, phi_sq / c) : out.phi;
  out.bound = out.sigma_k / std::sqrt(static_cast<double>(k)) * align_term /
                  ((1.0 + c) * (1.0 + c)) -
              out.eps_hat;
  return out;
}

std::string start_flavor_to_string(StartFlavor f) {
  switch (f) {
    case StartFlavor::random_start: return "random_start";
    case StartFlavor::rotated_optimum: return "rotated_optimum";
    case StartFlavor::trained_on_previous: return "trained_on_previous";
  }
  throw ConfigError("unknown start flavor");
}

BoundRecord bound_experiment(std::size_t k, std::size_t n, std::size_t d,
                             std::uint64_t seed, StartFlavor flavor,
                             const FineTuneOptions& opt) {
  Rng rng(seed);
  const MatrixXd B_star =
      gaussian_matrix(rng, k, d, 1.0 / std::sqrt(static_cast<double>(d)));
  const VectorXd v_star = gaussian_vector(rng, k, 1.0);

  // Both tasks share the joint optimum as ground truth.
  LinearTask current;
  current.X = gaussian_matrix(rng, n, d, 1.0);
  current.y = current.X * B_star.transpose() * v_star;
  LinearTask previous;
  previous.X = gaussian_matrix(rng, n, d, 1.0);
  previous.y = previous.X * B_star.transpose() * v_star;

  MatrixXd B_prev;
  VectorXd v_prev;
  switch (flavor) {
    case StartFlavor::random_start: {
      B_prev =
          gaussian_matrix(rng, k, d, 1.0 / std::sqrt(static_cast<double>(d)));
      v_prev = gaussian_vector(rng, k, 1.0);
      break;
    }
    case StartFlavor::rotated_optimum: {
      const MatrixXd rot = random_rotation(rng, k);
      B_prev = rot * B_star;
      v_prev = rot * gaussian_vector(rng, k, 1.0);
      break;
    }
    case StartFlavor::trained_on_previous: {
      const MatrixXd B_r =
          gaussian_matrix(rng, k, d, 1.0 / std::sqrt(static_cast<double>(d)));
      const VectorXd v_r = gaussian_vector(rng, k, 1.0);
      const FineTuneResult prior = fine_tune(B_r, v_r, previous, opt);
      B_prev = prior.B;
      v_prev = prior.v;
      break;
    }
  }

  const BoundComponents bc =
      forgetting_lower_bound(current.X, B_prev, v_prev, B_star, v_star);
  const FineTuneResult ft = fine_tune(B_prev, v_prev, current, opt);

  BoundRecord rec;
  rec.seed = seed;
  rec.flavor = flavor;
  rec.sigma_k = bc.sigma_k;
  rec.phi = bc.phi;
  rec.eps_hat = bc.eps_hat;
  rec.bound = bc.bound;
  rec.measured_sqrt_loss =
      std::sqrt(worst_case_loss(ft.B, ft.v, B_star, v_star));
  rec.precondition_ok = bc.precondition_ok;
  rec.converged = ft.converged;
  rec.checked = rec.precondition_ok && rec.converged;
  rec.satisfied = !rec.checked || rec.measured_sqrt_loss >= rec.bound;
  return rec;
}

std::vector<BoundRecord> bound_sweep(std::size_t k, std::size_t n,
                                     std::size_t d, std::size_t instances,
                                     std::uint64_t seed,
                                     const FineTuneOptions& opt) {
  const StartFlavor flavors[] = {StartFlavor::random_start,
                                 StartFlavor::rotated_optimum,
                                 StartFlavor::trained_on_previous};
  std::vector<BoundRecord> out;
  for (std::size_t i = 0; i < instances; ++i) {
    out.push_back(bound_experiment(k, n, d, seed + i, flavors[i % 3], opt));
  }
  return out;
}

void write_theory_report(const std::vector<BoundRecord>& records,
                         std::size_t k, std::size_t n, std::size_t d,
                         const std::string& json_path,
                         const std::string& csv_path) {
  json instances = json::array();
  std::size_t precondition_failed = 0, not_converged = 0, checked = 0,
              violations = 0;
  std::ostringstream csv;
  csv << "seed,flavor,sigma_k,phi,eps_hat,bound,measured_sqrt_loss,"
         "precondition_ok,converged,satisfied\n";
  csv.precision(17);
  for (const BoundRecord& r : records) {
    json row{{"seed", r.seed},
             {"flavor", start_flavor_to_string(r.flavor)},
             {"sigma_k", r.sigma_k},
             {"phi", r.phi},
             {"eps_hat", r.eps_hat},
             {"bound", r.bound},
             {"measured_sqrt_loss", r.measured_sqrt_loss},
             {"precondition_ok", r.precondition_ok},
             {"converged", r.converged}};
    // Instances skipped by the precondition or non-convergence carry no
    // verdict; they are reported, not asserted.
    row["satisfied"] = r.checked ? json(r.satisfied) : json(nullptr);
    instances.push_back(row);

    if (!r.precondition_ok) ++precondition_failed;
    if (r.precondition_ok && !r.converged) ++not_converged;
    if (r.checked) {
      ++checked;
      if (!r.satisfied) ++violations;
    }
    csv << r.seed << ',' << start_flavor_to_string(r.flavor) << ','
        << r.sigma_k << ',' << r.phi << ',' << r.eps_hat << ',' << r.bound
        << ',' << r.measured_sqrt_loss << ',' << (r.precondition_ok ? 1 : 0)
        << ',' << (r.converged ? 1 : 0) << ','
        << (r.checked ? (r.satisfied ? "1" : "0") : "") << '\n';
  }

  const json report{{"format_version", 1},
                    {"kind", "confit-theory-report"},
                    {"dims", {{"k", k}, {"n", n}, {"d", d}}},
                    {"instances", instances},
                    {"summary",
                     {{"total", records.size()},
                      {"precondition_failed", precondition_failed},
                      {"not_converged", not_converged},
                      {"checked", checked},
                      {"violations", violations}}}};
  write_text_file(json_path, report.dump(2) + "\n");
  write_text_file(csv_path, csv.str());
}

DriftReport drift_experiment(const LinearCLInstance& inst, bool probe_init,
                             std::uint64_t head_seed,
                             const FineTuneOptions& opt) {
  inst.validate();
  Rng head_rng(head_seed);
  DriftReport report;
  MatrixXd B_cur = inst.B;
  std::vector<VectorXd> stored_heads;

  for (std::size_t t = 0; t < inst.tasks.size(); ++t) {
    const VectorXd v0 = probe_init
                            ? linear_probe(B_cur, inst.tasks[t])
                            : gaussian_vector(head_rng, inst.k, 1.0);
    const FineTuneResult ft = fine_tune(B_cur, v0, inst.tasks[t], opt);
    report.all_converged = report.all_converged && ft.converged;
    B_cur = ft.B;
    stored_heads.push_back(ft.v);

    report.drift.push_back((B_cur - inst.B).norm());
    double worst = 0.0;
    for (std::size_t p = 0; p < t; ++p) {
      worst = std::max(worst,
                       task_loss(B_cur, stored_heads[p], inst.tasks[p]));
    }
    report.worst_prev_loss.push_back(worst);
  }
  for (double v : report.drift) report.max_drift = std::max(report.max_drift, v);
  for (double v : report.worst_prev_loss) {
    report.max_prev_loss = std::max(report.max_prev_loss, v);
  }
  return report;
}

}  // namespace confit::theory
