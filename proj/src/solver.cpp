#include "monoflow/solver.hpp"

#include <stdexcept>

namespace monoflow {

namespace {

enum class Phase : char { Secant, Km, Done, Failed };

}  // namespace

FixedPointResult fixed_point_solve(const std::function<Mat(const Mat&)>& f, const Mat& y0,
                                   double eps, int nmax, const SolverConfig& cfg) {
  const Eigen::Index B = y0.rows();
  const Eigen::Index n = y0.cols();

  Mat y = y0;
  Mat f_prev = Mat::Zero(B, n);
  Mat dy_prev = Mat::Zero(B, n);
  std::vector<char> have_prev(static_cast<size_t>(B), 0);

  std::vector<Phase> phase(static_cast<size_t>(B), Phase::Secant);
  std::vector<int> phase_iters(static_cast<size_t>(B), 0);
  std::vector<int> no_improve(static_cast<size_t>(B), 0);
  std::vector<double> best_err(static_cast<size_t>(B), -1.0);
  std::vector<double> alpha(static_cast<size_t>(B), cfg.km_alpha0);
  std::vector<int> polish(static_cast<size_t>(B), 0);

  FixedPointResult res;
  res.residual = Eigen::VectorXd::Constant(B, -1.0);
  res.converged.assign(static_cast<size_t>(B), 0);

  int evals = 0;
  while (true) {
    bool any_active = false;
    for (Eigen::Index i = 0; i < B; ++i) {
      Phase p = phase[static_cast<size_t>(i)];
      if (p == Phase::Secant || p == Phase::Km) {
        any_active = true;
        break;
      }
    }
    if (!any_active) break;

    Mat fy = f(y);
    if (fy.rows() != B || fy.cols() != n)
      throw std::invalid_argument("fixed_point_solve: map changed shape");
    ++evals;

    for (Eigen::Index i = 0; i < B; ++i) {
      size_t si = static_cast<size_t>(i);
      Phase p = phase[si];
      if (p == Phase::Done || p == Phase::Failed) continue;

      auto fr = fy.row(i);
      auto yr = y.row(i);
      Eigen::RowVectorXd dy = fr - yr;
      double err = dy.cwiseAbs().maxCoeff();
      res.residual(i) = err;

      if (err <= eps) {
        // for a 0.98-contraction the solution error is at most 50x the
        // residual 2-norm; accept once that certificate clears eps, or when
        // progress has stalled at the residual floor or the budget is spent
        bool certified = dy.norm() * 50.0 <= eps;
        polish[si] = (best_err[si] >= 0.0 && err >= best_err[si]) ? polish[si] + 1 : 0;
        if (certified || polish[si] >= 3 || phase_iters[si] + 1 >= nmax) {
          phase[si] = Phase::Done;
          res.converged[si] = 1;
          y.row(i) = fr;  // the map was already applied, keep the newer point
          continue;
        }
      }

      if (best_err[si] < 0.0 || err < best_err[si]) {
        best_err[si] = err;
        no_improve[si] = 0;
      } else {
        ++no_improve[si];
      }

      ++phase_iters[si];
      if (p == Phase::Secant) {
        bool stalled = no_improve[si] >= cfg.stall_window_secant;
        if (stalled || phase_iters[si] >= nmax) {
          phase[si] = Phase::Km;
          phase_iters[si] = 0;
          no_improve[si] = 0;
          best_err[si] = err;
          have_prev[si] = 0;
          // damped step with the value already computed
          y.row(i) = (1.0 - alpha[si]) * yr + alpha[si] * fr;
          continue;
        }
        if (!have_prev[si]) {
          y.row(i) = fr;  // plain first step
        } else {
          Eigen::RowVectorXd d2y = dy - dy_prev.row(i);
          double beta = d2y.dot(dy) / (d2y.squaredNorm() + cfg.beta_eps);
          y.row(i) = fr - beta * (fr - f_prev.row(i));
        }
        f_prev.row(i) = fr;
        dy_prev.row(i) = dy;
        have_prev[si] = 1;
      } else {  // Km
        if (phase_iters[si] >= nmax) {
          if (err <= eps) {
            phase[si] = Phase::Done;
            res.converged[si] = 1;
            y.row(i) = fr;
          } else {
            phase[si] = Phase::Failed;
          }
          continue;
        }
        if (no_improve[si] >= cfg.stall_window_km) {
          alpha[si] = std::max(cfg.km_decay * alpha[si], cfg.km_alpha_min);
          no_improve[si] = 0;
        }
        y.row(i) = (1.0 - alpha[si]) * yr + alpha[si] * fr;
      }
    }
  }

  res.y = std::move(y);
  res.iters = evals;
  for (Eigen::Index i = 0; i < B; ++i)
    if (!res.converged[static_cast<size_t>(i)]) res.all_converged = false;
  return res;
}

}  // namespace monoflow
