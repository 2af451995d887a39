#pragma once

#include <functional>

#include <Eigen/Dense>

namespace monoflow {

using Mat = Eigen::MatrixXd;

struct SolverConfig {
  double eps_forward = 1e-6;
  int nmax_forward = 2000;
  double eps_backward = 1e-9;
  int nmax_backward = 100;
  int stall_window_secant = 10;
  int stall_window_km = 30;
  double km_alpha0 = 0.5;
  double km_decay = 0.9;
  double km_alpha_min = 0.1;
  double beta_eps = 1e-8;
};

struct FixedPointResult {
  Mat y;
  Eigen::VectorXd residual;  // per-sample max-norm of f(y) - y
  std::vector<char> converged;
  int iters = 0;  // function evaluations used
  bool all_converged = true;
};

// Solves y = f(y) per sample (rows of y0 are independent problems). Starts
// with secant-style extrapolated iterations; a sample whose error stops
// improving falls back to damped (averaged) iterations with a shrinking
// step. `eps` bounds the per-sample max-norm residual; a sample is accepted
// once the observed convergence rate also certifies the solution error under
// `eps` (or progress stalls at the residual floor). `nmax` caps the
// iteration count of each phase.
FixedPointResult fixed_point_solve(const std::function<Mat(const Mat&)>& f, const Mat& y0,
                                   double eps, int nmax, const SolverConfig& cfg);

}  // namespace monoflow
