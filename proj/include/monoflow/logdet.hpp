#pragma once

#include "monoflow/blocks.hpp"
#include "monoflow/rng.hpp"
#include "monoflow/tape.hpp"

namespace monoflow {

struct RouletteConfig {
  double lambda = 2.0;  // n = 1 + Poisson(lambda) tail terms
  int n_exact = 10;     // leading terms evaluated without reweighting
  int probes = 1;
};

// P(N >= k) for N = 1 + Poisson(lambda), k >= 1
double roulette_survival(double lambda, int k);

// coefficient of tr(J_G^k) in the log-determinant series of a block's
// Jacobian: residual log det(I+J); inverse-residual -log det(I+J);
// monotone log det(I-J) - log det(I+J) (odd terms -2/k, even terms vanish)
double logdet_series_coeff(BlockKind kind, int k);

// dense Jacobian dy/dx of the block map at a single point (row vector);
// refuses dimensions above 64
Mat jacobian_exact(const FlowBlock& b, const Mat& x, const SolverConfig& cfg);

// per-sample log|det dy/dx| via LU factorizations of I +- J_G; asserts the
// determinant signs implied by ||J_G|| < 1
Eigen::VectorXd logdet_exact(const FlowBlock& b, const Mat& x, const SolverConfig& cfg);

// unbiased series estimate at the points where the Jacobian is taken
// (x for residual blocks, the inner fixed point w otherwise)
Eigen::VectorXd logdet_stochastic(const FlowBlock& b, const Mat& x, const RouletteConfig& rc,
                                  const SolverConfig& cfg, Rng& rng);

// same, with the Jacobian point already known (skips the inner solve)
Eigen::VectorXd logdet_exact_at(const FlowBlock& b, const Mat& w);
Eigen::VectorXd logdet_stochastic_at(const FlowBlock& b, const Mat& w, const RouletteConfig& rc,
                                     Rng& rng);

// Recorded per-sample log-determinant for n = 2 models, differentiable
// through both the Jacobian entries and the network parameters. `tg` must
// be the taped evaluation of b.g at the Jacobian point.
ad::Var logdet_exact2_taped(const FlowBlock& b, const TapedGNet& tg);

// Recorded stochastic objective: `value` reproduces logdet_stochastic for
// the same draw; `surrogate` is a scalar whose gradient estimates the
// gradient of the per-batch summed log-determinant (derivative of the
// truncated series with the inner chain factors held fixed).
struct StochasticLogDet {
  Eigen::VectorXd value;
  ad::Var surrogate;
};
StochasticLogDet logdet_stochastic_taped(const FlowBlock& b, const TapedGNet& tg,
                                         const RouletteConfig& rc, Rng& rng);

// Deterministic truncated series over explicit probe vectors (no roulette
// reweighting). With the standard basis as probes the surrogate's gradient
// equals the gradient of the truncated log-determinant series exactly.
StochasticLogDet logdet_series_taped(const FlowBlock& b, const TapedGNet& tg,
                                     const std::vector<Mat>& probes, int kmax);

// Solves the row system out * (I + J_G) = cot by fixed-point iteration with
// the backward tolerances; J_G is taken at the cache's expansion point.
struct ImplicitBackwardResult {
  Mat out;
  bool converged = true;
  int iters = 0;
};
ImplicitBackwardResult implicit_backward(const GVjpCache& cache, const Mat& cot,
                                         const SolverConfig& cfg);

}  // namespace monoflow
