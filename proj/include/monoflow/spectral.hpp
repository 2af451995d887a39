#pragma once

#include <Eigen/Dense>

#include "monoflow/rng.hpp"

namespace monoflow {

using Mat = Eigen::MatrixXd;

struct SpectralNormMode {
  enum class Kind { FixedIters, Tolerance };
  Kind kind = Kind::FixedIters;
  int iters = 5;
  double tol = 1e-4;

  static SpectralNormMode fixed(int n) { return {Kind::FixedIters, n, 0.0}; }
  static SpectralNormMode tolerance(double t) { return {Kind::Tolerance, 0, t}; }
};

// Linear layer whose effective weight is W * min(1, target_lip / sigma_est),
// with sigma_est maintained by power iteration between training steps.
struct SpectralLinear {
  Mat weight;  // out x in
  Mat bias;    // 1 x out
  Eigen::VectorXd u, v;
  double target_lip = 1.0;
  double sigma_est = 0.0;

  int in_dim() const { return static_cast<int>(weight.cols()); }
  int out_dim() const { return static_cast<int>(weight.rows()); }

  double scale() const {
    return sigma_est > target_lip ? target_lip / sigma_est : 1.0;
  }

  Mat apply(const Mat& x) const;
};

SpectralLinear make_spectral_linear(int in, int out, double target_lip, Rng& rng);

// power iteration on W; updates u, v, sigma_est
void spectral_normalize(SpectralLinear& layer, const SpectralNormMode& mode);

}  // namespace monoflow
