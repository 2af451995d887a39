#include "monoflow/spectral.hpp"

#include <cmath>
#include <stdexcept>

namespace monoflow {

Mat SpectralLinear::apply(const Mat& x) const {
  if (x.cols() != weight.cols())
    throw std::invalid_argument("SpectralLinear::apply: dimension mismatch");
  Mat y = (x * weight.transpose()) * scale();
  y.rowwise() += bias.row(0);
  return y;
}

SpectralLinear make_spectral_linear(int in, int out, double target_lip, Rng& rng) {
  if (in <= 0 || out <= 0) throw std::invalid_argument("make_spectral_linear: bad dims");
  SpectralLinear l;
  double bound = 1.0 / std::sqrt(static_cast<double>(in));
  l.weight = rng.uniform_matrix(out, in, -bound, bound);
  l.bias = rng.uniform_matrix(1, out, -bound, bound);
  l.target_lip = target_lip;
  l.u = rng.normal_matrix(out, 1);
  l.u.normalize();
  l.v = Eigen::VectorXd::Zero(in);
  return l;
}

void spectral_normalize(SpectralLinear& layer, const SpectralNormMode& mode) {
  const Mat& w = layer.weight;
  if (layer.u.size() != w.rows()) {
    layer.u = Eigen::VectorXd::Ones(w.rows());
    layer.u.normalize();
  }
  auto step = [&]() -> double {
    Eigen::VectorXd vt = w.transpose() * layer.u;
    double nv = vt.norm();
    if (nv < 1e-300) return 0.0;
    layer.v = vt / nv;
    Eigen::VectorXd ut = w * layer.v;
    double nu = ut.norm();
    if (nu < 1e-300) return 0.0;
    layer.u = ut / nu;
    return layer.u.dot(w * layer.v);
  };
  if (mode.kind == SpectralNormMode::Kind::FixedIters) {
    double s = 0.0;
    for (int i = 0; i < mode.iters; ++i) s = step();
    layer.sigma_est = s;
  } else {
    double prev = -1.0;
    double s = 0.0;
    const int cap = 1000;
    for (int i = 0; i < cap; ++i) {
      s = step();
      if (std::abs(s - prev) <= mode.tol) break;
      prev = s;
    }
    layer.sigma_est = s;
  }
}

}  // namespace monoflow
