#include "monoflow/logdet.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/LU>

namespace monoflow {

using ad::Var;

double roulette_survival(double lambda, int k) {
  if (k <= 1) return 1.0;
  // P(Poisson(lambda) >= k - 1)
  double pmf = std::exp(-lambda);
  double cdf = pmf;
  for (int i = 1; i <= k - 2; ++i) {
    pmf *= lambda / i;
    cdf += pmf;
  }
  double s = 1.0 - cdf;
  return s > 1e-300 ? s : 1e-300;
}

double logdet_series_coeff(BlockKind kind, int k) {
  double alt = (k % 2 == 1) ? 1.0 : -1.0;  // (-1)^{k+1}
  switch (kind) {
    case BlockKind::Residual: return alt / k;
    case BlockKind::InverseResidual: return -alt / k;
    case BlockKind::Monotone: return (k % 2 == 1) ? -2.0 / k : 0.0;
    case BlockKind::ActNorm: return 0.0;
  }
  throw std::logic_error("bad block kind");
}

namespace {

// per-sample Jacobians of G at the rows of w, via basis-vector VJPs
std::vector<Mat> gnet_jacobians(const GNetwork& g, const Mat& w) {
  const Eigen::Index B = w.rows();
  const int n = g.dim();
  GVjpCache cache = gnet_forward_cache(g, w);
  std::vector<Mat> jac(static_cast<size_t>(B), Mat(n, n));
  for (int r = 0; r < n; ++r) {
    Mat seed = Mat::Zero(B, n);
    seed.col(r).setOnes();
    Mat rows = cache.vjp(seed);  // row r of each sample's Jacobian
    for (Eigen::Index i = 0; i < B; ++i) jac[static_cast<size_t>(i)].row(r) = rows.row(i);
  }
  return jac;
}

Mat jacobian_point(const FlowBlock& b, const Mat& x, const SolverConfig& cfg, Mat* w_keep) {
  Mat w;
  block_forward(b, x, cfg, nullptr, &w);
  if (w_keep) *w_keep = w;
  return gnet_jacobians(*b.g, w)[0];
}

}  // namespace

Mat jacobian_exact(const FlowBlock& b, const Mat& x, const SolverConfig& cfg) {
  if (x.rows() != 1) throw std::invalid_argument("jacobian_exact: expects a single row");
  const int n = b.dim();
  if (n > 64) throw std::invalid_argument("jacobian_exact: dimension above 64");
  Mat I = Mat::Identity(n, n);
  switch (b.kind) {
    case BlockKind::ActNorm: {
      Mat j = Mat::Zero(n, n);
      for (int i = 0; i < n; ++i) j(i, i) = std::exp(b.log_scale(0, i));
      return j;
    }
    case BlockKind::Residual:
      return I + jacobian_point(b, x, cfg, nullptr);
    case BlockKind::InverseResidual: {
      Mat jg = jacobian_point(b, x, cfg, nullptr);
      return (I + jg).partialPivLu().solve(I);
    }
    case BlockKind::Monotone: {
      Mat jg = jacobian_point(b, x, cfg, nullptr);
      return (I + jg).partialPivLu().solve(I - jg);
    }
  }
  throw std::logic_error("bad block kind");
}

namespace {

double logdet_psd(const Mat& m, const char* what) {
  Eigen::PartialPivLU<Mat> lu(m);
  double d = lu.determinant();
  if (!(d > 0.0))
    throw std::runtime_error(std::string(what) + ": determinant not positive (|J_G| >= 1?)");
  return std::log(d);
}

}  // namespace

Eigen::VectorXd logdet_exact_at(const FlowBlock& b, const Mat& w) {
  const Eigen::Index B = w.rows();
  const int n = b.dim();
  if (n > 64) throw std::invalid_argument("logdet_exact: dimension above 64");
  Eigen::VectorXd out(B);
  if (b.kind == BlockKind::ActNorm) {
    out.setConstant(b.log_scale.sum());
    return out;
  }
  std::vector<Mat> jac = gnet_jacobians(*b.g, w);
  Mat I = Mat::Identity(n, n);
  for (Eigen::Index i = 0; i < B; ++i) {
    const Mat& j = jac[static_cast<size_t>(i)];
    switch (b.kind) {
      case BlockKind::Residual:
        out(i) = logdet_psd(I + j, "logdet_exact");
        break;
      case BlockKind::InverseResidual:
        out(i) = -logdet_psd(I + j, "logdet_exact");
        break;
      case BlockKind::Monotone:
        out(i) = logdet_psd(I - j, "logdet_exact") - logdet_psd(I + j, "logdet_exact");
        break;
      default:
        break;
    }
  }
  return out;
}

Eigen::VectorXd logdet_exact(const FlowBlock& b, const Mat& x, const SolverConfig& cfg) {
  if (b.kind == BlockKind::ActNorm) return logdet_exact_at(b, x);
  Mat w;
  block_forward(b, x, cfg, nullptr, &w);
  return logdet_exact_at(b, w);
}

Eigen::VectorXd logdet_stochastic_at(const FlowBlock& b, const Mat& w, const RouletteConfig& rc,
                                     Rng& rng) {
  const Eigen::Index B = w.rows();
  if (b.kind == BlockKind::ActNorm)
    return Eigen::VectorXd::Constant(B, b.log_scale.sum());
  GVjpCache cache = gnet_forward_cache(*b.g, w);
  Eigen::VectorXd total = Eigen::VectorXd::Zero(B);
  for (int p = 0; p < rc.probes; ++p) {
    Mat v = rng.normal_matrix(static_cast<int>(B), b.dim());
    int tail = 1 + rng.poisson(rc.lambda);
    int kmax = rc.n_exact + tail;
    Mat r = v;
    for (int k = 1; k <= kmax; ++k) {
      r = cache.vjp(r);
      double c = logdet_series_coeff(b.kind, k);
      if (c == 0.0) continue;
      double wgt = k <= rc.n_exact ? 1.0 : 1.0 / roulette_survival(rc.lambda, k - rc.n_exact);
      total += (c * wgt) * r.cwiseProduct(v).rowwise().sum();
    }
  }
  return total / rc.probes;
}

Eigen::VectorXd logdet_stochastic(const FlowBlock& b, const Mat& x, const RouletteConfig& rc,
                                  const SolverConfig& cfg, Rng& rng) {
  if (b.kind == BlockKind::ActNorm) return logdet_stochastic_at(b, x, rc, rng);
  Mat w;
  block_forward(b, x, cfg, nullptr, &w);
  return logdet_stochastic_at(b, w, rc, rng);
}

ad::Var logdet_exact2_taped(const FlowBlock& b, const TapedGNet& tg) {
  using namespace ad;
  if (b.dim() != 2)
    throw std::invalid_argument("logdet_exact2_taped: closed form covers dim 2 only");
  if (b.kind == BlockKind::ActNorm)
    throw std::invalid_argument("logdet_exact2_taped: actnorm handled in closed form");
  const Eigen::Index B = tg.x.rows();
  Mat e0 = Mat::Zero(B, 2), e1 = Mat::Zero(B, 2);
  e0.col(0).setOnes();
  e1.col(1).setOnes();
  Var row0 = backward_seeded(tg.y, e0, {tg.x})[0];
  Var row1 = backward_seeded(tg.y, e1, {tg.x})[0];
  Var j00 = slice_cols(row0, 0, 1), j01 = slice_cols(row0, 1, 1);
  Var j10 = slice_cols(row1, 0, 1), j11 = slice_cols(row1, 1, 1);
  Var cross = mul(j01, j10);
  auto det_shift = [&](double sgn) {
    // det(I + sgn*J) for 2x2
    Var d = sub(mul(add_const(scale(j00, sgn), 1.0), add_const(scale(j11, sgn), 1.0)), cross);
    return d;
  };
  switch (b.kind) {
    case BlockKind::Residual:
      return unary(det_shift(1.0), UnaryFn::Log);
    case BlockKind::InverseResidual:
      return neg(unary(det_shift(1.0), UnaryFn::Log));
    case BlockKind::Monotone:
      return sub(unary(det_shift(-1.0), UnaryFn::Log), unary(det_shift(1.0), UnaryFn::Log));
    default:
      throw std::logic_error("bad block kind");
  }
}

namespace {

// shared core: one probe, explicit weights per term
void accumulate_series(const FlowBlock& b, const TapedGNet& tg, const Mat& v, int kmax,
                       const std::vector<double>& wgt, double probe_scale,
                       Eigen::VectorXd& value, Var& total) {
  using namespace ad;
  Tape& tape = *tg.y.tape;
  // taped row q = v^T J_G, a function of the leaf and the parameters
  Var q = backward_seeded(tg.y, v, {tg.x})[0];
  Mat c = v;  // chain J^{j} v, held fixed in the surrogate
  for (int k = 1; k <= kmax; ++k) {
    double w = wgt[static_cast<size_t>(k - 1)];
    double kappa = logdet_series_coeff(b.kind, k) * k;  // series coeff without 1/k
    if (kappa != 0.0) {
      Var term = sum_all(mul(q, constant(tape, c)));
      total = add(total, scale(term, kappa * w * probe_scale));
    }
    Mat jc = ad::jvp(tg.y, tg.x, c);  // advances the chain to J^k v
    double cval = logdet_series_coeff(b.kind, k);
    if (cval != 0.0) value += (cval * w * probe_scale) * jc.cwiseProduct(v).rowwise().sum();
    c = std::move(jc);
  }
}

}  // namespace

StochasticLogDet logdet_stochastic_taped(const FlowBlock& b, const TapedGNet& tg,
                                         const RouletteConfig& rc, Rng& rng) {
  using namespace ad;
  if (b.kind == BlockKind::ActNorm)
    throw std::invalid_argument("logdet_stochastic_taped: actnorm handled in closed form");
  const Eigen::Index B = tg.x.rows();
  const int n = b.dim();
  Tape& tape = *tg.y.tape;
  StochasticLogDet out;
  out.value = Eigen::VectorXd::Zero(B);
  out.surrogate = scalar_const(tape, 0.0);
  for (int p = 0; p < rc.probes; ++p) {
    Mat v = rng.normal_matrix(static_cast<int>(B), n);
    int tail = 1 + rng.poisson(rc.lambda);
    int kmax = rc.n_exact + tail;
    std::vector<double> wgt(static_cast<size_t>(kmax));
    for (int k = 1; k <= kmax; ++k)
      wgt[static_cast<size_t>(k - 1)] =
          k <= rc.n_exact ? 1.0 : 1.0 / roulette_survival(rc.lambda, k - rc.n_exact);
    accumulate_series(b, tg, v, kmax, wgt, 1.0 / rc.probes, out.value, out.surrogate);
  }
  return out;
}

StochasticLogDet logdet_series_taped(const FlowBlock& b, const TapedGNet& tg,
                                     const std::vector<Mat>& probes, int kmax) {
  using namespace ad;
  if (b.kind == BlockKind::ActNorm)
    throw std::invalid_argument("logdet_series_taped: actnorm handled in closed form");
  const Eigen::Index B = tg.x.rows();
  Tape& tape = *tg.y.tape;
  StochasticLogDet out;
  out.value = Eigen::VectorXd::Zero(B);
  out.surrogate = scalar_const(tape, 0.0);
  std::vector<double> wgt(static_cast<size_t>(kmax), 1.0);
  for (const Mat& v : probes)
    accumulate_series(b, tg, v, kmax, wgt, 1.0, out.value, out.surrogate);
  return out;
}

ImplicitBackwardResult implicit_backward(const GVjpCache& cache, const Mat& cot,
                                         const SolverConfig& cfg) {
  auto r = fixed_point_solve([&](const Mat& gmat) -> Mat { return cot - cache.vjp(gmat); }, cot,
                             cfg.eps_backward, cfg.nmax_backward, cfg);
  return {r.y, r.all_converged, r.iters};
}

}  // namespace monoflow
