#include <doctest.h>

#include <cmath>
#include <vector>

#include "monoflow/logdet.hpp"
#include "monoflow/rng.hpp"

using namespace monoflow;

namespace {

SolverConfig tight() {
  SolverConfig c;
  c.eps_forward = 1e-13;
  c.nmax_forward = 4000;
  return c;
}

// depth-0 network whose map is exactly x -> x A^T
FlowBlock linear_block(BlockKind kind, const Mat& a) {
  GNetConfig cfg;
  cfg.dim = static_cast<int>(a.cols());
  cfg.depth = 0;
  cfg.growth = 1;
  cfg.coeff_lip = 1.0;
  Rng rng(999);
  FlowBlock b = make_gblock(kind, cfg, rng);
  b.g->final_layer.weight = a;
  b.g->final_layer.bias.setZero();
  b.g->touch();
  return b;
}

FlowBlock random_block(BlockKind kind, int dim, Activation act, uint64_t seed,
                       double lips = 0.9) {
  GNetConfig cfg;
  cfg.dim = dim;
  cfg.depth = 2;
  cfg.growth = 6;
  cfg.act = act;
  cfg.kernel_lip = lips;
  cfg.coeff_lip = lips;
  Rng rng(seed);
  FlowBlock b = make_gblock(kind, cfg, rng);
  gnet_normalize(*b.g, SpectralNormMode::tolerance(1e-12));
  return b;
}

// dense per-sample Jacobian of G from repeated cache VJPs
Mat gnet_jacobian_row(const GNetwork& g, const Mat& w_row) {
  const int n = g.dim();
  GVjpCache cache = gnet_forward_cache(g, w_row);
  Mat j(n, n);
  for (int r = 0; r < n; ++r) {
    Mat seed = Mat::Zero(1, n);
    seed(0, r) = 1.0;
    j.row(r) = cache.vjp(seed).row(0);
  }
  return j;
}

}  // namespace

TEST_CASE("roulette survival probabilities") {
  const double lam = 2.0;
  CHECK(roulette_survival(lam, 1) == 1.0);
  CHECK(roulette_survival(lam, 2) == doctest::Approx(1.0 - std::exp(-lam)).epsilon(1e-14));
  CHECK(roulette_survival(lam, 3) ==
        doctest::Approx(1.0 - std::exp(-lam) * (1.0 + lam)).epsilon(1e-14));
  CHECK(roulette_survival(lam, 4) ==
        doctest::Approx(1.0 - std::exp(-lam) * (1.0 + lam + lam * lam / 2.0)).epsilon(1e-14));
  double prev = 1.0;
  for (int k = 1; k <= 30; ++k) {
    double s = roulette_survival(lam, k);
    CHECK(s > 0.0);
    CHECK(s <= prev + 1e-15);
    prev = s;
  }
  CHECK(roulette_survival(lam, 400) > 0.0);  // floored, never divides by zero
}

TEST_CASE("log-determinant series coefficients") {
  for (int k = 1; k <= 8; ++k) {
    double alt = (k % 2 == 1) ? 1.0 : -1.0;
    CHECK(logdet_series_coeff(BlockKind::Residual, k) == alt / k);
    CHECK(logdet_series_coeff(BlockKind::InverseResidual, k) == -alt / k);
    if (k % 2 == 1)
      CHECK(logdet_series_coeff(BlockKind::Monotone, k) == -2.0 / k);
    else
      CHECK(logdet_series_coeff(BlockKind::Monotone, k) == 0.0);
    CHECK(logdet_series_coeff(BlockKind::ActNorm, k) == 0.0);
  }
}

TEST_CASE("closed forms for a linear diagonal network") {
  // G(w) = 0.5 w in two dimensions: J_G = 0.5 I everywhere
  Mat a = 0.5 * Mat::Identity(2, 2);
  Mat x(3, 2);
  x << 0.3, -1.0, 2.0, 0.1, 0.0, 0.0;
  SolverConfig cfg = tight();

  FlowBlock mono = linear_block(BlockKind::Monotone, a);
  Eigen::VectorXd ld = logdet_exact(mono, x, cfg);
  // log det(I - J) - log det(I + J) = log(0.25) - log(2.25) = 2 log(1/3)
  for (int i = 0; i < 3; ++i) CHECK(ld(i) == doctest::Approx(-2.1972245773362196).epsilon(1e-12));

  FlowBlock res = linear_block(BlockKind::Residual, a);
  ld = logdet_exact(res, x, cfg);
  for (int i = 0; i < 3; ++i) CHECK(ld(i) == doctest::Approx(0.8109302162163288).epsilon(1e-12));

  FlowBlock irb = linear_block(BlockKind::InverseResidual, a);
  ld = logdet_exact(irb, x, cfg);
  for (int i = 0; i < 3; ++i) CHECK(ld(i) == doctest::Approx(-0.8109302162163288).epsilon(1e-12));
}

TEST_CASE("exact block jacobian matches finite differences") {
  SolverConfig cfg = tight();
  const double h = 1e-6;
  for (auto kind : {BlockKind::Residual, BlockKind::InverseResidual, BlockKind::Monotone}) {
    FlowBlock b = random_block(kind, 3, Activation::CPila, 31 + static_cast<int>(kind));
    Mat x(1, 3);
    x << 0.4, -0.7, 0.2;
    Mat j = jacobian_exact(b, x, cfg);
    for (int c = 0; c < 3; ++c) {
      Mat xp = x, xm = x;
      xp(0, c) += h;
      xm(0, c) -= h;
      Mat d = (block_forward(b, xp, cfg) - block_forward(b, xm, cfg)) / (2.0 * h);
      for (int r = 0; r < 3; ++r) CHECK(j(r, c) == doctest::Approx(d(0, r)).epsilon(5e-6));
    }
  }
}

TEST_CASE("actnorm jacobian is the diagonal of scales") {
  FlowBlock b = make_actnorm(3);
  Rng rng(5);
  Mat data = rng.normal_matrix(50, 3);
  data.col(1) *= 3.0;
  data.array() += 0.7;
  actnorm_init(b, data);
  Mat x(1, 3);
  x << 0.1, 0.2, 0.3;
  Mat j = jacobian_exact(b, x, tight());
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      if (r == c)
        CHECK(j(r, c) == doctest::Approx(std::exp(b.log_scale(0, c))).epsilon(1e-14));
      else
        CHECK(j(r, c) == 0.0);
    }
  Eigen::VectorXd ld = logdet_exact(b, x, tight());
  CHECK(ld(0) == doctest::Approx(b.log_scale.sum()).epsilon(1e-14));
  Rng rr(9);
  Eigen::VectorXd lds = logdet_stochastic(b, x, RouletteConfig{}, tight(), rr);
  CHECK(lds(0) == doctest::Approx(b.log_scale.sum()).epsilon(1e-14));
}

TEST_CASE("exact log determinant agrees with the dense jacobian") {
  SolverConfig cfg = tight();
  for (auto kind : {BlockKind::Residual, BlockKind::InverseResidual, BlockKind::Monotone}) {
    FlowBlock b = random_block(kind, 3, Activation::CLipSwish, 77 + static_cast<int>(kind));
    Rng rng(11);
    Mat x = rng.normal_matrix(4, 3);
    Eigen::VectorXd ld = logdet_exact(b, x, cfg);
    for (int i = 0; i < 4; ++i) {
      Mat j = jacobian_exact(b, x.row(i), cfg);
      double direct = std::log(std::abs(j.determinant()));
      CHECK(ld(i) == doctest::Approx(direct).epsilon(1e-9));
      CHECK(j.determinant() > 0.0);
    }
  }
}

TEST_CASE("jacobian helpers reject unsupported inputs") {
  FlowBlock b = random_block(BlockKind::Residual, 2, Activation::CPila, 3);
  Mat two_rows = Mat::Zero(2, 2);
  CHECK_THROWS_AS(jacobian_exact(b, two_rows, tight()), std::invalid_argument);
  Rng rng(1);
  GNetConfig big;
  big.dim = 65;
  big.depth = 0;
  big.growth = 1;
  FlowBlock wide = make_gblock(BlockKind::Residual, big, rng);
  Mat xw = Mat::Zero(1, 65);
  CHECK_THROWS_AS(jacobian_exact(wide, xw, tight()), std::invalid_argument);
  CHECK_THROWS_AS(logdet_exact(wide, xw, tight()), std::invalid_argument);
}

TEST_CASE("taped two-dimensional log determinant matches the dense form") {
  for (auto kind : {BlockKind::Residual, BlockKind::InverseResidual, BlockKind::Monotone}) {
    FlowBlock b = random_block(kind, 2, Activation::CPila, 123 + static_cast<int>(kind));
    Rng rng(21);
    Mat w = rng.normal_matrix(6, 2);
    ad::Tape tape;
    TapedGNet tg = gnet_eval_taped(*b.g, tape, w);
    ad::Var ld = logdet_exact2_taped(b, tg);
    Eigen::VectorXd ref = logdet_exact_at(b, w);
    REQUIRE(ld.rows() == 6);
    REQUIRE(ld.cols() == 1);
    for (int i = 0; i < 6; ++i) CHECK(ld.val()(i, 0) == doctest::Approx(ref(i)).epsilon(1e-10));
  }
}

TEST_CASE("taped log determinant gradient matches finite differences") {
  FlowBlock b = random_block(BlockKind::Monotone, 2, Activation::CPila, 207);
  Rng rng(33);
  Mat w = rng.normal_matrix(3, 2);
  ad::Tape tape;
  TapedGNet tg = gnet_eval_taped(*b.g, tape, w);
  ad::Var ld = logdet_exact2_taped(b, tg);
  ad::Var total = ad::sum_all(ld);
  ParamRefs refs = gnet_params(*b.g);
  std::vector<ad::Var> grads = ad::backward(total, tg.params);
  const double h = 1e-5;
  size_t pi = refs.names.size() - 2;  // final.weight sits before final.bias, concat_raw absent
  for (size_t i = 0; i < refs.names.size(); ++i)
    if (refs.names[i] == "final.weight") pi = i;
  double g_tape = grads[pi].val()(0, 1);
  double saved = (*refs.tensors[pi])(0, 1);
  (*refs.tensors[pi])(0, 1) = saved + h;
  b.g->touch();
  double fp = logdet_exact_at(b, w).sum();
  (*refs.tensors[pi])(0, 1) = saved - h;
  b.g->touch();
  double fm = logdet_exact_at(b, w).sum();
  (*refs.tensors[pi])(0, 1) = saved;
  b.g->touch();
  double fd = (fp - fm) / (2.0 * h);
  CHECK(g_tape == doctest::Approx(fd).epsilon(1e-5));
}

TEST_CASE("stochastic estimator reproduces its taped value draw for draw") {
  RouletteConfig rc;
  rc.probes = 2;
  // residual: the jacobian point is the input itself
  FlowBlock res = random_block(BlockKind::Residual, 2, Activation::CLipSwish, 404);
  Rng r1(555), r2(555);
  Mat x(5, 2);
  Rng xgen(7);
  x = xgen.normal_matrix(5, 2);
  Eigen::VectorXd plain = logdet_stochastic(res, x, rc, tight(), r1);
  ad::Tape tape;
  TapedGNet tg = gnet_eval_taped(*res.g, tape, x);
  StochasticLogDet taped = logdet_stochastic_taped(res, tg, rc, r2);
  for (int i = 0; i < 5; ++i) CHECK(plain(i) == doctest::Approx(taped.value(i)).epsilon(1e-9));

  // monotone: both sides share the solved inner point
  FlowBlock mono = random_block(BlockKind::Monotone, 2, Activation::CPila, 405);
  Mat w;
  block_forward(mono, x, tight(), nullptr, &w);
  Rng r3(556), r4(556);
  Eigen::VectorXd at = logdet_stochastic_at(mono, w, rc, r3);
  ad::Tape tape2;
  TapedGNet tg2 = gnet_eval_taped(*mono.g, tape2, w);
  StochasticLogDet taped2 = logdet_stochastic_taped(mono, tg2, rc, r4);
  for (int i = 0; i < 5; ++i) CHECK(at(i) == doctest::Approx(taped2.value(i)).epsilon(1e-9));
}

TEST_CASE("basis-probe series converges to the exact log determinant") {
  FlowBlock b = random_block(BlockKind::Monotone, 2, Activation::CPila, 88, 0.55);
  Rng rng(15);
  Mat w = rng.normal_matrix(4, 2);
  ad::Tape tape;
  TapedGNet tg = gnet_eval_taped(*b.g, tape, w);
  std::vector<Mat> probes;
  for (int j = 0; j < 2; ++j) {
    Mat e = Mat::Zero(4, 2);
    e.col(j).setOnes();
    probes.push_back(e);
  }
  StochasticLogDet s = logdet_series_taped(b, tg, probes, 60);
  Eigen::VectorXd ref = logdet_exact_at(b, w);
  for (int i = 0; i < 4; ++i) CHECK(s.value(i) == doctest::Approx(ref(i)).epsilon(1e-11));
}

TEST_CASE("series surrogate gradient differentiates the truncated series") {
  const int kmax = 12;
  for (auto kind : {BlockKind::Residual, BlockKind::Monotone}) {
    FlowBlock b = random_block(kind, 2, Activation::CPila, 99 + static_cast<int>(kind));
    Rng rng(25);
    Mat w = rng.normal_matrix(3, 2);
    std::vector<Mat> probes;
    for (int j = 0; j < 2; ++j) {
      Mat e = Mat::Zero(3, 2);
      e.col(j).setOnes();
      probes.push_back(e);
    }
    auto truncated = [&]() {
      ad::Tape t;
      TapedGNet tg = gnet_eval_taped(*b.g, t, w);
      return logdet_series_taped(b, tg, probes, kmax).value.sum();
    };
    ad::Tape tape;
    TapedGNet tg = gnet_eval_taped(*b.g, tape, w);
    StochasticLogDet s = logdet_series_taped(b, tg, probes, kmax);
    std::vector<ad::Var> grads = ad::backward(s.surrogate, tg.params);
    ParamRefs refs = gnet_params(*b.g);
    size_t pi = 0;
    for (size_t i = 0; i < refs.names.size(); ++i)
      if (refs.names[i] == "step1.weight") pi = i;
    const double h = 1e-5;
    double g_tape = grads[pi].val()(1, 0);
    double saved = (*refs.tensors[pi])(1, 0);
    (*refs.tensors[pi])(1, 0) = saved + h;
    b.g->touch();
    double fp = truncated();
    (*refs.tensors[pi])(1, 0) = saved - h;
    b.g->touch();
    double fm = truncated();
    (*refs.tensors[pi])(1, 0) = saved;
    b.g->touch();
    CHECK(g_tape == doctest::Approx((fp - fm) / (2.0 * h)).epsilon(2e-5));
  }
}

TEST_CASE("taped estimators refuse actnorm blocks") {
  FlowBlock b = make_actnorm(2);
  Rng rng(3);
  Mat data = rng.normal_matrix(20, 2);
  actnorm_init(b, data);
  FlowBlock res = random_block(BlockKind::Residual, 3, Activation::CPila, 6);
  ad::Tape tape;
  TapedGNet tg = gnet_eval_taped(*res.g, tape, Mat::Zero(2, 3));
  CHECK_THROWS_AS(logdet_exact2_taped(res, tg), std::invalid_argument);  // dim 3
  RouletteConfig rc;
  Rng r(4);
  StochasticLogDet ok = logdet_stochastic_taped(res, tg, rc, r);
  CHECK(ok.value.size() == 2);
}

TEST_CASE("implicit backward solves the transposed row system") {
  // linear case: out (I + 0.6 I) = cot  =>  out = cot / 1.6
  Mat a = 0.6 * Mat::Identity(2, 2);
  FlowBlock b = linear_block(BlockKind::Monotone, a);
  Rng rng(42);
  Mat cot = rng.normal_matrix(4, 2);
  GVjpCache cache = gnet_forward_cache(*b.g, Mat::Zero(4, 2));
  SolverConfig cfg;
  ImplicitBackwardResult r = implicit_backward(cache, cot, cfg);
  CHECK(r.converged);
  CHECK((r.out - cot / 1.6).cwiseAbs().maxCoeff() < 1e-8);

  FlowBlock nb = random_block(BlockKind::Monotone, 3, Activation::CLipSwish, 61);
  Mat w = rng.normal_matrix(5, 3);
  GVjpCache nc = gnet_forward_cache(*nb.g, w);
  Mat cot2 = rng.normal_matrix(5, 3);
  ImplicitBackwardResult r2 = implicit_backward(nc, cot2, cfg);
  CHECK(r2.converged);
  for (int i = 0; i < 5; ++i) {
    Mat j = gnet_jacobian_row(*nb.g, w.row(i));
    Mat lhs = r2.out.row(i) * (Mat::Identity(3, 3) + j);
    CHECK((lhs - cot2.row(i)).cwiseAbs().maxCoeff() < 1e-7);
  }
}
