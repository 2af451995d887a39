#include "monoflow/verify.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <Eigen/SVD>
#include <json.hpp>

#include "monoflow/train.hpp"

namespace monoflow {

namespace {

constexpr double kEqTol = 1e-9;     // attainment of analytic equality cases
constexpr double kGradTol = 1e-4;   // training gradients vs finite differences
constexpr double kActTol = 1e-7;    // activation derivatives vs finite differences

SolverConfig tight_solver() {
  SolverConfig s;
  s.eps_forward = 1e-13;
  s.nmax_forward = 4000;
  s.eps_backward = 1e-13;
  s.nmax_backward = 2000;
  return s;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

CheckResult check(std::string suite, std::string name, bool pass, std::string witness = "") {
  return {std::move(suite), std::move(name), pass, std::move(witness)};
}

double sigma_max(const Mat& a) {
  return Eigen::JacobiSVD<Mat>(a).singularValues()(0);
}

Mat random_lipschitz_matrix(int n, double L, Rng& rng) {
  if (L == 0.0) return Mat::Zero(n, n);
  Mat a = rng.normal_matrix(n, n);
  double s = sigma_max(a);
  if (s < 1e-12) return Mat::Identity(n, n) * L;
  return a * (L / s);
}

// slack for inequalities that analytic cases attain with equality
bool leq(double lhs, double rhs) { return lhs <= rhs + kEqTol * (1.0 + std::abs(rhs)); }

}  // namespace

FlowBlock make_linear_gblock(BlockKind kind, const Mat& A, double budget) {
  if (A.rows() != A.cols()) throw std::invalid_argument("make_linear_gblock: square matrix only");
  GNetConfig cfg;
  cfg.dim = static_cast<int>(A.rows());
  cfg.depth = 0;
  cfg.growth = 1;
  cfg.act = Activation::ReLU;
  cfg.kernel_lip = 1.0;
  cfg.coeff_lip = budget > 0 ? budget : 1e-12;
  Rng r(0);
  FlowBlock b = make_gblock(kind, cfg, r);
  b.g->final_layer.weight = A;
  b.g->final_layer.bias.setZero();
  b.g->final_layer.sigma_est = 0.0;  // scale() stays 1
  b.g->touch();
  return b;
}

std::vector<CheckResult> check_cayley_duality(std::uint64_t seed) {
  std::vector<CheckResult> out;
  const SolverConfig s = tight_solver();
  Rng root(seed);
  const int dims[3] = {1, 2, 4};

  for (int i = 0; i < 50; ++i) {
    int n = dims[i % 3];
    Rng r = root.split(100 + static_cast<std::uint64_t>(i));
    GNetConfig cfg;
    cfg.dim = n;
    cfg.depth = 2;
    cfg.growth = 6;
    cfg.act = Activation::CPila;
    cfg.kernel_lip = 0.9;
    cfg.coeff_lip = 0.9;
    FlowBlock b = make_gblock(BlockKind::Monotone, cfg, r);
    gnet_normalize(*b.g, SpectralNormMode::tolerance(1e-12));
    double lb = b.g->lipschitz_bound();

    const int n_pairs = 8;
    Mat x1 = 1.5 * r.normal_matrix(n_pairs, n);
    Mat x2 = 1.5 * r.normal_matrix(n_pairs, n);
    Mat y1 = block_forward(b, x1, s);
    Mat y2 = block_forward(b, x2, s);
    bool mono_ok = lb < 1.0, cayley_ok = true;
    double worst_ip = 1e300, worst_ratio = 0.0;
    for (int j = 0; j < n_pairs; ++j) {
      Eigen::RowVectorXd p = x1.row(j) - x2.row(j);
      Eigen::RowVectorXd q = y1.row(j) - y2.row(j);
      double quot = q.dot(p) / p.squaredNorm();
      worst_ip = std::min(worst_ip, quot);
      if (quot < -1e-12) mono_ok = false;
      Eigen::RowVectorXd du = (x1.row(j) + y1.row(j)) - (x2.row(j) + y2.row(j));
      Eigen::RowVectorXd dv = (x1.row(j) - y1.row(j)) - (x2.row(j) - y2.row(j));
      double ratio = dv.norm() / du.norm();
      worst_ratio = std::max(worst_ratio, ratio);
      if (!leq(ratio, 1.0)) cayley_ok = false;
    }
    char name[64];
    std::snprintf(name, sizeof(name), "net%02d-n%d", i, n);
    out.push_back(check("duality", std::string(name) + "-monotone", mono_ok,
                        "min quotient " + fmt(worst_ip) + ", bound " + fmt(lb)));
    out.push_back(check("duality", std::string(name) + "-cayley-1lip", cayley_ok,
                        "max cayley ratio " + fmt(worst_ratio)));
  }

  for (double L : {0.5, 0.8, 0.98}) {
    const int n = 2;
    Mat I = Mat::Identity(n, n);
    double eta = (1.0 - L) / (1.0 + L);
    double nu = (1.0 + L) / (1.0 - L);
    Rng r = root.split(9000 + static_cast<std::uint64_t>(L * 1000));
    Mat x1 = r.normal_matrix(6, n), x2 = r.normal_matrix(6, n);

    FlowBlock bp = make_linear_gblock(BlockKind::Monotone, L * I, L);
    Mat y1 = block_forward(bp, x1, s), y2 = block_forward(bp, x2, s);
    double dev_eta = 0.0;
    for (int j = 0; j < 6; ++j) {
      Eigen::RowVectorXd p = x1.row(j) - x2.row(j), q = y1.row(j) - y2.row(j);
      dev_eta = std::max(dev_eta, std::abs(q.dot(p) / p.squaredNorm() - eta));
    }
    out.push_back(check("duality", "equality-eta-L" + fmt(L), dev_eta <= kEqTol,
                        "eta " + fmt(eta) + ", max deviation " + fmt(dev_eta)));

    FlowBlock bm = make_linear_gblock(BlockKind::Monotone, -L * I, L);
    y1 = block_forward(bm, x1, s);
    y2 = block_forward(bm, x2, s);
    double dev_nu = 0.0;
    for (int j = 0; j < 6; ++j) {
      Eigen::RowVectorXd p = x1.row(j) - x2.row(j), q = y1.row(j) - y2.row(j);
      dev_nu = std::max(dev_nu, std::abs(q.norm() / p.norm() - nu));
    }
    out.push_back(check("duality", "equality-nu-L" + fmt(L), dev_nu <= kEqTol,
                        "nu " + fmt(nu) + ", max deviation " + fmt(dev_nu)));
  }

  {
    FlowBlock b0 = make_linear_gblock(BlockKind::Monotone, Mat::Zero(2, 2), 1e-12);
    Rng r = root.split(9999);
    Mat x1 = r.normal_matrix(6, 2), x2 = r.normal_matrix(6, 2);
    Mat y1 = block_forward(b0, x1, s), y2 = block_forward(b0, x2, s);
    double dev = ((y1 - x1).cwiseAbs().maxCoeff() + (y2 - x2).cwiseAbs().maxCoeff());
    out.push_back(check("duality", "zero-net-identity", dev <= kEqTol,
                        "max |F(x) - x| component " + fmt(dev)));
  }
  return out;
}

namespace {

struct PairSet {
  Mat x1, x2;  // rows are pair endpoints
};

// per-pair displacement data of a map F over the pair set
struct Displacements {
  std::vector<Eigen::RowVectorXd> p, q;
};

Displacements displacements(const FlowBlock& b, const PairSet& ps, const SolverConfig& s) {
  Displacements d;
  Mat y1 = block_forward(b, ps.x1, s);
  Mat y2 = block_forward(b, ps.x2, s);
  for (Eigen::Index j = 0; j < ps.x1.rows(); ++j) {
    d.p.push_back(ps.x1.row(j) - ps.x2.row(j));
    d.q.push_back(y1.row(j) - y2.row(j));
  }
  return d;
}

}  // namespace

std::vector<CheckResult> check_class_relations(double L, std::uint64_t seed) {
  std::vector<CheckResult> out;
  const SolverConfig s = tight_solver();
  const std::string tag = "L" + fmt(L);
  Rng root(seed ^ 0x4c00u ^ static_cast<std::uint64_t>(L * 1e6));
  const int n = 2;
  Mat I = Mat::Identity(n, n);

  std::vector<Mat> gs;
  for (int t = 0; t < 10; ++t) gs.push_back(random_lipschitz_matrix(n, L, root));
  gs.push_back(L * I);
  gs.push_back(-L * I);

  PairSet ps;
  ps.x1 = root.normal_matrix(12, n);
  ps.x2 = root.normal_matrix(12, n);
  ps.x2.row(0).setZero();  // include displacement from the origin

  bool disp_r = true, disp_i = true, disp_m = true, ident_i = true, ident_m = true, a7 = true;
  double worst = 0.0;
  const double c2 = (1.0 - L * L) / (1.0 + L * L);
  const double L2 = 2.0 * L / (1.0 + L * L);
  const double eta = (1.0 - L) / (1.0 + L);
  const double K = std::min(eta, 1.0);
  const double Lstar =
      std::sqrt((1.0 + K * K - 2.0 * K * K * K) / (1.0 + K * K + 2.0 * K * K * K));

  for (const Mat& A : gs) {
    FlowBlock br = make_linear_gblock(BlockKind::Residual, A, std::max(L, 1e-12));
    FlowBlock bi = make_linear_gblock(BlockKind::InverseResidual, A, std::max(L, 1e-12));
    FlowBlock bm = make_linear_gblock(BlockKind::Monotone, A, std::max(L, 1e-12));
    Displacements dr = displacements(br, ps, s);
    Displacements di = displacements(bi, ps, s);
    Displacements dm = displacements(bm, ps, s);
    for (size_t j = 0; j < dr.p.size(); ++j) {
      if (!leq((dr.q[j] - dr.p[j]).norm(), L * dr.p[j].norm())) disp_r = false;
      if (!leq((di.p[j] - di.q[j]).norm(), L * di.q[j].norm())) disp_i = false;
      if (!leq((dm.q[j] - dm.p[j]).norm(), L * (dm.q[j] + dm.p[j]).norm())) disp_m = false;
      // f in I_L iff (1-L^2) f in R_L
      if (!leq(((1.0 - L * L) * di.q[j] - di.p[j]).norm(), L * di.p[j].norm())) ident_i = false;
      // f in M_L iff (1-L^2)/(1+L^2) f in R_{2L/(1+L^2)}
      if (!leq((c2 * dm.q[j] - dm.p[j]).norm(), L2 * dm.p[j].norm())) ident_m = false;
      if (!leq((dm.q[j] - dm.p[j]).norm(), Lstar * (dm.q[j] + dm.p[j]).norm())) a7 = false;
      worst = std::max(worst, (dm.q[j] - dm.p[j]).norm() /
                                  std::max((dm.q[j] + dm.p[j]).norm(), 1e-300));
    }
  }
  out.push_back(check("classes", tag + "-displacement-residual", disp_r));
  out.push_back(check("classes", tag + "-displacement-inverse", disp_i));
  out.push_back(check("classes", tag + "-displacement-monotone", disp_m));
  out.push_back(check("classes", tag + "-identity-inverse-scaling", ident_i,
                      "scaling 1/(1-L^2) = " + fmt(1.0 / (1.0 - L * L))));
  char factor[128];
  std::snprintf(factor, sizeof(factor),
                "radius factor (1+L^2)/(1-L^2) = %.3f, inner Lipschitz 2L/(1+L^2) = %.3f",
                (1.0 + L * L) / (1.0 - L * L), L2);
  out.push_back(check("classes", tag + "-identity-monotone-scaling", ident_m, factor));
  out.push_back(check("classes", tag + "-strong-monotone-embedding", a7,
                      "admissible L " + fmt(Lstar) + ", max displacement ratio " + fmt(worst)));

  // anisotropic strongly monotone Lipschitz map, same embedding bound
  {
    double a = 0.25, c = 3.0;
    double Ka = std::min({a, 1.0 / c, 1.0});
    double Ls =
        std::sqrt((1.0 + Ka * Ka - 2.0 * Ka * Ka * Ka) / (1.0 + Ka * Ka + 2.0 * Ka * Ka * Ka));
    bool ok = true;
    for (size_t j = 0; j < 12; ++j) {
      Eigen::RowVectorXd p = ps.x1.row(static_cast<Eigen::Index>(j)) -
                             ps.x2.row(static_cast<Eigen::Index>(j));
      Eigen::RowVectorXd q(2);
      q << a * p(0), c * p(1);
      if (!leq((q - p).norm(), Ls * (q + p).norm())) ok = false;
    }
    out.push_back(check("classes", tag + "-embedding-diagonal", ok,
                        "eta " + fmt(a) + ", nu " + fmt(c) + ", admissible L " + fmt(Ls)));
  }

  // slope bands with their linear equality cases
  {
    auto band = [&](BlockKind kind, double lo, double hi, const char* nm) {
      FlowBlock blo = make_linear_gblock(kind, -L * I, std::max(L, 1e-12));
      FlowBlock bhi = make_linear_gblock(kind, L * I, std::max(L, 1e-12));
      // inverse-residual slope is 1/(1+l), monotone (1-l)/(1+l): both have
      // their low end at G = +L*I
      if (kind != BlockKind::Residual) std::swap(blo, bhi);
      Displacements dlo = displacements(blo, ps, s);
      Displacements dhi = displacements(bhi, ps, s);
      double dev = 0.0;
      for (size_t j = 0; j < dlo.p.size(); ++j) {
        dev = std::max(dev, std::abs(dlo.q[j].norm() / dlo.p[j].norm() - lo));
        dev = std::max(dev, std::abs(dhi.q[j].norm() / dhi.p[j].norm() - hi));
      }
      out.push_back(check("classes", tag + std::string("-band-") + nm, dev <= kEqTol,
                          "band [" + fmt(lo) + ", " + fmt(hi) + "], max deviation " + fmt(dev)));
    };
    band(BlockKind::Residual, 1.0 - L, 1.0 + L, "residual");
    band(BlockKind::InverseResidual, 1.0 / (1.0 + L), 1.0 / (1.0 - L), "inverse");
    band(BlockKind::Monotone, (1.0 - L) / (1.0 + L), (1.0 + L) / (1.0 - L), "monotone");
  }

  // separating witnesses live in the monotone class only
  if (L > 0.0) {
    auto witness_checks = [&](const FlowBlock& bw, double slope, const char* nm) {
      Displacements d = displacements(bw, ps, s);
      bool in_m = true, out_r = true, out_i = true;
      for (size_t j = 0; j < d.p.size(); ++j) {
        double m_dev = std::abs((d.q[j] - d.p[j]).norm() - L * (d.q[j] + d.p[j]).norm());
        if (m_dev > kEqTol * (1.0 + (d.q[j] + d.p[j]).norm())) in_m = false;
        if ((d.q[j] - d.p[j]).norm() <= L * d.p[j].norm() + 1e-12) out_r = false;
        if ((d.p[j] - d.q[j]).norm() <= L * d.q[j].norm() + 1e-12) out_i = false;
      }
      out.push_back(check("classes", tag + std::string("-witness-") + nm,
                          in_m && out_r && out_i,
                          std::string("slope ") + fmt(slope) +
                              (in_m ? ", monotone-class equality" : ", monotone mismatch") +
                              (out_r && out_i ? ", violates residual and inverse bounds" : "")));
    };
    witness_checks(make_linear_gblock(BlockKind::Monotone, L * I, L), (1.0 - L) / (1.0 + L),
                   "contractive");
    witness_checks(make_linear_gblock(BlockKind::Monotone, -L * I, L), (1.0 + L) / (1.0 - L),
                   "expansive");

    // residual maps cannot reach the monotone witness slope: grid over the
    // scalar family and random matrices capped at 1 + L
    bool cap_ok = true;
    double max_slope = 0.0;
    for (int gi = 0; gi <= 80; ++gi) {
      double l = -L + 2.0 * L * gi / 80.0;
      double slope = std::abs(1.0 + l);
      max_slope = std::max(max_slope, slope);
      if (slope > 1.0 + L + 1e-12) cap_ok = false;
    }
    for (int t = 0; t < 20; ++t) {
      double lw = L * root.uniform();
      Mat A = random_lipschitz_matrix(n, lw, root);
      FlowBlock br = make_linear_gblock(BlockKind::Residual, A, L);
      Displacements d = displacements(br, ps, s);
      for (size_t j = 0; j < d.p.size(); ++j)
        if (!leq(d.q[j].norm() / d.p[j].norm(), 1.0 + L)) cap_ok = false;
    }
    if (std::abs(max_slope - (1.0 + L)) > kEqTol) cap_ok = false;
    double wit_slope = (1.0 + L) / (1.0 - L);
    out.push_back(check("classes", tag + "-residual-slope-cap", cap_ok,
                        "residual max " + fmt(1.0 + L) + " attained, monotone witness " +
                            fmt(wit_slope) + " unreachable"));
  }
  return out;
}

namespace {

struct DrawStats {
  double mean = 0.0, m2 = 0.0;
  long n = 0;
  void add(double v) {
    ++n;
    double d = v - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (v - mean);
  }
  double se() const { return n > 1 ? std::sqrt(m2 / static_cast<double>(n - 1) /
                                               static_cast<double>(n)) : 0.0; }
};

// 3-standard-error agreement with one retry on a derived stream
CheckResult estimator_case(const std::string& name, const FlowBlock& b, const Mat& w,
                           const RouletteConfig& rc, Rng& rng, long n_draws) {
  double exact = logdet_exact_at(b, w)(0);
  std::string note;
  for (int attempt = 0; attempt < 2; ++attempt) {
    Rng draws = rng.split(attempt == 0 ? 1u : 0xee77u);
    DrawStats st;
    for (long i = 0; i < n_draws; ++i) st.add(logdet_stochastic_at(b, w, rc, draws)(0));
    double se = st.se();
    bool pass = se == 0.0 ? st.mean == exact : std::abs(st.mean - exact) <= 3.0 * se;
    std::string wit = "mean " + fmt(st.mean) + ", exact " + fmt(exact) + ", se " + fmt(se) + note;
    if (pass || attempt == 1) return check("estimator", name, pass, wit);
    note = ", retried once after 3-se breach (first mean " + fmt(st.mean) + ")";
  }
  return check("estimator", name, false, "unreachable");
}

}  // namespace

std::vector<CheckResult> check_estimator_unbiased(std::uint64_t seed) {
  std::vector<CheckResult> out;
  Rng root(seed);
  RouletteConfig rc;
  const long n_draws = 100000;

  {
    FlowBlock b0 = make_linear_gblock(BlockKind::Monotone, Mat::Zero(2, 2), 1e-12);
    Mat w(1, 2);
    w << 0.3, -0.7;
    Rng r = root.split(11);
    double exact = logdet_exact_at(b0, w)(0);
    double draw = logdet_stochastic_at(b0, w, rc, r)(0);
    out.push_back(check("estimator", "zero-net", exact == 0.0 && draw == 0.0,
                        "exact " + fmt(exact) + ", draw " + fmt(draw)));
  }

  {
    bool ok = true;
    std::string wit;
    for (int k = 1; k <= 40; ++k) {
      double cm = logdet_series_coeff(BlockKind::Monotone, k);
      double cr = logdet_series_coeff(BlockKind::Residual, k);
      double ci = logdet_series_coeff(BlockKind::InverseResidual, k);
      double alt = (k % 2 == 1) ? 1.0 : -1.0;
      if (k % 2 == 0 && cm != 0.0) { ok = false; wit = "even k " + std::to_string(k); }
      if (k % 2 == 1 && cm != -2.0 / k) ok = false;
      if (cr != alt / k || ci != -alt / k) ok = false;
    }
    out.push_back(check("estimator", "series-coefficients", ok, wit));
  }

  {
    FlowBlock bh = make_linear_gblock(BlockKind::Monotone, 0.5 * Mat::Identity(2, 2), 0.5);
    Mat w(1, 2);
    w << 0.4, -1.1;
    double closed = 2.0 * std::log(1.0 / 3.0);
    double exact = logdet_exact_at(bh, w)(0);
    out.push_back(check("estimator", "half-identity-closed-form",
                        std::abs(exact - closed) <= 1e-12,
                        "exact " + fmt(exact) + ", closed form " + fmt(closed)));
    Rng r = root.split(12);
    out.push_back(estimator_case("half-identity-mean", bh, w, rc, r, n_draws));
  }

  const BlockKind kinds[3] = {BlockKind::Monotone, BlockKind::Residual,
                              BlockKind::InverseResidual};
  for (int i = 0; i < 20; ++i) {
    int n = 1 + (i % 4);
    BlockKind kind = kinds[i % 3];
    Rng r = root.split(1000 + static_cast<std::uint64_t>(i));
    GNetConfig cfg;
    cfg.dim = n;
    cfg.depth = 2;
    cfg.growth = 4;
    cfg.act = Activation::CPila;
    cfg.kernel_lip = 0.8;
    cfg.coeff_lip = 0.7;
    FlowBlock b = make_gblock(kind, cfg, r);
    gnet_normalize(*b.g, SpectralNormMode::tolerance(1e-10));
    Mat w = r.normal_matrix(1, n);
    char name[64];
    std::snprintf(name, sizeof(name), "net%02d-n%d-%s", i, n,
                  block_kind_to_string(kind).c_str());
    out.push_back(estimator_case(name, b, w, rc, r, n_draws));
  }
  return out;
}

namespace {

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// central finite difference of a scalar function of one tensor entry
template <typename F>
double fd_entry(Mat& t, Eigen::Index r, Eigen::Index c, F&& f) {
  double orig = t(r, c);
  double h = 1e-5 * std::max(1.0, std::abs(orig));
  t(r, c) = orig + h;
  double up = f();
  t(r, c) = orig - h;
  double dn = f();
  t(r, c) = orig;
  return (up - dn) / (2.0 * h);
}

CheckResult fd_model_check(const std::string& name, FlowModel& m, const Mat& batch,
                           const Mat* targets, Rng& sample_rng) {
  SolverConfig s = tight_solver();
  RouletteConfig rc;
  std::vector<Mat> grads;
  training_loss_and_grads(m, batch, targets, LogDetMode::Exact, rc, s, nullptr, &grads);
  ParamRefs refs = model_params(m);
  auto loss_eval = [&]() {
    return training_loss_and_grads(m, batch, targets, LogDetMode::Exact, rc, s, nullptr, nullptr);
  };
  double worst = 0.0;
  std::string at;
  for (size_t i = 0; i < refs.tensors.size(); ++i) {
    Mat& t = *refs.tensors[i];
    Eigen::Index total = t.size();
    Eigen::Index n_check = std::min<Eigen::Index>(total, 10);
    for (Eigen::Index k = 0; k < n_check; ++k) {
      Eigen::Index flat = total <= 10 ? k : static_cast<Eigen::Index>(
                                                sample_rng.below(static_cast<std::uint64_t>(total)));
      Eigen::Index r = flat / t.cols(), c = flat % t.cols();
      double fd = fd_entry(t, r, c, loss_eval);
      double e = rel_err(grads[i](r, c), fd);
      if (e > worst) {
        worst = e;
        at = refs.names[i] + "(" + std::to_string(r) + "," + std::to_string(c) + ")";
      }
    }
  }
  return check("gradients", name, worst <= kGradTol,
               "max relative error " + fmt(worst) + (at.empty() ? "" : " at " + at));
}

}  // namespace

std::vector<CheckResult> check_gradients(std::uint64_t seed) {
  std::vector<CheckResult> out;
  Rng root(seed);
  const SolverConfig s = tight_solver();

  {  // scalar activation derivative towers
    auto fd_tower = [&](const char* nm, int max_order, auto&& f) {
      double worst = 0.0;
      const double h = 1e-6;
      for (int o = 1; o <= max_order; ++o)
        for (int xi = 0; xi <= 60; ++xi) {
          double x = -3.0 + 0.1 * xi;
          if (std::abs(x) < 5e-3) continue;  // piecewise joins
          double fd = (f(x + h, o - 1) - f(x - h, o - 1)) / (2.0 * h);
          worst = std::max(worst, std::abs(f(x, o) - fd));
        }
      out.push_back(check("gradients", std::string(nm) + "-derivative-tower", worst <= kActTol,
                          "max abs deviation " + fmt(worst)));
    };
    fd_tower("pila", 4, [](double x, int o) { return pila_d(x, kPilaDefaultK, o); });
    fd_tower("sigmoid", 4, [](double x, int o) { return sigmoid_d(x, o); });
    fd_tower("lipswish", 3, [](double x, int o) { return lipswish_d(x, o); });
  }

  {  // first derivatives of the full activation maps
    for (Activation a : {Activation::Pila, Activation::CPila, Activation::LipSwish,
                         Activation::CLipSwish, Activation::ReLU, Activation::CReLU}) {
      Mat xs(1, 41);
      for (int i = 0; i <= 40; ++i) xs(0, i) = -2.97 + 0.15 * i;  // grid avoids 0 and +-0.2
      const double h = 1e-6;
      Mat up = activation_apply(a, (xs.array() + h).matrix(), kPilaDefaultK);
      Mat dn = activation_apply(a, (xs.array() - h).matrix(), kPilaDefaultK);
      Mat fd = (up - dn) / (2.0 * h);
      Mat an = activation_apply_deriv(a, xs, kPilaDefaultK);
      double worst = (an - fd).cwiseAbs().maxCoeff();
      out.push_back(check("gradients", "apply-deriv-" + activation_to_string(a),
                          worst <= kActTol, "max abs deviation " + fmt(worst)));
    }
  }

  {  // actnorm closed-form gradient
    Rng r = root.split(21);
    Mat batch = r.normal_matrix(16, 2);
    FlowModel m;
    m.dim = 2;
    m.blocks.push_back(make_actnorm(2));
    actnorm_init(m.blocks[0], r.normal_matrix(32, 2));
    std::vector<Mat> grads;
    RouletteConfig rc;
    training_loss_and_grads(m, batch, nullptr, LogDetMode::Exact, rc, s, nullptr, &grads);
    Eigen::RowVectorXd es = m.blocks[0].log_scale.row(0).array().exp().matrix();
    Mat z = (batch.array().rowwise() * es.array()).matrix();
    z.rowwise() += m.blocks[0].shift.row(0);
    double invB = 1.0 / 16.0;
    Eigen::RowVectorXd gs =
        invB * (z.cwiseProduct(batch).array().rowwise() * es.array()).colwise().sum().matrix();
    gs.array() -= 1.0;
    Eigen::RowVectorXd gt = invB * z.colwise().sum();
    double dev = std::max((grads[0].row(0) - gs).cwiseAbs().maxCoeff(),
                          (grads[1].row(0) - gt).cwiseAbs().maxCoeff());
    out.push_back(check("gradients", "actnorm-closed-form", dev <= 1e-10,
                        "max abs deviation " + fmt(dev)));
  }

  auto tiny_cfg = [&](Activation act) {
    GNetConfig cfg;
    cfg.dim = 2;
    cfg.depth = 1;
    cfg.growth = 4;
    cfg.act = act;
    cfg.kernel_lip = 0.9;
    cfg.coeff_lip = 0.9;
    return cfg;
  };

  {  // single monotone block, likelihood objective
    Rng r = root.split(22);
    FlowModel m;
    m.dim = 2;
    m.blocks.push_back(make_gblock(BlockKind::Monotone, tiny_cfg(Activation::CPila), r));
    gnet_normalize(*m.blocks[0].g, SpectralNormMode::tolerance(1e-10));
    Mat batch = 1.2 * r.normal_matrix(8, 2);
    Rng sr = root.split(23);
    out.push_back(fd_model_check("monotone-block-nll-fd", m, batch, nullptr, sr));
  }

  {  // single inverse-residual block
    Rng r = root.split(24);
    FlowModel m;
    m.dim = 2;
    m.blocks.push_back(
        make_gblock(BlockKind::InverseResidual, tiny_cfg(Activation::LipSwish), r));
    gnet_normalize(*m.blocks[0].g, SpectralNormMode::tolerance(1e-10));
    Mat batch = 1.2 * r.normal_matrix(8, 2);
    Rng sr = root.split(25);
    out.push_back(fd_model_check("inverse-block-nll-fd", m, batch, nullptr, sr));
  }

  {  // mixed three-block model
    Rng r = root.split(26);
    FlowModel m;
    m.dim = 2;
    m.blocks.push_back(make_actnorm(2));
    m.blocks.push_back(make_gblock(BlockKind::Residual, tiny_cfg(Activation::CLipSwish), r));
    m.blocks.push_back(make_gblock(BlockKind::Monotone, tiny_cfg(Activation::CPila), r));
    for (auto& b : m.blocks)
      if (b.g) gnet_normalize(*b.g, SpectralNormMode::tolerance(1e-10));
    Mat batch = 1.2 * r.normal_matrix(8, 2);
    actnorm_init(m.blocks[0], batch);
    Rng sr = root.split(27);
    out.push_back(fd_model_check("mixed-model-nll-fd", m, batch, nullptr, sr));
  }

  {  // learnable concat coefficients, squared-error objective
    Rng r = root.split(28);
    GNetConfig cfg = tiny_cfg(Activation::CPila);
    cfg.learnable_concat = true;
    FlowModel m;
    m.dim = 2;
    m.blocks.push_back(make_actnorm(2));
    m.blocks.push_back(make_gblock(BlockKind::Monotone, cfg, r));
    gnet_normalize(*m.blocks[1].g, SpectralNormMode::tolerance(1e-10));
    m.blocks[1].g->concat_raw << 0.9, 0.5;
    m.blocks[1].g->touch();
    Mat batch = r.normal_matrix(8, 2);
    actnorm_init(m.blocks[0], batch);
    Mat targets = batch.array().tanh().matrix();
    Rng sr = root.split(29);
    out.push_back(fd_model_check("concat-mse-fd", m, batch, &targets, sr));
  }

  // basis-probe surrogate gradient equals the truncated series gradient
  for (BlockKind kind : {BlockKind::Monotone, BlockKind::Residual}) {
    Rng r = root.split(kind == BlockKind::Monotone ? 30 : 31);
    GNetConfig cfg;
    cfg.dim = 2;
    cfg.depth = 2;
    cfg.growth = 4;
    cfg.act = Activation::CPila;
    cfg.kernel_lip = 0.8;
    cfg.coeff_lip = 0.7;
    FlowBlock b = make_gblock(kind, cfg, r);
    gnet_normalize(*b.g, SpectralNormMode::tolerance(1e-10));
    Mat x = r.normal_matrix(1, 2);
    const int kmax = 50;
    std::vector<Mat> probes;
    for (int c = 0; c < 2; ++c) {
      Mat e = Mat::Zero(1, 2);
      e(0, c) = 1.0;
      probes.push_back(e);
    }
    auto series_value = [&]() {
      ad::Tape tape;
      TapedGNet tg = gnet_eval_taped(*b.g, tape, x);
      return logdet_series_taped(b, tg, probes, kmax).value(0);
    };
    ad::Tape tape;
    TapedGNet tg = gnet_eval_taped(*b.g, tape, x);
    StochasticLogDet sd = logdet_series_taped(b, tg, probes, kmax);
    std::vector<ad::Var> wrt = tg.params;
    std::vector<ad::Var> gvars = ad::backward(sd.surrogate, wrt);
    ParamRefs refs = gnet_params(*b.g);
    double worst = 0.0;
    Rng sr = root.split(32);
    for (size_t i = 0; i < refs.tensors.size(); ++i) {
      if (refs.names[i] == "concat_raw") continue;  // inactive without learnable concat
      Mat g = gvars[i].val();
      Mat& t = *refs.tensors[i];
      for (int k = 0; k < 4; ++k) {
        Eigen::Index flat =
            static_cast<Eigen::Index>(sr.below(static_cast<std::uint64_t>(t.size())));
        Eigen::Index rr = flat / t.cols(), cc = flat % t.cols();
        double fd = fd_entry(t, rr, cc, series_value);
        worst = std::max(worst, rel_err(g(rr, cc), fd));
      }
    }
    out.push_back(check("gradients",
                        std::string("surrogate-series-") + block_kind_to_string(kind),
                        worst <= kGradTol, "max relative error " + fmt(worst)));
  }

  {  // implicit row solve against dense reconstruction
    Rng r = root.split(33);
    GNetConfig cfg;
    cfg.dim = 4;
    cfg.depth = 2;
    cfg.growth = 4;
    cfg.act = Activation::CPila;
    cfg.kernel_lip = 0.9;
    cfg.coeff_lip = 0.9;
    GNetwork g = make_gnet(cfg, r);
    gnet_normalize(g, SpectralNormMode::tolerance(1e-12));
    Mat w = r.normal_matrix(1, 4);
    GVjpCache cache = gnet_forward_cache(g, w);
    Mat J(4, 4);
    for (int row = 0; row < 4; ++row) {
      Mat e = Mat::Zero(1, 4);
      e(0, row) = 1.0;
      J.row(row) = cache.vjp(e);
    }
    Mat cot = r.normal_matrix(1, 4);
    auto ib = implicit_backward(cache, cot, s);
    double resid = (ib.out * (Mat::Identity(4, 4) + J) - cot).cwiseAbs().maxCoeff();
    out.push_back(check("gradients", "implicit-row-solve", ib.converged && resid <= 1e-9,
                        "residual " + fmt(resid)));
  }
  return out;
}

std::vector<CheckResult> check_nonmonotone_composition() {
  std::vector<CheckResult> out;
  const SolverConfig s = tight_solver();
  const double pi = 3.14159265358979323846;
  const double t = std::tan(pi / 6.0);  // skew parameter realizing a pi/3 rotation
  Mat A(2, 2);
  A << 0.0, t, -t, 0.0;
  FlowBlock b1 = make_linear_gblock(BlockKind::Monotone, A, t);
  FlowBlock b2 = make_linear_gblock(BlockKind::Monotone, A, t);

  auto rot = [&](double th) {
    Mat r(2, 2);
    r << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
    return r;
  };
  Mat r60 = rot(pi / 3.0), r120 = rot(2.0 * pi / 3.0);

  Rng rng(7);
  Mat pts = rng.normal_matrix(8, 2);
  Mat y = block_forward(b1, pts, s);
  double dev = (y - pts * r60.transpose()).cwiseAbs().maxCoeff();
  bool mono = true;
  double quot_dev = 0.0;
  for (int j = 0; j < 8; ++j) {
    double q = y.row(j).dot(pts.row(j)) / pts.row(j).squaredNorm();
    quot_dev = std::max(quot_dev, std::abs(q - 0.5));
    if (q <= 0.0) mono = false;
  }
  out.push_back(check("composition", "rotation-block-realizes-r60", dev <= kEqTol,
                      "max abs deviation from rotation matrix " + fmt(dev)));
  out.push_back(check("composition", "single-rotation-monotone", mono && quot_dev <= kEqTol,
                      "quotient 0.5 within " + fmt(quot_dev)));

  Mat z = block_forward(b2, y, s);
  double dev2 = (z - pts * r120.transpose()).cwiseAbs().maxCoeff();
  out.push_back(check("composition", "composition-matches-r120", dev2 <= kEqTol,
                      "max abs deviation " + fmt(dev2)));

  Mat p(1, 2);
  p << 1.0, 0.0;
  Mat cp = block_forward(b2, block_forward(b1, p, s), s);
  double inner = cp.row(0).dot(p.row(0));
  out.push_back(check("composition", "composition-not-monotone",
                      inner < 0.0 && std::abs(inner + 0.5) <= kEqTol,
                      "inner product " + fmt(inner) + " for the unit pair"));

  FlowBlock id1 = make_linear_gblock(BlockKind::Monotone, Mat::Zero(2, 2), 1e-12);
  Mat w = block_forward(id1, block_forward(id1, pts, s), s);
  bool id_ok = true;
  for (int j = 0; j < 8; ++j) {
    double q = w.row(j).dot(pts.row(j)) / pts.row(j).squaredNorm();
    if (std::abs(q - 1.0) > kEqTol) id_ok = false;
  }
  out.push_back(check("composition", "identity-composition-monotone", id_ok));
  return out;
}

std::vector<CheckResult> run_suite(const std::string& name, std::uint64_t seed,
                                   double classes_L) {
  static const char* known[] = {"all", "duality", "classes", "estimator", "gradients",
                                "composition"};
  bool ok = false;
  for (const char* k : known) ok = ok || name == k;
  if (!ok) throw std::invalid_argument("unknown suite: " + name);

  std::vector<CheckResult> out;
  auto append = [&](std::vector<CheckResult> v) {
    out.insert(out.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
  };
  if (name == "all" || name == "duality") append(check_cayley_duality(seed));
  if (name == "all" || name == "classes") {
    if (classes_L >= 0.0) {
      append(check_class_relations(classes_L, seed));
    } else {
      for (double L : {0.0, 0.5, 0.8, 0.98}) append(check_class_relations(L, seed));
    }
  }
  if (name == "all" || name == "estimator") append(check_estimator_unbiased(seed));
  if (name == "all" || name == "gradients") append(check_gradients(seed));
  if (name == "all" || name == "composition") append(check_nonmonotone_composition());
  return out;
}

bool all_passed(const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    if (!r.pass) return false;
  return true;
}

void write_report_jsonl(const std::string& path, const std::vector<CheckResult>& results) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open report file: " + path);
  for (const auto& r : results) {
    nlohmann::json j{{"suite", r.suite}, {"case", r.name}, {"pass", r.pass}};
    if (!r.witness.empty()) j["witness"] = r.witness;
    f << j.dump() << "\n";
  }
}

}  // namespace monoflow
