#include <doctest.h>

#include <cmath>

#include "monoflow/rng.hpp"
#include "monoflow/solver.hpp"

using namespace monoflow;

TEST_CASE("scalar linear fixed point converges in a handful of evaluations") {
  SolverConfig cfg;
  auto f = [](const Mat& y) -> Mat { return 3.0 - 0.5 * y.array(); };
  Mat y0 = Mat::Zero(1, 1);
  auto r = fixed_point_solve(f, y0, 1e-10, 2000, cfg);
  CHECK(r.all_converged);
  CHECK(r.converged[0] == 1);
  CHECK(std::abs(r.y(0, 0) - 2.0) < 1e-9);
  CHECK(r.residual(0) <= 1e-10);
  CHECK(r.iters <= 6);  // secant is exact on affine problems
}

TEST_CASE("rows are solved independently") {
  SolverConfig cfg;
  // row 0: y = 1 + 0.25 y  (fp 4/3); row 1: y = -2 + 0.5 y  (fp -4)
  auto f = [](const Mat& y) -> Mat {
    Mat out(y.rows(), y.cols());
    out.row(0) = 1.0 + 0.25 * y.row(0).array();
    out.row(1) = -2.0 + 0.5 * y.row(1).array();
    return out;
  };
  Mat y0 = Mat::Zero(2, 1);
  auto r = fixed_point_solve(f, y0, 1e-10, 2000, cfg);
  CHECK(r.all_converged);
  CHECK(std::abs(r.y(0, 0) - 4.0 / 3.0) < 1e-9);
  CHECK(std::abs(r.y(1, 0) + 4.0) < 1e-9);
}

TEST_CASE("matrix contraction with norm 0.98 matches the direct solve") {
  Rng rng(41);
  const int n = 4, B = 8;
  Mat raw = rng.normal_matrix(n, n);
  Eigen::JacobiSVD<Mat> svd(raw);
  Mat a = raw * (0.98 / svd.singularValues()(0));
  Mat c = rng.normal_matrix(B, n);

  // y = c - y a  =>  y (I + a) = c
  auto f = [&](const Mat& y) -> Mat { return c - y * a; };
  auto r = fixed_point_solve(f, Mat::Zero(B, n), 1e-6, 2000, SolverConfig{});
  CHECK(r.all_converged);
  Mat direct = (Mat::Identity(n, n) + a).transpose().partialPivLu()
                   .solve(c.transpose()).transpose();
  CHECK((r.y - direct).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("nonexpansive reflection converges through the damped phase") {
  SolverConfig cfg;
  auto f = [](const Mat& y) -> Mat { return 2.0 - y.array(); };  // fp 1, slope -1
  auto r = fixed_point_solve(f, Mat::Zero(1, 1), 1e-9, 2000, cfg);
  CHECK(r.all_converged);
  CHECK(std::abs(r.y(0, 0) - 1.0) < 1e-7);
}

TEST_CASE("a map without a fixed point reports failure") {
  SolverConfig cfg;
  auto f = [](const Mat& y) -> Mat { return y.array() + 1.0; };
  auto r = fixed_point_solve(f, Mat::Zero(1, 1), 1e-8, 50, cfg);
  CHECK_FALSE(r.all_converged);
  CHECK(r.converged[0] == 0);
  CHECK(r.residual(0) > 1e-8);
}

TEST_CASE("mixed convergence is tracked per sample") {
  SolverConfig cfg;
  auto f = [](const Mat& y) -> Mat {
    Mat out(y.rows(), y.cols());
    out.row(0) = 0.5 * y.row(0);        // fp 0
    out.row(1) = y.row(1).array() + 1;  // none
    return out;
  };
  auto r = fixed_point_solve(f, Mat::Ones(2, 1), 1e-8, 60, cfg);
  CHECK(r.converged[0] == 1);
  CHECK(r.converged[1] == 0);
  CHECK_FALSE(r.all_converged);
  CHECK(std::abs(r.y(0, 0)) < 1e-7);
}

TEST_CASE("starting at the solution exits immediately") {
  SolverConfig cfg;
  auto f = [](const Mat& y) -> Mat { return 0.5 * y; };
  auto r = fixed_point_solve(f, Mat::Zero(3, 2), 1e-12, 2000, cfg);
  CHECK(r.all_converged);
  CHECK(r.iters <= 2);
  CHECK(r.y.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("strong contraction still respects tight tolerances") {
  Rng rng(43);
  Mat c = rng.normal_matrix(5, 3);
  auto f = [&](const Mat& y) -> Mat { return c - 0.99 * y; };
  auto r = fixed_point_solve(f, Mat::Zero(5, 3), 1e-12, 4000, SolverConfig{});
  CHECK(r.all_converged);
  Mat expect = c / 1.99;
  CHECK((r.y - expect).cwiseAbs().maxCoeff() < 1e-10);
}
