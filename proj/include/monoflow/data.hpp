#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "monoflow/rng.hpp"

namespace monoflow {

using Mat = Eigen::MatrixXd;

// piecewise-linear staircase on [-2, 2]: four shifted ramp steps, each flat
// almost everywhere with a steep rise of width alpha near the integers
double staircase(double x, double alpha = 0.05);

Mat staircase_batch(const Mat& x, double alpha = 0.05);

const std::vector<std::string>& toy2d_names();

// Samplers mirroring the usual 2D toy densities (spirals, rings, moons, ...).
// Some generators round the count down to their natural group size (pairs,
// five arms), so the result can have slightly fewer rows than requested.
Mat sample_toy2d(const std::string& name, int n, Rng& rng);

Mat load_csv(const std::string& path);
void save_csv(const std::string& path, const Mat& m, const std::vector<std::string>& header);

}  // namespace monoflow
