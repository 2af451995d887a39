#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace monoflow {

// Deterministic RNG with explicit normal/poisson implementations so that
// sampled streams are identical across standard library versions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t raw() { return engine_(); }

  // uniform in [0, 1)
  double uniform() {
    return (raw() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // integer in [0, n)
  std::uint64_t below(std::uint64_t n) { return raw() % n; }

  // standard normal via Box-Muller, one value per call (cached pair)
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925287 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Poisson by inversion of the multiplicative sequence (Knuth); fine for
  // the small rates used here.
  int poisson(double lambda) {
    double limit = std::exp(-lambda);
    double prod = uniform();
    int n = 0;
    while (prod > limit) {
      prod *= uniform();
      ++n;
    }
    return n;
  }

  // independent child stream; distinct labels give distinct streams
  Rng split(std::uint64_t label) {
    std::uint64_t a = raw();
    return Rng(a ^ (label * 0x9e3779b97f4a7c15ULL) ^ 0x2545f4914f6cdd1dULL);
  }

  Eigen::MatrixXd normal_matrix(int rows, int cols) {
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = normal();
    return m;
  }

  Eigen::MatrixXd uniform_matrix(int rows, int cols, double lo, double hi) {
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = uniform(lo, hi);
    return m;
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace monoflow
