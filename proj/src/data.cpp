#include "monoflow/data.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace monoflow {

double staircase(double x, double alpha) {
  auto t = [alpha](double u) {
    if (u <= 0.0) return 0.0;
    if (u >= 1.0) return 1.0;
    return std::max(alpha * u, (u - 1.0 + alpha) / alpha);
  };
  return t(x + 2.0) + t(x + 1.0) + t(x) + t(x - 1.0);
}

Mat staircase_batch(const Mat& x, double alpha) {
  Mat y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) y(i, j) = staircase(x(i, j), alpha);
  return y;
}

const std::vector<std::string>& toy2d_names() {
  static const std::vector<std::string> names = {"2spirals",     "8gaussians", "checkerboard",
                                                 "circles",      "moons",      "pinwheel",
                                                 "rings",        "swissroll"};
  return names;
}

namespace {

constexpr double kPi = 3.14159265358979323846;

Mat gen_8gaussians(int n, Rng& rng) {
  const double scale = 4.0;
  const double isq2 = 1.0 / std::sqrt(2.0);
  const double centers[8][2] = {{1, 0},     {-1, 0},    {0, 1},        {0, -1},
                                {isq2, isq2}, {-isq2, isq2}, {isq2, -isq2}, {-isq2, -isq2}};
  Mat out(n, 2);
  for (int i = 0; i < n; ++i) {
    int c = static_cast<int>(rng.below(8));
    out(i, 0) = (rng.normal() * 0.5 + scale * centers[c][0]) / 1.414;
    out(i, 1) = (rng.normal() * 0.5 + scale * centers[c][1]) / 1.414;
  }
  return out;
}

Mat gen_2spirals(int n, Rng& rng) {
  int half = n / 2;
  Mat out(2 * half, 2);
  for (int i = 0; i < half; ++i) {
    double t = std::sqrt(rng.uniform()) * 540.0 * (2.0 * kPi / 360.0);
    double dx = -std::cos(t) * t + rng.uniform() * 0.5;
    double dy = std::sin(t) * t + rng.uniform() * 0.5;
    out(i, 0) = dx / 3.0;
    out(i, 1) = dy / 3.0;
    out(half + i, 0) = -dx / 3.0;
    out(half + i, 1) = -dy / 3.0;
  }
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (int j = 0; j < 2; ++j) out(i, j) += rng.normal() * 0.1;
  return out;
}

Mat gen_checkerboard(int n, Rng& rng) {
  Mat out(n, 2);
  for (int i = 0; i < n; ++i) {
    double x1 = rng.uniform() * 4.0 - 2.0;
    double x2 = rng.uniform() - static_cast<double>(rng.below(2)) * 2.0;
    double parity = std::fmod(std::floor(x1), 2.0);
    if (parity < 0.0) parity += 2.0;
    out(i, 0) = x1 * 2.0;
    out(i, 1) = (x2 + parity) * 2.0;
  }
  return out;
}

Mat gen_rings(int n, Rng& rng) {
  int n4 = n / 4, n3 = n / 4, n2 = n / 4;
  int n1 = n - n4 - n3 - n2;
  Mat out(n, 2);
  int row = 0;
  auto ring = [&](int count, double radius) {
    for (int i = 0; i < count; ++i) {
      double t = 2.0 * kPi * i / count;
      out(row, 0) = std::cos(t) * radius * 3.0;
      out(row, 1) = std::sin(t) * radius * 3.0;
      ++row;
    }
  };
  ring(n4, 1.0);
  ring(n3, 0.75);
  ring(n2, 0.5);
  ring(n1, 0.25);
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (int j = 0; j < 2; ++j) out(i, j) += rng.normal() * 0.08;
  return out;
}

Mat gen_moons(int n, Rng& rng) {
  int n_out = n / 2;
  int n_in = n - n_out;
  Mat out(n, 2);
  for (int i = 0; i < n_out; ++i) {
    double t = kPi * i / std::max(n_out - 1, 1);
    out(i, 0) = std::cos(t);
    out(i, 1) = std::sin(t);
  }
  for (int i = 0; i < n_in; ++i) {
    double t = kPi * i / std::max(n_in - 1, 1);
    out(n_out + i, 0) = 1.0 - std::cos(t);
    out(n_out + i, 1) = 1.0 - std::sin(t) - 0.5;
  }
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (int j = 0; j < 2; ++j) out(i, j) += rng.normal() * 0.1;
  out *= 2.0;
  out.col(0).array() += -1.0;
  out.col(1).array() += -0.2;
  return out;
}

Mat gen_pinwheel(int n, Rng& rng) {
  const double radial_std = 0.3, tangential_std = 0.1, rate = 0.25;
  const int num_classes = 5;
  int per_class = std::max(n / num_classes, 1);
  int total = per_class * num_classes;
  Mat out(total, 2);
  int row = 0;
  for (int c = 0; c < num_classes; ++c) {
    double rad = 2.0 * kPi * c / num_classes;
    for (int i = 0; i < per_class; ++i) {
      double f0 = rng.normal() * radial_std + 1.0;
      double f1 = rng.normal() * tangential_std;
      double a = rad + rate * std::exp(f0);
      // row vector times [[cos, -sin], [sin, cos]]
      out(row, 0) = 2.0 * (f0 * std::cos(a) + f1 * std::sin(a));
      out(row, 1) = 2.0 * (-f0 * std::sin(a) + f1 * std::cos(a));
      ++row;
    }
  }
  return out;
}

Mat gen_circles(int n, Rng& rng) {
  int n_out = n / 2;
  int n_in = n - n_out;
  Mat out(n, 2);
  for (int i = 0; i < n_out; ++i) {
    double t = 2.0 * kPi * i / n_out;
    out(i, 0) = std::cos(t);
    out(i, 1) = std::sin(t);
  }
  for (int i = 0; i < n_in; ++i) {
    double t = 2.0 * kPi * i / n_in;
    out(n_out + i, 0) = 0.5 * std::cos(t);
    out(n_out + i, 1) = 0.5 * std::sin(t);
  }
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (int j = 0; j < 2; ++j) out(i, j) += rng.normal() * 0.08;
  return out * 3.0;
}

Mat gen_swissroll(int n, Rng& rng) {
  Mat out(n, 2);
  for (int i = 0; i < n; ++i) {
    double t = 1.5 * kPi * (1.0 + 2.0 * rng.uniform());
    out(i, 0) = (t * std::cos(t) + rng.normal()) / 5.0;
    out(i, 1) = (t * std::sin(t) + rng.normal()) / 5.0;
  }
  return out;
}

}  // namespace

Mat sample_toy2d(const std::string& name, int n, Rng& rng) {
  if (n <= 0) throw std::invalid_argument("sample_toy2d: need a positive count");
  if (name == "8gaussians") return gen_8gaussians(n, rng);
  if (name == "2spirals") return gen_2spirals(n, rng);
  if (name == "checkerboard") return gen_checkerboard(n, rng);
  if (name == "rings") return gen_rings(n, rng);
  if (name == "moons") return gen_moons(n, rng);
  if (name == "pinwheel") return gen_pinwheel(n, rng);
  if (name == "circles") return gen_circles(n, rng);
  if (name == "swissroll") return gen_swissroll(n, rng);
  throw std::invalid_argument("unknown dataset: " + name);
}

Mat load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  long lineno = 0;
  Eigen::Index width = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (lineno == 1) {
      // skip a header line if any cell fails numeric parsing
      std::stringstream probe(line);
      std::string cell;
      bool numeric = true;
      while (std::getline(probe, cell, ',')) {
        try {
          size_t pos = 0;
          std::stod(cell, &pos);
          while (pos < cell.size() && std::isspace(static_cast<unsigned char>(cell[pos]))) ++pos;
          if (pos != cell.size()) numeric = false;
        } catch (...) {
          numeric = false;
        }
      }
      if (!numeric) continue;
    }
    std::vector<double> vals;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        size_t pos = 0;
        double v = std::stod(cell, &pos);
        vals.push_back(v);
      } catch (...) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad numeric field '" +
                                 cell + "'");
      }
    }
    if (width < 0) width = static_cast<Eigen::Index>(vals.size());
    if (static_cast<Eigen::Index>(vals.size()) != width)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected " +
                               std::to_string(width) + " fields, got " +
                               std::to_string(vals.size()));
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw std::runtime_error(path + ": no data rows");
  Mat m(static_cast<Eigen::Index>(rows.size()), width);
  for (size_t i = 0; i < rows.size(); ++i)
    for (Eigen::Index j = 0; j < width; ++j) m(static_cast<Eigen::Index>(i), j) = rows[i][static_cast<size_t>(j)];
  return m;
}

void save_csv(const std::string& path, const Mat& m, const std::vector<std::string>& header) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.precision(17);
  if (!header.empty()) {
    if (static_cast<Eigen::Index>(header.size()) != m.cols())
      throw std::invalid_argument("save_csv: header width mismatch");
    for (size_t j = 0; j < header.size(); ++j)
      out << header[j] << (j + 1 < header.size() ? "," : "\n");
  }
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      out << m(i, j) << (j + 1 < m.cols() ? "," : "\n");
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace monoflow
