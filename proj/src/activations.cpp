#include "monoflow/activations.hpp"

#include <cmath>
#include <stdexcept>

namespace monoflow {

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::ReLU;
  if (name == "crelu") return Activation::CReLU;
  if (name == "lipswish") return Activation::LipSwish;
  if (name == "clipswish") return Activation::CLipSwish;
  if (name == "pila") return Activation::Pila;
  if (name == "cpila") return Activation::CPila;
  throw std::invalid_argument("unknown activation: " + name);
}

std::string activation_to_string(Activation a) {
  switch (a) {
    case Activation::ReLU: return "relu";
    case Activation::CReLU: return "crelu";
    case Activation::LipSwish: return "lipswish";
    case Activation::CLipSwish: return "clipswish";
    case Activation::Pila: return "pila";
    case Activation::CPila: return "cpila";
  }
  throw std::logic_error("bad activation enum");
}

int activation_width_factor(Activation a) {
  switch (a) {
    case Activation::CReLU:
    case Activation::CLipSwish:
    case Activation::CPila: return 2;
    default: return 1;
  }
}

double relu_d(double x, int order) {
  if (order == 0) return x > 0.0 ? x : 0.0;
  if (order == 1) return x > 0.0 ? 1.0 : 0.0;
  return 0.0;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double sigmoid_d(double x, int order) {
  double s = sigmoid(x);
  if (order == 0) return s;
  double s1 = s * (1.0 - s);
  if (order == 1) return s1;
  double s2 = s1 * (1.0 - 2.0 * s);
  if (order == 2) return s2;
  double s3 = s2 * (1.0 - 2.0 * s) - 2.0 * s1 * s1;
  if (order == 3) return s3;
  double s4 = s3 * (1.0 - 2.0 * s) - 6.0 * s1 * s2;
  if (order == 4) return s4;
  throw std::invalid_argument("sigmoid_d: order > 4 not supported");
}

double lipswish_d(double x, int order) {
  if (order == 0) return x * sigmoid(x) / kLipSwishDiv;
  // d^n/dx^n [x s(x)] = n s^(n-1)(x) + x s^(n)(x)
  return (order * sigmoid_d(x, order - 1) + x * sigmoid_d(x, order)) / kLipSwishDiv;
}

double pila_d(double x, double k, int order) {
  if (x >= 0.0) {
    if (order == 0) return x;
    if (order == 1) return 1.0;
    return 0.0;
  }
  double k2 = k * k, k3 = k2 * k, k4 = k3 * k, k5 = k4 * k, k6 = k5 * k;
  double p;
  switch (order) {
    case 0: p = 0.5 * k2 * x * x * x - k * x * x + x; break;
    case 1: p = 0.5 * k3 * x * x * x + 0.5 * k2 * x * x - k * x + 1.0; break;
    case 2: p = 0.5 * k4 * x * x * x + 2.0 * k3 * x * x; break;
    case 3: p = 0.5 * k5 * x * x * x + 3.5 * k4 * x * x + 4.0 * k3 * x; break;
    case 4: p = 0.5 * k6 * x * x * x + 5.0 * k5 * x * x + 11.0 * k4 * x + 4.0 * k3; break;
    default: throw std::invalid_argument("pila_d: order > 4 not supported");
  }
  return p * std::exp(k * x);
}

Mat relu_d(const Mat& x, int order) {
  if (order == 0) return x.cwiseMax(0.0);
  if (order == 1) return (x.array() > 0.0).cast<double>().matrix();
  return Mat::Zero(x.rows(), x.cols());
}

Mat sigmoid_d(const Mat& x, int order) {
  using Arr = Eigen::ArrayXXd;
  Arr s = 1.0 / (1.0 + (-x.array()).exp());
  if (order == 0) return s.matrix();
  Arr s1 = s * (1.0 - s);
  if (order == 1) return s1.matrix();
  Arr s2 = s1 * (1.0 - 2.0 * s);
  if (order == 2) return s2.matrix();
  Arr s3 = s2 * (1.0 - 2.0 * s) - 2.0 * s1 * s1;
  if (order == 3) return s3.matrix();
  Arr s4 = s3 * (1.0 - 2.0 * s) - 6.0 * s1 * s2;
  if (order == 4) return s4.matrix();
  throw std::invalid_argument("sigmoid_d: order > 4 not supported");
}

Mat lipswish_d(const Mat& x, int order) {
  if (order == 0)
    return (x.array() * sigmoid_d(x, 0).array() / kLipSwishDiv).matrix();
  return ((order * sigmoid_d(x, order - 1).array() +
           x.array() * sigmoid_d(x, order).array()) /
          kLipSwishDiv)
      .matrix();
}

Mat pila_d(const Mat& x, double k, int order) {
  using Arr = Eigen::ArrayXXd;
  // the clamped polynomial matches the x >= 0 branch at 0 for orders < 4,
  // so the piecewise split reduces to min/max arithmetic
  Arr xm = x.array().min(0.0);
  Arr e = (k * xm).exp();
  double k2 = k * k, k3 = k2 * k, k4 = k3 * k, k5 = k4 * k, k6 = k5 * k;
  switch (order) {
    case 0:
      return (x.array().max(0.0) + ((0.5 * k2 * xm - k) * xm + 1.0) * xm * e).matrix();
    case 1:
      return ((((0.5 * k3 * xm + 0.5 * k2) * xm - k) * xm + 1.0) * e).matrix();
    case 2:
      return ((0.5 * k4 * xm + 2.0 * k3) * xm * xm * e).matrix();
    case 3:
      return (((0.5 * k5 * xm + 3.5 * k4) * xm + 4.0 * k3) * xm * e).matrix();
    case 4:
      return ((((0.5 * k6 * xm + 5.0 * k5) * xm + 11.0 * k4) * xm + 4.0 * k3) * e *
              (x.array() < 0.0).cast<double>())
          .matrix();
    default:
      throw std::invalid_argument("pila_d: order > 4 not supported");
  }
}

namespace {

Mat concat_halves(Mat left, const Mat& right) {
  Mat y(left.rows(), 2 * left.cols());
  y.leftCols(left.cols()) = left;
  y.rightCols(right.cols()) = right;
  return y;
}

}  // namespace

Mat activation_apply(Activation a, const Mat& x, double pila_k) {
  switch (a) {
    case Activation::ReLU:
      return relu_d(x, 0);
    case Activation::LipSwish:
      return lipswish_d(x, 0);
    case Activation::Pila:
      return pila_d(x, pila_k, 0);
    case Activation::CReLU:
      return concat_halves(relu_d(x, 0), relu_d(-x, 0));
    case Activation::CLipSwish:
      return concat_halves(lipswish_d(x, 0) / kCLipSwishDiv,
                           lipswish_d(-x, 0) / kCLipSwishDiv);
    case Activation::CPila: {
      Mat sh = (x.array() - kCPilaShift).matrix();
      Mat shn = (-x.array() - kCPilaShift).matrix();
      return concat_halves(pila_d(sh, pila_k, 0) / kCPilaDiv,
                           pila_d(shn, pila_k, 0) / kCPilaDiv);
    }
  }
  throw std::logic_error("bad activation enum");
}

Mat activation_apply_deriv(Activation a, const Mat& x, double pila_k) {
  switch (a) {
    case Activation::ReLU:
      return relu_d(x, 1);
    case Activation::LipSwish:
      return lipswish_d(x, 1);
    case Activation::Pila:
      return pila_d(x, pila_k, 1);
    case Activation::CReLU:
      return concat_halves(relu_d(x, 1), -relu_d(-x, 1));
    case Activation::CLipSwish:
      return concat_halves(lipswish_d(x, 1) / kCLipSwishDiv,
                           -lipswish_d(-x, 1) / kCLipSwishDiv);
    case Activation::CPila: {
      Mat sh = (x.array() - kCPilaShift).matrix();
      Mat shn = (-x.array() - kCPilaShift).matrix();
      return concat_halves(pila_d(sh, pila_k, 1) / kCPilaDiv,
                           -pila_d(shn, pila_k, 1) / kCPilaDiv);
    }
  }
  throw std::logic_error("bad activation enum");
}

}  // namespace monoflow
