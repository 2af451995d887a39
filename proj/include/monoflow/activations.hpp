#pragma once

#include <string>

#include <Eigen/Dense>

namespace monoflow {

using Mat = Eigen::MatrixXd;

enum class Activation { ReLU, CReLU, LipSwish, CLipSwish, Pila, CPila };

// divisors that make each activation 1-Lipschitz
inline constexpr double kLipSwishDiv = 1.1;
inline constexpr double kCLipSwishDiv = 1.004;
inline constexpr double kCPilaDiv = 1.06;
inline constexpr double kCPilaShift = 0.2;
inline constexpr double kPilaDefaultK = 5.0;

Activation activation_from_string(const std::string& name);
std::string activation_to_string(Activation a);

// concatenated activations double the width
int activation_width_factor(Activation a);

// scalar evaluation, `order` = derivative order (0 = value), supported up to 4
double relu_d(double x, int order);
double sigmoid(double x);
double sigmoid_d(double x, int order);
double lipswish_d(double x, int order);
double pila_d(double x, double k, int order);

// vectorized elementwise counterparts
Mat relu_d(const Mat& x, int order);
Mat sigmoid_d(const Mat& x, int order);
Mat lipswish_d(const Mat& x, int order);
Mat pila_d(const Mat& x, double k, int order);

// elementwise application to a batch; concatenated kinds return B x 2n
Mat activation_apply(Activation a, const Mat& x, double pila_k = kPilaDefaultK);

// first derivative of each output column w.r.t. its input column, same
// shape as activation_apply's result
Mat activation_apply_deriv(Activation a, const Mat& x, double pila_k = kPilaDefaultK);

}  // namespace monoflow
