#pragma once

#include <string>
#include <utility>
#include <vector>

#include "monoflow/activations.hpp"
#include "monoflow/spectral.hpp"
#include "monoflow/tape.hpp"

namespace monoflow {

struct GNetConfig {
  int dim = 2;
  int depth = 3;   // number of dense steps before the final projection
  int growth = 16;
  Activation act = Activation::CPila;
  double kernel_lip = 0.98;  // spectral budget of the dense-step kernels
  double coeff_lip = 0.98;   // spectral budget of the final projection
  bool learnable_concat = false;
  double pila_k = kPilaDefaultK;
};

// Dense network with concatenated skip connections. Each step maps the
// running feature block h through a spectral linear layer into `growth`
// units, applies a (width-doubling) activation, and concatenates
// eta_skip * h with eta_new * act. A final spectral layer projects back to
// `dim`. The product of per-step bounds and the final budget certifies the
// Lipschitz constant.
struct GNetwork {
  GNetConfig cfg;
  std::vector<SpectralLinear> steps;
  Mat concat_raw;  // 1 x 2*depth, raw (skip,new) pairs, used when learnable_concat
  SpectralLinear final_layer;
  int generation = 0;

  int dim() const { return cfg.dim; }
  void touch() { ++generation; }

  // effective concat coefficients of step i
  std::pair<double, double> eta(int i) const;

  Mat eval(const Mat& x) const;
  double lipschitz_bound() const;
};

GNetwork make_gnet(const GNetConfig& cfg, Rng& rng);

void gnet_normalize(GNetwork& g, const SpectralNormMode& mode);

// rescales each concat_raw pair to unit norm (a degenerate pair resets to the
// neutral direction); only the direction enters eta, so the map is unchanged
void gnet_renormalize_concat(GNetwork& g);

struct ParamRefs {
  std::vector<std::string> names;
  std::vector<Mat*> tensors;
};

// trainable tensors in a fixed order (concat_raw last)
ParamRefs gnet_params(GNetwork& g);

// recorded forward pass for differentiation; param leaves parallel gnet_params
struct TapedGNet {
  ad::Var x;
  ad::Var y;
  std::vector<ad::Var> params;
  int generation = 0;
};

TapedGNet gnet_eval_taped(const GNetwork& g, ad::Tape& tape, Mat x);

// cached forward pass supporting fast repeated Jacobian products without
// recording; valid until the network parameters change
struct GVjpCache {
  const GNetwork* net = nullptr;
  int generation = 0;
  std::vector<Mat> h;     // input of each step, h[0] = x
  std::vector<Mat> z;     // post-activation of each step (B x 2*growth)
  std::vector<Mat> actd;  // activation derivative at each step (B x 2*growth)
  std::vector<std::pair<double, double>> etas;
  Mat final_in;
  Mat y;

  // cot * J_G where cot is B x dim; returns B x dim
  Mat vjp(const Mat& cot) const;
  // accumulate cot * dG/dtheta into grads (parallel to gnet_params)
  void param_grads(const Mat& cot, std::vector<Mat>& grads) const;
};

GVjpCache gnet_forward_cache(const GNetwork& g, const Mat& x);

}  // namespace monoflow
