#include "monoflow/gnet.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace monoflow {

using ad::Var;

std::pair<double, double> GNetwork::eta(int i) const {
  if (cfg.learnable_concat) {
    double a = concat_raw(0, 2 * i);
    double b = concat_raw(0, 2 * i + 1);
    double r = std::sqrt(a * a + b * b);
    if (r < 1e-300) throw std::runtime_error("degenerate concat coefficients");
    return {a / r, b / r};
  }
  double c = cfg.kernel_lip / std::sqrt(1.0 + cfg.kernel_lip * cfg.kernel_lip);
  return {c, c};
}

Mat GNetwork::eval(const Mat& x) const {
  if (x.cols() != cfg.dim) throw std::invalid_argument("GNetwork::eval: dimension mismatch");
  Mat h = x;
  for (size_t i = 0; i < steps.size(); ++i) {
    Mat z = activation_apply(cfg.act, steps[i].apply(h), cfg.pila_k);
    auto [es, en] = eta(static_cast<int>(i));
    Mat next(h.rows(), h.cols() + z.cols());
    next << es * h, en * z;
    h = std::move(next);
  }
  return final_layer.apply(h);
}

double GNetwork::lipschitz_bound() const {
  double total = 1.0;
  for (size_t i = 0; i < steps.size(); ++i) {
    auto [es, en] = eta(static_cast<int>(i));
    double k = cfg.kernel_lip;
    total *= std::sqrt(es * es + en * en * k * k);
  }
  return total * cfg.coeff_lip;
}

GNetwork make_gnet(const GNetConfig& cfg, Rng& rng) {
  if (cfg.dim <= 0 || cfg.depth < 0 || cfg.growth <= 0 || cfg.kernel_lip <= 0.0 ||
      cfg.coeff_lip <= 0.0)
    throw std::invalid_argument("make_gnet: bad config");
  GNetwork g;
  g.cfg = cfg;
  int wf = activation_width_factor(cfg.act);
  int w = cfg.dim;
  for (int i = 0; i < cfg.depth; ++i) {
    g.steps.push_back(make_spectral_linear(w, cfg.growth, cfg.kernel_lip, rng));
    w += cfg.growth * wf;
  }
  g.final_layer = make_spectral_linear(w, cfg.dim, cfg.coeff_lip, rng);
  g.concat_raw = Mat::Ones(1, 2 * std::max(cfg.depth, 1));
  return g;
}

void gnet_normalize(GNetwork& g, const SpectralNormMode& mode) {
  for (auto& s : g.steps) spectral_normalize(s, mode);
  spectral_normalize(g.final_layer, mode);
  g.touch();
}

void gnet_renormalize_concat(GNetwork& g) {
  for (Eigen::Index i = 0; 2 * i + 1 < g.concat_raw.cols(); ++i) {
    double a = g.concat_raw(0, 2 * i);
    double b = g.concat_raw(0, 2 * i + 1);
    double r = std::sqrt(a * a + b * b);
    if (r < 1e-12) {
      g.concat_raw(0, 2 * i) = g.concat_raw(0, 2 * i + 1) = 1.0 / std::numbers::sqrt2;
    } else {
      g.concat_raw(0, 2 * i) = a / r;
      g.concat_raw(0, 2 * i + 1) = b / r;
    }
  }
  g.touch();
}

ParamRefs gnet_params(GNetwork& g) {
  ParamRefs p;
  for (size_t i = 0; i < g.steps.size(); ++i) {
    p.names.push_back("step" + std::to_string(i) + ".weight");
    p.tensors.push_back(&g.steps[i].weight);
    p.names.push_back("step" + std::to_string(i) + ".bias");
    p.tensors.push_back(&g.steps[i].bias);
  }
  p.names.push_back("final.weight");
  p.tensors.push_back(&g.final_layer.weight);
  p.names.push_back("final.bias");
  p.tensors.push_back(&g.final_layer.bias);
  p.names.push_back("concat_raw");
  p.tensors.push_back(&g.concat_raw);
  return p;
}

namespace {

Var act_taped(Activation a, Var h, double pila_k) {
  using namespace ad;
  switch (a) {
    case Activation::ReLU:
      return unary(h, UnaryFn::Relu);
    case Activation::Pila:
      return unary(h, UnaryFn::Pila, 0, pila_k);
    case Activation::LipSwish:
      return scale(mul(h, unary(h, UnaryFn::Sigmoid)), 1.0 / kLipSwishDiv);
    case Activation::CReLU:
      return concat_cols(unary(h, UnaryFn::Relu), unary(neg(h), UnaryFn::Relu));
    case Activation::CLipSwish: {
      Var nh = neg(h);
      Var l1 = mul(h, unary(h, UnaryFn::Sigmoid));
      Var l2 = mul(nh, unary(nh, UnaryFn::Sigmoid));
      return scale(concat_cols(l1, l2), 1.0 / (kLipSwishDiv * kCLipSwishDiv));
    }
    case Activation::CPila: {
      Var p1 = unary(add_const(h, -kCPilaShift), UnaryFn::Pila, 0, pila_k);
      Var p2 = unary(add_const(neg(h), -kCPilaShift), UnaryFn::Pila, 0, pila_k);
      return scale(concat_cols(p1, p2), 1.0 / kCPilaDiv);
    }
  }
  throw std::logic_error("bad activation enum");
}

}  // namespace

TapedGNet gnet_eval_taped(const GNetwork& g, ad::Tape& tape, Mat x) {
  using namespace ad;
  if (x.cols() != g.cfg.dim)
    throw std::invalid_argument("gnet_eval_taped: dimension mismatch");
  TapedGNet tg;
  tg.generation = g.generation;
  tg.x = leaf(tape, std::move(x));

  std::vector<Var> wleaf, bleaf;
  for (const auto& s : g.steps) {
    wleaf.push_back(leaf(tape, s.weight));
    bleaf.push_back(leaf(tape, s.bias));
  }
  Var wfin = leaf(tape, g.final_layer.weight);
  Var bfin = leaf(tape, g.final_layer.bias);
  Var raw = leaf(tape, g.concat_raw);

  Var h = tg.x;
  for (size_t i = 0; i < g.steps.size(); ++i) {
    Var pre = add_row(scale(matmul_nt(h, wleaf[i]), g.steps[i].scale()), bleaf[i]);
    Var z = act_taped(g.cfg.act, pre, g.cfg.pila_k);
    if (g.cfg.learnable_concat) {
      Var a = slice_cols(raw, 2 * static_cast<int>(i), 1);
      Var b = slice_cols(raw, 2 * static_cast<int>(i) + 1, 1);
      Var r = unary(add(mul(a, a), mul(b, b)), UnaryFn::Sqrt);
      h = concat_cols(mul_scalar1(h, div(a, r)), mul_scalar1(z, div(b, r)));
    } else {
      auto [es, en] = g.eta(static_cast<int>(i));
      h = concat_cols(scale(h, es), scale(z, en));
    }
  }
  tg.y = add_row(scale(matmul_nt(h, wfin), g.final_layer.scale()), bfin);

  for (size_t i = 0; i < g.steps.size(); ++i) {
    tg.params.push_back(wleaf[i]);
    tg.params.push_back(bleaf[i]);
  }
  tg.params.push_back(wfin);
  tg.params.push_back(bfin);
  tg.params.push_back(raw);
  return tg;
}

GVjpCache gnet_forward_cache(const GNetwork& g, const Mat& x) {
  if (x.cols() != g.cfg.dim)
    throw std::invalid_argument("gnet_forward_cache: dimension mismatch");
  GVjpCache c;
  c.net = &g;
  c.generation = g.generation;
  Mat h = x;
  for (size_t i = 0; i < g.steps.size(); ++i) {
    c.h.push_back(h);
    Mat pre = g.steps[i].apply(h);
    Mat z = activation_apply(g.cfg.act, pre, g.cfg.pila_k);
    Mat d = activation_apply_deriv(g.cfg.act, pre, g.cfg.pila_k);
    auto et = g.eta(static_cast<int>(i));
    c.etas.push_back(et);
    Mat next(h.rows(), h.cols() + z.cols());
    next << et.first * h, et.second * z;
    c.z.push_back(std::move(z));
    c.actd.push_back(std::move(d));
    h = std::move(next);
  }
  c.final_in = h;
  c.y = g.final_layer.apply(h);
  return c;
}

Mat GVjpCache::vjp(const Mat& cot) const {
  const GNetwork& g = *net;
  if (generation != g.generation)
    throw std::runtime_error("GVjpCache: stale cache (parameters changed)");
  if (cot.rows() != y.rows() || cot.cols() != y.cols())
    throw std::invalid_argument("GVjpCache::vjp: cotangent shape mismatch");
  Mat gh = (cot * g.final_layer.weight) * g.final_layer.scale();
  int growth = g.cfg.growth;
  int wf = activation_width_factor(g.cfg.act);
  for (int i = static_cast<int>(g.steps.size()) - 1; i >= 0; --i) {
    Eigen::Index wprev = h[static_cast<size_t>(i)].cols();
    Mat g_skip = gh.leftCols(wprev);
    Mat g_z = gh.rightCols(growth * wf) * etas[static_cast<size_t>(i)].second;
    Mat ga;
    if (wf == 2) {
      ga = g_z.leftCols(growth).cwiseProduct(actd[static_cast<size_t>(i)].leftCols(growth)) +
           g_z.rightCols(growth).cwiseProduct(actd[static_cast<size_t>(i)].rightCols(growth));
    } else {
      ga = g_z.cwiseProduct(actd[static_cast<size_t>(i)]);
    }
    gh = etas[static_cast<size_t>(i)].first * g_skip +
         (ga * g.steps[static_cast<size_t>(i)].weight) * g.steps[static_cast<size_t>(i)].scale();
  }
  return gh;
}

void GVjpCache::param_grads(const Mat& cot, std::vector<Mat>& grads) const {
  const GNetwork& g = *net;
  if (generation != g.generation)
    throw std::runtime_error("GVjpCache: stale cache (parameters changed)");
  size_t np = 2 * g.steps.size() + 3;
  if (grads.size() != np) throw std::invalid_argument("param_grads: grads size mismatch");
  size_t iw_final = 2 * g.steps.size();
  size_t iraw = iw_final + 2;

  grads[iw_final] += g.final_layer.scale() * (cot.transpose() * final_in);
  grads[iw_final + 1] += cot.colwise().sum();

  Mat gh = (cot * g.final_layer.weight) * g.final_layer.scale();
  int growth = g.cfg.growth;
  int wf = activation_width_factor(g.cfg.act);
  for (int i = static_cast<int>(g.steps.size()) - 1; i >= 0; --i) {
    size_t si = static_cast<size_t>(i);
    Eigen::Index wprev = h[si].cols();
    Mat g_skip = gh.leftCols(wprev);
    Mat g_znew = gh.rightCols(growth * wf);
    Mat g_z = g_znew * etas[si].second;
    Mat ga;
    if (wf == 2) {
      ga = g_z.leftCols(growth).cwiseProduct(actd[si].leftCols(growth)) +
           g_z.rightCols(growth).cwiseProduct(actd[si].rightCols(growth));
    } else {
      ga = g_z.cwiseProduct(actd[si]);
    }
    grads[2 * si] += g.steps[si].scale() * (ga.transpose() * h[si]);
    grads[2 * si + 1] += ga.colwise().sum();
    if (g.cfg.learnable_concat) {
      double ges = g_skip.cwiseProduct(h[si]).sum();
      double gen_ = g_znew.cwiseProduct(z[si]).sum();
      double a = g.concat_raw(0, 2 * i);
      double b = g.concat_raw(0, 2 * i + 1);
      double r = std::sqrt(a * a + b * b);
      double r3 = r * r * r;
      grads[iraw](0, 2 * i) += ges * (b * b / r3) + gen_ * (-a * b / r3);
      grads[iraw](0, 2 * i + 1) += ges * (-a * b / r3) + gen_ * (a * a / r3);
    }
    gh = etas[si].first * g_skip + (ga * g.steps[si].weight) * g.steps[si].scale();
  }
}

}  // namespace monoflow
