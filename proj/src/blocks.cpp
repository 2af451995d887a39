#include "monoflow/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace monoflow {

BlockKind block_kind_from_string(const std::string& s) {
  if (s == "residual") return BlockKind::Residual;
  if (s == "inverse-residual") return BlockKind::InverseResidual;
  if (s == "monotone") return BlockKind::Monotone;
  if (s == "actnorm") return BlockKind::ActNorm;
  throw std::invalid_argument("unknown block kind: " + s);
}

std::string block_kind_to_string(BlockKind k) {
  switch (k) {
    case BlockKind::Residual: return "residual";
    case BlockKind::InverseResidual: return "inverse-residual";
    case BlockKind::Monotone: return "monotone";
    case BlockKind::ActNorm: return "actnorm";
  }
  throw std::logic_error("bad block kind");
}

FlowBlock make_gblock(BlockKind kind, const GNetConfig& cfg, Rng& rng) {
  if (kind == BlockKind::ActNorm)
    throw std::invalid_argument("make_gblock: actnorm has no G network");
  FlowBlock b;
  b.kind = kind;
  b.g = make_gnet(cfg, rng);
  return b;
}

FlowBlock make_actnorm(int dim) {
  if (dim <= 0) throw std::invalid_argument("make_actnorm: bad dim");
  FlowBlock b;
  b.kind = BlockKind::ActNorm;
  b.log_scale = Mat::Zero(1, dim);
  b.shift = Mat::Zero(1, dim);
  return b;
}

void actnorm_init(FlowBlock& b, const Mat& x) {
  if (b.kind != BlockKind::ActNorm) throw std::invalid_argument("actnorm_init: wrong kind");
  if (x.rows() < 2) throw std::invalid_argument("actnorm_init: need at least 2 rows");
  Eigen::RowVectorXd mean = x.colwise().mean();
  Eigen::RowVectorXd var =
      (x.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(x.rows());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    double sd = std::sqrt(var(j) + 1e-8);
    b.log_scale(0, j) = -std::log(sd);
    b.shift(0, j) = -mean(j) / sd;
  }
  b.actnorm_ready = true;
}

namespace {

Mat actnorm_fwd(const FlowBlock& b, const Mat& x) {
  Mat y = (x.array().rowwise() * b.log_scale.row(0).array().exp()).matrix();
  y.rowwise() += b.shift.row(0);
  return y;
}

Mat actnorm_inv(const FlowBlock& b, const Mat& y) {
  Mat x = y;
  x.rowwise() -= b.shift.row(0);
  return (x.array().rowwise() * (-b.log_scale.row(0).array()).exp()).matrix();
}

void fill_info(BlockSolveInfo* info, const FixedPointResult& r) {
  if (!info) return;
  info->used_solver = true;
  info->converged = r.all_converged;
  info->iters = r.iters;
  info->max_residual = r.residual.size() ? r.residual.maxCoeff() : 0.0;
}

}  // namespace

Mat block_forward(const FlowBlock& b, const Mat& x, const SolverConfig& cfg,
                  BlockSolveInfo* info, Mat* w_out, const Mat* w0) {
  if (x.cols() != b.dim()) throw std::invalid_argument("block_forward: dimension mismatch");
  auto start = [&](const Mat& fallback) -> const Mat& {
    return (w0 && w0->rows() == x.rows() && w0->cols() == x.cols()) ? *w0 : fallback;
  };
  switch (b.kind) {
    case BlockKind::ActNorm:
      return actnorm_fwd(b, x);
    case BlockKind::Residual: {
      if (w_out) *w_out = x;
      return x + b.g->eval(x);
    }
    case BlockKind::InverseResidual: {
      auto r = fixed_point_solve([&](const Mat& w) -> Mat { return x - b.g->eval(w); }, start(x),
                                 cfg.eps_forward, cfg.nmax_forward, cfg);
      fill_info(info, r);
      if (w_out) *w_out = r.y;
      return r.y;
    }
    case BlockKind::Monotone: {
      Mat u = 2.0 * x;
      auto r = fixed_point_solve([&](const Mat& w) -> Mat { return u - b.g->eval(w); }, start(x),
                                 cfg.eps_forward, cfg.nmax_forward, cfg);
      fill_info(info, r);
      if (w_out) *w_out = r.y;
      return r.y - x;
    }
  }
  throw std::logic_error("bad block kind");
}

Mat block_inverse(const FlowBlock& b, const Mat& y, const SolverConfig& cfg,
                  BlockSolveInfo* info) {
  if (y.cols() != b.dim()) throw std::invalid_argument("block_inverse: dimension mismatch");
  switch (b.kind) {
    case BlockKind::ActNorm:
      return actnorm_inv(b, y);
    case BlockKind::Residual: {
      auto r = fixed_point_solve([&](const Mat& v) -> Mat { return y - b.g->eval(v); }, y,
                                 cfg.eps_forward, cfg.nmax_forward, cfg);
      fill_info(info, r);
      return r.y;
    }
    case BlockKind::InverseResidual:
      return y + b.g->eval(y);
    case BlockKind::Monotone: {
      Mat u = 2.0 * y;
      auto r = fixed_point_solve([&](const Mat& w) -> Mat { return u + b.g->eval(w); }, y,
                                 cfg.eps_forward, cfg.nmax_forward, cfg);
      fill_info(info, r);
      return r.y - y;
    }
  }
  throw std::logic_error("bad block kind");
}

}  // namespace monoflow
