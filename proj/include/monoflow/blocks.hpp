#pragma once

#include <optional>
#include <string>

#include "monoflow/gnet.hpp"
#include "monoflow/solver.hpp"

namespace monoflow {

enum class BlockKind { Residual, InverseResidual, Monotone, ActNorm };

BlockKind block_kind_from_string(const std::string& s);
std::string block_kind_to_string(BlockKind k);

// One invertible layer. Residual: y = x + G(x). InverseResidual:
// y solves y + G(y) = x. Monotone: y = w - x where w solves w + G(w) = 2x,
// i.e. the Cayley-type resolvent map; x - y = G(x + y) holds at the
// solution. ActNorm: y = x .* exp(log_scale) + shift.
struct FlowBlock {
  BlockKind kind = BlockKind::ActNorm;
  std::optional<GNetwork> g;
  Mat log_scale;  // 1 x dim
  Mat shift;      // 1 x dim
  bool actnorm_ready = false;

  int dim() const { return g ? g->dim() : static_cast<int>(log_scale.cols()); }
};

FlowBlock make_gblock(BlockKind kind, const GNetConfig& cfg, Rng& rng);
FlowBlock make_actnorm(int dim);

// first-batch moment initialization: output has zero mean, unit variance
void actnorm_init(FlowBlock& b, const Mat& x);

struct BlockSolveInfo {
  bool used_solver = false;
  bool converged = true;
  int iters = 0;
  double max_residual = 0.0;
};

// forward maps data toward latent; w_out receives the fixed point of the
// inner solve when one is used (the point where J_G is evaluated); w0, if
// given, warm-starts that solve
Mat block_forward(const FlowBlock& b, const Mat& x, const SolverConfig& cfg,
                  BlockSolveInfo* info = nullptr, Mat* w_out = nullptr,
                  const Mat* w0 = nullptr);
Mat block_inverse(const FlowBlock& b, const Mat& y, const SolverConfig& cfg,
                  BlockSolveInfo* info = nullptr);

}  // namespace monoflow
