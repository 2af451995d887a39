#pragma once

#include <vector>

#include "monoflow/logdet.hpp"

namespace monoflow {

struct FlowModel {
  int dim = 2;
  std::vector<FlowBlock> blocks;
};

enum class LogDetMode { Exact, Stochastic };

struct LogProbResult {
  Eigen::VectorXd logp;
  Mat z;
  bool all_converged = true;
};

// standard-normal log density per row
Eigen::VectorXd gauss_logp(const Mat& z);

Mat flow_forward(const FlowModel& m, const Mat& x, const SolverConfig& cfg,
                 bool* converged = nullptr);
Mat flow_inverse(const FlowModel& m, const Mat& z, const SolverConfig& cfg,
                 bool* converged = nullptr);

LogProbResult log_prob(const FlowModel& m, const Mat& x, LogDetMode mode,
                       const RouletteConfig& rc, const SolverConfig& cfg, Rng* rng);

Mat flow_sample(const FlowModel& m, int n, const SolverConfig& cfg, Rng& rng);

// mean negative log likelihood in nats
double nats_per_point(const FlowModel& m, const Mat& x, LogDetMode mode, const RouletteConfig& rc,
                      const SolverConfig& cfg, Rng* rng);

// all trainable tensors, named like "block0.g.step0.weight"
ParamRefs model_params(FlowModel& m);

}  // namespace monoflow
