#include "monoflow/flow.hpp"

#include <cmath>
#include <stdexcept>

namespace monoflow {

Eigen::VectorXd gauss_logp(const Mat& z) {
  const double ln2pi = 1.8378770664093454835607;
  Eigen::VectorXd s = z.rowwise().squaredNorm();
  return (-0.5 * s.array() - 0.5 * ln2pi * z.cols()).matrix();
}

Mat flow_forward(const FlowModel& m, const Mat& x, const SolverConfig& cfg, bool* converged) {
  if (x.cols() != m.dim) throw std::invalid_argument("flow_forward: dimension mismatch");
  Mat h = x;
  bool ok = true;
  for (const auto& b : m.blocks) {
    BlockSolveInfo info;
    h = block_forward(b, h, cfg, &info);
    ok = ok && info.converged;
  }
  if (converged) *converged = ok;
  return h;
}

Mat flow_inverse(const FlowModel& m, const Mat& z, const SolverConfig& cfg, bool* converged) {
  if (z.cols() != m.dim) throw std::invalid_argument("flow_inverse: dimension mismatch");
  Mat h = z;
  bool ok = true;
  for (auto it = m.blocks.rbegin(); it != m.blocks.rend(); ++it) {
    BlockSolveInfo info;
    h = block_inverse(*it, h, cfg, &info);
    ok = ok && info.converged;
  }
  if (converged) *converged = ok;
  return h;
}

LogProbResult log_prob(const FlowModel& m, const Mat& x, LogDetMode mode, const RouletteConfig& rc,
                       const SolverConfig& cfg, Rng* rng) {
  if (x.cols() != m.dim) throw std::invalid_argument("log_prob: dimension mismatch");
  if (mode == LogDetMode::Stochastic && !rng)
    throw std::invalid_argument("log_prob: stochastic mode needs an rng");
  LogProbResult res;
  res.logp = Eigen::VectorXd::Zero(x.rows());
  Mat h = x;
  for (const auto& b : m.blocks) {
    BlockSolveInfo info;
    Mat w;
    Mat next = block_forward(b, h, cfg, &info, &w);
    if (b.kind == BlockKind::ActNorm) {
      res.logp.array() += b.log_scale.sum();
    } else if (mode == LogDetMode::Exact) {
      res.logp += logdet_exact_at(b, w);
    } else {
      res.logp += logdet_stochastic_at(b, w, rc, *rng);
    }
    h = std::move(next);
    res.all_converged = res.all_converged && info.converged;
  }
  res.logp += gauss_logp(h);
  res.z = std::move(h);
  return res;
}

Mat flow_sample(const FlowModel& m, int n, const SolverConfig& cfg, Rng& rng) {
  if (n <= 0) throw std::invalid_argument("flow_sample: need a positive count");
  Mat z = rng.normal_matrix(n, m.dim);
  return flow_inverse(m, z, cfg);
}

double nats_per_point(const FlowModel& m, const Mat& x, LogDetMode mode, const RouletteConfig& rc,
                      const SolverConfig& cfg, Rng* rng) {
  return -log_prob(m, x, mode, rc, cfg, rng).logp.mean();
}

ParamRefs model_params(FlowModel& m) {
  ParamRefs all;
  for (size_t i = 0; i < m.blocks.size(); ++i) {
    std::string prefix = "block" + std::to_string(i) + ".";
    FlowBlock& b = m.blocks[i];
    if (b.kind == BlockKind::ActNorm) {
      all.names.push_back(prefix + "log_scale");
      all.tensors.push_back(&b.log_scale);
      all.names.push_back(prefix + "shift");
      all.tensors.push_back(&b.shift);
    } else {
      ParamRefs g = gnet_params(*b.g);
      for (size_t j = 0; j < g.names.size(); ++j) {
        all.names.push_back(prefix + "g." + g.names[j]);
        all.tensors.push_back(g.tensors[j]);
      }
    }
  }
  return all;
}

}  // namespace monoflow
