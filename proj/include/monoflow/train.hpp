#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "monoflow/flow.hpp"

namespace monoflow {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.0;  // L2 added to the gradient before the moments;
                              // concat direction pairs are exempt
};

struct AdamState {
  std::vector<Mat> m, v;
  long step = 0;
};

void adam_init(AdamState& st, const ParamRefs& params);
void adam_step(const ParamRefs& params, const std::vector<Mat>& grads, AdamState& st,
               const AdamConfig& cfg);

struct TrainConfig {
  std::string task = "toy2d";
  std::string dataset = "checkerboard";  // 2D density name
  std::string preset = "2mb-ls";         // 1D arrangement: 2rb | 2rb-ls | rb-irb-ls | 2mb-ls
  std::string block = "monotone";        // 2D block kind
  std::string activation;                // empty = task default
  int num_blocks = 10;                   // 2D only
  int depth = -1;
  int growth = -1;
  double kernel_lip = -1.0;
  double coeff_lip = -1.0;
  int sn_iters = -1;       // fixed power iterations; -1 = task default
  double sn_tol = -1.0;    // tolerance mode if > 0
  long iters = -1;
  int batch = -1;
  double lr = -1.0;
  std::vector<std::pair<long, double>> lr_milestones;  // empty = task default
  double weight_decay = -1.0;
  long lc_enable_at = -2;  // -2 = task default, -1 = never, 0 = from start
  std::string logdet = "";  // exact | stochastic; empty = task default
  RouletteConfig roulette;
  long eval_every = 100;
  int eval_samples = 10000;
  std::uint64_t seed = 0;
  SolverConfig solver;
  std::string out_checkpoint;
  std::string out_log;
  bool quiet = false;
};

// fills every -1/-2/empty field with the published recipe for cfg.task
void apply_task_defaults(TrainConfig& cfg);

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

FlowModel build_model(const TrainConfig& cfg, Rng& rng);

struct TrainResult {
  FlowModel model;
  double best_metric = 0.0;
  double final_metric = 0.0;
  // rows of (iteration, train loss, eval metric)
  std::vector<std::array<double, 3>> log;
};

TrainResult train(TrainConfig cfg);

// single evaluation consistent with training-time reporting: 1D grid MSE or
// 2D held-out nats per point
double evaluate_model(const FlowModel& m, const TrainConfig& cfg, Rng& rng);

// Training objective on a fixed batch and, when `grads` is non-null, its
// gradient for every trainable tensor (ordered like model_params). With
// `targets` the objective is mean squared error of the flow output; without
// it the negative mean log likelihood including log-determinant terms.
// Uninitialized ActNorm layers take their moments from this batch.
double training_loss_and_grads(FlowModel& m, const Mat& x, const Mat* targets, LogDetMode mode,
                               const RouletteConfig& rc, const SolverConfig& solver, Rng* rng,
                               std::vector<Mat>* grads);

}  // namespace monoflow
