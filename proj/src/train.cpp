#include "monoflow/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <memory>
#include <stdexcept>
#include <string_view>

#include "monoflow/checkpoint.hpp"
#include "monoflow/data.hpp"

namespace monoflow {

void adam_init(AdamState& st, const ParamRefs& params) {
  st.m.clear();
  st.v.clear();
  for (const Mat* p : params.tensors) {
    st.m.push_back(Mat::Zero(p->rows(), p->cols()));
    st.v.push_back(Mat::Zero(p->rows(), p->cols()));
  }
  st.step = 0;
}

namespace {

// unit-normalized direction pairs carry no scale worth decaying; decay would
// drive them to exact zero through the eps-dominated Adam regime
bool decay_exempt(const std::string& name) {
  return std::string_view(name).ends_with("concat_raw");
}

}  // namespace

void adam_step(const ParamRefs& params, const std::vector<Mat>& grads, AdamState& st,
               const AdamConfig& cfg) {
  if (grads.size() != params.tensors.size() || st.m.size() != params.tensors.size())
    throw std::invalid_argument("adam_step: size mismatch");
  ++st.step;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (size_t i = 0; i < params.tensors.size(); ++i) {
    Mat g = grads[i];
    if (cfg.weight_decay != 0.0 && !decay_exempt(params.names[i]))
      g += cfg.weight_decay * (*params.tensors[i]);
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    Mat mhat = st.m[i] / bc1;
    Mat vhat = st.v[i] / bc2;
    *params.tensors[i] -=
        cfg.lr * mhat.cwiseQuotient((vhat.cwiseSqrt().array() + cfg.eps).matrix());
  }
}

void apply_task_defaults(TrainConfig& cfg) {
  if (cfg.task == "toy1d") {
    if (cfg.dataset.empty() || cfg.dataset == "checkerboard") cfg.dataset = "staircase";
    if (cfg.activation.empty()) cfg.activation = "crelu";
    if (cfg.depth < 0) cfg.depth = 4;
    if (cfg.growth < 0) cfg.growth = 128;
    if (cfg.kernel_lip < 0) cfg.kernel_lip = 0.99;
    if (cfg.coeff_lip < 0) cfg.coeff_lip = 0.99;
    if (cfg.sn_iters < 0 && cfg.sn_tol < 0) cfg.sn_tol = 1e-4;
    if (cfg.iters < 0) cfg.iters = 15000;
    if (cfg.batch < 0) cfg.batch = 5000;
    if (cfg.lr < 0) cfg.lr = 0.01;
    if (cfg.lr_milestones.empty())
      cfg.lr_milestones = {{5000, 0.002}, {10000, 0.0004}};
    if (cfg.weight_decay < 0) cfg.weight_decay = 0.0;
    if (cfg.lc_enable_at == -2) cfg.lc_enable_at = 0;
    if (cfg.logdet.empty()) cfg.logdet = "exact";  // unused by the MSE objective
    if (cfg.eval_samples == 10000) cfg.eval_samples = 20001;
  } else if (cfg.task == "toy2d") {
    if (cfg.activation.empty())
      cfg.activation = (cfg.block == "monotone") ? "cpila" : "clipswish";
    if (cfg.depth < 0) cfg.depth = 3;
    if (cfg.growth < 0) cfg.growth = 16;
    if (cfg.kernel_lip < 0) cfg.kernel_lip = 0.98;
    if (cfg.coeff_lip < 0) cfg.coeff_lip = 0.90;
    if (cfg.sn_iters < 0 && cfg.sn_tol < 0) cfg.sn_iters = 5;
    if (cfg.iters < 0) cfg.iters = 50000;
    if (cfg.batch < 0) cfg.batch = 500;
    if (cfg.lr < 0) cfg.lr = 0.001;
    if (cfg.weight_decay < 0) cfg.weight_decay = 1e-5;
    if (cfg.lc_enable_at == -2) cfg.lc_enable_at = 25000;
    if (cfg.logdet.empty()) cfg.logdet = "exact";
  } else {
    throw std::invalid_argument("unknown task: " + cfg.task);
  }
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json ms = nlohmann::json::array();
  for (auto& [it, lr] : c.lr_milestones) ms.push_back({it, lr});
  return nlohmann::json{{"task", c.task},
                        {"dataset", c.dataset},
                        {"preset", c.preset},
                        {"block", c.block},
                        {"activation", c.activation},
                        {"num_blocks", c.num_blocks},
                        {"depth", c.depth},
                        {"growth", c.growth},
                        {"kernel_lip", c.kernel_lip},
                        {"coeff_lip", c.coeff_lip},
                        {"sn_iters", c.sn_iters},
                        {"sn_tol", c.sn_tol},
                        {"iters", c.iters},
                        {"batch", c.batch},
                        {"lr", c.lr},
                        {"lr_milestones", ms},
                        {"weight_decay", c.weight_decay},
                        {"lc_enable_at", c.lc_enable_at},
                        {"logdet", c.logdet},
                        {"roulette_lambda", c.roulette.lambda},
                        {"roulette_n_exact", c.roulette.n_exact},
                        {"roulette_probes", c.roulette.probes},
                        {"eval_every", c.eval_every},
                        {"eval_samples", c.eval_samples},
                        {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.task = j.value("task", c.task);
  c.dataset = j.value("dataset", c.dataset);
  c.preset = j.value("preset", c.preset);
  c.block = j.value("block", c.block);
  c.activation = j.value("activation", c.activation);
  c.num_blocks = j.value("num_blocks", c.num_blocks);
  c.depth = j.value("depth", c.depth);
  c.growth = j.value("growth", c.growth);
  c.kernel_lip = j.value("kernel_lip", c.kernel_lip);
  c.coeff_lip = j.value("coeff_lip", c.coeff_lip);
  c.sn_iters = j.value("sn_iters", c.sn_iters);
  c.sn_tol = j.value("sn_tol", c.sn_tol);
  c.iters = j.value("iters", c.iters);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  if (j.contains("lr_milestones"))
    for (const auto& e : j.at("lr_milestones"))
      c.lr_milestones.emplace_back(e.at(0).get<long>(), e.at(1).get<double>());
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.lc_enable_at = j.value("lc_enable_at", c.lc_enable_at);
  c.logdet = j.value("logdet", c.logdet);
  c.roulette.lambda = j.value("roulette_lambda", c.roulette.lambda);
  c.roulette.n_exact = j.value("roulette_n_exact", c.roulette.n_exact);
  c.roulette.probes = j.value("roulette_probes", c.roulette.probes);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.eval_samples = j.value("eval_samples", c.eval_samples);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

GNetConfig gnet_config_for(const TrainConfig& cfg, int dim) {
  GNetConfig g;
  g.dim = dim;
  g.depth = cfg.depth;
  g.growth = cfg.growth;
  g.act = activation_from_string(cfg.activation);
  g.kernel_lip = cfg.kernel_lip;
  g.coeff_lip = cfg.coeff_lip;
  g.learnable_concat = (cfg.lc_enable_at == 0);
  return g;
}

}  // namespace

FlowModel build_model(const TrainConfig& cfg, Rng& rng) {
  FlowModel m;
  if (cfg.task == "toy1d") {
    m.dim = 1;
    GNetConfig g = gnet_config_for(cfg, 1);
    auto an = [&]() { m.blocks.push_back(make_actnorm(1)); };
    auto gb = [&](BlockKind k) { m.blocks.push_back(make_gblock(k, g, rng)); };
    if (cfg.preset == "2rb") {
      gb(BlockKind::Residual);
      gb(BlockKind::Residual);
    } else if (cfg.preset == "2rb-ls") {
      an(); gb(BlockKind::Residual); an(); gb(BlockKind::Residual); an();
    } else if (cfg.preset == "rb-irb-ls") {
      an(); gb(BlockKind::Residual); an(); gb(BlockKind::InverseResidual); an();
    } else if (cfg.preset == "2mb-ls") {
      an(); gb(BlockKind::Monotone); an(); gb(BlockKind::Monotone); an();
    } else {
      throw std::invalid_argument("unknown 1D preset: " + cfg.preset);
    }
  } else {
    m.dim = 2;
    GNetConfig g = gnet_config_for(cfg, 2);
    BlockKind kind = block_kind_from_string(cfg.block);
    for (int i = 0; i < cfg.num_blocks; ++i) m.blocks.push_back(make_gblock(kind, g, rng));
  }
  return m;
}

namespace {

struct BlockWork {
  Mat x_in;
  Mat w;
  GVjpCache cache;
  std::unique_ptr<ad::Tape> tape;
  TapedGNet tg;
  ad::Var objective;  // scalar: -(1/B) * sum of per-sample logdet (or surrogate)
  Eigen::VectorXd logdet_values;
};

size_t block_param_count(const FlowBlock& b) {
  if (b.kind == BlockKind::ActNorm) return 2;
  return 2 * b.g->steps.size() + 3;
}

}  // namespace

double training_loss_and_grads(FlowModel& m, const Mat& x, const Mat* targets, LogDetMode mode,
                               const RouletteConfig& rc, const SolverConfig& solver, Rng* rng,
                               std::vector<Mat>* grads) {
  const Eigen::Index B = x.rows();
  if (B == 0) throw std::invalid_argument("training_loss_and_grads: empty batch");
  const double invB = 1.0 / static_cast<double>(B);
  const bool nll = targets == nullptr;
  if (nll && mode == LogDetMode::Stochastic && !rng)
    throw std::invalid_argument("training_loss_and_grads: stochastic mode needs an rng");

  std::vector<BlockWork> work(m.blocks.size());
  Mat h = x;
  double logdet_total = 0.0;
  for (size_t i = 0; i < m.blocks.size(); ++i) {
    FlowBlock& b = m.blocks[i];
    BlockWork& wk = work[i];
    wk.x_in = h;
    if (b.kind == BlockKind::ActNorm) {
      if (!b.actnorm_ready) {
        actnorm_init(b, h);
      }
      h = block_forward(b, h, solver);
      if (nll) logdet_total += static_cast<double>(B) * b.log_scale.sum();
      continue;
    }
    switch (b.kind) {
      case BlockKind::Residual: {
        wk.w = h;
        wk.cache = gnet_forward_cache(*b.g, h);
        h = wk.x_in + wk.cache.y;
        break;
      }
      case BlockKind::InverseResidual: {
        block_forward(b, h, solver, nullptr, &wk.w);
        wk.cache = gnet_forward_cache(*b.g, wk.w);
        h = wk.w;
        break;
      }
      case BlockKind::Monotone: {
        block_forward(b, h, solver, nullptr, &wk.w);
        wk.cache = gnet_forward_cache(*b.g, wk.w);
        h = wk.w - wk.x_in;
        break;
      }
      default:
        break;
    }
    if (nll) {
      wk.tape = std::make_unique<ad::Tape>();
      wk.tg = gnet_eval_taped(*b.g, *wk.tape, wk.w);
      if (mode == LogDetMode::Exact) {
        ad::Var p = logdet_exact2_taped(b, wk.tg);
        wk.logdet_values = p.val().col(0);
        wk.objective = ad::scale(ad::sum_all(p), -invB);
      } else {
        StochasticLogDet sl = logdet_stochastic_taped(b, wk.tg, rc, *rng);
        wk.logdet_values = sl.value;
        wk.objective = ad::scale(sl.surrogate, -invB);
      }
      logdet_total += wk.logdet_values.sum();
    }
  }

  const Mat& z = h;
  double loss;
  Mat gy;
  if (nll) {
    const double ln2pi = 1.8378770664093454835607;
    loss = invB * (0.5 * z.squaredNorm() + 0.5 * ln2pi * static_cast<double>(z.cols()) *
                                               static_cast<double>(B) -
                   logdet_total);
    gy = invB * z;
  } else {
    if (targets->rows() != B || targets->cols() != z.cols())
      throw std::invalid_argument("training_loss_and_grads: target shape mismatch");
    Mat r = z - *targets;
    loss = invB * r.squaredNorm();
    gy = (2.0 * invB) * r;
  }
  if (!grads) return loss;

  ParamRefs refs = model_params(m);
  if (grads->size() != refs.tensors.size()) {
    grads->clear();
    for (Mat* t : refs.tensors) grads->push_back(Mat::Zero(t->rows(), t->cols()));
  } else {
    for (size_t i = 0; i < grads->size(); ++i)
      (*grads)[i].setZero();
  }

  // parameter offsets per block within the flat list
  std::vector<size_t> off(m.blocks.size() + 1, 0);
  for (size_t i = 0; i < m.blocks.size(); ++i)
    off[i + 1] = off[i] + block_param_count(m.blocks[i]);

  for (size_t ri = m.blocks.size(); ri-- > 0;) {
    FlowBlock& b = m.blocks[ri];
    BlockWork& wk = work[ri];
    size_t o = off[ri];
    if (b.kind == BlockKind::ActNorm) {
      Eigen::RowVectorXd es = b.log_scale.row(0).array().exp().matrix();
      Mat gy_x = gy.cwiseProduct(wk.x_in);
      (*grads)[o].row(0) +=
          (gy_x.array().rowwise() * es.array()).colwise().sum().matrix();
      if (nll) (*grads)[o].row(0).array() -= 1.0;
      (*grads)[o + 1].row(0) += gy.colwise().sum();
      gy = (gy.array().rowwise() * es.array()).matrix();
      continue;
    }

    Mat sw;  // d(objective)/dw from the recorded log-det term
    if (wk.tape) {
      std::vector<ad::Var> wrt;
      wrt.push_back(wk.tg.x);
      for (ad::Var pv : wk.tg.params) wrt.push_back(pv);
      std::vector<ad::Var> gvars = ad::backward(wk.objective, wrt);
      sw = gvars[0].val();
      for (size_t j = 0; j + 1 < gvars.size(); ++j) (*grads)[o + j] += gvars[j + 1].val();
    }

    std::vector<Mat> blkgrads(block_param_count(b));
    for (size_t j = 0; j < blkgrads.size(); ++j)
      blkgrads[j] = Mat::Zero((*grads)[o + j].rows(), (*grads)[o + j].cols());

    switch (b.kind) {
      case BlockKind::Residual: {
        Mat gx = gy + wk.cache.vjp(gy);
        if (wk.tape) gx += sw;
        wk.cache.param_grads(gy, blkgrads);
        gy = std::move(gx);
        break;
      }
      case BlockKind::InverseResidual: {
        Mat vw = wk.tape ? Mat(gy + sw) : gy;
        auto ib = implicit_backward(wk.cache, vw, solver);
        wk.cache.param_grads(-ib.out, blkgrads);
        gy = ib.out;
        break;
      }
      case BlockKind::Monotone: {
        Mat vw = wk.tape ? Mat(gy + sw) : gy;
        auto ib = implicit_backward(wk.cache, vw, solver);
        wk.cache.param_grads(-ib.out, blkgrads);
        gy = 2.0 * ib.out - gy;
        break;
      }
      default:
        break;
    }
    for (size_t j = 0; j < blkgrads.size(); ++j) (*grads)[o + j] += blkgrads[j];
  }
  return loss;
}

namespace {

SpectralNormMode sn_mode_of(const TrainConfig& cfg) {
  if (cfg.sn_tol > 0) return SpectralNormMode::tolerance(cfg.sn_tol);
  return SpectralNormMode::fixed(cfg.sn_iters > 0 ? cfg.sn_iters : 5);
}

void normalize_model(FlowModel& m, const SpectralNormMode& mode) {
  for (auto& b : m.blocks)
    if (b.g) gnet_normalize(*b.g, mode);
}

void enable_lc(FlowModel& m) {
  for (auto& b : m.blocks)
    if (b.g) {
      b.g->cfg.learnable_concat = true;
      b.g->touch();
    }
}

double lr_at(const TrainConfig& cfg, long iter) {
  double lr = cfg.lr;
  for (auto& [at, v] : cfg.lr_milestones)
    if (iter >= at) lr = v;
  return lr;
}

Mat linspace_col(double lo, double hi, int n) {
  Mat g(n, 1);
  for (int i = 0; i < n; ++i)
    g(i, 0) = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return g;
}

}  // namespace

double evaluate_model(const FlowModel& m, const TrainConfig& cfg, Rng& rng) {
  if (cfg.task == "toy1d") {
    Mat grid = linspace_col(-2.0, 2.0, cfg.eval_samples);
    Mat target = staircase_batch(grid);
    Mat out = flow_forward(m, grid, cfg.solver);
    return (out - target).squaredNorm() / static_cast<double>(grid.rows());
  }
  Mat test = sample_toy2d(cfg.dataset, cfg.eval_samples, rng);
  return nats_per_point(m, test, LogDetMode::Exact, cfg.roulette, cfg.solver, nullptr);
}

TrainResult train(TrainConfig cfg) {
  apply_task_defaults(cfg);
  Rng root(cfg.seed);
  Rng rng_init = root.split(1);
  Rng rng_data = root.split(2);
  Rng rng_eval = root.split(3);
  Rng rng_est = root.split(4);

  TrainResult res;
  res.model = build_model(cfg, rng_init);
  FlowModel& model = res.model;
  ParamRefs params = model_params(model);
  AdamState opt;
  adam_init(opt, params);
  AdamConfig acfg;
  acfg.weight_decay = cfg.weight_decay;
  SpectralNormMode mode = sn_mode_of(cfg);
  const bool is1d = cfg.task == "toy1d";
  const LogDetMode ldmode =
      cfg.logdet == "stochastic" ? LogDetMode::Stochastic : LogDetMode::Exact;

  Mat grid, grid_target;
  std::vector<Mat> warm(model.blocks.size());
  if (is1d) {
    grid = linspace_col(-2.0, 2.0, cfg.eval_samples);
    grid_target = staircase_batch(grid);
  }

  auto eval_now = [&](long evals_done) -> double {
    if (is1d) {
      Mat h = grid;
      for (size_t i = 0; i < model.blocks.size(); ++i) {
        Mat w;
        h = block_forward(model.blocks[i], h, cfg.solver, nullptr, &w,
                          warm[i].size() ? &warm[i] : nullptr);
        if (model.blocks[i].kind != BlockKind::ActNorm) warm[i] = std::move(w);
      }
      return (h - grid_target).squaredNorm() / static_cast<double>(grid.rows());
    }
    Rng r = rng_eval.split(static_cast<std::uint64_t>(evals_done));
    Mat test = sample_toy2d(cfg.dataset, cfg.eval_samples, r);
    return nats_per_point(model, test, LogDetMode::Exact, cfg.roulette, cfg.solver, nullptr);
  };

  std::vector<Mat> grads;
  long evals_done = 0;
  for (long it = 0; it < cfg.iters; ++it) {
    if (cfg.lc_enable_at > 0 && it == cfg.lc_enable_at) enable_lc(model);
    normalize_model(model, mode);
    acfg.lr = lr_at(cfg, it);

    Mat batch, target;
    const Mat* tptr = nullptr;
    if (is1d) {
      batch = rng_data.uniform_matrix(cfg.batch, 1, -2.0, 2.0);
      target = staircase_batch(batch);
      tptr = &target;
    } else {
      batch = sample_toy2d(cfg.dataset, cfg.batch, rng_data);
    }
    double loss = training_loss_and_grads(model, batch, tptr, ldmode, cfg.roulette, cfg.solver,
                                          &rng_est, &grads);
    adam_step(params, grads, opt, acfg);
    for (auto& b : model.blocks)
      if (b.g) {
        if (b.g->cfg.learnable_concat) gnet_renormalize_concat(*b.g);
        b.g->touch();
      }

    if ((it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iters) {
      normalize_model(model, mode);
      double metric = eval_now(evals_done++);
      res.log.push_back({static_cast<double>(it + 1), loss, metric});
      if (!cfg.quiet)
        std::cerr << "iter " << (it + 1) << " loss " << loss << " eval " << metric << "\n";
    }
  }

  double best = res.log.empty() ? 0.0 : res.log.front()[2];
  for (auto& row : res.log) best = std::min(best, row[2]);
  res.best_metric = best;
  if (is1d) {
    res.final_metric = best;
  } else {
    size_t tail = std::min<size_t>(20, res.log.size());
    double s = 0.0;
    for (size_t i = res.log.size() - tail; i < res.log.size(); ++i) s += res.log[i][2];
    res.final_metric = tail ? s / static_cast<double>(tail) : 0.0;
  }

  if (!cfg.out_log.empty()) {
    Mat lm(static_cast<Eigen::Index>(res.log.size()), 3);
    for (size_t i = 0; i < res.log.size(); ++i)
      for (int j = 0; j < 3; ++j) lm(static_cast<Eigen::Index>(i), j) = res.log[i][static_cast<size_t>(j)];
    save_csv(cfg.out_log, lm, {"iteration", "train_loss", "eval_metric"});
  }
  if (!cfg.out_checkpoint.empty()) {
    nlohmann::json extra;
    extra["train_config"] = train_config_to_json(cfg);
    extra["result"] = {{"best_metric", res.best_metric}, {"final_metric", res.final_metric}};
    save_checkpoint(cfg.out_checkpoint, model, extra);
  }
  return res;
}

}  // namespace monoflow
