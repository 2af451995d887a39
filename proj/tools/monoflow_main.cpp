#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "monoflow/checkpoint.hpp"
#include "monoflow/data.hpp"
#include "monoflow/train.hpp"
#include "monoflow/verify.hpp"

namespace {

using namespace monoflow;

void print_metric(double v) { std::printf("%.10g\n", v); }

bool valid_dataset(const std::string& name) {
  for (const auto& n : toy2d_names())
    if (n == name) return true;
  return false;
}

std::string dataset_options() {
  std::string s;
  for (const auto& n : toy2d_names()) s += (s.empty() ? "" : ", ") + n;
  return s;
}

int load_model_or_fail(const std::string& path, FlowModel& m, nlohmann::json* extra) {
  try {
    m = load_checkpoint(path, extra);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "cannot load checkpoint: " << e.what() << "\n";
    return 1;
  }
}

// fraction of rows whose round trip misses by more than 1e-4 in max norm
long roundtrip_failures(const Mat& a, const Mat& b) {
  long bad = 0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    if ((a.row(i) - b.row(i)).cwiseAbs().maxCoeff() > 1e-4) ++bad;
  return bad;
}

int finish_roundtrip(long bad, long total) {
  if (bad > 0) std::cerr << bad << " of " << total << " points failed the solver round trip\n";
  return bad * 100 > total ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // keep batch-sized temporaries on the heap free lists instead of mmap
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  if (const char* t = std::getenv("MONOFLOW_THREADS")) {
    int n = std::atoi(t);
    Eigen::setNbThreads(n > 0 ? n : 1);
  }

  CLI::App app{"monotone-flow training, evaluation, and verification"};
  app.require_subcommand(1);

  // train
  auto* tr = app.add_subcommand("train", "train a flow and write a checkpoint");
  std::string t_task = "toy2d", t_dataset, t_preset, t_block, t_act, t_logdet, t_config;
  std::string t_out, t_log;
  int t_blocks = 0, t_depth = 0, t_growth = 0, t_sn_iters = 0, t_batch = 0, t_nexact = 0,
      t_probes = 0;
  long t_iters = 0, t_lc = 0, t_eval_every = 0;
  int t_eval_samples = 0;
  double t_klip = 0, t_clip = 0, t_sntol = 0, t_lr = 0, t_wd = 0, t_lambda = 0;
  std::uint64_t t_seed = 0;
  bool t_quiet = false;
  auto* o_task = tr->add_option("--task", t_task, "toy1d or toy2d");
  auto* o_dataset = tr->add_option("--dataset", t_dataset, "2d density name");
  auto* o_preset = tr->add_option("--preset", t_preset, "1d block arrangement");
  auto* o_block = tr->add_option("--block", t_block, "2d block kind");
  auto* o_act = tr->add_option("--activation", t_act, "activation name");
  auto* o_blocks = tr->add_option("--blocks", t_blocks, "number of 2d blocks");
  auto* o_depth = tr->add_option("--depth", t_depth, "dense steps per network");
  auto* o_growth = tr->add_option("--growth", t_growth, "units added per step");
  auto* o_klip = tr->add_option("--kernel-lip", t_klip, "spectral budget of step kernels");
  auto* o_clip = tr->add_option("--coeff-lip", t_clip, "spectral budget of final layers");
  auto* o_sniters = tr->add_option("--sn-iters", t_sn_iters, "power iterations per update");
  auto* o_sntol = tr->add_option("--sn-tol", t_sntol, "power-iteration tolerance");
  auto* o_iters = tr->add_option("--iters", t_iters, "training iterations");
  auto* o_batch = tr->add_option("--batch", t_batch, "batch size");
  auto* o_lr = tr->add_option("--lr", t_lr, "learning rate");
  auto* o_wd = tr->add_option("--weight-decay", t_wd, "coupled L2 strength");
  auto* o_lc = tr->add_option("--lc-at", t_lc, "iteration enabling learnable concat (-1 never)");
  auto* o_logdet = tr->add_option("--logdet", t_logdet, "exact or stochastic");
  auto* o_lambda = tr->add_option("--roulette-lambda", t_lambda, "tail distribution rate");
  auto* o_nexact = tr->add_option("--n-exact", t_nexact, "unweighted leading series terms");
  auto* o_probes = tr->add_option("--probes", t_probes, "trace probes per batch");
  auto* o_evale = tr->add_option("--eval-every", t_eval_every, "iterations between evals");
  auto* o_evals = tr->add_option("--eval-samples", t_eval_samples, "eval set size");
  tr->add_option("--seed", t_seed, "rng seed");
  tr->add_option("--out", t_out, "checkpoint path");
  tr->add_option("--log", t_log, "csv log path");
  tr->add_option("--config", t_config, "json config file");
  tr->add_flag("--quiet", t_quiet, "suppress progress lines");

  // eval
  auto* ev = app.add_subcommand("eval", "print the test metric of a checkpoint");
  std::string e_ckpt, e_dataset;
  int e_samples = -1;
  std::uint64_t e_seed = 0;
  ev->add_option("--ckpt", e_ckpt, "checkpoint path")->required();
  auto* o_esamples = ev->add_option("--samples", e_samples, "test set size");
  auto* o_edataset = ev->add_option("--dataset", e_dataset, "override the stored dataset");
  ev->add_option("--seed", e_seed, "rng seed");

  // sample
  auto* sa = app.add_subcommand("sample", "draw points from a checkpoint");
  std::string s_ckpt, s_out;
  int s_n = 1000;
  std::uint64_t s_seed = 0;
  sa->add_option("--ckpt", s_ckpt, "checkpoint path")->required();
  sa->add_option("--n", s_n, "number of points");
  sa->add_option("--out", s_out, "csv output path")->required();
  sa->add_option("--seed", s_seed, "rng seed");

  // grid
  auto* gr = app.add_subcommand("grid", "export log densities over a lattice");
  std::string g_ckpt, g_out;
  std::vector<double> g_range{-4.0, 4.0};
  int g_res = 100;
  gr->add_option("--ckpt", g_ckpt, "checkpoint path")->required();
  gr->add_option("--range", g_range, "lattice bounds a b")->expected(2);
  gr->add_option("--res", g_res, "points per axis");
  gr->add_option("--out", g_out, "csv output path")->required();

  // verify
  auto* ve = app.add_subcommand("verify", "run property suites");
  std::string v_suite = "all", v_out;
  std::uint64_t v_seed = 0;
  double v_L = -1.0;
  ve->add_option("--suite", v_suite, "all|duality|classes|estimator|gradients|composition");
  ve->add_option("--seed", v_seed, "rng seed");
  ve->add_option("--out", v_out, "jsonl report path");
  ve->add_option("--L", v_L, "restrict the classes suite to one Lipschitz level");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (tr->parsed()) {
      TrainConfig cfg;
      if (!t_config.empty()) {
        std::ifstream f(t_config);
        if (!f) {
          std::cerr << "cannot open config file: " << t_config << "\n";
          return 2;
        }
        nlohmann::json j;
        f >> j;
        cfg = train_config_from_json(j);
      }
      if (o_task->count()) cfg.task = t_task;
      if (o_dataset->count()) cfg.dataset = t_dataset;
      if (o_preset->count()) cfg.preset = t_preset;
      if (o_block->count()) cfg.block = t_block;
      if (o_act->count()) cfg.activation = t_act;
      if (o_blocks->count()) cfg.num_blocks = t_blocks;
      if (o_depth->count()) cfg.depth = t_depth;
      if (o_growth->count()) cfg.growth = t_growth;
      if (o_klip->count()) cfg.kernel_lip = t_klip;
      if (o_clip->count()) cfg.coeff_lip = t_clip;
      if (o_sniters->count()) cfg.sn_iters = t_sn_iters;
      if (o_sntol->count()) cfg.sn_tol = t_sntol;
      if (o_iters->count()) cfg.iters = t_iters;
      if (o_batch->count()) cfg.batch = t_batch;
      if (o_lr->count()) cfg.lr = t_lr;
      if (o_wd->count()) cfg.weight_decay = t_wd;
      if (o_lc->count()) cfg.lc_enable_at = t_lc;
      if (o_logdet->count()) cfg.logdet = t_logdet;
      if (o_lambda->count()) cfg.roulette.lambda = t_lambda;
      if (o_nexact->count()) cfg.roulette.n_exact = t_nexact;
      if (o_probes->count()) cfg.roulette.probes = t_probes;
      if (o_evale->count()) cfg.eval_every = t_eval_every;
      if (o_evals->count()) cfg.eval_samples = t_eval_samples;
      cfg.seed = t_seed;
      if (!t_out.empty()) cfg.out_checkpoint = t_out;
      if (!t_log.empty()) cfg.out_log = t_log;
      cfg.quiet = cfg.quiet || t_quiet;

      if (cfg.task != "toy1d" && cfg.task != "toy2d") {
        std::cerr << "unknown task: " << cfg.task << " (valid: toy1d, toy2d)\n";
        return 2;
      }
      if (cfg.task == "toy2d" && !cfg.dataset.empty() && !valid_dataset(cfg.dataset)) {
        std::cerr << "unknown dataset: " << cfg.dataset << " (valid: " << dataset_options()
                  << ")\n";
        return 2;
      }
      if (cfg.task == "toy1d" && !cfg.preset.empty() && cfg.preset != "2rb" &&
          cfg.preset != "2rb-ls" && cfg.preset != "rb-irb-ls" && cfg.preset != "2mb-ls") {
        std::cerr << "unknown preset: " << cfg.preset
                  << " (valid: 2rb, 2rb-ls, rb-irb-ls, 2mb-ls)\n";
        return 2;
      }
      if (!cfg.block.empty()) {
        try {
          block_kind_from_string(cfg.block);
        } catch (const std::exception& e) {
          std::cerr << e.what() << "\n";
          return 2;
        }
      }
      if (!cfg.logdet.empty() && cfg.logdet != "exact" && cfg.logdet != "stochastic") {
        std::cerr << "unknown logdet mode: " << cfg.logdet << " (valid: exact, stochastic)\n";
        return 2;
      }
      if ((o_iters->count() && t_iters < 0) || (o_batch->count() && t_batch <= 0)) {
        std::cerr << "iterations and batch size must be positive\n";
        return 2;
      }
      TrainResult res = train(cfg);
      print_metric(res.final_metric);
      return 0;
    }

    if (ev->parsed()) {
      if (o_esamples->count() && e_samples <= 0) {
        std::cerr << "--samples must be positive\n";
        return 2;
      }
      FlowModel m;
      nlohmann::json extra;
      if (int rc = load_model_or_fail(e_ckpt, m, &extra)) return rc;
      TrainConfig cfg;
      if (extra.contains("train_config")) {
        cfg = train_config_from_json(extra["train_config"]);
      } else {
        cfg.task = m.dim == 1 ? "toy1d" : "toy2d";
        cfg.eval_samples = m.dim == 1 ? 20001 : 10000;
      }
      if (o_edataset->count()) {
        if (cfg.task == "toy2d" && !valid_dataset(e_dataset)) {
          std::cerr << "unknown dataset: " << e_dataset << " (valid: " << dataset_options()
                    << ")\n";
          return 2;
        }
        cfg.dataset = e_dataset;
      }
      if (cfg.task == "toy2d" && !valid_dataset(cfg.dataset)) {
        std::cerr << "checkpoint names no dataset; pass --dataset\n";
        return 2;
      }
      if (o_esamples->count()) cfg.eval_samples = e_samples;
      Rng rng(e_seed);
      print_metric(evaluate_model(m, cfg, rng));
      return 0;
    }

    if (sa->parsed()) {
      if (s_n <= 0) {
        std::cerr << "--n must be positive\n";
        return 2;
      }
      FlowModel m;
      if (int rc = load_model_or_fail(s_ckpt, m, nullptr)) return rc;
      Rng rng(s_seed);
      SolverConfig s;
      Mat z = rng.normal_matrix(s_n, m.dim);
      Mat x = flow_inverse(m, z, s);
      Mat z2 = flow_forward(m, x, s);
      std::vector<std::string> header;
      for (int d = 0; d < m.dim; ++d) header.push_back("x" + std::to_string(d));
      save_csv(s_out, x, header);
      return finish_roundtrip(roundtrip_failures(z, z2), s_n);
    }

    if (gr->parsed()) {
      if (g_res <= 0) {
        std::cerr << "--res must be positive\n";
        return 2;
      }
      if (!(g_range[0] < g_range[1])) {
        std::cerr << "--range expects a < b\n";
        return 2;
      }
      FlowModel m;
      if (int rc = load_model_or_fail(g_ckpt, m, nullptr)) return rc;
      if (m.dim != 2) {
        std::cerr << "grid export needs a 2d model\n";
        return 1;
      }
      const long total = static_cast<long>(g_res) * g_res;
      Mat pts(total, 2);
      double a = g_range[0], b = g_range[1];
      for (int iy = 0; iy < g_res; ++iy)
        for (int ix = 0; ix < g_res; ++ix) {
          double fx = g_res > 1 ? a + (b - a) * ix / (g_res - 1) : 0.5 * (a + b);
          double fy = g_res > 1 ? a + (b - a) * iy / (g_res - 1) : 0.5 * (a + b);
          pts.row(static_cast<Eigen::Index>(iy) * g_res + ix) << fx, fy;
        }
      SolverConfig s;
      RouletteConfig rc;
      LogProbResult lp = log_prob(m, pts, LogDetMode::Exact, rc, s, nullptr);
      Mat back = flow_inverse(m, lp.z, s);
      Mat outm(total, 3);
      outm.leftCols(2) = pts;
      outm.col(2) = lp.logp;
      save_csv(g_out, outm, {"x", "y", "log_density"});
      return finish_roundtrip(roundtrip_failures(pts, back), total);
    }

    if (ve->parsed()) {
      std::vector<CheckResult> results;
      try {
        results = run_suite(v_suite, v_seed, v_L);
      } catch (const std::invalid_argument& e) {
        std::cerr << e.what()
                  << " (valid: all, duality, classes, estimator, gradients, composition)\n";
        return 2;
      }
      if (!v_out.empty()) write_report_jsonl(v_out, results);
      long failed = 0;
      for (const auto& r : results)
        if (!r.pass) {
          ++failed;
          std::cerr << "FAIL " << r.suite << "/" << r.name
                    << (r.witness.empty() ? "" : ": " + r.witness) << "\n";
        }
      std::cout << (results.size() - static_cast<size_t>(failed)) << "/" << results.size()
                << " checks passed\n";
      return failed == 0 ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
