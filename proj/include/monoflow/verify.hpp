#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "monoflow/flow.hpp"

namespace monoflow {

struct CheckResult {
  std::string suite;
  std::string name;
  bool pass = true;
  std::string witness;  // measured values; always filled on failure
};

// G-block whose network is exactly x -> x * A^T (depth-0 net, zero bias);
// `budget` is recorded as the certified Lipschitz budget
FlowBlock make_linear_gblock(BlockKind kind, const Mat& A, double budget);

// forward map F of a monotone block is eta-strongly monotone and
// nu-Lipschitz, its Cayley pairs are 1-Lipschitz, and the linear cases
// G = +-L*I attain eta = (1-L)/(1+L) and nu = (1+L)/(1-L)
std::vector<CheckResult> check_cayley_duality(std::uint64_t seed);

// displacement inequalities of the residual / inverse-residual / monotone
// classes, the scaling identities linking them, the slope bands with their
// linear equality cases, the two maps separating the monotone class, and
// the constructive strongly-monotone-Lipschitz embedding bound
std::vector<CheckResult> check_class_relations(double L, std::uint64_t seed);

// stochastic log-determinant estimates agree with the exact value within
// 3 standard errors (one retry with a derived seed); vanishing even-order
// series coefficients
std::vector<CheckResult> check_estimator_unbiased(std::uint64_t seed);

// analytic gradients against central finite differences: activations to
// 1e-7, full training gradients to 1e-4 relative, the deterministic
// basis-probe surrogate against the truncated series, the implicit row
// solve against a dense reconstruction
std::vector<CheckResult> check_gradients(std::uint64_t seed);

// two rotation-realizing monotone blocks whose composition admits a pair
// with negative monotonicity inner product
std::vector<CheckResult> check_nonmonotone_composition();

// name in {all, duality, classes, estimator, gradients, composition};
// classes_L >= 0 restricts the classes suite to that single L, otherwise
// the grid {0, 0.5, 0.8, 0.98} runs
std::vector<CheckResult> run_suite(const std::string& name, std::uint64_t seed,
                                   double classes_L = -1.0);

bool all_passed(const std::vector<CheckResult>& results);

// one JSON object per line: {suite, case, pass, witness?}
void write_report_jsonl(const std::string& path, const std::vector<CheckResult>& results);

}  // namespace monoflow
