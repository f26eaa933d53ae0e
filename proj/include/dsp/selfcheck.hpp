#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dsp/autodiff.hpp"
#include "dsp/corpus.hpp"
#include "dsp/policy.hpp"
#include "dsp/rng.hpp"
#include "dsp/train.hpp"

// Independent oracles shared by the test suite and the `selfcheck` command.
namespace dsp::selfcheck {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t checked = 0;
};

/// Central differences on every scalar of `params` against the analytic
/// gradient that `loss` writes into its argument. Relative error is
/// |a - n| / max(|a|, |n|, 1e-6).
GradCheckResult gradient_check(ad::ParameterSet& params, const std::function<double(ad::ParameterSet*)>& loss,
                               double step = 1e-5);

/// A_t as the explicit double sum over TD residuals.
std::vector<double> gae_bruteforce(std::span<const double> rewards, std::span<const double> values, double gamma,
                                   double lambda);

/// Width-2 policy (d = h = 2) with weights uniform in [-scale, scale],
/// value head included.
policy::PolicyParams toy_policy(std::size_t vocab, std::uint64_t seed, double scale = 0.8);

/// Random ontology-valid dialogue act list (1-4 acts, 0-3 slots each).
std::vector<corpus::DialogueAct> random_acts(Rng& rng);

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

CheckResult check_formula_fidelity();
CheckResult check_gae_oracle(std::size_t cases = 100);
CheckResult check_gradients();
CheckResult check_metric_oracles(std::size_t fuzz_pairs = 1000);
CheckResult check_nlpo_masking();
CheckResult check_dialogue_roundtrip(std::size_t cases = 1000);

/// The fast suites above, in order.
std::vector<CheckResult> run_quick_checks();

/// SFT on 32 synthetic (article, keyword) pairs: final mean token NLL and
/// greedy exact-match count.
struct SftConvergence {
  double final_loss = 0.0;
  std::size_t exact = 0;
  std::size_t total = 0;
  std::size_t epochs = 0;
};
SftConvergence run_sft_convergence(std::uint64_t seed = 0);
CheckResult check_sft_convergence();

/// Length-1 bandit over |V| = 8 rewarding token 3; returns the first update
/// after which greedy decoding picks token 3 (nullopt if it never does).
std::optional<std::size_t> run_bandit(std::uint64_t seed, std::size_t max_updates = 200);
CheckResult check_bandit();

/// Mean R_LLM on held-out synthetic articles for each stimulus source.
struct EndToEndReport {
  double no_stimulus = 0.0;
  double sft = 0.0;
  double rl = 0.0;
  double optimum = 0.0;
  double rl_train = 0.0;  // greedy RL policy on its own training articles
  std::size_t held_out = 0;
  std::vector<train::RlCurveRecord> curve;
};
struct EndToEndOptions {
  std::uint64_t seed = 0;
  std::size_t articles = 200;
  std::size_t held_out = 50;
  std::size_t sft_epochs = 40;
  std::size_t rl_updates = 150;
  double rl_learning_rate = 1e-3;
  double vf_coef = 0.5;
  double top_mask_p = 0.9;
  double beta0 = 0.005;
  std::size_t max_new_tokens = 8;
  double rl_temperature = 1.0;
  bool verbose = false;
};
EndToEndReport run_end_to_end(const EndToEndOptions& options);
/// Mean R_LLM over the last quarter of updates is at least that of the first quarter.
bool reward_non_degrading(std::span<const train::RlCurveRecord> curve);
CheckResult check_end_to_end_gain();

/// Runs the full mock pipeline twice under `work_dir` and compares the curve
/// logs and metric CSVs byte for byte.
CheckResult check_determinism(const std::filesystem::path& work_dir);

/// SFT convergence, bandit, end-to-end gain and determinism (minutes, not seconds).
std::vector<CheckResult> run_slow_checks(const std::filesystem::path& work_dir);

}  // namespace dsp::selfcheck
