// Acceptance suite: one PASS/FAIL line per criterion, exit 1 on any failure.
// Optional arguments select criteria by number ("acceptance 1 2 7").

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "dsp/selfcheck.hpp"

namespace fs = std::filesystem;
using dsp::selfcheck::CheckResult;

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::err);
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  const fs::path work = fs::temp_directory_path() / "dsp-acceptance";
  const std::vector<std::pair<std::string, std::function<CheckResult()>>> criteria = {
      {"formula fidelity", [] { return dsp::selfcheck::check_formula_fidelity(); }},
      {"GAE oracle equivalence", [] { return dsp::selfcheck::check_gae_oracle(100); }},
      {"gradient correctness", [] { return dsp::selfcheck::check_gradients(); }},
      {"SFT convergence", [] { return dsp::selfcheck::check_sft_convergence(); }},
      {"RL bandit optimality", [] { return dsp::selfcheck::check_bandit(); }},
      {"end-to-end DSP gain", [] { return dsp::selfcheck::check_end_to_end_gain(); }},
      {"metric oracles", [] { return dsp::selfcheck::check_metric_oracles(1000); }},
      {"NLPO masking", [] { return dsp::selfcheck::check_nlpo_masking(); }},
      {"determinism", [&] { return dsp::selfcheck::check_determinism(work); }},
      {"dialogue round-trip", [] { return dsp::selfcheck::check_dialogue_roundtrip(1000); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!only.empty() && !only.contains(n)) continue;
    CheckResult r;
    try {
      r = criteria[i].second();
    } catch (const std::exception& e) {
      r.passed = false;
      r.detail = std::string("exception: ") + e.what();
    }
    if (!r.passed) ++failures;
    fmt::print("criterion {:2d} {} {} ({:.1f}s) {}\n", n, r.passed ? "PASS" : "FAIL", criteria[i].first, r.seconds,
               r.detail);
    std::fflush(stdout);
  }
  fs::remove_all(work);
  return failures == 0 ? 0 : 1;
}
