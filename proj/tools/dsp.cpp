// Command-line entry point: one subcommand per pipeline stage plus selfcheck.
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "dsp/errors.hpp"
#include "dsp/pipeline.hpp"
#include "dsp/selfcheck.hpp"

namespace {

using namespace dsp;

struct Common {
  std::string config;
  bool force = false;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment YAML")->required()->check(CLI::ExistingFile);
  cmd->add_flag("--force", c.force, "rerun a stage that already completed");
  cmd->add_option("--seed", c.seed, "override the configured seed");
}

pipeline::ExperimentConfig load(const Common& c) {
  auto cfg = pipeline::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

int run_selfcheck(bool slow, const std::filesystem::path& work_dir) {
  auto results = selfcheck::run_quick_checks();
  if (slow) {
    for (auto& r : selfcheck::run_slow_checks(work_dir)) results.push_back(std::move(r));
  }
  bool ok = true;
  for (const auto& r : results) {
    std::cout << fmt::format("{} {} ({:.2f}s) {}\n", r.passed ? "PASS" : "FAIL", r.name, r.seconds, r.detail);
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Directional stimulus prompting: train a small policy model to steer a black-box LLM."};
  app.require_subcommand(1);
  app.fallthrough();
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "spdlog level")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  Common c;
  auto* extract = app.add_subcommand("extract", "fill pseudo-stimuli and build the vocabulary");
  auto* sft = app.add_subcommand("sft", "supervised fine-tuning on pseudo-stimuli");
  auto* rl = app.add_subcommand("rl", "NLPO/PPO training against the backend reward");
  auto* eval = app.add_subcommand("eval", "score the test split with and without stimuli");
  auto* report = app.add_subcommand("report", "write comparison tables and the RL curve");
  auto* all = app.add_subcommand("run", "extract, sft, rl, eval and report in order");
  for (auto* cmd : {extract, sft, rl, eval, all}) add_common(cmd, c);
  report->add_option("--config", c.config, "experiment YAML")->required()->check(CLI::ExistingFile);
  report->add_option("--seed", c.seed, "override the configured seed");

  std::vector<std::string> arms;
  eval->add_option("--arm", arms, "standard or dsp; repeatable (default both)")
      ->check(CLI::IsMember({"standard", "dsp"}));

  bool slow = false;
  std::string work_dir = (std::filesystem::temp_directory_path() / "dsp-selfcheck").string();
  auto* check = app.add_subcommand("selfcheck", "run the oracle and property suites");
  check->add_flag("--slow", slow, "also run training-based checks (several minutes)");
  check->add_option("--work-dir", work_dir, "scratch directory for the determinism check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Help and version exit 0; any other usage error counts as a config error.
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (check->parsed()) return run_selfcheck(slow, work_dir);
    const auto cfg = load(c);
    const pipeline::RunOptions opts{c.force};
    if (extract->parsed()) pipeline::cmd_extract(cfg, opts, std::cout);
    if (sft->parsed()) pipeline::cmd_sft(cfg, opts, std::cout);
    if (rl->parsed()) pipeline::cmd_rl(cfg, opts, std::cout);
    if (eval->parsed()) {
      std::vector<pipeline::Arm> selected;
      for (const auto& a : arms) selected.push_back(pipeline::parse_arm(a));
      if (selected.empty()) selected = {pipeline::Arm::kStandard, pipeline::Arm::kDsp};
      pipeline::cmd_eval(cfg, selected, opts, std::cout);
    }
    if (report->parsed()) pipeline::cmd_report(cfg, std::cout);
    if (all->parsed()) pipeline::run_all(cfg, opts, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e);
  }
  return EXIT_SUCCESS;
}
