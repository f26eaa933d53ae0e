#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsp/corpus.hpp"
#include "dsp/decoding.hpp"
#include "dsp/llm.hpp"
#include "dsp/train.hpp"

namespace dsp::pipeline {

struct DataPaths {
  std::filesystem::path train;
  std::filesystem::path valid;
  std::filesystem::path test;
};

struct ExperimentConfig {
  corpus::Task task = corpus::Task::kSummarization;
  DataPaths data;
  std::size_t num_demonstrations = 0;
  std::string template_id = "builtin";
  llm::BackendSpec backend;
  llm::GenParams gen;
  std::size_t vocab_size = 5000;
  std::size_t embed_dim = 64;
  std::size_t hidden_dim = 128;
  std::size_t max_input_tokens = 512;
  std::size_t keyword_top_n = 10;
  train::SFTConfig sft;
  train::RLConfig rl;
  bool rl_enabled = true;
  std::string reward;
  std::size_t validation_size = 16;  // valid instances scored after each RL update; 0 disables
  decoding::DecodeParams decode;     // stimulus decoding at evaluation time
  std::uint64_t seed = 0;
  std::filesystem::path run_dir;

  /// Throws ConfigError for bad values and missing data files.
  void validate() const;

  /// Canonical JSON of every field that affects results (run_dir and the
  /// cache location are excluded so identical experiments hash identically).
  nlohmann::json to_json() const;

  /// First 16 hex digits of sha256(to_json().dump()).
  std::string hash() const;
};

/// Reads a YAML file whose keys are either flat dotted names
/// ("rl.total_steps: 1024") or the equivalent nested maps. Relative paths are
/// resolved against the config file's directory. Unknown keys and a missing
/// seed are ConfigErrors.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(std::string_view yaml_text, const std::filesystem::path& base_dir);

enum class Stage { kExtract, kSft, kRl, kEval };
std::string_view to_string(Stage stage);

/// Exclusive ownership of a run directory through an O_EXCL lock file.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// run_dir/manifest.json: config hash, stage flags, checkpoint paths and
/// metric snapshots.
class Manifest {
 public:
  /// Loads an existing manifest (aborting on a config hash mismatch) or starts a new one.
  static Manifest open(const std::filesystem::path& run_dir, const std::string& config_hash);

  bool done(Stage stage) const;
  /// Throws ValidationError when a prerequisite stage is incomplete or when
  /// `stage` already completed and `force` is not set.
  void require_runnable(Stage stage, bool force) const;
  /// Marks `stage` complete with `record`; later stages are invalidated.
  void complete(Stage stage, nlohmann::json record);
  /// Marks `stage` and every later stage incomplete.
  void invalidate_from(Stage stage);
  const nlohmann::json& record(Stage stage) const;
  void set_checkpoint(const std::string& name, const std::string& relative_path);
  std::optional<std::string> checkpoint(const std::string& name) const;
  const nlohmann::json& json() const noexcept { return doc_; }

  /// Atomic write-temp-rename.
  void save() const;

 private:
  std::filesystem::path path_;
  nlohmann::json doc_;
};

/// Writes `content` to `path` through a temporary file and rename.
void write_atomic(const std::filesystem::path& path, std::string_view content);

struct RunOptions {
  bool force = false;
};

/// Fills pseudo-stimuli and writes run_dir/data/{train,valid,test}.jsonl and
/// run_dir/vocab.json; prints kept/dropped counts to `out`.
void cmd_extract(const ExperimentConfig& config, const RunOptions& options, std::ostream& out);
void cmd_sft(const ExperimentConfig& config, const RunOptions& options, std::ostream& out);
void cmd_rl(const ExperimentConfig& config, const RunOptions& options, std::ostream& out);

enum class Arm { kStandard, kDsp };
std::string_view to_string(Arm arm);
Arm parse_arm(std::string_view name);

/// Evaluates each arm on the test split; writes reports/metrics_<arm>.csv and
/// reports/outputs_<arm>.jsonl, plus reports/comparison.{md,csv} once both
/// arms have been evaluated.
void cmd_eval(const ExperimentConfig& config, const std::vector<Arm>& arms, const RunOptions& options,
              std::ostream& out);

/// Writes reports/comparison.{md,csv} and reports/curve.csv from the run's artifacts.
void cmd_report(const ExperimentConfig& config, std::ostream& out);

/// extract, sft, rl (when enabled), eval for both arms, report.
void run_all(const ExperimentConfig& config, const RunOptions& options, std::ostream& out);

}  // namespace dsp::pipeline
