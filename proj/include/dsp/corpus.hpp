#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsp/textkit.hpp"

namespace dsp::corpus {

enum class Task { kSummarization, kDialogue, kReasoning };

std::string_view to_string(Task task);
/// Throws ConfigError on unknown names.
Task parse_task(std::string_view name);

enum class Split { kTrain, kValidation, kTest };

struct Instance {
  std::string id;
  Task task = Task::kSummarization;
  std::string input_text;
  std::string reference_output;
  std::optional<std::string> pseudo_stimulus;
  /// Task-specific payload: dialogue goal, gold answer, options, act annotations.
  nlohmann::json annotations = nlohmann::json::object();
  /// Hash of the experiment config that produced this record, when written by a run.
  std::optional<std::string> config_hash;
};

struct Dataset {
  std::vector<Instance> instances;
  Split split = Split::kTrain;

  std::size_t size() const noexcept { return instances.size(); }
  bool empty() const noexcept { return instances.empty(); }
};

/// Reads one JSON object per line. Blank lines are skipped.
/// Throws ParseError (with 1-based line number) for malformed or schema-violating
/// lines and ValidationError for duplicate ids.
Dataset load_jsonl(const std::filesystem::path& path, Task task, Split split = Split::kTrain);
Dataset parse_jsonl(std::string_view text, Task task, Split split = Split::kTrain);

/// Canonical single-line JSON: fixed key order, annotations with sorted keys.
std::string to_json_line(const Instance& instance);
void save_jsonl(const std::filesystem::path& path, const Dataset& dataset);

// ---------------------------------------------------------------- summarization

/// Textrank candidates (over article, or article + summary) kept only when the
/// token appears in the tokenized summary; ordered by first appearance in the
/// summary and truncated to top_n.
std::vector<std::string> extract_pseudo_keywords(std::string_view article, std::string_view summary,
                                                 std::size_t top_n = 10,
                                                 const textkit::TextRankParams& params = {},
                                                 bool include_summary_in_graph = true);

/// "k1; k2; ...; kN." and "" for an empty list. Throws ValidationError for
/// empty keywords or keywords containing ';'.
std::string render_keyword_stimulus(std::span<const std::string> keywords);

/// Inverse of render_keyword_stimulus: split on ';', trim, drop a terminal '.'.
std::vector<std::string> parse_keyword_stimulus(std::string_view stimulus);

// ---------------------------------------------------------------- dialogue

struct DialogueAct {
  std::string domain;
  std::string act;
  std::vector<std::string> slots;

  bool operator==(const DialogueAct&) const = default;
};

const std::vector<std::string>& ontology_domains();
const std::vector<std::string>& ontology_acts();
const std::vector<std::string>& ontology_slots();
bool act_allowed_in_domain(std::string_view domain, std::string_view act);

/// "[domain] [act] slot slot [act] slot ..." with a domain tag emitted whenever
/// the domain changes. Throws ValidationError for an empty list, an unknown
/// domain or act, or an act not licensed for its domain.
std::string verbalize_dialogue_acts(std::span<const DialogueAct> acts);

struct ParsedActs {
  std::vector<DialogueAct> acts;
  std::vector<std::string> warnings;
};

/// Lenient inverse of verbalize_dialogue_acts. Unknown bracketed tokens are
/// reported as warnings and reset the current act; slots with no open act are dropped.
ParsedActs parse_dialogue_acts(std::string_view text);

/// Reads acts from annotations["dialogue_acts"] = [{"domain", "act", "slots"}...].
std::vector<DialogueAct> acts_from_json(const nlohmann::json& annotations);

// ---------------------------------------------------------------- policy input

/// The policy's conditioning text for each task.
std::string sft_input_text(Task task, const Instance& instance);

// ---------------------------------------------------------------- chain of thought

/// The fourteen human-written zero-shot trigger prompts used to mine SFT pairs.
const std::vector<std::string>& human_cot_prompts();

/// Generates reasoning text for (question, trigger prompt); throws BackendError on failure.
using CotGenerator = std::function<std::string(const Instance& question, const std::string& prompt)>;
/// True when the generated reasoning reaches the question's gold answer.
using CotChecker = std::function<bool(const Instance& question, const std::string& reasoning)>;

struct MiningStats {
  std::size_t calls = 0;
  std::size_t failures = 0;
  std::size_t kept = 0;
};

/// Queries every (question, prompt) pair once and keeps the correct ones as SFT
/// instances with pseudo_stimulus = prompt, in (question, prompt) index order.
/// Failed calls are skipped with a warning; more than 20% failures throws
/// BackendUnavailableError.
Dataset mine_cot_pairs(const Dataset& questions, std::span<const std::string> trigger_prompts,
                       const CotGenerator& generate, const CotChecker& checker,
                       MiningStats* stats = nullptr);

}  // namespace dsp::corpus
