#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsp/corpus.hpp"

namespace dsp::eval {

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Clipped n-gram overlap over tokenize_words tokens. Throws ConfigError for n outside {1, 2}.
PRF rouge_n(std::string_view candidate, std::string_view reference, std::size_t n);
PRF rouge_l(std::string_view candidate, std::string_view reference);
/// Mean of ROUGE-1, ROUGE-2 and ROUGE-L F1.
double rouge_avg(std::string_view candidate, std::string_view reference);

/// Sufficient statistics for BLEU up to 4-grams.
struct BleuStats {
  std::size_t matches[4] = {0, 0, 0, 0};
  std::size_t totals[4] = {0, 0, 0, 0};
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;

  void add(std::string_view candidate, std::string_view reference);
  /// Unsmoothed geometric mean with brevity penalty; 0 if any precision is 0.
  double corpus_score() const;
};

/// Throws ValidationError when the lists differ in length.
double bleu_corpus(std::span<const std::string> candidates, std::span<const std::string> references);

/// Sentence BLEU with exponential smoothing: the k-th zero-match order
/// contributes precision 1 / (2^k * total). Orders with no candidate n-grams
/// are dropped (effective order).
double sentence_bleu_smoothed(std::string_view candidate, std::string_view reference);

/// Exact-then-stem greedy unigram alignment, harmonic mean weighted 9:1
/// toward recall, fragmentation penalty 0.5 * (chunks / matches)^3. No
/// synonym stage.
double meteor_simplified(std::string_view candidate, std::string_view reference);

// ---------------------------------------------------------------- dialogue

struct DomainGoal {
  std::vector<std::string> requestables;
  bool requires_offer = false;
};

struct DialogueGoal {
  std::map<std::string, DomainGoal> domains;
};

/// Domains that need an offered entity unless the annotation says otherwise.
bool offers_entity_by_default(std::string_view domain);

/// Reads annotations.goal = {domain: {"requestables": [...], "offer": bool?}}.
DialogueGoal goal_from_json(const nlohmann::json& annotations);

struct DialogueRecord {
  std::string id;
  std::vector<std::string> responses;  // generated, delexicalized
  std::vector<std::string> oracle_responses;
  DialogueGoal goal;
};

struct MetricReport {
  std::map<std::string, double> scores;
  std::size_t sample_count = 0;

  double at(const std::string& name) const;
};

/// Inform and Success rates in [0, 100], corpus BLEU x100 and
/// Combined = (Inform + Success) / 2 + BLEU.
MetricReport multiwoz_eval(std::span<const DialogueRecord> dialogues);

double combined_score(double inform, double success, double bleu);

/// Groups dialogue-task instances by annotations.dialogue_id (falling back
/// to the instance id) in first-appearance order, pairing generated outputs
/// with references.
std::vector<DialogueRecord> group_dialogues(std::span<const corpus::Instance> instances,
                                            std::span<const std::string> outputs);

// ---------------------------------------------------------------- reasoning

/// Numeric mode (no options): the last number, commas stripped and a trailing
/// ".0" removed. Multiple-choice mode: the last standalone letter among the
/// first options.size() of A-E. Empty string when nothing matches.
std::string extract_answer(std::string_view text, const std::optional<std::vector<std::string>>& options = {});

/// Gold answer normalized the same way extract_answer normalizes numbers.
std::string normalize_answer(std::string_view answer);

// ---------------------------------------------------------------- rewards

/// (input text, generated output, instance) -> reward.
using RewardFn = std::function<double(const std::string&, const std::string&, const corpus::Instance&)>;

/// rouge_avg_x10, sacrebleu_sentence, accuracy01. Throws ConfigError otherwise.
RewardFn reward_fn(corpus::Task task, std::string_view name);

/// Task-appropriate metrics over aligned outputs/instances: ROUGE-1/2/L/Avg,
/// BLEU and METEOR (simplified) for summarization; Inform/Success/BLEU/Combined
/// for dialogue; accuracy for reasoning. ROUGE/BLEU/METEOR values are 0-1.
MetricReport evaluate_outputs(corpus::Task task, std::span<const corpus::Instance> instances,
                              std::span<const std::string> outputs);

// ---------------------------------------------------------------- reports

/// "metric,value" rows in key order plus a sample_count row.
std::string metric_csv(const MetricReport& report);

/// Markdown table with one row per arm and one column per metric; 0-1 metrics
/// are scaled by 100 for presentation, rates and Combined are shown as-is.
std::string comparison_markdown(const std::vector<std::pair<std::string, MetricReport>>& arms,
                                std::span<const std::string> metrics);

/// "metric,<arm1>,<arm2>,...,delta" where delta = last arm minus first arm.
std::string comparison_csv(const std::vector<std::pair<std::string, MetricReport>>& arms,
                           std::span<const std::string> metrics);

/// Metric columns in the order reports show them for `task`.
std::vector<std::string> report_metrics(corpus::Task task);

}  // namespace dsp::eval
