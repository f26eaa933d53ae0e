#pragma once

#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsp/corpus.hpp"

namespace dsp::llm {

struct Demonstration {
  std::string input;
  std::optional<std::string> stimulus;
  std::string output;
};

struct PromptTemplate {
  std::string instruction;
  std::vector<Demonstration> demonstrations;
  std::string input_header;
  std::string stimulus_header;
  std::string output_header;
  bool include_stimulus = false;
};

/// Instruction and headers for a task, without demonstrations.
PromptTemplate builtin_template(corpus::Task task, bool include_stimulus);

/// Appends instances as demonstrations (pseudo_stimulus used as the stimulus).
/// Throws ValidationError when a stimulus template gets an instance without one.
void add_demonstrations(PromptTemplate& tmpl, std::span<const corpus::Instance> demos);

/// Instruction, blank line, then each demonstration as header lines
/// (input, [stimulus], output) followed by a blank line, then the query
/// block ending with the bare output header. Stimulus lines appear only when
/// include_stimulus is set. Throws ValidationError if `stimulus` is given
/// without include_stimulus or missing with it.
std::string build_prompt(const PromptTemplate& tmpl, std::string_view input_text,
                         const std::optional<std::string>& stimulus);

/// The query block's input and stimulus recovered from a rendered prompt.
struct PromptQuery {
  std::string input;
  std::optional<std::string> stimulus;
};
PromptQuery parse_prompt_query(const PromptTemplate& tmpl, std::string_view prompt);

struct GenParams {
  double temperature = 0.7;
  double top_p = 1.0;
  std::size_t n = 1;
  std::size_t max_tokens = 256;
  std::optional<std::vector<std::string>> stop;

  /// Key-ordered JSON used in cache keys.
  nlohmann::json canonical_json() const;
};

enum class BackendKind { kHttp, kMock };

struct BackendSpec {
  BackendKind kind = BackendKind::kMock;
  std::string endpoint;  // http://host:port/path or https://...
  std::string model;
  std::string auth_env = "DSP_API_KEY";
  double timeout_seconds = 60.0;
  std::size_t max_retries = 5;
  std::string cache_path;  // empty disables caching
  bool completions_api = false;  // legacy completions body instead of chat messages
  std::string rule_set;  // mock: "summarization" | "dialogue" | "reasoning"
  std::uint64_t seed = 0;
  std::size_t sentences_to_select = 2;
  double noise_rate = 0.0;

  /// Throws ConfigError when required fields for the kind are missing.
  void validate() const;
};

class Backend {
 public:
  virtual ~Backend() = default;
  /// Returns exactly params.n outputs.
  virtual std::vector<std::string> generate(const std::string& prompt, const GenParams& params) = 0;
  virtual std::string kind() const = 0;
  virtual std::string model() const = 0;
};

// ---------------------------------------------------------------- http

using Sleeper = std::function<void(double seconds)>;

class HttpBackend : public Backend {
 public:
  /// `sleeper` defaults to std::this_thread::sleep_for; `jitter_seed` feeds
  /// the backoff jitter.
  explicit HttpBackend(BackendSpec spec, Sleeper sleeper = {}, std::uint64_t jitter_seed = 0);

  /// Retries timeouts, connection failures, 429 and 5xx with exponential
  /// backoff (1s, 2s, 4s, ... plus up to 10% jitter, or the retry-after
  /// header if longer). Throws CredentialError on 401/403 or a missing key,
  /// BackendUnavailableError once retries run out or on other 4xx, and
  /// ProtocolError for malformed bodies.
  std::vector<std::string> generate(const std::string& prompt, const GenParams& params) override;
  std::string kind() const override { return "http"; }
  std::string model() const override { return spec_.model; }

  /// JSON body sent for a request.
  nlohmann::json request_body(const std::string& prompt, const GenParams& params) const;
  std::size_t attempts() const noexcept { return attempts_; }

 private:
  BackendSpec spec_;
  Sleeper sleeper_;
  std::uint64_t jitter_state_;
  std::size_t attempts_ = 0;
};

// ---------------------------------------------------------------- mock

struct MockRuleSet {
  corpus::Task task = corpus::Task::kSummarization;
  std::size_t sentences_to_select = 2;
  std::uint64_t noise_seed = 0;
  double noise_rate = 0.0;  // chance per output of swapping one picked sentence
};

/// Splits on '.', '!' or '?' followed by whitespace; punctuation stays with
/// its sentence, surrounding whitespace is trimmed.
std::vector<std::string> split_sentences(std::string_view text);

/// Summaries: highest keyword-count sentences (ties to the earlier one)
/// in document order. Dialogue: one templated fragment per act/slot.
/// Reasoning: a worked sum of the question's integers when the stimulus
/// contains the token "step", otherwise an off-by-one answer.
std::string mock_generate_one(const MockRuleSet& rules, std::string_view input_text,
                              const std::optional<std::string>& stimulus, std::size_t sample_index = 0);

class MockBackend : public Backend {
 public:
  MockBackend(MockRuleSet rules, PromptTemplate tmpl);

  std::vector<std::string> generate(const std::string& prompt, const GenParams& params) override;
  std::string kind() const override { return "mock"; }
  std::string model() const override;

  const MockRuleSet& rules() const noexcept { return rules_; }

 private:
  MockRuleSet rules_;
  PromptTemplate tmpl_;
};

// ---------------------------------------------------------------- cache

/// Content-addressed response cache: one `<sha256>.json` file per request.
class CachedBackend : public Backend {
 public:
  CachedBackend(std::shared_ptr<Backend> inner, std::filesystem::path dir);

  std::vector<std::string> generate(const std::string& prompt, const GenParams& params) override;
  std::string kind() const override { return inner_->kind(); }
  std::string model() const override { return inner_->model(); }

  std::string key(const std::string& prompt, const GenParams& params) const;
  std::size_t hits() const noexcept { return hits_; }
  std::size_t misses() const noexcept { return misses_; }

 private:
  std::shared_ptr<Backend> inner_;
  std::filesystem::path dir_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

/// Builds the backend described by `spec` (wrapped in a cache when
/// cache_path is set). Mock backends need the prompt template to locate the
/// query inside prompts.
std::shared_ptr<Backend> make_backend(const BackendSpec& spec, corpus::Task task, const PromptTemplate& tmpl);

}  // namespace dsp::llm
